"""End-to-end try-on: select a model image, re-pose it, transfer the garment."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .data import CatalogEntry
from .network import Generator, generator_forward
from .pose import Pose, SigmaTable, encode_heatmaps, pose_scale, select_model_image
from .texture import (MethodChoice, NoGarmentRegionError, NoSkinReferenceError, SegMask,
                      TextureTranslator, TransferMethod, choose_method, conditional_garment_mask,
                      copy_paste_transfer, exposed_arm_region, fill_exposed_arms,
                      texture_translation_forward)
from .warp import TPSError, apply_tps, fit_tps, gaussian_feather_composite, warp_array

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, inputs_digest: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed (inputs {inputs_digest}): {type(cause).__name__}: {cause}")
        self.stage = stage
        self.inputs_digest = inputs_digest


@dataclass(frozen=True)
class UserInput:
    image: np.ndarray
    pose: Pose
    mask: SegMask


@dataclass
class TPSDiagnostics:
    n_control: int
    fitted: bool
    max_control_residual: float
    bending_energy: float
    note: str = ""


@dataclass
class TransferResult:
    final: np.ndarray
    selected: CatalogEntry
    oks_score: float
    posed_model: np.ndarray
    warped_model: np.ndarray
    garment_mask: SegMask
    tps: TPSDiagnostics
    method: MethodChoice
    method_used: TransferMethod
    altered_region: np.ndarray
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    config_digest: str = ""

    def summary(self) -> dict:
        return {
            "selected": self.selected.record_id,
            "garment_id": self.selected.garment_id,
            "oks": self.oks_score,
            "tps": self.tps.__dict__,
            "method": {"chosen": self.method.method.value, "used": self.method_used.value,
                       "occlusion_ratio": self.method.score, "threshold": self.method.threshold},
            "timings": self.timings,
            "warnings": self.warnings,
            "config_digest": self.config_digest,
        }


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:12]


def tps_between(src_pose: Pose, dst_pose: Pose, regularization: float = 0.0):
    """Fit on joints visible in both poses; returns (transform or None, diagnostics)."""
    vis = src_pose.visible & dst_pose.visible
    src, dst = src_pose.xy[vis], dst_pose.xy[vis]
    try:
        t = fit_tps(src, dst, regularization)
    except TPSError as exc:
        return None, TPSDiagnostics(int(vis.sum()), False, float("nan"), float("nan"), str(exc))
    resid = float(np.max(np.linalg.norm(t(src) - dst, axis=1)))
    return t, TPSDiagnostics(int(vis.sum()), True, resid, t.bending_energy())


def texture_stage(user: UserInput, posed_model: np.ndarray, garment_mask: SegMask, cfg: PipelineConfig,
                  texture_net: Optional[TextureTranslator] = None):
    """Stage C on its own, so it can be replayed from stored stage-B outputs.

    Returns (final image, method choice, method used, altered region, warnings).
    """
    warns = []
    radius = cfg.composite.radius
    try:
        choice = choose_method(user.mask, garment_mask, cfg.transfer.occlusion_threshold)
    except NoGarmentRegionError:
        warns.append("no garment region in the aligned model mask; user image returned unchanged")
        choice = MethodChoice(TransferMethod.COPY_PASTE, float("nan"), cfg.transfer.occlusion_threshold)
    method = choice.method
    if method is TransferMethod.TEXTURE_TRANSLATION and texture_net is None:
        warns.append("texture translation selected but no texture checkpoint loaded; used copy-paste")
        method = TransferMethod.COPY_PASTE

    # Arms left bare by a shorter garment go in first, then the garment on top.
    try:
        base, arm_region = fill_exposed_arms(user.image, posed_model, user.mask, garment_mask, radius)
    except NoSkinReferenceError:
        warns.append("no skin reference in user mask; exposed arms left untuned")
        arm_region = exposed_arm_region(user.mask, garment_mask)
        base = gaussian_feather_composite(user.image, posed_model, arm_region, radius)

    garment = garment_mask.garment
    if method is TransferMethod.COPY_PASTE:
        final = copy_paste_transfer(base, posed_model, user.mask, garment_mask, radius)
    else:
        translated = texture_translation_forward(texture_net, posed_model, base, user.mask, garment_mask)
        # The network output is used inside the garment region only.
        final = copy_paste_transfer(base, translated, user.mask, garment_mask, radius)
    return final, choice, method, garment | arm_region, warns


def run_transfer(user: UserInput, garment_id, catalog: Sequence[CatalogEntry], generator: Generator,
                 cfg: PipelineConfig, texture_net: Optional[TextureTranslator] = None) -> TransferResult:
    timings = {}
    warns = []
    inputs = _digest(user.image, user.pose.keypoints, user.mask.labels)

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as exc:
            raise StageError(name, inputs, exc) from exc
        finally:
            timings[name] = time.perf_counter() - t0

    sigmas = SigmaTable(np.array(cfg.oks.sigmas))

    def select():
        scale = pose_scale(user.pose, cfg.oks.scale_floor)
        return select_model_image(user.pose, catalog, garment_id, scale, sigmas)

    entry, score = stage("select", select)
    if score < cfg.transfer.oks_floor:
        warns.append(f"best OKS {score:.3f} below floor {cfg.transfer.oks_floor}: likely keypoint mismatch")

    def pose_transfer():
        sp = encode_heatmaps(entry.pose, cfg.heatmap.sigma_px)
        tp = encode_heatmaps(user.pose, cfg.heatmap.sigma_px)
        return generator_forward(generator, entry.image, sp, tp)

    posed = stage("pose_transfer", pose_transfer)

    def align():
        t, diag = tps_between(entry.pose, user.pose, cfg.warp.regularization)
        if t is None:
            warns.append(f"TPS refinement skipped: {diag.note}")
            warped_img, labels = np.array(entry.image), entry.seg_mask.labels
        else:
            warped_img = apply_tps(t, entry.image, cfg.warp.fill)
            labels = warp_array(t, entry.seg_mask.labels.astype(np.float64), order=0, fill=0).astype(np.uint8)
        aligned = SegMask(labels, entry.seg_mask.label_set)
        return warped_img, conditional_garment_mask(aligned, user.mask), diag

    warped_model, garment_mask, diag = stage("tps", align)

    def transfer():
        return texture_stage(user, posed, garment_mask, cfg, texture_net)

    final, choice, used, region, stage_warns = stage("texture_transfer", transfer)
    warns.extend(stage_warns)
    for w in warns:
        log.warning(w)
    return TransferResult(final, entry, score, posed, warped_model, garment_mask, diag, choice, used,
                          region, timings, warns, cfg.digest())
