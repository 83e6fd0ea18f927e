"""Garment texture transfer onto the user image.

Two routes: feathered copy-paste of the garment region from the re-posed
model, and a small learned coarse-to-fine translation network. Arms exposed
by a shorter garment are filled from the model and skin-tuned to the user.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import FeatureExtractor
from .pose import FRAME_H, FRAME_W
from .warp import gaussian_feather_composite

DEFAULT_LABELS: dict[str, int] = {
    "background": 0,
    "hair": 1,
    "face": 2,
    "upper_clothes": 3,
    "lower_clothes": 4,
    "left_arm": 5,
    "right_arm": 6,
    "left_leg": 7,
    "right_leg": 8,
    "accessories": 9,
    "other": 10,
}


class NoGarmentRegionError(ValueError):
    pass


class NoSkinReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSet:
    ids: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_LABELS))
    garment: tuple[str, ...] = ("upper_clothes",)

    def __post_init__(self):
        missing = set(DEFAULT_LABELS) - set(self.ids)
        if missing:
            raise ValueError(f"label map lacks classes: {sorted(missing)}")
        if len(set(self.ids.values())) != len(self.ids):
            raise ValueError("label ids must be distinct")

    def mask(self, labels: np.ndarray, *names: str) -> np.ndarray:
        return np.isin(labels, [self.ids[n] for n in names])

    def garment_mask(self, labels):
        return self.mask(labels, *self.garment)

    def arm_mask(self, labels):
        return self.mask(labels, "left_arm", "right_arm")

    def skin_mask(self, labels):
        return self.mask(labels, "face", "left_arm", "right_arm")

    def body_mask(self, labels):
        # Where a garment may plausibly sit on the user.
        return self.mask(labels, "upper_clothes", "lower_clothes", "left_arm", "right_arm", *self.garment)

    def occluder_mask(self, labels):
        return self.mask(labels, "hair", "accessories")


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray
    label_set: LabelSet = field(default_factory=LabelSet)

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != (FRAME_H, FRAME_W):
            raise ValueError(f"segmentation mask must be {(FRAME_H, FRAME_W)}, got {lab.shape}")
        known = np.array(sorted(self.label_set.ids.values()))
        if not np.all(np.isin(lab, known)):
            bad = np.setdiff1d(np.unique(lab), known)
            raise ValueError(f"unknown label ids in mask: {bad.tolist()}")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def garment(self) -> np.ndarray:
        return self.label_set.garment_mask(self.labels)


class TransferMethod(enum.Enum):
    COPY_PASTE = "copy_paste"
    TEXTURE_TRANSLATION = "texture_translation"


@dataclass(frozen=True)
class MethodChoice:
    method: TransferMethod
    score: float
    threshold: float


def occlusion_ratio(user_mask: SegMask, model_mask: SegMask) -> float:
    garment = model_mask.garment
    n = int(garment.sum())
    if n == 0:
        raise NoGarmentRegionError("no garment region")
    occluded = garment & user_mask.label_set.occluder_mask(user_mask.labels)
    return int(occluded.sum()) / n


def choose_method(user_mask: SegMask, model_mask: SegMask, threshold: float = 0.05) -> MethodChoice:
    ratio = occlusion_ratio(user_mask, model_mask)
    method = TransferMethod.COPY_PASTE if ratio <= threshold else TransferMethod.TEXTURE_TRANSLATION
    return MethodChoice(method, ratio, threshold)


def conditional_garment_mask(model_mask: SegMask, user_mask: SegMask) -> SegMask:
    """Model mask with garment pixels dropped wherever the user has no body region."""
    ls = model_mask.label_set
    drop = model_mask.garment & ~ls.body_mask(user_mask.labels)
    labels = np.where(drop, ls.ids["background"], model_mask.labels).astype(np.uint8)
    return SegMask(labels, ls)


def copy_paste_transfer(user: np.ndarray, posed_model: np.ndarray, user_mask: SegMask,
                        model_mask: SegMask, radius: int = 4) -> np.ndarray:
    """Feathered paste of the model's garment region onto the user image.

    An empty garment region returns the user image unchanged.
    """
    donor = model_mask.garment
    if not donor.any():
        return np.array(user, dtype=np.float64, copy=True)
    return gaussian_feather_composite(user, posed_model, donor, radius)


# ITU-R BT.601 full-range YCbCr.
_RGB2YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ _RGB2YCC.T


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return np.asarray(ycc, dtype=np.float64) @ _YCC2RGB.T


def skin_tone_adjust(donor_region: np.ndarray, user_skin_pixels: np.ndarray,
                     clamp: bool = True) -> np.ndarray:
    """Shift donor pixels in YCbCr so their mean matches the user's skin sample.

    Both inputs are (..., 3) pixel arrays. A pure shift keeps the
    luminance variance of the donor.
    """
    donor = np.asarray(donor_region, dtype=np.float64)
    skin = np.asarray(user_skin_pixels, dtype=np.float64).reshape(-1, 3)
    if len(skin) == 0:
        raise NoSkinReferenceError("no skin reference")
    if donor.size == 0:
        return donor.copy()
    ycc = rgb_to_ycbcr(donor)
    shift = rgb_to_ycbcr(skin).mean(axis=0) - ycc.reshape(-1, 3).mean(axis=0)
    out = ycbcr_to_rgb(ycc + shift)
    return np.clip(out, 0.0, 1.0) if clamp else out


def exposed_arm_region(user_mask: SegMask, model_mask: SegMask) -> np.ndarray:
    """User's old-garment pixels the new garment leaves bare where the model shows arm.

    ``model_mask`` must already be in the user's frame.
    """
    ls = user_mask.label_set
    return (ls.garment_mask(user_mask.labels) & ~model_mask.garment
            & ls.arm_mask(model_mask.labels))


def fill_exposed_arms(user: np.ndarray, posed_model: np.ndarray, user_mask: SegMask,
                      model_mask: SegMask, radius: int = 0):
    """Paint skin-tuned model arms over the exposed region.

    Returns (image, region). The region is empty when the sleeve rule does
    not trigger.
    """
    region = exposed_arm_region(user_mask, model_mask)
    if not region.any():
        return np.array(user, dtype=np.float64, copy=True), region
    skin = np.asarray(user)[user_mask.label_set.skin_mask(user_mask.labels)]
    donor_pixels = np.asarray(posed_model)[region]
    tuned = np.array(posed_model, dtype=np.float64, copy=True)
    tuned[region] = skin_tone_adjust(donor_pixels, skin)
    return gaussian_feather_composite(user, tuned, region, radius), region


class TextureTranslator(nn.Module):
    """Two-stage encoder-decoder: a coarse render, then a refinement pass.

    Input channels: masked posed-model garment (3), user image (3),
    user body mask (1), garment mask (1).
    """

    IN_CH = 8

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.coarse = _UNet(self.IN_CH, c)
        self.refine = _UNet(self.IN_CH + 3, c)

    def forward(self, x):
        coarse = torch.sigmoid(self.coarse(x))
        refined = torch.sigmoid(self.refine(torch.cat([x, coarse * 2 - 1], dim=1)))
        return coarse, refined


class _UNet(nn.Module):
    def __init__(self, c_in, c):
        super().__init__()
        self.e1 = nn.Sequential(nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU(inplace=True))
        self.e2 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.e3 = nn.Sequential(nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.d2 = nn.Sequential(nn.Conv2d(4 * c, c, 3, padding=1), nn.ReLU(inplace=True))
        self.d1 = nn.Sequential(nn.Conv2d(2 * c, c, 3, padding=1), nn.ReLU(inplace=True))
        self.out = nn.Conv2d(c, 3, 1)

    def forward(self, x):
        h1 = self.e1(x)
        h2 = self.e2(h1)
        h3 = self.e3(h2)
        u2 = F.interpolate(h3, size=h2.shape[-2:], mode="nearest")
        h = self.d2(torch.cat([u2, h2], dim=1))
        u1 = F.interpolate(h, size=h1.shape[-2:], mode="nearest")
        return self.out(self.d1(torch.cat([u1, h1], dim=1)))


def translation_inputs(posed_model: np.ndarray, user: np.ndarray, user_mask: SegMask,
                       model_mask: SegMask) -> np.ndarray:
    """(8, H, W) conditioning stack; images mapped to [-1, 1].

    The user's current garment is blanked out so the network has to take
    garment appearance from the posed model.
    """
    for name, img in (("posed_model", posed_model), ("user", user)):
        if np.shape(img) != (FRAME_H, FRAME_W, 3):
            raise ValueError(f"{name} must be {(FRAME_H, FRAME_W, 3)}, got {np.shape(img)}")
    garment = model_mask.garment.astype(np.float64)
    body = user_mask.label_set.body_mask(user_mask.labels).astype(np.float64)
    donor = (np.asarray(posed_model) * 2 - 1) * garment[..., None]
    agnostic = (np.asarray(user) * 2 - 1) * ~(user_mask.garment | model_mask.garment)[..., None]
    return np.concatenate([
        donor.transpose(2, 0, 1),
        agnostic.transpose(2, 0, 1),
        body[None], garment[None],
    ], axis=0)


def texture_translation_forward(params: TextureTranslator, posed_model: np.ndarray, user: np.ndarray,
                                user_mask: SegMask, model_mask: SegMask) -> np.ndarray:
    dtype = next(params.parameters()).dtype
    x = torch.as_tensor(translation_inputs(posed_model, user, user_mask, model_mask), dtype=dtype)[None]
    with torch.no_grad():
        _, refined = params(x)
    return refined.to(torch.float64).numpy()[0].transpose(1, 2, 0).clip(0.0, 1.0)


@dataclass
class WarpLossTerms:
    gt: torch.Tensor
    stn0: torch.Tensor
    stn1: torch.Tensor
    lambdas: tuple[float, float, float] = (1.0, 1.0, 0.0)


def perceptual_geometric_matching(gt, stn0, stn1, features: FeatureExtractor):
    """Feature-space L1 of both warps to the target, plus a hinge asking the
    refined warp to land at least as close as the coarse one."""
    fg, f0, f1 = features(gt), features(stn0), features(stn1)
    d0 = (fg - f0).abs().mean()
    d1 = (fg - f1).abs().mean()
    return d0 + d1 + F.relu(d1 - d0)


def warp_loss(terms: WarpLossTerms, features: Optional[FeatureExtractor] = None) -> torch.Tensor:
    gt, s0, s1 = (torch.as_tensor(t) for t in (terms.gt, terms.stn0, terms.stn1))
    if not (gt.shape == s0.shape == s1.shape):
        raise ValueError(f"dimension mismatch: {tuple(gt.shape)}, {tuple(s0.shape)}, {tuple(s1.shape)}")
    l1, l2, l3 = terms.lambdas
    if min(l1, l2, l3) < 0:
        raise ValueError("warp-loss weights must be non-negative")
    loss = l1 * (gt - s0).abs().mean() + l2 * (gt - s1).abs().mean()
    if l3 > 0:
        if features is None:
            raise ValueError("lambda3 > 0 needs a feature extractor")
        loss = loss + l3 * perceptual_geometric_matching(gt, s0, s1, features)
    return loss

