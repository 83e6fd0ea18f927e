"""Two-phase training of the pose-transfer network, plus the texture translator.

General training runs on identity pairs (same person and garment, two
poses). The specialized phase starts from a general checkpoint and fine-tunes
on pairs from a garment collection. Checkpoints are a torch blob plus a JSON
sidecar carrying metadata and the blob's content hash.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from filelock import FileLock

from .config import PipelineConfig, TrainConfig
from .losses import BatchOutputs, LossWeights, NonFiniteLossError, gan_loss, total_objective
from .network import ArchConfig, Discriminators, Generator, count_parameters
from .pose import Pose, encode_heatmaps
from .texture import SegMask, TextureTranslator, WarpLossTerms, translation_inputs, warp_loss
from .warp import TPSError, apply_tps, fit_tps, warp_array

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RHO_PLACEMENT = "rho-weighted sum of per-discriminator log terms inside the GAN loss"


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingPair:
    source_image: np.ndarray
    source_pose: Pose
    target_image: np.ndarray
    target_pose: Pose
    identity: str = ""
    source_mask: Optional[SegMask] = None
    target_mask: Optional[SegMask] = None


@dataclass
class Batch:
    source: torch.Tensor        # (B, 3, H, W)
    source_pose: torch.Tensor   # (B, 18, H, W)
    target_pose: torch.Tensor
    target: torch.Tensor

    def __len__(self):
        return self.source.shape[0]


def _img(x):
    return torch.as_tensor(np.ascontiguousarray(np.asarray(x).transpose(2, 0, 1)))


def collate(pairs: Sequence[TrainingPair], sigma_px: float = 6.0, dtype=torch.float32) -> Batch:
    if not pairs:
        raise ValueError("empty batch")
    cache: dict[int, torch.Tensor] = {}

    def hm(pose):
        if id(pose) not in cache:
            cache[id(pose)] = torch.as_tensor(encode_heatmaps(pose, sigma_px).channels)
        return cache[id(pose)]

    return Batch(
        torch.stack([_img(p.source_image) for p in pairs]).to(dtype),
        torch.stack([hm(p.source_pose) for p in pairs]).to(dtype),
        torch.stack([hm(p.target_pose) for p in pairs]).to(dtype),
        torch.stack([_img(p.target_image) for p in pairs]).to(dtype),
    )


def batch_subset(b: Batch, idx) -> Batch:
    idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
    return Batch(b.source[idx], b.source_pose[idx], b.target_pose[idx], b.target[idx])


def lr_at(epoch: int, total_epochs: int, lr_initial: float, schedule: str = "linear_after_half") -> float:
    """Constant for the first half (rounded up), then linear toward zero."""
    if schedule == "constant":
        return lr_initial
    if schedule != "linear_after_half":
        raise ValueError(f"unknown decay schedule {schedule!r}")
    hold = math.ceil(total_epochs / 2)
    decay_epochs = total_epochs - hold
    frac = max(0, epoch - hold + 1) / (decay_epochs + 1)
    return lr_initial * (1.0 - frac)


@dataclass
class TrainState:
    generator: Generator
    discriminators: Discriminators
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    epoch: int = 0
    lr: float = 0.002
    history: list = field(default_factory=list)
    rng_state: Optional[dict] = None

    @property
    def arch(self) -> ArchConfig:
        return self.generator.arch

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr_initial, betas=(cfg.adam_beta1, cfg.adam_beta2))


def new_train_state(arch: ArchConfig, cfg: TrainConfig, seed: Optional[int] = None) -> TrainState:
    torch.manual_seed(cfg.seed if seed is None else seed)
    g = Generator(arch)
    d = Discriminators(arch)
    return TrainState(g, d, _adam(g.parameters(), cfg), _adam(d.parameters(), cfg), lr=cfg.lr_initial)


def weights_from(cfg: TrainConfig) -> LossWeights:
    return LossWeights(cfg.alpha, cfg.rho, cfg.l1_weight, cfg.perceptual_weight)


@contextmanager
def _frozen(module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def training_step(state: TrainState, batch, weights: LossWeights, features=None, sigma_px: float = 6.0):
    """One discriminator update then one generator update.

    Returns ``(state, record)``. A non-finite loss leaves the state exactly
    as it was and the record carries ``error``.
    """
    b = batch if isinstance(batch, Batch) else collate(batch, sigma_px,
                                                       next(state.generator.parameters()).dtype)
    G, D = state.generator, state.discriminators
    record = {"step": state.step, "epoch": state.epoch, "lr": state.lr}

    # G is untouched by the D update, so one forward serves both halves.
    fake = G(b.source, b.source_pose, b.target_pose)
    d_a_real = D("appearance", b.source, b.target)
    d_s_real = D("shape", b.target_pose, b.target)
    d_a_fake = D("appearance", b.source, fake.detach())
    d_s_fake = D("shape", b.target_pose, fake.detach())
    d_loss = -gan_loss(d_a_real, d_s_real, d_a_fake, d_s_fake, weights.rho)
    if not torch.isfinite(d_loss):
        record["error"] = f"non-finite discriminator loss {d_loss.item()}"
        return state, record

    d_snapshot = (copy.deepcopy(D.state_dict()), copy.deepcopy(state.opt_d.state_dict()))
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()

    with _frozen(D):
        out = BatchOutputs(fake, b.target, d_a_real.detach(), d_s_real.detach(),
                           D("appearance", b.source, fake), D("shape", b.target_pose, fake))
        try:
            g_loss, _ = total_objective(out, weights, features)
        except NonFiniteLossError as exc:
            D.load_state_dict(d_snapshot[0])
            state.opt_d.load_state_dict(d_snapshot[1])
            record["error"] = str(exc)
            return state, record
        l1 = (fake.detach() - b.target).abs().mean().item()
        state.opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        state.opt_g.step()

    state.step += 1
    record.update(generator=g_loss.item(), discriminator=d_loss.item(), l1=l1)
    state.history.append(record)
    return state, record


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    path: Path            # blob path (.pt)
    meta: dict

    @property
    def content_hash(self) -> str:
        return self.meta["content_hash"]

    @property
    def sidecar(self) -> Path:
        return self.path.with_suffix(".json")


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_payload(state: TrainState) -> dict:
    return {
        "generator": state.generator.state_dict(),
        "discriminators": state.discriminators.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        # Plain data goes in as canonical JSON: pickle memoizes strings by
        # identity, which would make the bytes depend on object history.
        "bookkeeping": json.dumps({"counters": {"step": state.step, "epoch": state.epoch, "lr": state.lr},
                                   "history": state.history, "rng_state": state.rng_state},
                                  sort_keys=True),
    }


def save_blob(path, payload: dict, meta: dict) -> Checkpoint:
    """Write blob then sidecar, each atomically; a failure leaves no partial files."""
    path = Path(path).with_suffix(".pt")
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    data = buf.getvalue()
    meta = dict(meta, schema_version=SCHEMA_VERSION, content_hash=hashlib.sha256(data).hexdigest())
    try:
        _atomic_write(path, data)
        _atomic_write(path.with_suffix(".json"),
                      (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    except BaseException:
        for p in (path, path.with_suffix(".json")):
            if p.exists():
                p.unlink()
        raise
    return Checkpoint(path, meta)


def save_checkpoint(path, state: TrainState, phase: str, cfg: PipelineConfig,
                    parent_hash: Optional[str] = None) -> Checkpoint:
    meta = {
        "kind": "pose_transfer",
        "phase": phase,
        "arch": state.arch.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "loss_weights": {"alpha": cfg.train.alpha, "rho": cfg.train.rho,
                         "l1_weight": cfg.train.l1_weight, "perceptual_weight": cfg.train.perceptual_weight},
        "rho_placement": RHO_PLACEMENT,
        "parameter_count": {"generator": count_parameters(state.generator),
                            "discriminators": count_parameters(state.discriminators)},
        "heatmap_sigma_px": cfg.heatmap.sigma_px,
        "config_digest": cfg.digest(),
        "parent_hash": parent_hash,
    }
    return save_blob(path, state_payload(state), meta)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (meta, payload) after verifying the content hash."""
    p = Path(path)
    if p.suffix != ".pt":
        p = p.with_suffix(".pt")
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    meta = json.loads(p.with_suffix(".json").read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{p}: unsupported schema version {meta.get('schema_version')}")
    actual = file_hash(p)
    if actual != meta["content_hash"]:
        raise CheckpointError(f"{p}: content hash mismatch")
    payload = torch.load(p, map_location="cpu", weights_only=False)
    return meta, payload


def _check_shapes(module: torch.nn.Module, sd: dict, name: str) -> None:
    own = module.state_dict()
    problems = []
    for k in sorted(set(own) | set(sd)):
        if k not in sd:
            problems.append(f"{name}.{k}: missing in checkpoint")
        elif k not in own:
            problems.append(f"{name}.{k}: unexpected in checkpoint")
        elif own[k].shape != sd[k].shape:
            problems.append(f"{name}.{k}: checkpoint {tuple(sd[k].shape)} vs model {tuple(own[k].shape)}")
    if problems:
        raise CheckpointError("architecture mismatch: " + "; ".join(problems[:8])
                              + (f" (+{len(problems) - 8} more)" if len(problems) > 8 else ""))


def load_train_state(path, cfg: TrainConfig, arch: Optional[ArchConfig] = None,
                     restore_optim: bool = True) -> tuple[TrainState, dict]:
    meta, payload = read_checkpoint(path)
    if meta.get("kind") != "pose_transfer":
        raise CheckpointError(f"{path}: not a pose-transfer checkpoint")
    arch = arch or ArchConfig(**meta["arch"])
    state = new_train_state(arch, cfg, seed=0)
    _check_shapes(state.generator, payload["generator"], "generator")
    _check_shapes(state.discriminators, payload["discriminators"], "discriminators")
    state.generator.load_state_dict(payload["generator"])
    state.discriminators.load_state_dict(payload["discriminators"])
    if restore_optim:
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
        book = json.loads(payload["bookkeeping"])
        c = book["counters"]
        state.step, state.epoch, state.lr = c["step"], c["epoch"], c["lr"]
        state.history = book["history"]
        state.rng_state = book["rng_state"]
    return state, meta


def load_generator(path) -> tuple[Generator, dict]:
    meta, payload = read_checkpoint(path)
    if meta.get("kind") != "pose_transfer":
        raise CheckpointError(f"{path}: not a pose-transfer checkpoint")
    g = Generator(ArchConfig(**meta["arch"]))
    _check_shapes(g, payload["generator"], "generator")
    g.load_state_dict(payload["generator"])
    return g.eval(), meta


# ------------------------------------------------------------------- loops


def _log_line(fh, record: dict, t0: float) -> None:
    if fh is not None:
        fh.write(json.dumps(dict(record, wall_time=round(time.perf_counter() - t0, 6)), sort_keys=True) + "\n")
        fh.flush()


def run_epochs(state: TrainState, data: Batch, n_epochs: int, cfg: PipelineConfig, out_dir: Path,
               phase: str, log_path: Optional[Path] = None, features=None,
               parent_hash: Optional[str] = None) -> TrainState:
    tc = cfg.train
    weights = weights_from(tc)
    rng = np.random.default_rng(tc.seed)
    n = len(data)
    t0 = time.perf_counter()
    fh = open(log_path, "a") if log_path else None
    try:
        for e in range(n_epochs):
            state.epoch = e
            state.set_lr(lr_at(e, n_epochs, tc.lr_initial, tc.decay_schedule))
            order = rng.permutation(n)
            for i in range(0, n, tc.batch_size):
                _, rec = training_step(state, batch_subset(data, order[i:i + tc.batch_size]), weights, features)
                rec["phase"] = phase
                if "error" in rec:
                    log.error("step %d: %s", state.step, rec["error"])
                _log_line(fh, rec, t0)
            state.rng_state = rng.bit_generator.state
            if tc.checkpoint_every and (e + 1) % tc.checkpoint_every == 0 and e + 1 < n_epochs:
                state.epoch = e + 1
                save_checkpoint(out_dir / f"{phase}_epoch{e + 1:04d}", state, phase, cfg, parent_hash)
        state.epoch = n_epochs
    finally:
        if fh is not None:
            fh.close()
    return state


def pairs_l1(generator: Generator, data: Batch, batch_size: int = 8) -> float:
    """Mean generator L1 against targets over a prepared batch."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            b = batch_subset(data, range(i, min(i + batch_size, len(data))))
            out = generator(b.source, b.source_pose, b.target_pose)
            total += (out - b.target).abs().mean(dim=(1, 2, 3)).sum().item()
            count += len(b)
    return total / count


def train_general(dataset: Sequence[TrainingPair], cfg: PipelineConfig, out_dir,
                  features=None) -> Checkpoint:
    if not dataset:
        raise ValueError("empty training set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out / ".train.lock")):
        state = new_train_state(cfg.model.arch(), cfg.train)
        data = collate(dataset, cfg.heatmap.sigma_px)
        run_epochs(state, data, cfg.train.epochs_general, cfg, out, "general",
                   out / "train_log.jsonl", features)
        return save_checkpoint(out / "general", state, "general", cfg)


def train_specialized(base, garment_pairs: Sequence[TrainingPair], cfg: PipelineConfig, out_dir,
                      features=None) -> Checkpoint:
    """Fine-tune from ``base`` (path or Checkpoint); optimizer moments start fresh."""
    base_path = base.path if isinstance(base, Checkpoint) else Path(base)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with FileLock(str(out / ".train.lock")):
        state, meta = load_train_state(base_path, cfg.train, cfg.model.arch(), restore_optim=False)
        state.history = []
        if cfg.train.epochs_specialized > 0:
            if not garment_pairs:
                raise ValueError("empty garment collection")
            data = collate(garment_pairs, cfg.heatmap.sigma_px)
            run_epochs(state, data, cfg.train.epochs_specialized, cfg, out, "specialized",
                       out / "train_log.jsonl", features, parent_hash=meta["content_hash"])
        return save_checkpoint(out / "specialized", state, "specialized", cfg,
                               parent_hash=meta["content_hash"])


# ------------------------------------------------------- texture translator


@dataclass(frozen=True)
class TextureSample:
    posed_model: np.ndarray
    user: np.ndarray
    user_mask: SegMask
    model_mask: SegMask
    ground_truth: np.ndarray


def texture_sample_from_pair(pair: TrainingPair, regularization: float = 1.0) -> TextureSample:
    """Self-supervised triplet: the source, TPS-warped into the target pose,
    stands in for the re-posed model; the target is both user and ground truth."""
    if pair.source_mask is None or pair.target_mask is None:
        raise ValueError("texture samples need segmentation masks on both sides")
    vis = pair.source_pose.visible & pair.target_pose.visible
    try:
        t = fit_tps(pair.source_pose.xy[vis], pair.target_pose.xy[vis], regularization)
        warped = apply_tps(t, pair.source_image)
        labels = warp_array(t, pair.source_mask.labels.astype(np.float64), order=0).astype(np.uint8)
    except TPSError:
        warped, labels = np.array(pair.source_image), pair.source_mask.labels
    model_mask = SegMask(labels, pair.source_mask.label_set)
    return TextureSample(warped, pair.target_image, pair.target_mask, model_mask, pair.target_image)


def new_texture_translator(cfg: PipelineConfig, seed: Optional[int] = None) -> TextureTranslator:
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return TextureTranslator(cfg.model.texture_channels)


def texture_tensors(samples: Sequence[TextureSample], dtype=torch.float32):
    x = torch.stack([torch.as_tensor(translation_inputs(s.posed_model, s.user, s.user_mask, s.model_mask))
                     for s in samples]).to(dtype)
    y = torch.stack([_img(s.ground_truth) for s in samples]).to(dtype)
    return x, y


def texture_step(net: TextureTranslator, opt, x, y, lambdas, features=None) -> dict:
    coarse, refined = net(x)
    loss = warp_loss(WarpLossTerms(y, coarse, refined, lambdas), features)
    if not torch.isfinite(loss):
        return {"error": f"non-finite warp loss {loss.item()}"}
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return {"warp_loss": loss.item(), "l1": (refined.detach() - y).abs().mean().item()}


def save_texture_checkpoint(path, net: TextureTranslator, cfg: PipelineConfig, epochs: int) -> Checkpoint:
    meta = {"kind": "texture_translation", "phase": "texture", "epoch": epochs,
            "base_channels": cfg.model.texture_channels,
            "lambdas": [cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3],
            "parameter_count": count_parameters(net), "config_digest": cfg.digest(), "parent_hash": None}
    return save_blob(path, {"texture": net.state_dict()}, meta)


def load_texture_translator(path) -> tuple[TextureTranslator, dict]:
    meta, payload = read_checkpoint(path)
    if meta.get("kind") != "texture_translation":
        raise CheckpointError(f"{path}: not a texture-translation checkpoint")
    net = TextureTranslator(meta["base_channels"])
    _check_shapes(net, payload["texture"], "texture")
    net.load_state_dict(payload["texture"])
    return net.eval(), meta


def train_texture(samples: Sequence[TextureSample], cfg: PipelineConfig, out_dir, features=None) -> Checkpoint:
    if not samples:
        raise ValueError("empty texture training set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    with FileLock(str(out / ".train.lock")):
        net = new_texture_translator(cfg)
        opt = _adam(net.parameters(), tc)
        x, y = texture_tensors(samples)
        rng = np.random.default_rng(tc.seed)
        lambdas = (tc.lambda1, tc.lambda2, tc.lambda3)
        t0 = time.perf_counter()
        step = 0
        with open(out / "texture_log.jsonl", "a") as fh:
            for e in range(tc.epochs_texture):
                lr = lr_at(e, tc.epochs_texture, tc.lr_initial, tc.decay_schedule)
                for g in opt.param_groups:
                    g["lr"] = lr
                order = rng.permutation(len(samples))
                for i in range(0, len(samples), tc.batch_size):
                    idx = torch.as_tensor(order[i:i + tc.batch_size])
                    rec = texture_step(net, opt, x[idx], y[idx], lambdas, features)
                    _log_line(fh, dict(rec, step=step, epoch=e, lr=lr, phase="texture"), t0)
                    step += 1
        return save_texture_checkpoint(out / "texture", net, cfg, tc.epochs_texture)
