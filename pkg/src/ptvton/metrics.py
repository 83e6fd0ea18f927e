"""SSIM, MS-SSIM, inception score and the throughput benchmark."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MetricReport:
    metric: str
    value: float
    sample_count: int
    config_digest: str
    std: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Separable correlation, keeping only windows fully inside the image.
    half = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[half:x.shape[0] - half, half:x.shape[1] - half]


def _ssim_maps(x: np.ndarray, y: np.ndarray, data_range: float = 1.0):
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def _check_pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return luminance(a), luminance(b)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    x, y = _check_pair(a, b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    lum, cs = _ssim_maps(x, y)
    return float(np.mean(lum * cs))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_scales(a: np.ndarray, b: np.ndarray, n_scales: int = 5):
    """Per-scale (mean luminance term, mean contrast-structure term)."""
    x, y = _check_pair(a, b)
    min_side = SSIM_WINDOW * 2 ** (n_scales - 1)
    if min(x.shape) < min_side:
        raise ValueError(f"MS-SSIM with {n_scales} scales needs images of at least {min_side}x{min_side} "
                         f"pixels, got {x.shape[0]}x{x.shape[1]}")
    out = []
    for s in range(n_scales):
        lum, cs = _ssim_maps(x, y)
        out.append((float(np.mean(lum * cs)), float(np.mean(cs))))
        if s < n_scales - 1:
            x, y = _downsample(x), _downsample(y)
    return out


def ms_ssim(a: np.ndarray, b: np.ndarray, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    scales = ms_ssim_scales(a, b, len(weights))
    # Negative contrast-structure terms would make fractional powers complex.
    val = 1.0
    for (_, cs), w in zip(scales[:-1], weights[:-1]):
        val *= max(cs, 0.0) ** w
    return float(val * max(scales[-1][0], 0.0) ** weights[-1])


def inception_score(probs, splits: int = 1) -> tuple[float, float]:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("probs must be (n_images, n_classes)")
    if splits < 1 or len(p) < splits:
        raise ValueError(f"need at least one image per split ({len(p)} images, {splits} splits)")
    for i, row in enumerate(p):
        if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-6:
            raise ValueError(f"probability vector {i} is not normalized")
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(axis=0)
        # A column of identical values has that value as its exact mean.
        same = np.all(part == part[0], axis=0)
        marginal[same] = part[0, same]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        kl = np.maximum(terms.sum(axis=1), 0.0)
        scores.append(float(np.exp(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


ClassifierProvider = Callable[[Sequence[np.ndarray]], np.ndarray]


class HueHistogramClassifier:
    """Deterministic stand-in classifier: softmax over a hue histogram.

    No learned weights; used when no pretrained classifier is available.
    """

    identifier = "hue-histogram-v1"

    def __init__(self, n_classes: int = 12, temperature: float = 0.05):
        self.n_classes = n_classes
        self.temperature = temperature

    def __call__(self, images):
        from skimage.color import rgb2hsv

        out = []
        for img in images:
            hsv = rgb2hsv(np.clip(np.asarray(img, dtype=np.float64), 0, 1))
            weights = hsv[..., 1] * hsv[..., 2]
            hist, _ = np.histogram(hsv[..., 0], bins=self.n_classes, range=(0, 1), weights=weights)
            hist = hist / max(hist.sum(), 1e-12)
            z = hist / self.temperature
            z = np.exp(z - z.max())
            out.append(z / z.sum())
        return np.array(out)


class TorchvisionInception:
    """ImageNet Inception-v3 class probabilities; needs the pretrained weights."""

    identifier = "torchvision-inception_v3-IMAGENET1K_V1"

    def __init__(self):
        import torch
        import torchvision

        self.torch = torch
        self.model = torchvision.models.inception_v3(
            weights=torchvision.models.Inception_V3_Weights.IMAGENET1K_V1).eval()

    def __call__(self, images):
        torch = self.torch
        x = torch.as_tensor(np.stack([np.asarray(i).transpose(2, 0, 1) for i in images]), dtype=torch.float32)
        x = torch.nn.functional.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        with torch.no_grad():
            return torch.softmax(self.model((x - mean) / std), dim=1).double().numpy()


def make_classifier(name: str) -> ClassifierProvider:
    if name == "hue_histogram":
        return HueHistogramClassifier()
    if name == "inception_v3":
        return TorchvisionInception()
    raise ValueError(f"unknown classifier {name!r}")


@dataclass
class ThroughputStats:
    total_requests: int
    succeeded: int
    wall_time: float
    amortized: float
    stage_seconds: dict = field(default_factory=dict)
    stage_share: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def throughput_benchmark(run_one: Callable[[int], dict], n_requests: int) -> ThroughputStats:
    """Time ``run_one(i)`` for i < n_requests.

    ``run_one`` returns a per-stage timing dict. Failed requests are
    recorded and left out of the timing.
    """
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    wall = 0.0
    stages: dict[str, float] = {}
    failures = []
    ok = 0
    for i in range(n_requests):
        t0 = time.perf_counter()
        try:
            timings = run_one(i)
        except Exception as exc:  # noqa: BLE001 - benchmark records and continues
            failures.append({"request": i, "error": f"{type(exc).__name__}: {exc}"})
            continue
        wall += time.perf_counter() - t0
        ok += 1
        for k, v in timings.items():
            stages[k] = stages.get(k, 0.0) + v
    total_stage = sum(stages.values())
    share = {k: (v / total_stage if total_stage > 0 else 0.0) for k, v in stages.items()}
    amortized = wall / ok if ok else float("nan")
    return ThroughputStats(n_requests, ok, wall, amortized, stages, share, failures)
