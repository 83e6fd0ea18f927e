"""Thin-plate-spline warping and Gaussian-feathered compositing."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage


class TPSError(ValueError):
    """Degenerate or inconsistent control points."""


def tps_kernel(r2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2 written in terms of r^2, with U(0) = 0."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = r2[nz] * np.log(r2[nz])
    return out


def _pairwise_r2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.sum(d * d, axis=-1)


@dataclass(frozen=True)
class TPSTransform:
    control_src: np.ndarray     # (N, 2) as (x, y)
    control_dst: np.ndarray     # (N, 2)
    affine: np.ndarray          # (2, 3): rows map to x', y'; columns x, y, 1
    radial_weights: np.ndarray  # (N, 2)
    regularization: float = 0.0

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        u = tps_kernel(_pairwise_r2(pts, self.control_src))
        lin = pts @ self.affine[:, :2].T + self.affine[:, 2]
        return lin + u @ self.radial_weights

    def bending_energy(self) -> float:
        k = tps_kernel(_pairwise_r2(self.control_src, self.control_src))
        return float(np.trace(self.radial_weights.T @ k @ self.radial_weights))

    @cached_property
    def inverse(self) -> "TPSTransform":
        """Spline fitted in the opposite direction (dst -> src).

        Used as the sampling map for backward warping; it is exact at the
        control points, not a true functional inverse elsewhere.
        """
        return fit_tps(self.control_dst, self.control_src, self.regularization)


def fit_tps(src, dst, regularization: float = 0.0) -> TPSTransform:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 2 or dst.shape != src.shape:
        raise TPSError(f"point sets must both be (N, 2), got {src.shape} and {dst.shape}")
    if regularization < 0:
        raise TPSError("regularization must be non-negative")
    n = len(src)
    if n < 3:
        raise TPSError(f"need at least 3 control points, got {n}")

    # Work in centred, unit-scale coordinates for conditioning.
    center = src.mean(axis=0)
    spread = float(np.sqrt(np.mean(np.sum((src - center) ** 2, axis=1))))
    if spread == 0.0:
        raise TPSError("control points are coincident")
    p = (src - center) / spread
    P = np.hstack([np.ones((n, 1)), p])
    sv = np.linalg.svd(P, compute_uv=False)
    if sv[-1] < 1e-9 * sv[0]:
        raise TPSError("control points are collinear; TPS system is singular")

    K = tps_kernel(_pairwise_r2(p, p))
    # Bending energy in pixel units scales by spread^2 relative to the
    # normalized frame, so the smoothing weight is rescaled to match.
    lam = regularization / spread ** 2
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = K + lam * np.eye(n)
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise TPSError(f"singular TPS system: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise TPSError("singular TPS system: non-finite solution")
    w_n, a_n = sol[:n], sol[n:]

    # Map back to pixel coordinates. In the normalized frame
    # f(q) = a0 + a1 qx + a2 qy + sum w U(|q - p|^2) with q = (x - c)/spread.
    # U(r^2/s^2) = (r^2 log r^2 - r^2 log s^2) / s^2; the r^2 log s^2 part is
    # quadratic in x but cancels under the side conditions on w.
    w = w_n / spread ** 2
    lin = a_n[1:] / spread                      # (2 coords, 2 outputs)
    const = a_n[0] - center @ lin
    # Side conditions give sum(w) = 0 and sum(w p) = 0, so the -r^2 log s^2
    # term reduces to -log s^2 * sum_j w_j |x - p_j|^2 = -log s^2 * sum_j w_j |p_j|^2.
    const = const - np.log(spread ** 2) * np.sum(w * np.sum(src ** 2, axis=1)[:, None], axis=0)
    affine = np.vstack([lin[0], lin[1], const]).T
    return TPSTransform(src.copy(), dst.copy(), affine, w, float(regularization))


def identity_tps(points=None) -> TPSTransform:
    pts = np.array([[0.0, 0.0], [191.0, 0.0], [0.0, 255.0]]) if points is None else np.asarray(points, float)
    return fit_tps(pts, pts)


def warp_array(t: TPSTransform, arr: np.ndarray, order: int = 1, fill: float = 0.0) -> np.ndarray:
    """Backward-warp an (H, W) or (H, W, C) array so src content lands on dst."""
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    samp = t.inverse(grid)
    coords = [samp[:, 1], samp[:, 0]]
    if arr.ndim == 2:
        out = ndimage.map_coordinates(arr, coords, order=order, mode="grid-constant", cval=fill)
        return out.reshape(h, w)
    chans = [ndimage.map_coordinates(arr[..., c], coords, order=order, mode="grid-constant", cval=fill)
             for c in range(arr.shape[2])]
    return np.stack(chans, axis=-1).reshape(arr.shape)


def apply_tps(t: TPSTransform, img: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Bilinear backward warp of an RGB image; out-of-frame samples get ``fill``."""
    out = warp_array(t, np.asarray(img, dtype=np.float64), order=1, fill=fill)
    return np.clip(out, 0.0, 1.0)


def feather_kernel(radius: int) -> np.ndarray:
    """Isotropic Gaussian (sigma = radius/2) truncated to the disc of ``radius``."""
    if radius == 0:
        return np.ones((1, 1))
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    d2 = xx ** 2 + yy ** 2
    sigma = radius / 2.0
    k = np.exp(-d2 / (2 * sigma ** 2))
    k[d2 > radius ** 2] = 0.0
    return k / k.sum()


def feather_alpha(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    m = np.asarray(mask).astype(bool)
    if radius == 0:
        return m.astype(np.float64)
    k = feather_kernel(radius)
    alpha = ndimage.convolve(m.astype(np.float64), k, mode="nearest")
    # Pin pixels whose whole disc is inside/outside the mask to exact 1/0;
    # the normalized kernel sum is only 1 up to rounding.
    foot = k > 0
    inside = ndimage.binary_erosion(m, structure=foot, border_value=1)
    outside = ~ndimage.binary_dilation(m, structure=foot)
    alpha[inside] = 1.0
    alpha[outside] = 0.0
    return np.clip(alpha, 0.0, 1.0)


def gaussian_feather_composite(base: np.ndarray, donor: np.ndarray, mask: np.ndarray,
                               radius: int) -> np.ndarray:
    base = np.asarray(base, dtype=np.float64)
    donor = np.asarray(donor, dtype=np.float64)
    mask = np.asarray(mask)
    if base.shape != donor.shape or mask.shape != base.shape[:2]:
        raise ValueError(f"dimension mismatch: base {base.shape}, donor {donor.shape}, mask {mask.shape}")
    alpha = feather_alpha(mask, radius)[..., None]
    out = alpha * donor + (1.0 - alpha) * base
    # alpha in {0, 1} must reproduce the source bit-for-bit.
    out = np.where(alpha == 0.0, base, np.where(alpha == 1.0, donor, out))
    return out
