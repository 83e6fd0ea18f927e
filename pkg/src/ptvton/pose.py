"""Body poses, object keypoint similarity, catalog selection and heatmaps."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FRAME_H = 256
FRAME_W = 192
NUM_JOINTS = 18

# OpenPose 18-joint body order.
JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)

_COCO_CONSTANTS = {
    "nose": 0.026, "eye": 0.025, "ear": 0.035, "shoulder": 0.079,
    "elbow": 0.072, "wrist": 0.062, "hip": 0.107, "knee": 0.087,
    "ankle": 0.089,
}


def _default_sigmas() -> np.ndarray:
    out = []
    for name in JOINT_NAMES:
        if name == "neck":
            out.append(_COCO_CONSTANTS["shoulder"])
        else:
            out.append(_COCO_CONSTANTS[name.split("_")[-1]])
    return np.array(out, dtype=np.float64)


DEFAULT_SIGMAS = _default_sigmas()


class PoseParseError(ValueError):
    """Raised for malformed pose annotation records."""


class ClampWarning(UserWarning):
    pass


class NoVisibleKeypointsError(ValueError):
    pass


class NoCandidatesError(LookupError):
    pass


@dataclass(frozen=True)
class Pose:
    """18 keypoints as an (18, 3) array of (x, y, v); x is the column."""

    keypoints: np.ndarray

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.shape != (NUM_JOINTS, 3):
            raise ValueError(f"expected {NUM_JOINTS} joints of (x, y, v), got shape {kp.shape}")
        if not np.all(np.isin(kp[:, 2], (0, 1, 2))):
            raise ValueError("visibility flags must be 0, 1 or 2")
        vis = kp[:, 2] > 0
        if np.any((kp[vis, 0] < 0) | (kp[vis, 0] >= FRAME_W) | (kp[vis, 1] < 0) | (kp[vis, 1] >= FRAME_H)):
            raise ValueError("visible keypoint outside the 256x192 frame")
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2]

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def to_record(self) -> dict:
        return {"keypoints": [[float(x), float(y), int(v)] for x, y, v in self.keypoints]}

    def to_json(self) -> str:
        return json.dumps(self.to_record())


@dataclass(frozen=True)
class SigmaTable:
    k: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMAS.copy())

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        if k.shape != (NUM_JOINTS,):
            raise ValueError(f"sigma table needs {NUM_JOINTS} entries, got {k.shape}")
        if not np.all(k > 0):
            raise ValueError("sigma table entries must be strictly positive")
        object.__setattr__(self, "k", k)


def _triplets_from_record(record) -> list:
    if isinstance(record, dict):
        if "keypoints" not in record:
            raise PoseParseError("missing field 'keypoints'")
        record = record["keypoints"]
    if not isinstance(record, list):
        raise PoseParseError("field 'keypoints' must be a list")
    # COCO-style flat list of 3*18 numbers is accepted too.
    if record and not isinstance(record[0], (list, tuple)):
        if len(record) % 3:
            raise PoseParseError(f"flat keypoint list length {len(record)} is not a multiple of 3")
        record = [record[i:i + 3] for i in range(0, len(record), 3)]
    return record


def parse_pose(text: str, frame: tuple[int, int] = (FRAME_H, FRAME_W),
               scale: tuple[float, float] = (1.0, 1.0),
               offset: tuple[float, float] = (0.0, 0.0)) -> tuple[Pose, list[str]]:
    """Parse an annotation record into a Pose plus a list of clamp messages.

    ``offset`` (x, y) is subtracted and ``scale`` (sx, sy) applied before
    clamping, which is how ingestion maps raw annotations into the crop.
    """
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PoseParseError(f"malformed record: {exc}") from exc
    triplets = _triplets_from_record(record)
    if len(triplets) != NUM_JOINTS:
        raise PoseParseError(f"expected {NUM_JOINTS} joints, got {len(triplets)}")

    h, w = frame
    report = []
    rows = []
    for i, trip in enumerate(triplets):
        name = JOINT_NAMES[i]
        if not isinstance(trip, (list, tuple)) or len(trip) != 3:
            raise PoseParseError(f"joint {i} ({name}): expected an (x, y, v) triplet")
        vals = []
        for axis, val in zip("xyv", trip):
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not np.isfinite(val):
                raise PoseParseError(f"joint {i} ({name}) field '{axis}': non-numeric value {val!r}")
            vals.append(float(val))
        x, y, v = vals
        if v not in (0.0, 1.0, 2.0):
            raise PoseParseError(f"joint {i} ({name}) field 'v': visibility must be 0, 1 or 2, got {v}")
        x = (x - offset[0]) * scale[0]
        y = (y - offset[1]) * scale[1]
        if v > 0:
            cx = min(max(x, 0.0), w - 1.0)
            cy = min(max(y, 0.0), h - 1.0)
            if (cx, cy) != (x, y):
                report.append(f"joint {i} ({name}) clamped from ({x:g}, {y:g}) to ({cx:g}, {cy:g})")
            x, y = cx, cy
        rows.append((x, y, v))
    return Pose(np.array(rows)), report


def load_pose(annotation_text: str) -> Pose:
    pose, report = parse_pose(annotation_text)
    for msg in report:
        warnings.warn(msg, ClampWarning, stacklevel=2)
    return pose


def pose_scale(user: Pose, floor: float = 1.0) -> float:
    """sqrt(w*h) of the tight box around the visible keypoints, floored."""
    pts = user.xy[user.visible]
    if len(pts) == 0:
        raise NoVisibleKeypointsError("no visible keypoints")
    w, h = np.ptp(pts, axis=0)
    return max(float(np.sqrt(w * h)), floor)


def oks(user: Pose, candidate: Pose, scale: float, sigmas: SigmaTable | None = None) -> float:
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    k = (sigmas or SigmaTable()).k
    vis = user.visible
    n_vis = int(vis.sum())
    if n_vis == 0:
        raise NoVisibleKeypointsError("no visible keypoints")
    # Invisible candidate joints may carry off-frame placeholders; they are
    # scored against their frame-clamped position rather than excluded.
    cand = np.clip(candidate.xy, 0.0, [FRAME_W - 1.0, FRAME_H - 1.0])
    d2 = np.sum((user.xy - cand) ** 2, axis=1)
    e = np.exp(-d2 / (2.0 * (scale * k) ** 2))
    return float(np.sum(e[vis]) / n_vis)


def rank_candidates(user: Pose, poses: Sequence[Pose], scale: float | None = None,
                    sigmas: SigmaTable | None = None) -> list[float]:
    s = pose_scale(user) if scale is None else scale
    return [oks(user, p, s, sigmas) for p in poses]


def select_model_image(user: Pose, catalog: Sequence, garment_id, scale: float | None = None,
                       sigmas: SigmaTable | None = None):
    """Best-OKS entry for ``garment_id``; earliest catalog index wins ties.

    ``scale`` defaults to :func:`pose_scale` of the user pose.
    """
    s = pose_scale(user) if scale is None else scale
    best, best_score = None, -np.inf
    for entry in catalog:
        if entry.garment_id != garment_id:
            continue
        score = oks(user, entry.pose, s, sigmas)
        if score > best_score:
            best, best_score = entry, score
    if best is None:
        raise NoCandidatesError(f"no candidates for garment {garment_id!r}")
    return best, best_score


@dataclass(frozen=True)
class HeatmapStack:
    channels: np.ndarray  # (18, H, W)
    sigma_px: float


def encode_heatmaps(pose: Pose, sigma_px: float = 6.0) -> HeatmapStack:
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    yy, xx = np.mgrid[0:FRAME_H, 0:FRAME_W].astype(np.float64)
    out = np.zeros((NUM_JOINTS, FRAME_H, FRAME_W), dtype=np.float64)
    for i, (x, y, v) in enumerate(pose.keypoints):
        if v == 0:
            continue
        cx, cy = np.round(x), np.round(y)
        out[i] = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma_px ** 2))
    return HeatmapStack(out, float(sigma_px))
