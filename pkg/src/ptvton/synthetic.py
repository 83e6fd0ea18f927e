"""Procedural stick-figure people with known poses and parsing masks.

Each figure is drawn from limb capsules into a label raster, then colored
per label: skin and hair from the person, a striped two-tone texture for the
upper garment, flat color for the lower garment. Everything is a function of
integer seeds, so datasets are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .pose import FRAME_H, FRAME_W, JOINT_NAMES, Pose
from .texture import DEFAULT_LABELS as L

J = {name: i for i, name in enumerate(JOINT_NAMES)}


@dataclass(frozen=True)
class Person:
    skin: tuple
    hair: tuple
    pants: tuple
    scale: float
    long_hair: bool
    bag: bool


@dataclass(frozen=True)
class Garment:
    color_a: tuple
    color_b: tuple
    period: float
    angle: float
    long_sleeves: bool


def _color(rng, lo=0.0, hi=1.0):
    return tuple(float(c) for c in rng.uniform(lo, hi, 3))


def make_person(seed: int, allow_occluders: bool = True) -> Person:
    rng = np.random.default_rng([seed, 1])
    tone = rng.uniform(0.35, 0.9)
    skin = (tone, tone * rng.uniform(0.7, 0.85), tone * rng.uniform(0.55, 0.7))
    return Person(
        skin=skin,
        hair=_color(rng, 0.05, 0.4),
        pants=_color(rng, 0.1, 0.6),
        scale=float(rng.uniform(0.85, 1.05)),
        long_hair=bool(allow_occluders and rng.random() < 0.25),
        bag=bool(allow_occluders and rng.random() < 0.15),
    )


def make_garment(seed: int) -> Garment:
    rng = np.random.default_rng([seed, 2])
    return Garment(
        color_a=_color(rng, 0.2, 1.0),
        color_b=_color(rng, 0.0, 0.8),
        period=float(rng.uniform(6, 16)),
        angle=float(rng.uniform(0, np.pi)),
        long_sleeves=bool(rng.random() < 0.5),
    )


def _rot(v, theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def make_pose(seed: int, person: Person | None = None) -> Pose:
    """Random upright pose; retries until every joint lies inside the frame."""
    rng = np.random.default_rng([seed, 3])
    scale = person.scale if person else 1.0
    for _ in range(100):
        kp = np.zeros((18, 3))
        neck = np.array([rng.uniform(80, 112), rng.uniform(55, 72)])
        s = scale

        def put(name, xy, v=2):
            kp[J[name]] = (xy[0], xy[1], v)

        put("neck", neck)
        head_tilt = rng.uniform(-0.15, 0.15)
        nose = neck + _rot(np.array([0, -22 * s]), head_tilt)
        put("nose", nose)
        put("r_eye", nose + _rot(np.array([-5 * s, -5 * s]), head_tilt))
        put("l_eye", nose + _rot(np.array([5 * s, -5 * s]), head_tilt))
        put("r_ear", nose + _rot(np.array([-10 * s, -2 * s]), head_tilt), 0 if rng.random() < 0.3 else 2)
        put("l_ear", nose + _rot(np.array([10 * s, -2 * s]), head_tilt), 0 if rng.random() < 0.3 else 2)
        for side, sign in (("r", -1), ("l", 1)):
            sh = neck + np.array([sign * 22 * s, 3 * s])
            put(f"{side}_shoulder", sh)
            # Arm angle measured from straight down, positive = outward.
            a1 = rng.uniform(-0.3, 1.9)
            a2 = a1 + rng.uniform(-0.2, 1.4)
            el = sh + _rot(np.array([0, 34 * s]), -sign * a1)
            wr = el + _rot(np.array([0, 30 * s]), -sign * a2)
            put(f"{side}_elbow", el)
            put(f"{side}_wrist", wr)
            hip = neck + np.array([sign * 12 * s, 72 * s])
            put(f"{side}_hip", hip)
            b1 = rng.uniform(-0.1, 0.35)
            b2 = b1 + rng.uniform(-0.25, 0.1)
            kn = hip + _rot(np.array([0, 48 * s]), -sign * b1)
            an = kn + _rot(np.array([0, 44 * s]), -sign * b2)
            put(f"{side}_knee", kn)
            put(f"{side}_ankle", an)
        vis = kp[:, 2] > 0
        margin = 8
        if (np.all(kp[vis, 0] >= margin) and np.all(kp[vis, 0] < FRAME_W - margin)
                and np.all(kp[vis, 1] >= margin) and np.all(kp[vis, 1] < FRAME_H - margin)):
            return Pose(kp)
    raise RuntimeError("could not place a pose inside the frame")


def _pt(kp, name, f):
    return (float(kp[J[name], 0] * f), float(kp[J[name], 1] * f))


def render_labels(pose: Pose, person: Person, garment: Garment, f: float = 1.0) -> np.ndarray:
    """Label raster of size (256 f, 192 f)."""
    h, w = int(round(FRAME_H * f)), int(round(FRAME_W * f))
    img = Image.new("L", (w, h), L["background"])
    d = ImageDraw.Draw(img)
    kp = pose.keypoints
    s = person.scale * f

    def limb(a, b, width, label):
        pa, pb = _pt(kp, a, f), _pt(kp, b, f)
        d.line([pa, pb], fill=label, width=int(round(width)))
        r = width / 2
        for p in (pa, pb):
            d.ellipse([p[0] - r, p[1] - r, p[0] + r, p[1] + r], fill=label)

    for side, leg_label in (("r", L["right_leg"]), ("l", L["left_leg"])):
        limb(f"{side}_knee", f"{side}_ankle", 11 * s, leg_label)
        limb(f"{side}_hip", f"{side}_knee", 15 * s, L["lower_clothes"])
    d.polygon([_pt(kp, "r_shoulder", f), _pt(kp, "l_shoulder", f),
               _pt(kp, "l_hip", f), _pt(kp, "r_hip", f)], fill=L["upper_clothes"])
    limb("r_hip", "l_hip", 16 * s, L["lower_clothes"])
    for side, arm_label in (("r", L["right_arm"]), ("l", L["left_arm"])):
        sh, el, wr = (np.array(_pt(kp, f"{side}_{j}", f)) for j in ("shoulder", "elbow", "wrist"))
        d.line([tuple(el), tuple(wr)], fill=arm_label, width=int(round(9 * s)))
        d.line([tuple(sh), tuple(el)], fill=arm_label, width=int(round(11 * s)))
        r = 5 * s
        d.ellipse([wr[0] - r, wr[1] - r, wr[0] + r, wr[1] + r], fill=arm_label)
        if garment.long_sleeves:
            d.line([tuple(el), tuple(wr)], fill=L["upper_clothes"], width=int(round(10 * s)))
            d.line([tuple(sh), tuple(el)], fill=L["upper_clothes"], width=int(round(12 * s)))
        else:
            cuff = sh + 0.45 * (el - sh)
            d.line([tuple(sh), tuple(cuff)], fill=L["upper_clothes"], width=int(round(13 * s)))
        r = 7 * s
        d.ellipse([sh[0] - r, sh[1] - r, sh[0] + r, sh[1] + r], fill=L["upper_clothes"])
    limb("neck", "nose", 9 * s, L["face"])
    nose = _pt(kp, "nose", f)
    hr = 15 * s
    d.ellipse([nose[0] - hr, nose[1] - hr * 1.1, nose[0] + hr, nose[1] + hr * 0.9], fill=L["face"])
    d.chord([nose[0] - hr * 1.05, nose[1] - hr * 1.25, nose[0] + hr * 1.05, nose[1] + hr * 0.8],
            180, 360, fill=L["hair"])
    if person.long_hair:
        neck = _pt(kp, "neck", f)
        for sign in (-1, 1):
            d.rectangle([nose[0] + sign * hr * 0.6 - 5 * s, nose[1],
                         nose[0] + sign * hr * 0.6 + 5 * s, neck[1] + 30 * s], fill=L["hair"])
    if person.bag:
        d.line([_pt(kp, "l_shoulder", f), _pt(kp, "r_hip", f)], fill=L["accessories"], width=int(round(6 * s)))
    return np.asarray(img)


def colorize(labels: np.ndarray, pose: Pose, person: Person, garment: Garment,
             background: tuple, f: float = 1.0) -> np.ndarray:
    h, w = labels.shape
    out = np.empty((h, w, 3))
    out[:] = background
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # Garment texture is anchored to the neck so it travels with the body.
    nx, ny = pose.keypoints[J["neck"], :2] * f
    u = (xx - nx) * np.cos(garment.angle) + (yy - ny) * np.sin(garment.angle)
    stripe = (np.floor(u / (garment.period * f)) % 2 == 0)[..., None]
    tex = np.where(stripe, garment.color_a, garment.color_b)
    for lab, color in ((L["face"], person.skin), (L["left_arm"], person.skin), (L["right_arm"], person.skin),
                       (L["left_leg"], person.skin), (L["right_leg"], person.skin),
                       (L["hair"], person.hair), (L["lower_clothes"], person.pants),
                       (L["accessories"], (0.15, 0.1, 0.05))):
        out[labels == lab] = color
    m = labels == L["upper_clothes"]
    out[m] = tex[m]
    return np.clip(out, 0.0, 1.0)


def render(pose: Pose, person: Person, garment: Garment, background=(0.92, 0.92, 0.9), f: float = 1.0):
    """(image float (H, W, 3), labels uint8 (H, W)) at frame scale ``f``."""
    labels = render_labels(pose, person, garment, f)
    return colorize(labels, pose, person, garment, background, f), labels


def write_sample(out_dir: Path, stem: str, pose: Pose, person: Person, garment: Garment,
                 meta: dict, f: float = 1.0) -> None:
    img, labels = render(pose, person, garment, f=f)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out_dir / f"{stem}.png")
    Image.fromarray(labels).save(out_dir / f"{stem}.seg.png")
    raw = pose.keypoints.copy()
    raw[:, :2] *= f
    (out_dir / f"{stem}.pose.json").write_text(
        json.dumps({"keypoints": [[float(x), float(y), int(v)] for x, y, v in raw]}))
    (out_dir / f"{stem}.meta.json").write_text(json.dumps(meta, sort_keys=True))


def make_dataset(out_dir, seed: int = 0, train_groups: int = 10, catalog_garments: int = 3,
                 models_per_garment: int = 2, poses_per_model: int = 2, test_groups: int = 5,
                 f: float = 1.0) -> list[dict]:
    """Write a flat-layout synthetic dataset.

    * ``train``: one garment per (garment, model) group, ``poses_per_model``
      poses each, for general pose-transfer training;
    * ``catalog``: ``catalog_garments`` garments worn by several models;
    * ``test``: groups like train, on disjoint garments, used as users and
      for evaluation pairs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    metas = []
    counter = iter(range(10 ** 6))

    def seeds():
        return int(rng.integers(0, 2 ** 31))

    def emit(split, garment_id, model_id, person, garment):
        for _ in range(poses_per_model):
            k = next(counter)
            stem = f"{split}_{k:04d}"
            pose = make_pose(seeds(), person)
            meta = {"garment_id": garment_id, "model_id": model_id, "split": split}
            write_sample(out, stem, pose, person, garment, meta, f)
            metas.append({"stem": stem, **meta})

    for g in range(train_groups):
        emit("train", f"tg{g:03d}", f"tm{g:03d}", make_person(seeds()), make_garment(seeds()))
    for g in range(catalog_garments):
        garment = make_garment(seeds())
        for m in range(models_per_garment):
            emit("catalog", f"cg{g:03d}", f"cm{g:03d}_{m}", make_person(seeds(), allow_occluders=False), garment)
    for g in range(test_groups):
        emit("test", f"sg{g:03d}", f"sm{g:03d}", make_person(seeds()), make_garment(seeds()))
    return metas
