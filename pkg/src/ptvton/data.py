"""Image/mask/pose I/O, dataset ingestion and the manifest."""

from __future__ import annotations

import itertools
import json
import logging
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .pose import FRAME_H, FRAME_W, Pose, PoseParseError, parse_pose
from .texture import LabelSet, SegMask

log = logging.getLogger(__name__)

SPLITS = ("train", "test", "catalog")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
LAYOUTS = ("flat", "garment-grouped")


class ManifestError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape != (FRAME_H, FRAME_W, 3):
        raise ValueError(f"{path}: expected a {FRAME_H}x{FRAME_W} image, got {arr.shape[:2]}")
    return arr


def save_image(path, img: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_mask(path, label_set: LabelSet | None = None) -> SegMask:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: segmentation must be a single-channel indexed raster, got mode {im.mode}")
        labels = np.asarray(im)
    return SegMask(labels, label_set or LabelSet())


def save_mask(path, mask: SegMask | np.ndarray) -> None:
    labels = mask.labels if isinstance(mask, SegMask) else np.asarray(mask)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


def load_pose_file(path) -> Pose:
    pose, report = parse_pose(Path(path).read_text())
    for msg in report:
        log.warning("%s: %s", path, msg)
    return pose


@dataclass(frozen=True)
class CatalogEntry:
    image: np.ndarray
    pose: Pose
    seg_mask: SegMask
    garment_id: str
    model_id: str
    record_id: str = ""


@dataclass(frozen=True)
class Record:
    id: str
    image: str
    pose: str
    seg: str
    garment_id: str
    model_id: str
    split: str


@dataclass
class Manifest:
    records: list[Record]
    root: Path = field(default_factory=Path)
    layout: str = "flat"
    skipped: list = field(default_factory=list)

    @property
    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for r in self.records:
            out[r.garment_id].append(r.id)
        return dict(sorted(out.items()))

    def by_id(self, rid: str) -> Record:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(f"no record {rid!r} in manifest")

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "layout": self.layout,
            "records": [asdict(r) for r in self.records],
            "groups": self.groups,
            "skipped": self.skipped,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def load_entry(self, rec: Record, label_set: LabelSet | None = None) -> CatalogEntry:
        return CatalogEntry(
            image=load_image(self.path(rec.image)),
            pose=load_pose_file(self.path(rec.pose)),
            seg_mask=load_mask(self.path(rec.seg), label_set),
            garment_id=rec.garment_id,
            model_id=rec.model_id,
            record_id=rec.id,
        )


def load_manifest(path) -> Manifest:
    path = Path(path)
    data = json.loads(path.read_text())
    records = [Record(**r) for r in data["records"]]
    man = Manifest(records, path.parent, data.get("layout", "flat"), data.get("skipped", []))
    for r in records:
        if r.split not in SPLITS:
            raise ManifestError(f"record {r.id}: split tag {r.split!r} not in {SPLITS}")
        for rel in (r.image, r.pose, r.seg):
            if not man.path(rel).exists():
                raise ManifestError(f"record {r.id}: missing file {rel}")
    if not records:
        raise ManifestError("manifest has no records")
    return man


def crop_box(h: int, w: int) -> tuple[int, int, int, int]:
    """Centered (top, left, height, width) crop with the 4:3 frame aspect."""
    target = FRAME_H / FRAME_W
    if h / w > target:
        ch, cw = int(round(w * target)), w
    else:
        ch, cw = h, int(round(h / target))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def crop_resize(im: Image.Image, resample) -> tuple[Image.Image, tuple]:
    top, left, ch, cw = crop_box(im.height, im.width)
    out = im.crop((left, top, left + cw, top + ch)).resize((FRAME_W, FRAME_H), resample=resample)
    return out, (left, top, FRAME_W / cw, FRAME_H / ch)


def _discover(src: Path, layout: str):
    """Yield (record id, image path, pose path, seg path, meta dict)."""
    if layout == "flat":
        for img in sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
                          and not p.name.endswith(".seg.png")):
            stem = img.name[: -len(img.suffix)]
            meta_path = src / f"{stem}.meta.json"
            meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
            yield stem, img, src / f"{stem}.pose.json", src / f"{stem}.seg.png", meta
    elif layout == "garment-grouped":
        splits_path = src / "split.json"
        splits = json.loads(splits_path.read_text()) if splits_path.exists() else {}
        for gdir in sorted(p for p in src.iterdir() if p.is_dir()):
            for img in sorted(p for p in gdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
                              and not p.name.endswith(".seg.png")):
                stem = img.name[: -len(img.suffix)]
                model_id = stem.split("__")[0]
                meta = {"garment_id": gdir.name, "model_id": model_id,
                        "split": splits.get(gdir.name, "train")}
                yield (f"{gdir.name}__{stem}", img, gdir / f"{stem}.pose.json",
                       gdir / f"{stem}.seg.png", meta)
    else:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def ingest_dataset(source, out_dir, layout: str = "flat", label_set: LabelSet | None = None) -> Manifest:
    """Crop/resize every sample to 256x192, remap its pose, write a manifest."""
    src, out = Path(source), Path(out_dir)
    ls = label_set or LabelSet()
    for sub in ("images", "poses", "segs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records, skipped = [], []
    for rid, img_path, pose_path, seg_path, meta in _discover(src, layout):
        try:
            with Image.open(img_path) as im:
                im.load()
                rgb, (left, top, sx, sy) = crop_resize(im.convert("RGB"), Image.BILINEAR)
            with Image.open(seg_path) as sm:
                if sm.mode not in ("L", "P"):
                    raise ValueError(f"segmentation mode {sm.mode} is not indexed")
                seg, _ = crop_resize(sm, Image.NEAREST)
            SegMask(np.asarray(seg), ls)
            pose, report = parse_pose(pose_path.read_text(), scale=(sx, sy), offset=(left, top))
            for msg in report:
                log.warning("%s: %s", rid, msg)
            split = meta.get("split", "train")
            if split not in SPLITS:
                raise ValueError(f"split tag {split!r} not in {SPLITS}")
        except (OSError, UnidentifiedImageError, ValueError, PoseParseError, KeyError) as exc:
            log.warning("skipping %s: %s", rid, exc)
            skipped.append({"id": rid, "reason": f"{type(exc).__name__}: {exc}"})
            continue
        rgb.save(out / "images" / f"{rid}.png", format="PNG")
        seg.save(out / "segs" / f"{rid}.png", format="PNG")
        (out / "poses" / f"{rid}.json").write_text(pose.to_json())
        records.append(Record(rid, f"images/{rid}.png", f"poses/{rid}.json", f"segs/{rid}.png",
                              str(meta.get("garment_id", rid)), str(meta.get("model_id", rid)), split))
    if not records:
        raise ManifestError(f"no usable samples under {src}")
    man = Manifest(records, out, layout, skipped)
    man.write(out / "manifest.json")
    return man


def eligible_groups(man: Manifest, split: Optional[str] = None) -> list[str]:
    groups = defaultdict(int)
    for r in man.records:
        if split is None or r.split == split:
            groups[r.garment_id] += 1
    return sorted(g for g, n in groups.items() if n >= 2)


def sample_groups(man: Manifest, count: int, seed: int, split: Optional[str] = None) -> list[str]:
    """Seeded choice of ``count`` garment groups with at least two images."""
    pool = eligible_groups(man, split)
    if count >= len(pool):
        return pool
    return sorted(random.Random(seed).sample(pool, count))


def _ordered_pairs(groups: dict) -> list[tuple[Record, Record]]:
    pairs = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: r.id)
        pairs.extend((a, b) for a, b in itertools.permutations(members, 2))
    return pairs


def identity_pairs(records: Iterable[Record]) -> list[tuple[Record, Record]]:
    """Ordered pairs within each (garment, model) group: same person, same clothes."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.garment_id, r.model_id)].append(r)
    return _ordered_pairs(groups)


def garment_pairs(records: Iterable[Record], garments: Optional[Iterable[str]] = None):
    """Ordered pairs within each garment group, across models."""
    keep = None if garments is None else set(garments)
    groups = defaultdict(list)
    for r in records:
        if keep is None or r.garment_id in keep:
            groups[r.garment_id].append(r)
    return _ordered_pairs(groups)


def limit_pairs(pairs: list, max_pairs: Optional[int], seed: int = 0) -> list:
    if max_pairs is None or max_pairs >= len(pairs):
        return pairs
    idx = sorted(random.Random(seed).sample(range(len(pairs)), max_pairs))
    return [pairs[i] for i in idx]
