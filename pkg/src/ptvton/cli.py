"""Command-line entry point: ``ptvton <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import PipelineConfig, load_config
from .metrics import (MS_SSIM_WEIGHTS, SSIM_SIGMA, SSIM_WINDOW, MetricReport, config_digest,
                      inception_score, make_classifier, ms_ssim, ssim, throughput_benchmark)
from .pose import SigmaTable, pose_scale, rank_candidates

log = logging.getLogger("ptvton")


class CLIError(Exception):
    def __init__(self, message: str, flag: str | None = None):
        super().__init__(message)
        self.flag = flag


def _emit_error(message: str, kind: str, flag: str | None = None) -> None:
    rec = {"error": message, "type": kind}
    if flag:
        rec["flag"] = flag
    print(json.dumps(rec), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error(message, "usage")
        sys.exit(2)


def _require_file(path, flag):
    if path is None:
        raise CLIError(f"{flag} is required", flag)
    p = Path(path)
    if not p.exists() and not p.with_suffix(".pt").exists():
        raise CLIError(f"{flag}: path does not exist: {path}", flag)
    return p


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides({"train.seed": args.seed})
    return cfg


def _seed_everything(cfg: PipelineConfig) -> None:
    import torch

    torch.manual_seed(cfg.train.seed)
    np.random.seed(cfg.train.seed)


def _manifest(args) -> D.Manifest:
    return D.load_manifest(_require_file(args.manifest, "--manifest"))


def _training_pairs(man, pairs, label_set):
    from .training import TrainingPair

    cache = {}

    def entry(rec):
        if rec.id not in cache:
            cache[rec.id] = man.load_entry(rec, label_set)
        return cache[rec.id]

    out = []
    for a, b in pairs:
        ea, eb = entry(a), entry(b)
        out.append(TrainingPair(ea.image, ea.pose, eb.image, eb.pose, f"{a.garment_id}/{a.model_id}",
                                ea.seg_mask, eb.seg_mask))
    return out


def _catalog(man, split, label_set):
    recs = man.split(split)
    if not recs:
        raise CLIError(f"manifest has no records in split {split!r}", "--catalog-split")
    return [man.load_entry(r, label_set) for r in recs]


# ------------------------------------------------------------ subcommands


def cmd_ingest(args):
    cfg = _config(args)
    if args.source is None:
        raise CLIError("--source is required", "--source")
    man = D.ingest_dataset(args.source, args.out, args.layout, cfg.seg.label_set())
    groups = D.sample_groups(man, cfg.data.specialized_groups, cfg.train.seed, split="catalog")
    print(json.dumps({"records": len(man.records), "groups": len(man.groups), "skipped": len(man.skipped),
                      "specialized_groups": groups, "manifest": str(Path(args.out) / "manifest.json")}))


def cmd_train_general(args):
    from .training import train_general

    cfg = _config(args)
    _seed_everything(cfg)
    man = _manifest(args)
    pairs = D.limit_pairs(D.identity_pairs(man.split(args.split)), args.max_pairs, cfg.train.seed)
    if not pairs:
        raise CLIError(f"no identity pairs in split {args.split!r}", "--split")
    ck = train_general(_training_pairs(man, pairs, cfg.seg.label_set()), cfg, args.out)
    print(json.dumps({"checkpoint": str(ck.path), "pairs": len(pairs), "content_hash": ck.content_hash}))


def cmd_train_specialized(args):
    from .training import train_specialized

    cfg = _config(args)
    _seed_everything(cfg)
    base = _require_file(args.checkpoint, "--checkpoint")
    man = _manifest(args)
    groups = D.sample_groups(man, cfg.data.specialized_groups, cfg.train.seed, split=args.split)
    pairs = D.limit_pairs(D.garment_pairs(man.split(args.split), groups), args.max_pairs, cfg.train.seed)
    ck = train_specialized(base, _training_pairs(man, pairs, cfg.seg.label_set()), cfg, args.out)
    print(json.dumps({"checkpoint": str(ck.path), "pairs": len(pairs), "groups": groups,
                      "parent_hash": ck.meta["parent_hash"], "content_hash": ck.content_hash}))


def cmd_train_texture(args):
    from .training import texture_sample_from_pair, train_texture

    cfg = _config(args)
    _seed_everything(cfg)
    man = _manifest(args)
    pairs = D.limit_pairs(D.identity_pairs(man.split(args.split)), args.max_pairs, cfg.train.seed)
    samples = [texture_sample_from_pair(p) for p in _training_pairs(man, pairs, cfg.seg.label_set())]
    ck = train_texture(samples, cfg, args.out)
    print(json.dumps({"checkpoint": str(ck.path), "samples": len(samples), "content_hash": ck.content_hash}))


def _load_user(args, man, label_set):
    from .pipeline import UserInput

    if args.user_record:
        e = man.load_entry(man.by_id(args.user_record), label_set)
        return UserInput(e.image, e.pose, e.seg_mask)
    img = _require_file(args.user_image, "--user-image")
    pose = _require_file(args.user_pose, "--user-pose")
    mask = _require_file(args.user_mask, "--user-mask")
    return UserInput(D.load_image(img), D.load_pose_file(pose), D.load_mask(mask, label_set))


def cmd_match(args):
    cfg = _config(args)
    man = _manifest(args)
    ls = cfg.seg.label_set()
    if args.user_record:
        user_pose = man.load_entry(man.by_id(args.user_record), ls).pose
    else:
        user_pose = D.load_pose_file(_require_file(args.user_pose, "--user-pose"))
    recs = [r for r in man.split(args.catalog_split) if args.garment is None or r.garment_id == args.garment]
    if not recs:
        raise CLIError("no catalog candidates for the requested garment", "--garment")
    poses = [D.load_pose_file(man.path(r.pose)) for r in recs]
    scale = pose_scale(user_pose, cfg.oks.scale_floor)
    scores = rank_candidates(user_pose, poses, scale, SigmaTable(np.array(cfg.oks.sigmas)))
    order = sorted(range(len(recs)), key=lambda i: (-scores[i], i))
    table = [{"rank": k + 1, "record": recs[i].id, "garment_id": recs[i].garment_id, "oks": scores[i]}
             for k, i in enumerate(order)]
    text = "\n".join(f"{row['rank']:>3}  {row['oks']:.6f}  {row['garment_id']:<10} {row['record']}" for row in table)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "match.json").write_text(json.dumps(table, indent=2) + "\n")


def _load_models(args, cfg):
    from .training import load_generator, load_texture_translator

    gen, _ = load_generator(_require_file(args.checkpoint, "--checkpoint"))
    tex = None
    if getattr(args, "texture_checkpoint", None):
        tex, _ = load_texture_translator(_require_file(args.texture_checkpoint, "--texture-checkpoint"))
    return gen, tex


def write_result(out: Path, res) -> None:
    inter = out / "intermediates"
    inter.mkdir(parents=True, exist_ok=True)
    D.save_image(out / "final.png", res.final)
    D.save_image(inter / "selected_model.png", res.selected.image)
    D.save_image(inter / "posed_model.png", res.posed_model)
    D.save_image(inter / "warped_model.png", res.warped_model)
    D.save_mask(inter / "garment_mask.png", res.garment_mask)
    D.save_mask(inter / "altered_region.png", res.altered_region.astype(np.uint8) * 255)
    np.savez(inter / "stage_b.npz", posed_model=res.posed_model, garment_labels=res.garment_mask.labels)
    (out / "result.json").write_text(json.dumps(res.summary(), indent=2, sort_keys=True, default=float) + "\n")


def cmd_transfer(args):
    from .pipeline import run_transfer

    cfg = _config(args)
    _seed_everything(cfg)
    man = _manifest(args)
    gen, tex = _load_models(args, cfg)
    if args.garment is None:
        raise CLIError("--garment is required", "--garment")
    ls = cfg.seg.label_set()
    user = _load_user(args, man, ls)
    res = run_transfer(user, args.garment, _catalog(man, args.catalog_split, ls), gen, cfg, tex)
    out = Path(args.out)
    write_result(out, res)
    print(json.dumps({"final": str(out / "final.png"), **res.summary()}, default=float))


def cmd_evaluate(args):
    from .network import generator_forward
    from .pose import encode_heatmaps

    cfg = _config(args)
    _seed_everything(cfg)
    man = _manifest(args)
    gen, _ = _load_models(args, cfg)
    ls = cfg.seg.label_set()
    pairs = D.limit_pairs(D.identity_pairs(man.split(args.split)), args.max_pairs, cfg.train.seed)
    if not pairs:
        raise CLIError(f"no evaluation pairs in split {args.split!r}", "--split")
    s_vals, ms_vals, generated = [], [], []
    cache = {}
    for a, b in pairs:
        for r in (a, b):
            if r.id not in cache:
                cache[r.id] = man.load_entry(r, ls)
        ea, eb = cache[a.id], cache[b.id]
        out = generator_forward(gen, ea.image, encode_heatmaps(ea.pose, cfg.heatmap.sigma_px),
                                encode_heatmaps(eb.pose, cfg.heatmap.sigma_px))
        generated.append(out)
        s_vals.append(ssim(out, eb.image))
        ms_vals.append(ms_ssim(out, eb.image))
    classifier = make_classifier(cfg.metrics.classifier)
    is_mean, is_std = inception_score(classifier(generated), cfg.metrics.is_splits)
    digest = config_digest({"ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA, "ms_ssim_weights": MS_SSIM_WEIGHTS,
                            "classifier": getattr(classifier, "identifier", cfg.metrics.classifier),
                            "is_splits": cfg.metrics.is_splits, "luminance": "bt601"})
    n = len(pairs)
    reports = [
        MetricReport("ssim", float(np.mean(s_vals)), n, digest, float(np.std(s_vals))),
        MetricReport("ms_ssim", float(np.mean(ms_vals)), n, digest, float(np.std(ms_vals))),
        MetricReport("inception_score", is_mean, n, digest, is_std),
    ]
    lines = [r.to_json() for r in reports]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_bench(args):
    from .pipeline import UserInput, run_transfer

    cfg = _config(args)
    _seed_everything(cfg)
    man = _manifest(args)
    gen, tex = _load_models(args, cfg)
    ls = cfg.seg.label_set()
    catalog = _catalog(man, args.catalog_split, ls)
    garments = sorted({e.garment_id for e in catalog})
    users = [man.load_entry(r, ls) for r in man.split(args.user_split)]
    if not users:
        raise CLIError(f"no users in split {args.user_split!r}", "--user-split")
    trace = []

    def run_one(i):
        u = users[i % len(users)]
        g = garments[(i // len(users)) % len(garments)] if args.mix == "round-robin" else garments[i % len(garments)]
        res = run_transfer(UserInput(u.image, u.pose, u.seg_mask), g, catalog, gen, cfg, tex)
        trace.append({"request": i, "user": u.record_id, "garment": g, "timings": res.timings,
                      "method": res.method_used.value})
        return res.timings

    stats = throughput_benchmark(run_one, args.n_requests)
    text = stats.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(text + "\n")
        (out / "bench_trace.jsonl").write_text("".join(json.dumps(t) + "\n" for t in trace))
    print(text)


def cmd_grid(args):
    from .pipeline import UserInput, run_transfer

    cfg = _config(args)
    _seed_everything(cfg)
    man = _manifest(args)
    gen, tex = _load_models(args, cfg)
    ls = cfg.seg.label_set()
    catalog = _catalog(man, args.catalog_split, ls)
    garments = [args.garment] if args.garment else sorted({e.garment_id for e in catalog})
    users = [man.load_entry(r, ls) for r in man.split(args.user_split)][: args.n_users]
    rows = []
    for u in users:
        for g in garments:
            res = run_transfer(UserInput(u.image, u.pose, u.seg_mask), g, catalog, gen, cfg, tex)
            rows.append(np.concatenate([u.image, res.selected.image, res.posed_model,
                                        res.warped_model, res.final], axis=1))
    if not rows:
        raise CLIError("nothing to tile", "--user-split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.save_image(out / "grid.png", np.concatenate(rows, axis=0))
    print(json.dumps({"grid": str(out / "grid.png"), "rows": len(rows),
                      "columns": ["user", "selected_model", "posed_model", "tps_warped_model", "final"]}))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptvton", description="Pose-transfer virtual try-on pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key/value YAML or JSON config")
    common.add_argument("--seed", type=int)
    common.add_argument("--manifest")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("ingest", cmd_ingest, help="crop/resize a dataset and write a manifest")
    sp.add_argument("--source")
    sp.add_argument("--layout", choices=D.LAYOUTS, default="flat")

    for name, fn, split in (("train-general", cmd_train_general, "train"),
                            ("train-specialized", cmd_train_specialized, "catalog"),
                            ("train-texture", cmd_train_texture, "train")):
        sp = add(name, fn)
        sp.add_argument("--split", default=split)
        sp.add_argument("--max-pairs", type=int)
        if name == "train-specialized":
            sp.add_argument("--checkpoint", help="general-phase checkpoint to start from")

    user_args = argparse.ArgumentParser(add_help=False)
    user_args.add_argument("--user-record", help="take the user from a manifest record id")
    user_args.add_argument("--user-image")
    user_args.add_argument("--user-pose")
    user_args.add_argument("--user-mask")
    user_args.add_argument("--catalog-split", default="catalog")

    sp = sub.add_parser("match", parents=[common, user_args])
    sp.set_defaults(fn=cmd_match)
    sp.add_argument("--garment")

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--checkpoint")
    model_args.add_argument("--texture-checkpoint")

    sp = sub.add_parser("transfer", parents=[common, user_args, model_args])
    sp.set_defaults(fn=cmd_transfer)
    sp.add_argument("--garment")

    sp = sub.add_parser("evaluate", parents=[common, model_args])
    sp.set_defaults(fn=cmd_evaluate)
    sp.add_argument("--split", default="test")
    sp.add_argument("--max-pairs", type=int)

    sp = sub.add_parser("bench", parents=[common, model_args])
    sp.set_defaults(fn=cmd_bench)
    sp.add_argument("--n-requests", type=int, default=100)
    sp.add_argument("--mix", choices=("round-robin", "interleaved"), default="round-robin")
    sp.add_argument("--user-split", default="test")
    sp.add_argument("--catalog-split", default="catalog")

    sp = sub.add_parser("grid", parents=[common, model_args])
    sp.set_defaults(fn=cmd_grid)
    sp.add_argument("--garment")
    sp.add_argument("--n-users", type=int, default=4)
    sp.add_argument("--user-split", default="test")
    sp.add_argument("--catalog-split", default="catalog")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(None if argv is None else [str(a) for a in argv])
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command in ("ingest", "train-general", "train-specialized",
                                             "train-texture", "transfer", "grid"):
        _emit_error("--out is required", "usage", "--out")
        return 2
    try:
        args.fn(args)
    except CLIError as exc:
        _emit_error(str(exc), "argument", exc.flag)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        log.debug("failure", exc_info=True)
        _emit_error(str(exc), type(exc).__name__)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
