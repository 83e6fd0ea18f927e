"""Run the whole CLI chain on a fresh synthetic dataset.

make data -> ingest -> train-general -> train-specialized -> train-texture
-> match -> transfer -> evaluate -> bench -> grid, all under ``--work``.
"""

import argparse
import subprocess
import sys
from pathlib import Path

from ptvton.data import load_manifest
from ptvton.synthetic import make_dataset

HERE = Path(__file__).resolve().parent


def ptvton(*args):
    cmd = [sys.executable, "-m", "ptvton", *map(str, args)]
    print("+", " ".join(cmd[2:]), flush=True)
    subprocess.run(cmd, check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/desk_demo")
    ap.add_argument("--config", default=str(HERE.parent / "configs" / "toy.yaml"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--bench-requests", type=int, default=100)
    a = ap.parse_args()

    w = Path(a.work)
    make_dataset(w / "raw", seed=a.seed, train_groups=10, catalog_garments=3, models_per_garment=2,
                 poses_per_model=2, test_groups=5)
    common = ["--config", a.config, "--seed", a.seed]
    ptvton("ingest", "--source", w / "raw", "--out", w / "data", *common)
    man = w / "data" / "manifest.json"
    ptvton("train-general", "--manifest", man, "--out", w / "general", *common)
    ptvton("train-specialized", "--manifest", man, "--checkpoint", w / "general" / "general.pt",
           "--out", w / "specialized", *common)
    ptvton("train-texture", "--manifest", man, "--out", w / "texture", *common)

    m = load_manifest(man)
    user = m.split("test")[0].id
    garment = m.split("catalog")[0].garment_id
    ckpt = w / "specialized" / "specialized.pt"
    models = ["--checkpoint", ckpt, "--texture-checkpoint", w / "texture" / "texture.pt"]
    ptvton("match", "--manifest", man, "--user-record", user, "--garment", garment, "--out", w / "match", *common)
    ptvton("transfer", "--manifest", man, "--user-record", user, "--garment", garment,
           "--out", w / "transfer", *models, *common)
    ptvton("evaluate", "--manifest", man, "--checkpoint", ckpt, "--out", w / "eval", *common)
    ptvton("bench", "--manifest", man, "--n-requests", a.bench_requests, "--out", w / "bench", *models, *common)
    ptvton("grid", "--manifest", man, "--out", w / "grid", *models, *common)


if __name__ == "__main__":
    main()
