"""Write a procedural synthetic dataset in the flat layout."""

import argparse
import json

from ptvton.synthetic import make_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-groups", type=int, default=10)
    ap.add_argument("--catalog-garments", type=int, default=3)
    ap.add_argument("--models-per-garment", type=int, default=2)
    ap.add_argument("--poses-per-model", type=int, default=2)
    ap.add_argument("--test-groups", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0,
                    help="render at this multiple of 256x192 (ingest crops/resizes back)")
    a = ap.parse_args()
    metas = make_dataset(a.out, a.seed, a.train_groups, a.catalog_garments, a.models_per_garment,
                         a.poses_per_model, a.test_groups, a.scale)
    counts = {}
    for m in metas:
        counts[m["split"]] = counts.get(m["split"], 0) + 1
    print(json.dumps({"out": a.out, "samples": len(metas), "per_split": counts}))


if __name__ == "__main__":
    main()
