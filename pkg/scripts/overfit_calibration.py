"""Overfit the toy-width networks on one synthetic pair and log the L1 curve.

This is the run used to set the overfit threshold (final L1 <= 25% of the
step-0 L1). Prints one JSON line every ``--every`` steps.
"""

import argparse
import json
import time

import torch

from ptvton import training as tr
from ptvton.config import toy_config
from ptvton.losses import combined_l1_loss
from ptvton.synthetic import make_garment, make_person, make_pose, render


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--every", type=int, default=50)
    a = ap.parse_args()

    person = make_person(a.seed, allow_occluders=False)
    garment = make_garment(a.seed)
    pa, pb = make_pose(a.seed, person), make_pose(a.seed + 7, person)
    (ia, _), (ib, _) = render(pa, person, garment), render(pb, person, garment)
    batch = tr.collate([tr.TrainingPair(ia, pa, ib, pb)])

    cfg = toy_config()
    weights = tr.weights_from(cfg.train)
    state = tr.new_train_state(cfg.model.arch(), cfg.train)

    def l1():
        with torch.no_grad():
            out = state.generator(batch.source, batch.source_pose, batch.target_pose)
        return combined_l1_loss(out, batch.target, weights).item()

    l0 = l1()
    t0 = time.perf_counter()
    for step in range(1, a.steps + 1):
        state, rec = tr.training_step(state, batch, weights)
        if step % a.every == 0 or step == a.steps:
            cur = l1()
            print(json.dumps({"step": step, "l1": cur, "ratio": cur / l0, "d_loss": rec.get("discriminator"),
                              "seconds": round(time.perf_counter() - t0, 1)}), flush=True)


if __name__ == "__main__":
    main()
