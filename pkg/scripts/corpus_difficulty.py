"""Sweep the corpus noise level and report task-only accuracy at each point.

Used to pick a default noise_std where the task is neither saturated nor
unlearnable, so distillation effects are measurable.
"""

import argparse
import time

from stagekd import tensor as T
from stagekd.config import RunConfig, student_stages_of
from stagekd.data import synth_generate, train_test_partition
from stagekd.evaluate import evaluate_top1
from stagekd.models import build_model
from stagekd.training import Checkpoint, train_student


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--noises", default="0.6,0.8,1.0,1.2",
                    help="comma-separated noise_std values")
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--per-class", type=int, default=500)
    ap.add_argument("--test-per-class", type=int, default=125)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    T.set_strict_mode(False)
    mi = max(1, args.epochs // 2), max(2, 3 * args.epochs // 4)
    print("noise_std,train_top1,test_top1,seconds")
    for noise in (float(n) for n in args.noises.split(",")):
        pool = synth_generate(args.classes, args.per_class + args.test_per_class,
                              noise_std=noise, seed=args.seed + 100)
        train, test = train_test_partition(pool, args.per_class)
        cfg = RunConfig(classes=args.classes, epochs=args.epochs, milestones=mi,
                        seed=args.seed)
        scfg = RunConfig(classes=args.classes, epochs=args.epochs, milestones=mi,
                         seed=args.seed, stages=student_stages_of(cfg),
                         kl_q=False, kl_p=False)
        # Task-only training ignores the teacher weights; any checkpoint with
        # a matching stage count satisfies the pairing contract.
        stub = build_model(cfg.stages, args.classes, 4, seed=999)
        teacher = Checkpoint(config=cfg, arrays=stub.state_arrays(), epoch=0)
        t0 = time.perf_counter()
        ck = train_student(scfg, teacher, train)
        wall = time.perf_counter() - t0
        print(f"{noise},{evaluate_top1(ck, train).top1:.2f},"
              f"{evaluate_top1(ck, test).top1:.2f},{wall:.0f}", flush=True)


if __name__ == "__main__":
    main()
