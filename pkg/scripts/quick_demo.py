"""End-to-end demo at toy scale: generate a corpus, train a joint teacher,
distill a half-width student, and print the accuracy table.

Runs in about a minute on one CPU core. Use --epochs/--per-class to scale.
"""

import argparse
import time

from stagekd import tensor as T
from stagekd.config import RunConfig, student_stages_of
from stagekd.data import synth_generate, train_test_partition
from stagekd.evaluate import evaluate_top1
from stagekd.training import train_student, train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--per-class", type=int, default=150)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--noise-std", type=float, default=0.8)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    T.set_strict_mode(False)
    pool = synth_generate(args.classes, args.per_class + args.test_per_class,
                          noise_std=args.noise_std, seed=args.seed)
    train, test = train_test_partition(pool, args.per_class)
    print(f"corpus: {len(train.labels)} train / {len(test.labels)} test")

    mi = max(1, args.epochs // 2), max(2, 3 * args.epochs // 4)
    tcfg = RunConfig(classes=args.classes, epochs=args.epochs, milestones=mi,
                     seed=args.seed)
    t0 = time.perf_counter()
    teacher = train_teacher(tcfg, train)
    print(f"teacher    top1 = {evaluate_top1(teacher, test).top1:6.2f}   "
          f"({time.perf_counter() - t0:.0f}s)")

    for name, flags in (("task-only", dict(kl_q=False, kl_p=False)),
                        ("distilled", dict(kl_q=True, kl_p=True))):
        scfg = RunConfig(classes=args.classes, epochs=args.epochs, milestones=mi,
                         seed=args.seed, stages=student_stages_of(tcfg), **flags)
        t0 = time.perf_counter()
        student = train_student(scfg, teacher, train)
        print(f"{name:<10} top1 = {evaluate_top1(student, test).top1:6.2f}   "
              f"({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
