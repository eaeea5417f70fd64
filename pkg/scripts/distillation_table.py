"""Loss-term ablation table: train one student per flag set and seed
against a shared teacher, then print mean top-1 per flag set.

The default grid reproduces the headline comparison: task only, task plus
per-stage mimicry, and the full objective.
"""

import argparse
import time

from stagekd import tensor as T
from stagekd.cli import parse_grid, parse_seeds
from stagekd.config import RunConfig, student_stages_of
from stagekd.data import synth_generate, train_test_partition
from stagekd.evaluate import run_ablation
from stagekd.training import train_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--grid", default="task;task+kl_q;task+kl_q+kl_p")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--per-class", type=int, default=500)
    ap.add_argument("--test-per-class", type=int, default=125)
    ap.add_argument("--noise-std", type=float, default=1.0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--teacher-seed", type=int, default=0)
    args = ap.parse_args()

    T.set_strict_mode(False)
    pool = synth_generate(args.classes, args.per_class + args.test_per_class,
                          noise_std=args.noise_std, seed=100)
    train, test = train_test_partition(pool, args.per_class)

    mi = (args.epochs // 2, 3 * args.epochs // 4) if args.epochs >= 4 else ()
    tcfg = RunConfig(classes=args.classes, epochs=args.epochs, milestones=mi,
                     seed=args.teacher_seed)
    t0 = time.perf_counter()
    teacher = train_teacher(tcfg, train)
    print(f"# teacher trained in {time.perf_counter() - t0:.0f}s")

    scfg = RunConfig(classes=args.classes, epochs=args.epochs, milestones=mi,
                     stages=student_stages_of(tcfg))
    t0 = time.perf_counter()
    grid = run_ablation(scfg, parse_grid(args.grid), parse_seeds(args.seeds),
                        teacher, train, test)
    print(f"# grid trained in {time.perf_counter() - t0:.0f}s")
    print(grid.to_text(), end="")


if __name__ == "__main__":
    main()
