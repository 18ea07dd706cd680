"""Memorize one repeated 256-byte sequence with the micro hybrid model.

Prints the training CE and aux loss every 50 steps and the first step whose
CE falls under 0.5.

    python3 scripts/overfit.py --steps 1000
"""

import argparse
import time

from hdpl.experiments import overfit_run


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--lr", type=float, default=3e-3)
    args = parser.parse_args()
    t0 = time.perf_counter()
    result = overfit_run(steps=args.steps, seed=args.seed, peak_lr=args.lr)
    for r in result.records:
        if r.step % 50 == 0:
            print(f"step {r.step:5d}  ce {r.train_loss:.4f}  aux {r.aux_loss:.6f}  lr {r.lr:.2e}")
    print(f"first step with ce < {result.threshold}: {result.first_below}")
    print(f"aux within (0, {result.aux_bound:.6f}) at every step: {result.aux_in_bounds}")
    print(f"wall time {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
