"""Train baseline and hybrid models on the same corpus and seed, then tabulate.

    python3 scripts/make_corpus.py
    python3 scripts/compare_modes.py --config configs/desk.ini --out runs/compare

Writes ``<out>/{baseline,hybrid}/metrics.jsonl`` plus ``<out>/summary.txt``.
"""

import argparse

from hdpl.experiments import compare_modes


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/desk.ini")
    parser.add_argument("--out", default="runs/compare")
    parser.add_argument("--max-steps", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()
    result = compare_modes(args.config, args.out, args.max_steps, args.seed)
    print(result["table"])


if __name__ == "__main__":
    main()
