"""Write a plain-text training corpus built from the local Python standard library.

    python3 scripts/make_corpus.py --out data/corpus.txt --megabytes 6
"""

import argparse
import sysconfig
from pathlib import Path

from hdpl.data import build_stdlib_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/corpus.txt")
    parser.add_argument("--megabytes", type=float, default=6.0)
    parser.add_argument("--root", default=sysconfig.get_paths()["stdlib"])
    args = parser.parse_args()
    blob = build_stdlib_corpus(int(args.megabytes * 2**20), args.root)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)
    print(f"wrote {len(blob):,d} bytes to {out}")


if __name__ == "__main__":
    main()
