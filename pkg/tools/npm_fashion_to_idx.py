"""Convert the per-class JSON dump shipped by the ``fashion-mnist`` npm package to IDX files.

    npm pack fashion-mnist && tar xzf fashion-mnist-*.tgz
    python3 tools/npm_fashion_to_idx.py package/src/clothes ~/.cache/hanf/fashion-mnist

The package stores 7000 images per class (the 60k train and 10k test sets
merged, original order lost). The first ``--train-per-class`` images of each
class become the training file, the rest the test file; the two are disjoint.
Images are interleaved across classes with a fixed seed.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from hanf.data import write_idx


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("clothes_dir", type=Path, help="directory holding 0.json ... 9.json")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-per-class", type=int, default=6000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    train_x, train_y, test_x, test_y = [], [], [], []
    for label in range(10):
        rows = [r for r in json.loads((args.clothes_dir / f"{label}.json").read_text())["data"] if r]
        images = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        k = args.train_per_class
        train_x.append(images[:k])
        test_x.append(images[k:])
        train_y.append(np.full(len(images[:k]), label, dtype=np.uint8))
        test_y.append(np.full(len(images[k:]), label, dtype=np.uint8))
        print(f"class {label}: {len(images[:k])} train, {len(images[k:])} test")

    rng = np.random.default_rng(args.seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for prefix, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        write_idx(args.out_dir / f"{prefix}-images-idx3-ubyte", x[order])
        write_idx(args.out_dir / f"{prefix}-labels-idx1-ubyte", y[order])
        print(f"{prefix}: {len(y)} images -> {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
