"""Synthetic datasets and the CSV format used by the holder CLI.

CSV rows are ``f0,f1,...,f{d-1},label``; no header.
"""

from __future__ import annotations

import argparse
import csv
import math
from pathlib import Path

from .trainer import Dataset, Prng


def make_blobs(n_rows: int = 200, sigma: float = 0.3, seed: int = 0) -> Dataset:
    """Two Gaussian blobs: class 0 around (-1, -1), class 1 around (+1, +1).

    Rows alternate classes; noise is Box-Muller over splitmix64 draws.
    """
    rng = Prng(seed)
    features, labels = [], []
    for i in range(n_rows):
        label = i % 2
        centre = 1.0 if label else -1.0
        u1 = 1.0 - rng.next_float()
        u2 = rng.next_float()
        r = math.sqrt(-2.0 * math.log(u1))
        features.append([centre + sigma * r * math.cos(2.0 * math.pi * u2),
                         centre + sigma * r * math.sin(2.0 * math.pi * u2)])
        labels.append(label)
    return Dataset(features, labels)


def save_csv(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(v) for v in row] + [y])


def load_csv(path: str | Path) -> Dataset:
    features, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: need at least one feature and a label")
            features.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    if not labels:
        raise ValueError(f"{path}: no rows")
    width = len(features[0])
    if any(len(r) != width for r in features):
        raise ValueError(f"{path}: rows have differing widths")
    return Dataset(features, labels)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m chiron.datasets",
                                     description="Write a two-blob dataset as CSV.")
    parser.add_argument("output")
    parser.add_argument("--rows", type=int, default=200)
    parser.add_argument("--sigma", type=float, default=0.3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    save_csv(make_blobs(args.rows, args.sigma, args.seed), args.output)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
