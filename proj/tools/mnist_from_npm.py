#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Writes MNIST IDX files from the 10k digits bundled in the npm `mnist` package.

Usage: mnist_from_npm.py PACKAGE_DIR [OUT_DIR] [--test N] [--seed S]

PACKAGE_DIR is the unpacked tarball (`npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz`).
"""
import argparse
import json
import random
import struct
from pathlib import Path

SIDE = 28


def load_digits(package_dir: Path):
    samples = []
    for label in range(10):
        raw = json.loads((package_dir / "src" / "digits" / f"{label}.json").read_text())["data"]
        plane = SIDE * SIDE
        for i in range(len(raw) // plane):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in raw[i * plane:(i + 1) * plane])
            samples.append((pixels, label))
    return samples


def write_idx(out_dir: Path, prefix: str, samples):
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), SIDE, SIDE))
        for pixels, _ in samples:
            f.write(pixels)
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir", type=Path)
    ap.add_argument("out_dir", type=Path, nargs="?", default=Path("data/mnist"))
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = load_digits(args.package_dir)
    random.Random(args.seed).shuffle(samples)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir, "t10k", samples[:args.test])
    write_idx(args.out_dir, "train", samples[args.test:])
    print(f"{len(samples) - args.test} train, {args.test} test -> {args.out_dir}")


if __name__ == "__main__":
    main()
