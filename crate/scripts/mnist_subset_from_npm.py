#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits bundled in the npm `mnist` package to IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist-npm

Every fifth sample of each class goes to the test split; both splits are
shuffled with a fixed seed so the output is byte-identical across runs.
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(out: Path, stem: str, images, labels):
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        for i in range(len(raw) // 784):
            px = [min(255, max(0, round(v * 255))) for v in raw[i * 784:(i + 1) * 784]]
            (test if i % 5 == 4 else train).append((px, digit))
    rng = random.Random(20240601)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out, "train", [p for p, _ in train], [l for _, l in train])
    write_idx(out, "t10k", [p for p, _ in test], [l for _, l in test])
    print(f"train={len(train)} test={len(test)} -> {out}")


if __name__ == "__main__":
    main()
