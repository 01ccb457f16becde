#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

The package ships 10,000 MNIST digits as per-class JSON arrays of
normalized pixels. This script shuffles them with a fixed seed and writes
an 8,000 / 2,000 train/test split in the standard big-endian IDX layout:

    train-images-idx3-ubyte  train-labels-idx1-ubyte
    t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

PIXELS = 28 * 28
TRAIN = 8000


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(rows), 28, 28))
        for r in rows:
            f.write(bytes(r))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.load(open(Path(src) / f"{digit}.json"))["data"]
        assert len(data) % PIXELS == 0
        for k in range(len(data) // PIXELS):
            px = data[k * PIXELS:(k + 1) * PIXELS]
            samples.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(20250101).shuffle(samples)
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    train, test = samples[:TRAIN], samples[TRAIN:]
    write_images(out / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(out / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
