#!/usr/bin/env python3
"""Build the 5k-train / 1k-test MNIST subset in IDX format.

Input is the digit directory of the `mnist` npm package (MIT licensed, 10,000
real MNIST digits stored as per-class JSON arrays of 784 floats in [0, 1]):

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist-5k

Per class, samples [0, 500) go to the training split and [500, 600) to the
test split. Each split is shuffled with a fixed seed so files are stable.
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100


def write_idx(prefix, samples):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(samples)))
    for label, pixels in samples:
        images.extend(min(255, max(0, round(v * 255))) for v in pixels)
        labels.append(label)
    Path(prefix + "-images-idx3-ubyte").write_bytes(images)
    Path(prefix + "-labels-idx1-ubyte").write_bytes(labels)


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(flat) // 784
        assert count >= TRAIN_PER_CLASS + TEST_PER_CLASS, (digit, count)
        rows = [flat[i * 784:(i + 1) * 784] for i in range(count)]
        train += [(digit, r) for r in rows[:TRAIN_PER_CLASS]]
        test += [(digit, r) for r in rows[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS]]
    rng = random.Random(20180101)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(str(dst / "train"), train)
    write_idx(str(dst / "t10k"), test)


if __name__ == "__main__":
    main()
