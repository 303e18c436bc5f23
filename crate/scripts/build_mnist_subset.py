#!/usr/bin/env python3
"""Build IDX files from the 10000-digit MNIST sample bundled in the npm `mnist` package.

Usage: npm pack mnist && tar xzf mnist-*.tgz && python3 build_mnist_subset.py package/src/digits data/mnist

Every fifth digit of each class goes to the test split (2000 images), the rest
to the train split (8000 images). Both splits are shuffled with a fixed seed.
"""
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        raw = np.array(json.loads((src / f"{digit}.json").read_text())["data"])
        pixels = np.clip(np.rint(raw.reshape(-1, 784) * 255.0), 0, 255)
        for i, row in enumerate(pixels):
            if i % 5 == 4:
                test_x.append(row)
                test_y.append(digit)
            else:
                train_x.append(row)
                train_y.append(digit)
    rng = np.random.RandomState(20240101)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        xs, ys = np.array(xs), np.array(ys)
        order = rng.permutation(len(ys))
        write_images(dst / f"{name}-images-idx3-ubyte", xs[order])
        write_labels(dst / f"{name}-labels-idx1-ubyte", ys[order])
        print(name, len(ys), np.bincount(ys))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
