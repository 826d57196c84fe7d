#!/usr/bin/env python3
"""Build the bundled MNIST subset (IDX format) from the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON (pixels scaled to [0,1],
three decimals). We re-quantize to uint8, shuffle with a fixed seed, and
write an 8,000 / 2,000 train/test split in the original IDX layout.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/prepare_mnist.py package/src/digits data/mnist
"""

import json
import os
import struct
import sys

import numpy as np

TRAIN_COUNT = 8000
SEED = 20190810


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, images.shape[0], 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    src, dst = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            data = np.asarray(json.load(f)["data"], dtype=np.float64)
        data = data.reshape(-1, 784)
        images.append(np.rint(data * 255.0).clip(0, 255))
        labels.append(np.full(data.shape[0], digit))
    images = np.vstack(images)
    labels = np.concatenate(labels)

    order = np.random.default_rng(SEED).permutation(images.shape[0])
    images, labels = images[order], labels[order]

    os.makedirs(dst, exist_ok=True)
    write_images(os.path.join(dst, "train-images-idx3-ubyte"), images[:TRAIN_COUNT])
    write_labels(os.path.join(dst, "train-labels-idx1-ubyte"), labels[:TRAIN_COUNT])
    write_images(os.path.join(dst, "t10k-images-idx3-ubyte"), images[TRAIN_COUNT:])
    write_labels(os.path.join(dst, "t10k-labels-idx1-ubyte"), labels[TRAIN_COUNT:])
    print(f"wrote {TRAIN_COUNT} train / {images.shape[0] - TRAIN_COUNT} test images to {dst}")


if __name__ == "__main__":
    main()
