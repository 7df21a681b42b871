#!/usr/bin/env python3
"""Build MNIST IDX files from the digit set bundled in the `mnist` npm package.

The npm package ships 10,000 MNIST digits as JSON (pixels pre-scaled to
[0,1] with three decimals). This script restores the original bytes and
writes them as a single IDX pair:

    data/mnist/mnist-10k-images-idx3-ubyte
    data/mnist/mnist-10k-labels-idx1-ubyte

Usage: python3 scripts/fetch_mnist.py [OUT_DIR]
"""
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile


def main() -> int:
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    out_dir = sys.argv[1] if len(sys.argv) > 1 else os.path.join(root, "data", "mnist")
    os.makedirs(out_dir, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        tgz = [f for f in os.listdir(tmp) if f.endswith(".tgz")][0]
        with tarfile.open(os.path.join(tmp, tgz)) as tar:
            tar.extractall(tmp)
        digits = os.path.join(tmp, "package", "src", "digits")
        per_class = []
        for label in range(10):
            with open(os.path.join(digits, f"{label}.json")) as fh:
                flat = json.load(fh)["data"]
            assert len(flat) % 784 == 0
            per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])

    # Interleave classes round-robin so any prefix is roughly balanced.
    images, labels = [], []
    idx = [0] * 10
    remaining = sum(len(c) for c in per_class)
    while remaining:
        for label in range(10):
            if idx[label] < len(per_class[label]):
                images.append(per_class[label][idx[label]])
                labels.append(label)
                idx[label] += 1
                remaining -= 1

    n = len(images)
    img_path = os.path.join(out_dir, "mnist-10k-images-idx3-ubyte")
    lbl_path = os.path.join(out_dir, "mnist-10k-labels-idx1-ubyte")
    with open(img_path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(bytes(min(255, max(0, round(v * 255))) for img in images for v in img))
    with open(lbl_path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, n))
        fh.write(bytes(labels))
    print(f"wrote {n} digits to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
