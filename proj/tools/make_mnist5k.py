#!/usr/bin/env python3
"""Build a 5,000-image MNIST subset in IDX format.

The images come from the 5k MNIST sample bundled with the mlxtend wheel
(500 images per digit). The first 400 images of each digit go to the train
split, the remaining 100 to the test split. Output files are gzip'd IDX,
readable by `odenet` (load_mnist accepts `.gz` siblings).

usage: make_mnist5k.py OUT_DIR [--wheel path/to/mlxtend.whl]
"""
import argparse
import glob
import gzip
import os
import struct
import subprocess
import sys
import tempfile
import zipfile


def find_wheel(explicit):
    if explicit:
        return explicit
    tmp = tempfile.mkdtemp()
    subprocess.check_call([sys.executable, "-m", "pip", "download", "--no-deps",
                           "-d", tmp, "mlxtend"])
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--wheel")
    args = ap.parse_args()

    wheel = zipfile.ZipFile(find_wheel(args.wheel))
    text = gzip.decompress(wheel.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    by_class = {c: [] for c in range(10)}
    for line in text.splitlines():
        vals = [int(v) for v in line.split(",")]
        by_class[vals[-1]].append(bytes(vals[:-1]))

    splits = {"train": [], "t10k": []}
    for c in range(10):
        for i, img in enumerate(by_class[c]):
            splits["train" if i < 400 else "t10k"].append((img, c))

    os.makedirs(args.out_dir, exist_ok=True)
    for name, items in splits.items():
        write_idx(os.path.join(args.out_dir, f"{name}-images-idx3-ubyte.gz"), 2051,
                  [len(items), 28, 28], b"".join(img for img, _ in items))
        write_idx(os.path.join(args.out_dir, f"{name}-labels-idx1-ubyte.gz"), 2049,
                  [len(items)], bytes(lbl for _, lbl in items))
        print(f"{name}: {len(items)} images")


if __name__ == "__main__":
    main()
