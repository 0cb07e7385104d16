#!/usr/bin/env python3
"""Write a small MNIST subset in IDX format.

Source: the 5,000-digit MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 digits per class). Rows are shuffled
with a fixed seed and split into a 4,000-image training file and a
1,000-image test file, using the standard MNIST file names so the CLI can be
pointed at either this directory or a full MNIST download.

usage: make_mnist_subset.py WHEEL_OR_CSV_GZ OUT_DIR
"""
import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path


def read_rows(src: Path):
    if src.suffix == ".whl":
        with zipfile.ZipFile(src) as z:
            raw = z.read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = src.read_bytes()
    text = gzip.decompress(raw).decode()
    rows = []
    for line in text.splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        rows.append((bytes(vals[:-1]), vals[-1]))
    return rows


def write_idx(out: Path, stem: str, rows):
    n = len(rows)
    with gzip.GzipFile(out / f"{stem}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for px, _ in rows:
            f.write(px)
    with gzip.GzipFile(out / f"{stem}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in rows))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows = read_rows(src)
    random.Random(20180101).shuffle(rows)
    write_idx(out, "train", rows[:4000])
    write_idx(out, "t10k", rows[4000:])


if __name__ == "__main__":
    main()
