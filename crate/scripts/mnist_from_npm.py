#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST sample shipped in the `mnist` npm package
(src/digits/<d>.json, pixels as floats rounded to 3 decimals) into gzipped
IDX files.

Usage: mnist_from_npm.py <unpacked npm package dir> <output dir>

Pixel bytes are recovered exactly with round(v * 255). Samples are shuffled
with a fixed seed so that "first N / last M" splits mix all classes.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

src, out = Path(sys.argv[1]), Path(sys.argv[2])
samples = []
for digit in range(10):
    flat = json.loads((src / "src" / "digits" / f"{digit}.json").read_text())["data"]
    assert len(flat) % 784 == 0
    for i in range(len(flat) // 784):
        px = bytes(round(v * 255) for v in flat[i * 784:(i + 1) * 784])
        samples.append((px, digit))

random.Random(20191).shuffle(samples)
n = len(samples)
out.mkdir(parents=True, exist_ok=True)
with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
    for px, _ in samples:
        f.write(px)
with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">II", 0x00000801, n))
    f.write(bytes(label for _, label in samples))
print(f"wrote {n} samples to {out}")
