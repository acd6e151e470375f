#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into IDX files.

The package ships 10000 MNIST digits (unevenly split across classes) as JSON (pixel/255 rounded to
three decimals); rounding back to bytes is lossless. Samples are written
interleaved by class (0,1,...,9,0,1,...) until each class runs out.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist-10k
"""
import json
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    per_class = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])
    images = bytearray()
    labels = bytearray()
    for i in range(max(len(c) for c in per_class)):
        for label in range(10):
            if i >= len(per_class[label]):
                continue
            images.extend(min(255, max(0, round(v * 255))) for v in per_class[label][i])
            labels.append(label)
    n = len(labels)
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images))
    (dst / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
