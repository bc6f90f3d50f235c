#!/usr/bin/env python3
"""Write a class-balanced MNIST subset as IDX files.

Source: the `mnist` npm package (digits/<d>.json hold flattened 28x28 images
with intensities stored as x/255 rounded to three decimals).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_subset_from_npm.py package/src/digits data/mnist2000 --per-class 200
"""
import argparse
import json
import pathlib
import struct


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--per-class", type=int, default=200)
    args = ap.parse_args()

    side = 28
    per_class = {}
    for d in range(10):
        raw = json.loads((pathlib.Path(args.digits_dir) / f"{d}.json").read_text())["data"]
        count = len(raw) // (side * side)
        if count < args.per_class:
            raise SystemExit(f"digit {d}: only {count} samples")
        per_class[d] = [raw[i * side * side:(i + 1) * side * side] for i in range(args.per_class)]

    images = bytearray()
    labels = bytearray()
    # interleave classes so any prefix stays roughly balanced
    for i in range(args.per_class):
        for d in range(10):
            images.extend(max(0, min(255, round(v * 255))) for v in per_class[d][i])
            labels.append(d)

    n = len(labels)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 2051, n, side, side) + images)
    (out / "train-labels-idx1-ubyte").write_bytes(struct.pack(">II", 2049, n) + labels)
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main()
