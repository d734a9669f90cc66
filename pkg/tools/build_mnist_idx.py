"""Rebuild the bundled MNIST IDX files from the npm ``mnist`` package.

The npm package (MIT, github.com/cazala/mnist) ships 10,000 MNIST digits as
JSON arrays of pixel/255 rounded to three decimals; ``round(v * 255)``
recovers the original bytes exactly.  Every fifth digit of each class goes to
the test split.

    npm pack mnist && tar xzf mnist-*.tgz
    python tools/build_mnist_idx.py package/src/digits src/bnnrobust/data
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, images, labels):
    with gzip.GzipFile(path / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.GzipFile(path / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main(src, dst):
    src, dst = Path(src), Path(dst)
    splits = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        data = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        pixels = np.round(data * 255).reshape(-1, 784)
        for i, img in enumerate(pixels):
            imgs, labs = splits["test" if i % 5 == 4 else "train"]
            imgs.append(img)
            labs.append(digit)
    for name, (imgs, labs) in splits.items():
        out = dst / f"mnist-{name}"
        out.mkdir(parents=True, exist_ok=True)
        write_idx(out, np.array(imgs), np.array(labs))
        print(name, len(labs))


if __name__ == "__main__":
    main(*sys.argv[1:3])
