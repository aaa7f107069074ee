"""Write the small MNIST fixture used by the training tests as gzipped IDX files.

Source: ``mlxtend/data/data/mnist_5k.csv.gz`` inside the mlxtend wheel
(5,000 MNIST digits, 500 per class, label in the last column). The first
100 digits of each class form the training split, the next 100 the test
split. Usage::

    python scripts/make_mnist_subset.py path/to/mlxtend-*.whl tests/data
"""

from __future__ import annotations

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path: Path, array: np.ndarray) -> None:
    code = 0x08  # unsigned byte
    header = struct.pack(">BBBB", 0, 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    # mtime=0 keeps the gzip bytes reproducible
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--per-class", type=int, default=100)
    args = ap.parse_args(argv)

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    k = args.per_class
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:k])
        test_idx.extend(idx[k:2 * k])
    args.out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train_idx), ("test", test_idx)):
        idx = np.array(idx)
        write_idx(args.out / f"mnist-{split}-images-idx3-ubyte.gz", pixels[idx].reshape(-1, 28, 28))
        write_idx(args.out / f"mnist-{split}-labels-idx1-ubyte.gz", labels[idx])
        print(f"{split}: {len(idx)} images")


if __name__ == "__main__":
    main()
