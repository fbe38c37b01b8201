"""Build the bundled MNIST subset as gzipped IDX files.

The sandbox has no route to the MNIST mirrors, but the ``mlxtend`` wheel
ships 5000 MNIST training digits (500 per class) as a CSV. This script
pulls that CSV out of a downloaded wheel, applies a seeded shuffle, and
writes a 4000/1000 train/test split in the standard IDX layout so the
rest of the package only ever reads IDX.

    pip download --no-deps mlxtend==0.24.0 -d /tmp/mlx
    python scripts/make_mnist5k.py /tmp/mlx/mlxtend-0.24.0-py3-none-any.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def write_idx(path, images=None, labels=None):
    if images is not None:
        n, rows, cols = images.shape
        payload = struct.pack(">IIII", 2051, n, rows, cols) + images.astype(np.uint8).tobytes()
    else:
        payload = struct.pack(">II", 2049, len(labels)) + labels.astype(np.uint8).tobytes()
    # mtime=0 keeps the archives byte-reproducible
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(payload)


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        table = np.loadtxt(io.BytesIO(gzip.decompress(z.read(MEMBER))), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    order = np.random.default_rng(20201).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "t10k-images-idx3-ubyte.gz", images=pixels[:1000])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels=labels[:1000])
    write_idx(out / "train-images-idx3-ubyte.gz", images=pixels[1000:])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels=labels[1000:])
    print(f"wrote {len(labels) - 1000} train / 1000 test digits to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
