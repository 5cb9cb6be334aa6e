"""Write the 5000-image MNIST subset shipped with mlxtend as gzipped IDX files.

    python scripts/make_mnist_subset.py [--wheel mlxtend-*.whl] [--out data/]

Without ``--wheel`` the installed mlxtend package is used.
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from gpvae.data import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_csv_gz(wheel):
    if wheel:
        with zipfile.ZipFile(wheel) as z:
            return z.read(MEMBER)
    import mlxtend

    return (Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz").read_bytes()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default="data")
    args = ap.parse_args()
    table = np.loadtxt(io.StringIO(gzip.decompress(read_csv_gz(args.wheel)).decode()), delimiter=",")
    images = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist5k-images-idx3-ubyte.gz", images)
    write_idx(out / "mnist5k-labels-idx1-ubyte.gz", labels)
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main()
