"""Build the bundled MNIST subset under data/ as gzipped IDX files.

Source: the 5000-sample MNIST extract that ships inside the mlxtend wheel
(500 images per digit, pixels 0-255). The wheel is fetched with pip if no
path is given. Split: 400 train / 100 test per class, each side shuffled
with a fixed seed.

    python scripts/build_mnist_subset.py [path/to/mlxtend.whl]
"""

import glob
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from forgetd.data import write_idx

OUT = Path(__file__).resolve().parent.parent / "data"


def fetch_wheel() -> str:
    tmp = tempfile.mkdtemp()
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp],
        check=True,
    )
    return glob.glob(f"{tmp}/mlxtend-*.whl")[0]


def main(argv):
    wheel = argv[1] if len(argv) > 1 else fetch_wheel()
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    images = table[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, 784].astype(np.uint8)

    rng = np.random.default_rng(20240101)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:400])
        test_idx.append(idx[400:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    OUT.mkdir(exist_ok=True)
    for name, idx in (("train", train_idx), ("test", test_idx)):
        write_idx(
            images[idx], labels[idx],
            OUT / f"mnist5k-{name}-images-idx3-ubyte.gz",
            OUT / f"mnist5k-{name}-labels-idx1-ubyte.gz",
        )
        print(name, len(idx))


if __name__ == "__main__":
    main(sys.argv)
