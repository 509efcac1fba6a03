"""Build the bundled MNIST subset used by the desk-scale configs.

The 5000-image MNIST sample shipped inside the ``mlxtend`` wheel (500 images
per digit) is shuffled with a fixed seed and written as gzipped IDX files:

    data/mnist-subset/train-images-idx3-ubyte.gz   (4000 images)
    data/mnist-subset/train-labels-idx1-ubyte.gz
    data/mnist-subset/test-images-idx3-ubyte.gz    (1000 images)
    data/mnist-subset/test-labels-idx1-ubyte.gz

Usage:
    pip download --no-deps -d /tmp/wheels mlxtend
    python scripts/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl
"""

import argparse
import gzip
import io
import pathlib
import zipfile

import numpy as np

from bpfree.mnist import write_idx

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
N_TEST = 1000


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("wheel", type=pathlib.Path)
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist-subset"))
    parser.add_argument("--seed", type=int, default=20231)
    args = parser.parse_args()

    raw = gzip.decompress(zipfile.ZipFile(args.wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)

    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    args.out.mkdir(parents=True, exist_ok=True)
    splits = {"train": slice(N_TEST, None), "test": slice(0, N_TEST)}
    for name, sl in splits.items():
        write_idx(args.out / f"{name}-images-idx3-ubyte.gz", images[sl])
        write_idx(args.out / f"{name}-labels-idx1-ubyte.gz", labels[sl])
        print(f"{name}: {len(labels[sl])} images")


if __name__ == "__main__":
    main()
