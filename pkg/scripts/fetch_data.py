"""Build IDX dataset files under the data root from wheels on the package index.

    python scripts/fetch_data.py [--data-dir data]

Only the package index is assumed reachable. Two wheels bundle image data:

* ``mnist_hub`` ships the full MNIST set as ``mnist.pkl.gz`` (pixels stored as
  uint8/256); written to ``mnist/``.
* ``animal_mnist`` ships 10,000 28×28 grayscale animal silhouettes; written to
  ``animalmnist/`` (stratified 800/200 per class train/test split). Used as a
  FashionMNIST-like stand-in when FashionMNIST is not present.

FashionMNIST, CIFAR-10 and SVHN must be placed by hand, see README.
"""

from __future__ import annotations

import argparse
import gzip
import pickle
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from incpvae.data import write_idx


def pip_wheel(name: str, dest: Path) -> Path:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:",
                    "-d", str(dest), name], check=True, capture_output=True)
    return next(dest.glob(f"{name.replace('-', '_')}-*.whl"))


def write_split(root: Path, prefix: str, images: np.ndarray, labels: np.ndarray) -> None:
    root.mkdir(parents=True, exist_ok=True)
    write_idx(root / f"{prefix}-images-idx3-ubyte.gz", images.astype(np.uint8))
    write_idx(root / f"{prefix}-labels-idx1-ubyte.gz", labels.astype(np.uint8))


def fetch_mnist(tmp: Path, out: Path) -> None:
    whl = pip_wheel("mnist_hub", tmp)
    with zipfile.ZipFile(whl) as z, z.open("mnist/data/mnist.pkl.gz") as f:
        train, valid, test = pickle.load(gzip.open(f), encoding="latin1")

    def to_u8(x):
        return np.rint(x * 256).astype(np.uint8).reshape(-1, 28, 28)

    write_split(out / "mnist", "train", np.concatenate([to_u8(train[0]), to_u8(valid[0])]),
                np.concatenate([train[1], valid[1]]))
    write_split(out / "mnist", "t10k", to_u8(test[0]), test[1])


def fetch_animal(tmp: Path, out: Path) -> None:
    whl = pip_wheel("animal_mnist", tmp)
    base = "animal_mnist/data/Animal_MNIST/"
    with zipfile.ZipFile(whl) as z:
        with z.open(base + "animal_data_version_3.gz") as f:
            images = pickle.load(gzip.open(f))
        with z.open(base + "animal_label_version_3.gz") as f:
            labels = np.asarray(pickle.load(gzip.open(f)))
    images = np.asarray(images, dtype=np.uint8)
    # The wheel stores the images sorted by class.
    rng = np.random.default_rng(20200101)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        cut = len(idx) * 4 // 5
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    write_split(out / "animalmnist", "train", images[train_idx], labels[train_idx])
    write_split(out / "animalmnist", "t10k", images[test_idx], labels[test_idx])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-dir", default="data")
    args = ap.parse_args(argv)
    out = Path(args.data_dir)
    with tempfile.TemporaryDirectory() as tmp:
        fetch_mnist(Path(tmp), out)
        fetch_animal(Path(tmp), out)
    for p in sorted(out.rglob("*.gz")):
        print(p, p.stat().st_size)
    return 0


if __name__ == "__main__":
    sys.exit(main())
