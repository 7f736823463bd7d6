import gzip
import os
from pathlib import Path

import numpy as np
import pytest

from adaptsnn.data import MNIST_FILES, write_idx

FULL_MNIST_TRAIN = 60000


def _has_mnist(d: Path) -> bool:
    for img, lab in MNIST_FILES.values():
        for name in (img, lab):
            if not ((d / name).exists() or (d / (name + ".gz")).exists()):
                return False
    return True


def _subset_from_mlxtend(out: Path) -> bool:
    """5000 real MNIST digits (500 per class) bundled with mlxtend, split
    400/100 per class into train/test IDX files."""
    try:
        import mlxtend
    except ImportError:
        return False
    src = Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not src.exists():
        return False
    with gzip.open(src, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    x = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    y = table[:, -1].astype(np.uint8)
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train += list(idx[:400])
        test += list(idx[400:])
    rng = np.random.default_rng(0)
    train, test = rng.permutation(train), rng.permutation(test)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        img, lab = MNIST_FILES[split]
        write_idx(out / img, x[idx])
        write_idx(out / lab, y[idx])
    return True


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Full MNIST from $ADAPTSNN_MNIST_DIR (or ./data/mnist) when present,
    else the 5k-digit subset shipped with mlxtend."""
    for cand in (os.environ.get("ADAPTSNN_MNIST_DIR"), "data/mnist"):
        if cand and _has_mnist(Path(cand)):
            return Path(cand)
    out = tmp_path_factory.mktemp("mnist5k")
    if _subset_from_mlxtend(out):
        return out
    pytest.skip("no MNIST data available")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
