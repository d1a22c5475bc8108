import os

import numpy as np
import pytest

from slatlab import data as data_mod

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".digit_cache")

MNIST_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@pytest.fixture(scope="session")
def digit_corpus():
    """IDX paths for the image experiments: real MNIST when SLATLAB_MNIST_DIR
    points at the ubyte files, otherwise a cached rendered digit corpus."""
    mnist_dir = os.environ.get("SLATLAB_MNIST_DIR")
    if mnist_dir:
        paths = {k: os.path.join(mnist_dir, v) for k, v in MNIST_NAMES.items()}
        if all(os.path.exists(p) for p in paths.values()):
            return {"source": "mnist", **paths}
    os.makedirs(CACHE_DIR, exist_ok=True)
    paths = {k: os.path.join(CACHE_DIR, f"{k}.idx") for k in MNIST_NAMES}
    if not all(os.path.exists(p) for p in paths.values()):
        tr_x, tr_y = data_mod.render_digit_corpus(10_000, seed=100)
        te_x, te_y = data_mod.render_digit_corpus(2_000, seed=200)
        data_mod.write_idx_images(tr_x, paths["train_images"])
        data_mod.write_idx_labels(tr_y, paths["train_labels"])
        data_mod.write_idx_images(te_x, paths["test_images"])
        data_mod.write_idx_labels(te_y, paths["test_labels"])
    return {"source": "rendered", **paths}
