import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from dfkd import zoo
from dfkd.data import LabeledDataset


def _blob_image(rng, c, side=32):
    """Three linearly separable blob classes on a side x side canvas."""
    img = np.zeros((side, side))
    if c == 0:
        img[6:26, 13:19] = 1.0
    elif c == 1:
        img[13:19, 6:26] = 1.0
    else:
        img[8:24, 8:24] = np.eye(16)
    img += rng.normal(0.0, 0.08, (side, side))
    return np.clip(img, 0.0, 1.0)


def make_blob_dataset(n, seed=0, num_classes=3, name="blobs"):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    images = np.stack([_blob_image(rng, c)[None] for c in labels])
    return LabeledDataset(name, images, labels.astype(np.int64), num_classes=num_classes)


@pytest.fixture(scope="session")
def blob_train():
    return make_blob_dataset(600, seed=1)


@pytest.fixture(scope="session")
def blob_test():
    return make_blob_dataset(240, seed=2)


@pytest.fixture(scope="session")
def blob_teacher(blob_train, blob_test):
    """A small teacher trained to full accuracy on the blob task."""
    from dfkd.distill import train_teacher
    from dfkd.optim import SgdConfig

    model = zoo.build("lenet5", num_classes=3, seed=0)
    cfg = SgdConfig(learning_rate=0.05, momentum=0.9, batch_size=64, epochs=2,
                    lr_decay_factor=0.5, lr_decay_every=1)
    report = train_teacher(model, blob_train, blob_test, cfg)
    assert report.final_accuracy > 0.95
    return model


@pytest.fixture()
def tiny_net():
    """Small untrained net, cheap enough for finite-difference work."""
    return zoo.build("lenet5-half", num_classes=3, seed=7)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DFKD_DATA_DIR"):
        return
    skip = pytest.mark.skip(reason="DFKD_DATA_DIR not set; real image corpora unavailable")
    for item in items:
        if "mnist" in item.keywords:
            item.add_marker(skip)
