import hashlib
import pathlib

import numpy as np
import pytest

from buffertta.backend import BACKEND
from buffertta.checkpoint import load_checkpoint, save_checkpoint
from buffertta.data import generate_source, images_labels
from buffertta.model import BackboneConfig, build_backbone, pretrain_source

CACHE_DIR = pathlib.Path(__file__).resolve().parent.parent / ".cache"

PRETRAIN = {
    "samples": 4096,
    "epochs": 4,
    "lr": 1e-3,
    "batch_size": 64,
    "seed": 7,
}
HOLDOUT = {"samples": 1024, "seed": 7_700_001}


def _cache_path():
    key = repr(sorted(PRETRAIN.items())) + BACKEND
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    return CACHE_DIR / f"pretrained_{digest}.btta"


@pytest.fixture(scope="session")
def pretrained_checkpoint():
    """Path to a pretrained source checkpoint, built once and cached on disk."""
    path = _cache_path()
    if not path.exists():
        CACHE_DIR.mkdir(exist_ok=True)
        dataset = generate_source(PRETRAIN["samples"], seed=PRETRAIN["seed"])
        model = build_backbone(BackboneConfig(), seed=PRETRAIN["seed"])
        pretrain_source(
            model,
            dataset,
            epochs=PRETRAIN["epochs"],
            lr=PRETRAIN["lr"],
            batch_size=PRETRAIN["batch_size"],
            seed=PRETRAIN["seed"],
        )
        tmp = path.with_suffix(".tmp")
        save_checkpoint(model, tmp)
        tmp.rename(path)
    return path


@pytest.fixture()
def pretrained_model(pretrained_checkpoint):
    """Fresh frozen model instance loaded from the cached checkpoint."""
    model, _ = load_checkpoint(pretrained_checkpoint)
    return model


@pytest.fixture(scope="session")
def holdout_data():
    """Standardization-ready holdout images/labels from a disjoint seed."""
    dataset = generate_source(HOLDOUT["samples"], seed=HOLDOUT["seed"])
    return images_labels(dataset)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
