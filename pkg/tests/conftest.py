import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import pytest

from maskstrike.detector import (
    DetectorConfig,
    TrainConfig,
    load_mini_detector,
    save_mini_detector,
    train_mini_detector,
)
from maskstrike.scenedata import DatasetConfig, class_names, generate_dataset

CACHE_DIR = Path(__file__).parent / ".cache"

# bump when training internals change in ways the config hash cannot see
_CACHE_TAG = "t1"

TRAIN_DATA = DatasetConfig(n_scenes=1600, seed=100)
HELDOUT_DATA = DatasetConfig(n_scenes=100, seed=200)


@pytest.fixture(scope="session")
def class_vocab():
    return class_names() + ["background"]


@pytest.fixture(scope="session")
def detector_path(class_vocab):
    """Weights file for the shared test detector; trained once and cached on
    disk so repeated test runs skip the ~80s training."""
    CACHE_DIR.mkdir(exist_ok=True)
    key = hashlib.sha256(json.dumps([
        _CACHE_TAG,
        asdict(DetectorConfig()),
        asdict(TrainConfig()),
        asdict(TRAIN_DATA),
    ], sort_keys=True, default=str).encode()).hexdigest()[:12]
    path = CACHE_DIR / f"detector_{key}.pt"
    if not path.exists():
        scenes = generate_dataset(TRAIN_DATA)
        det = train_mini_detector(scenes, class_vocab)
        save_mini_detector(det, path,
                           metadata={"train_scenes": TRAIN_DATA.n_scenes})
    return path


@pytest.fixture(scope="session")
def trained_detector(detector_path):
    return load_mini_detector(detector_path)


@pytest.fixture(scope="session")
def heldout_scenes():
    return generate_dataset(HELDOUT_DATA)
