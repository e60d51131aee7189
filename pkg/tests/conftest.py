from pathlib import Path

import numpy as np
import pytest

from tiny_nodule_detector.detector import ModelConfig, NoduleDetector

PROFILES_DIR = Path(__file__).resolve().parent.parent / "profiles"


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_config():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_model(tiny_config):
    return NoduleDetector(tiny_config, seed=3)


@pytest.fixture
def profiles_dir():
    return PROFILES_DIR
