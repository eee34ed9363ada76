import numpy as np
import pytest

from mtsm.config import build_model_config, preset
from mtsm.data_pipeline import synth_scene
from mtsm.transformer import CaptionModel


def tiny_config(**overrides):
    fields, _ = preset("tiny")
    fields.update(vocab_size=12)
    fields.update(overrides)
    return build_model_config(**fields)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def model(config):
    return CaptionModel(config, seed=0)


@pytest.fixture
def scene():
    det, _ = synth_scene(3, num_objects=3, d_feat=32, image_id="scene-3")
    return det


@pytest.fixture
def make_config():
    """Factory for tiny configs with overrides."""
    return tiny_config
