"""
Shared fixtures: a tiny configuration, a small synthetic dataset and a model built on it
"""
import pytest

from core import tensor as tc
from core.dataset_io import build_vocabulary
from core.dialogue_world import WorldSpec, generate_dataset
from core.model import SCGAModel
from core.settings import build_config

TINY = {
    "d": 16, "K": 4, "d_v": 8, "T": 3, "O": 3, "distances": [1, 2],
    "dropout": 0.0, "warmup": 20, "batch_size": 4, "epochs": 2, "seed": 3,
    "rounds": 4, "train_samples": 12, "eval_samples": 6, "decode_eval": False,
    "max_answer_len": 12,
}


def tiny_values(**overrides) -> dict:
    values = dict(TINY)
    values.update(overrides)
    return values


@pytest.fixture
def tiny_config():
    return build_config(tiny_values())


@pytest.fixture
def world_spec(tiny_config):
    return WorldSpec.from_config(tiny_config)


@pytest.fixture
def samples(world_spec):
    return generate_dataset(world_spec, 12, seed=11)


@pytest.fixture
def eval_samples(world_spec):
    return generate_dataset(world_spec, 6, seed=12)


@pytest.fixture
def vocab(samples, eval_samples):
    return build_vocabulary(samples + eval_samples)


@pytest.fixture
def model(tiny_config, vocab):
    return SCGAModel(tiny_config, vocab)


@pytest.fixture
def rng():
    return tc.make_rng(0)

