import numpy as np
import pytest
import torch

from steerkit.corpus import collect_activations, default_concepts, plant_concept_corpus
from steerkit.toylm import ToyLMConfig, build_toy_lm

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def model():
    return build_toy_lm(ToyLMConfig(seed=1))


@pytest.fixture(scope="session")
def spec():
    return default_concepts()[0]


@pytest.fixture(scope="session")
def corpus(model, spec):
    return plant_concept_corpus(model, spec, seed=0)


@pytest.fixture(scope="session")
def train_acts(model, corpus):
    return collect_activations(model, corpus.train, 1)


@pytest.fixture(scope="session")
def eval_acts(model, corpus):
    return collect_activations(model, corpus.eval, 1, split="eval")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
