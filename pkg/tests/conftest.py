import numpy as np
import pytest

from compgrpo.corpus import Dataset, Example
from compgrpo.policy import ArchConfig, Vocab, init_policy

TOY_PAIRS = [
    ("jump twice", "JUMP JUMP"),
    ("walk and run", "WALK RUN"),
    ("look after turn left", "LTURN LOOK"),
    ("run thrice", "RUN RUN RUN"),
]


@pytest.fixture
def toy_dataset() -> Dataset:
    return Dataset(tuple(Example.from_text(s, t) for s, t in TOY_PAIRS), "toy")


@pytest.fixture
def toy_vocab(toy_dataset) -> Vocab:
    return Vocab.build(toy_dataset.source_vocab | toy_dataset.target_vocab)


@pytest.fixture
def toy_arch() -> ArchConfig:
    return ArchConfig(embedding_dim=4, hidden_dim=8, context_window=3, max_output_len=6, max_source_len=5)


@pytest.fixture
def perturbed_policy(toy_vocab, toy_arch):
    """A policy away from the zero-output initialization, so every gradient block is active."""
    params = init_policy(toy_vocab, toy_arch, seed=0)
    noise = np.random.default_rng(1).normal(0.0, 0.5, params.vector.size)
    return params.replace(params.vector + noise)
