"""Shared fixtures: a tiny model config and corpus for fast structural tests."""

import pytest

from cifconf.data import CorpusSpec, generate_corpus
from cifconf.model import ModelConfig


TINY_MODEL = dict(
    vocab_size=10,
    model_dim=16,
    encoder_layers=1,
    decoder_layers=1,
    estimator_layers=1,
    heads=2,
    dropout=0.1,
    max_frames=64,
    feature_dim=6,
    ffn_dim=32,
)

TINY_CORPUS = dict(
    vocab_size=10,
    frames_per_token=(2, 3),
    feature_dim=6,
    prototype_seed=7,
    noise_sigma=0.1,
    utt_len=(3, 6),
)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(CorpusSpec(n_utts=24, **TINY_CORPUS), seed=11)
