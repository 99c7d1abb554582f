"""Shared fixtures: a small generated corpus with features, and toy models."""

from __future__ import annotations

import random

import pytest
import torch

from concaps.coherence import CoherenceConfig
from concaps.corpus import DictionaryTagger, build_entity_pool, load_corpus
from concaps.encoders import EncoderConfig, FeatureStore
from concaps.model import ModelConfig, Vocab
from concaps.sampler import build_epoch_batches
from concaps.synth import SynthConfig, generate_to_dir
from concaps.training import CoherentCaptioner, TrainConfig


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_to_dir(SynthConfig(n_docs=12, images_per_doc=3.0, seed=11), out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    return load_corpus(corpus_dir / "corpus.jsonl")


@pytest.fixture(scope="session")
def tagger(corpus_dir):
    return DictionaryTagger.from_tsv(corpus_dir / "entities.tsv")


@pytest.fixture(scope="session")
def pool(corpus, tagger):
    return build_entity_pool(corpus, tagger)


@pytest.fixture(scope="session")
def store(corpus_dir):
    return FeatureStore(corpus_dir / "features")


@pytest.fixture()
def batches(corpus, tagger, pool):
    return build_epoch_batches(
        corpus, tagger, pool, batch_size=6, W=3, window_tokens=64, rng=random.Random(0)
    )


def tiny_train_config(**overrides) -> TrainConfig:
    """Small-but-real model configuration for unit tests."""
    defaults = dict(
        model=ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_len=32),
        encoder=EncoderConfig(d_t=8, d_i=8, d_f=8, d_o=8, n_text_layers=2, max_text_len=128),
        coherence=CoherenceConfig(),
        scorer_hidden=16,
        batch_size=6,
        window_tokens=64,
        total_steps=5,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture()
def tiny_module(corpus):
    torch.manual_seed(0)
    return CoherentCaptioner(tiny_train_config(), Vocab.from_corpus(corpus))


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
