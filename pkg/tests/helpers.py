"""Test utilities: finite-difference oracles, micro models, scripted scorers."""

from __future__ import annotations

import random

import torch
from torch import nn

from concaps.coherence import CoherenceConfig
from concaps.corpus import Document, ImageRecord
from concaps.encoders import EncoderConfig, FeatureStore
from concaps.model import ModelConfig, Vocab
from concaps.training import CoherentCaptioner, TrainConfig


def finite_difference_grads(params, loss_fn, h: float = 1e-5):
    """Central finite differences of loss_fn w.r.t. every parameter entry.

    Perturbs parameters in place (restoring them afterwards), so loss_fn must
    read the live parameter tensors. Everything should run in float64.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat, gflat = p.data.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(loss_fn())
                flat[i] = orig - h
                minus = float(loss_fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * h)
            grads.append(grad)
    return grads


def max_relative_error(analytic, numeric) -> float:
    """max over coordinates of |a - n| / max(1, |a|, |n|)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1.0)
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


class ScriptedScorer(nn.Module):
    """Pair-scorer stand-in computing an arbitrary scripted function."""

    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.fn(states)


def constant_scorer(value: float) -> ScriptedScorer:
    return ScriptedScorer(lambda s: torch.full(s.shape[:-1], float(value), dtype=s.dtype))


def dot_scorer(weights: torch.Tensor) -> ScriptedScorer:
    return ScriptedScorer(lambda s: s @ weights.to(s.dtype))


# ---------------------------------------------------------------------------
# Micro corpus + model (for gradient checks; everything tiny and float64)
# ---------------------------------------------------------------------------

MICRO_WORDS = ["red", "blue", "bird", "rock", "sky", "sun"]


def micro_corpus() -> list[Document]:
    docs = []
    for d, ((w1, w2), n_images) in enumerate(((("red", "bird"), 2), (("blue", "rock"), 1))):
        images = []
        body = tuple(f"{w1} {w2} sun sky {w1} sky".split())
        for k in range(n_images):
            images.append(
                ImageRecord(
                    image_id=f"img{k}",
                    position=min(3 * k, len(body)),
                    caption=(w1, w2, "sky") if k == 0 else (w1, "sun", w2),
                    feature_key=f"micro{d}/{k}",
                )
            )
        docs.append(
            Document(
                doc_id=f"micro{d}",
                split="train",
                title=(w1,),
                body=body,
                images=tuple(images),
            )
        )
    return docs


def micro_store(tmp_path) -> FeatureStore:
    import numpy as np

    rng = np.random.default_rng(0)
    store = FeatureStore.create(tmp_path / "micro_features")
    for d in range(2):
        for k in range(2):
            arrays = (
                np.zeros((0, 0), dtype=np.float32),
                rng.standard_normal((2, 3)).astype(np.float32),
                rng.standard_normal((1, 2)).astype(np.float32),
                rng.standard_normal((1, 3)).astype(np.float32),
            )
            store.write(f"micro{d}/{k}", arrays)
    store.save_manifest()
    return store


def micro_train_config(**coherence_overrides) -> TrainConfig:
    return TrainConfig(
        model=ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=8, max_len=12),
        encoder=EncoderConfig(
            d_t=4, d_i=4, d_f=4, d_o=4, n_text_layers=1, n_text_heads=1,
            raw_d_i=3, raw_d_f=2, raw_d_o=3, max_text_len=32,
        ),
        coherence=CoherenceConfig(**coherence_overrides) if coherence_overrides else CoherenceConfig(),
        scorer_hidden=4,
        batch_size=3,
        window_tokens=6,
        total_steps=2,
    )


def micro_module(tmp_path, seed: int = 0, **coherence_overrides):
    """Double-precision micro model plus its corpus, store, and one batch."""
    from concaps.corpus import DictionaryTagger, build_entity_pool
    from concaps.sampler import build_epoch_batches

    torch.manual_seed(seed)
    corpus = micro_corpus()
    store = micro_store(tmp_path)
    tagger = DictionaryTagger(
        {"red": "COLOR", "blue": "COLOR", "bird": "THING", "rock": "THING"}
    )
    pool = build_entity_pool(corpus, tagger)
    cfg = micro_train_config(**coherence_overrides)
    vocab = Vocab.from_corpus(corpus)
    module = CoherentCaptioner(cfg, vocab).double()
    batch = build_epoch_batches(
        corpus, tagger, pool, batch_size=3, W=3, window_tokens=6, rng=random.Random(1)
    )[0]
    # the gradient oracles need at least one of every pair kind in the batch
    from concaps.coherence import enumerate_pairs

    pairs = enumerate_pairs(batch, cfg.coherence.W)
    assert pairs.hori_pos and pairs.hori_neg1 and pairs.hori_neg2
    return module, batch, store
