#!/usr/bin/env python3
"""True-vs-scrambled coherence study on a synthetic corpus.

Trains the two coherence metric models (hori1-only and hori2-only loss),
then scores each held-out document's true caption set against entity-
scrambled variants and prints per-metric win rates. Mirrors the acceptance
experiment; expect roughly 15 minutes on a laptop CPU at default settings.
"""

import argparse
import random
from pathlib import Path

from concaps.coherence import CoherenceConfig
from concaps.corpus import (
    DictionaryTagger,
    build_entity_pool,
    load_corpus,
    make_fake_caption,
    tag_entities,
)
from concaps.encoders import EncoderConfig, FeatureStore
from concaps.metrics import document_caption_bundles, hori_coh_score
from concaps.model import ModelConfig
from concaps.synth import SynthConfig, generate_to_dir
from concaps.training import TrainConfig, load_metric_model, train


def scrambled_captions(doc, tagger, pool, rng):
    captions = []
    for img in doc.images:
        spans = tag_entities(img.caption, tagger)
        fake = make_fake_caption(img.caption, spans, pool, rng)
        captions.append(list(img.caption) if fake is None else fake[0])
    return captions


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("coherence_study"))
    parser.add_argument("--docs", type=int, default=110)
    parser.add_argument("--corpus-seed", type=int, default=7)
    parser.add_argument("--train-seed", type=int, default=3)
    parser.add_argument("--steps-hori1", type=int, default=600)
    parser.add_argument("--steps-hori2", type=int, default=3000)
    parser.add_argument("--scrambles", type=int, default=3)
    args = parser.parse_args()

    paths = generate_to_dir(
        SynthConfig(
            n_docs=args.docs, images_per_doc=3.0, seed=args.corpus_seed,
            split_fractions=(0.65, 0.0, 0.35),
        ),
        args.out / "data",
    )
    corpus = load_corpus(paths["corpus"])
    tagger = DictionaryTagger.from_tsv(paths["entities"])
    store = FeatureStore(paths["features"])
    pool = build_entity_pool(corpus, tagger)
    held_out = [d for d in corpus if d.split == "test" and len(d.images) >= 2]
    print(f"{len(held_out)} held-out documents")

    base = dict(
        model=ModelConfig(d_model=64, d_ff=256, n_heads=4, max_len=32),
        encoder=EncoderConfig(), scorer_hidden=128,
        batch_size=12, window_tokens=64, peak_lr=1e-3, seed=args.train_seed,
    )
    for variant, steps, lam in (
        (1, args.steps_hori1, dict(lambda_gen=0, lambda_vert=0, lambda_hori1=1, lambda_hori2=0)),
        (2, args.steps_hori2, dict(lambda_gen=0, lambda_vert=0, lambda_hori1=0, lambda_hori2=1)),
    ):
        cfg = TrainConfig(coherence=CoherenceConfig(**lam), total_steps=steps, **base)
        print(f"training metric model {variant} ({steps} steps)...")
        train(cfg, corpus, tagger, store, args.out / f"metric{variant}")
        mm = load_metric_model(args.out / f"metric{variant}" / "checkpoint.pt", variant)

        rng = random.Random(99)
        wins = 0
        for doc in held_out:
            true_items = document_caption_bundles(doc, mm.model, store, window_tokens=64)
            true_score = hori_coh_score(true_items, mm)
            scrambled = []
            for _ in range(args.scrambles):
                items = document_caption_bundles(
                    doc, mm.model, store, window_tokens=64,
                    captions=scrambled_captions(doc, tagger, pool, rng),
                )
                scrambled.append(hori_coh_score(items, mm))
            wins += true_score > sum(scrambled) / len(scrambled)
        print(
            f"HoriCohScore{variant}: true beats scrambled on "
            f"{wins}/{len(held_out)} documents ({100 * wins / len(held_out):.1f}%)"
        )


if __name__ == "__main__":
    main()
