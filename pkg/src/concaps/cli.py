"""Command-line surface.

Subcommands: build-corpus, stats, train, generate, evaluate, cohscore.
All outputs are UTF-8 JSON or JSONL; failures print a machine-readable
error object to stderr and exit nonzero. Training configuration comes from
a JSON (or TOML, Python 3.11+) file whose values individual flags override;
the CONCAPS_SEED environment variable overrides every other seed source.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .corpus import (
    DictionaryTagger,
    build_entity_pool,
    corpus_stats,
    load_corpus,
    make_fake_caption,
    tag_entities,
)
from .decode import DecodeConfig, decode_document, load_decoded, write_decoded
from .encoders import FeatureStore
from .errors import ConcapsError, ConfigError
from .metrics import (
    align_decoded,
    document_caption_bundles,
    evaluate_captions,
    hori_coh_corpus,
)
from .synth import SynthConfig, generate_to_dir
from .training import TrainConfig, corpus_hash, load_checkpoint, load_metric_model, train

SEED_ENV = "CONCAPS_SEED"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConcapsError, FileNotFoundError, KeyError) as exc:
        message = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(
            json.dumps({"error": {"type": type(exc).__name__, "message": message}}),
            file=sys.stderr,
        )
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="concaps",
        description="Coherent entity-aware multi-image captioning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-corpus", help="generate a synthetic corpus + feature store")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--docs", type=int, default=100)
    p.add_argument("--images-per-doc", type=float, default=4.45)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-fractions", default="0.7,0.15,0.15")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("stats", help="corpus statistics as JSON")
    p.add_argument("--corpus", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a captioning model")
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--corpus")
    p.add_argument("--entities")
    p.add_argument("--features")
    p.add_argument("--out-dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--window-tokens", type=int)
    p.add_argument("--lambda-gen", type=float)
    p.add_argument("--lambda-vert", type=float)
    p.add_argument("--lambda-hori1", type=float)
    p.add_argument("--lambda-hori2", type=float)
    p.add_argument("--W", type=int, dest="window_w")
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--scorer-hidden", type=int)
    p.add_argument("--encoder-mode", choices=["toy", "cached"])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode captions with two-level beam search")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test", "all"])
    p.add_argument("--W", type=int, default=3, dest="window_w")
    p.add_argument("--beam-size", type=int, default=3)
    p.add_argument("--C", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--hori-head", default="hori1", choices=["hori1", "hori2"])
    p.add_argument("--gen-weight", type=float, default=1.0)
    p.add_argument("--vert-weight", type=float, default=1.0)
    p.add_argument("--hori-weight", type=float, default=1.0)
    p.add_argument("--window-tokens", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="caption quality metrics for decoded output")
    p.add_argument("--decoded", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--out")
    p.add_argument("--hori1-checkpoint")
    p.add_argument("--hori2-checkpoint")
    p.add_argument("--features")
    p.add_argument("--pairs", default="all", choices=["all", "within-window"])
    p.add_argument("--W", type=int, default=3, dest="window_w")
    p.add_argument("--window-tokens", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cohscore", help="horizontal coherence scores for caption sets")
    p.add_argument("--corpus", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--metric1", help="checkpoint trained with only the hori1 loss")
    p.add_argument("--metric2", help="checkpoint trained with only the hori2 loss")
    p.add_argument(
        "--captions", default="true", choices=["true", "decoded", "scrambled"]
    )
    p.add_argument("--decoded", help="decoded JSONL (with --captions decoded)")
    p.add_argument("--entities", help="entity dictionary (with --captions scrambled)")
    p.add_argument("--scramble-seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "dev", "test", "all"])
    p.add_argument("--pairs", default="all", choices=["all", "within-window"])
    p.add_argument("--W", type=int, default=3, dest="window_w")
    p.add_argument("--window-tokens", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cohscore)

    return parser


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _split_docs(corpus, split: str):
    return corpus if split == "all" else [d for d in corpus if d.split == split]


def cmd_build_corpus(args) -> int:
    fractions = tuple(float(x) for x in args.split_fractions.split(","))
    if len(fractions) != 3:
        raise ConfigError("--split-fractions needs three comma-separated values")
    cfg = SynthConfig(
        n_docs=args.docs,
        images_per_doc=args.images_per_doc,
        seed=args.seed,
        split_fractions=fractions,
    )
    paths = generate_to_dir(cfg, args.out_dir)
    _emit(
        {
            "corpus": str(paths["corpus"]),
            "entities": str(paths["entities"]),
            "features": str(paths["features"]),
            "n_docs": cfg.n_docs,
        },
        None,
    )
    return 0


def cmd_stats(args) -> int:
    corpus = load_corpus(args.corpus)
    tagger = DictionaryTagger.from_tsv(args.entities)
    stats = corpus_stats(corpus, tagger)
    _emit(stats.to_dict(), args.out)
    return 0


def _load_run_config(args) -> tuple[dict, TrainConfig]:
    file_cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError as exc:
                raise ConfigError("TOML configs need Python 3.11+; use JSON") from exc
            file_cfg = tomllib.loads(path.read_text(encoding="utf-8"))
        else:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))

    train_dict = dict(file_cfg.get("train", {}))
    train_dict.setdefault("model", {})
    train_dict.setdefault("encoder", {})
    train_dict.setdefault("coherence", {})

    def override(section: str | None, key: str, value):
        if value is None:
            return
        if section is None:
            train_dict[key] = value
        else:
            train_dict[section] = dict(train_dict[section])
            train_dict[section][key] = value

    override(None, "total_steps", args.steps)
    override(None, "seed", args.seed)
    override(None, "batch_size", args.batch_size)
    override(None, "peak_lr", args.peak_lr)
    override(None, "window_tokens", args.window_tokens)
    override(None, "scorer_hidden", args.scorer_hidden)
    override(None, "checkpoint_every", args.checkpoint_every)
    override("coherence", "lambda_gen", args.lambda_gen)
    override("coherence", "lambda_vert", args.lambda_vert)
    override("coherence", "lambda_hori1", args.lambda_hori1)
    override("coherence", "lambda_hori2", args.lambda_hori2)
    override("coherence", "W", args.window_w)
    override("model", "d_model", args.d_model)
    override("model", "n_layers", args.n_layers)
    override("model", "n_heads", args.n_heads)
    override("model", "d_ff", args.d_ff)
    override("model", "max_len", args.max_len)
    override("encoder", "mode", args.encoder_mode)
    if os.environ.get(SEED_ENV):
        train_dict["seed"] = int(os.environ[SEED_ENV])
    return file_cfg, TrainConfig.from_dict(train_dict)


def cmd_train(args) -> int:
    file_cfg, train_cfg = _load_run_config(args)
    corpus_path = args.corpus or file_cfg.get("corpus")
    entities_path = args.entities or file_cfg.get("entities")
    features_path = args.features or file_cfg.get("features")
    out_dir = args.out_dir or file_cfg.get("out_dir")
    for name, value in (
        ("corpus", corpus_path),
        ("entities", entities_path),
        ("features", features_path),
        ("out-dir", out_dir),
    ):
        if not value:
            raise ConfigError(f"--{name} missing (flag or config file)")

    corpus = load_corpus(corpus_path)
    tagger = DictionaryTagger.from_tsv(entities_path)
    store = FeatureStore(features_path)
    module, manifest = train(
        train_cfg, corpus, tagger, store, out_dir, log_every=args.log_every
    )
    final = manifest.steps[-1] if manifest.steps else {}
    _emit(
        {
            "checkpoint": str(Path(out_dir) / "checkpoint.pt"),
            "manifest": str(Path(out_dir) / "manifest.json"),
            "steps": len(manifest.steps),
            "final_total_loss": final.get("total"),
        },
        None,
    )
    return 0


def cmd_generate(args) -> int:
    module = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    store = FeatureStore(args.features)
    window_tokens = args.window_tokens or module.train_cfg.window_tokens
    cfg = DecodeConfig(
        beam_size=args.beam_size,
        C=args.C,
        max_len=args.max_len,
        W=args.window_w,
        gen_weight=args.gen_weight,
        vert_weight=args.vert_weight,
        hori_weight=args.hori_weight,
        hori_head=args.hori_head,
    )
    rows = []
    for doc in _split_docs(corpus, args.split):
        rows.extend(
            decode_document(
                doc,
                module.generator,
                module.vert_scorer,
                module.scorer_for(cfg.hori_head),
                store,
                cfg,
                window_tokens=window_tokens,
            )
        )
    write_decoded(rows, args.out)
    _emit({"out": args.out, "n_rows": len(rows)}, None)
    return 0


def cmd_evaluate(args) -> int:
    decoded = load_decoded(args.decoded)
    corpus = load_corpus(args.corpus)
    tagger = DictionaryTagger.from_tsv(args.entities)
    candidates, references = align_decoded(decoded, corpus)

    hori_scores = {1: None, 2: None}
    for variant, ckpt in ((1, args.hori1_checkpoint), (2, args.hori2_checkpoint)):
        if not ckpt:
            continue
        if not args.features:
            raise ConfigError("--features is required to compute coherence scores")
        metric_model = load_metric_model(ckpt, variant)
        store = FeatureStore(args.features)
        window_tokens = args.window_tokens or metric_model.window_tokens
        docs_items = _decoded_doc_items(decoded, corpus, metric_model, store, window_tokens)
        mean, _ = hori_coh_corpus(
            docs_items, metric_model, pairs=args.pairs, W=args.window_w
        )
        hori_scores[variant] = mean

    report = evaluate_captions(
        candidates,
        references,
        tagger,
        hori_coh_1=hori_scores[1],
        hori_coh_2=hori_scores[2],
    )
    payload = {
        "corpus": {
            "file": Path(args.corpus).name,
            "hash": corpus_hash(corpus),
            "n_docs": len(corpus),
            "n_images": sum(len(d.images) for d in corpus),
        },
        "n_scored": len(candidates),
        "metrics": report.to_dict(),
    }
    _emit(payload, args.out)
    return 0


def _decoded_doc_items(decoded, corpus, metric_model, store, window_tokens):
    by_image = {(r["doc_id"], r["image_id"]): r["caption"] for r in decoded}
    docs_items = []
    for doc in corpus:
        captions = []
        hit = False
        for img in doc.images:
            caption = by_image.get((doc.doc_id, img.image_id))
            if caption is None:
                captions.append(None)
            else:
                captions.append(caption.split())
                hit = True
        if hit:
            docs_items.append(
                document_caption_bundles(
                    doc,
                    metric_model.model,
                    store,
                    window_tokens=window_tokens,
                    captions=captions,
                )
            )
    return docs_items


def cmd_cohscore(args) -> int:
    if not args.metric1 and not args.metric2:
        raise ConfigError("at least one of --metric1/--metric2 is required")
    corpus = load_corpus(args.corpus)
    docs = _split_docs(corpus, args.split)
    store = FeatureStore(args.features)
    decoded = load_decoded(args.decoded) if args.captions == "decoded" else None
    if args.captions == "decoded" and decoded is None:
        raise ConfigError("--decoded is required with --captions decoded")

    scramble = None
    if args.captions == "scrambled":
        if not args.entities:
            raise ConfigError("--entities is required with --captions scrambled")
        import random

        tagger = DictionaryTagger.from_tsv(args.entities)
        pool = build_entity_pool(corpus, tagger)
        scramble = (tagger, pool, random.Random(args.scramble_seed))

    payload: dict = {"captions": args.captions, "split": args.split, "scores": {}}
    for variant, ckpt in ((1, args.metric1), (2, args.metric2)):
        if not ckpt:
            continue
        metric_model = load_metric_model(ckpt, variant)
        window_tokens = args.window_tokens or metric_model.window_tokens
        docs_items = []
        doc_ids = []
        for doc in docs:
            captions = _caption_set(doc, args.captions, decoded, scramble)
            items = document_caption_bundles(
                doc,
                metric_model.model,
                store,
                window_tokens=window_tokens,
                captions=captions,
            )
            docs_items.append(items)
            doc_ids.append(doc.doc_id)
        mean, per_doc = hori_coh_corpus(
            docs_items, metric_model, pairs=args.pairs, W=args.window_w
        )
        payload["scores"][f"hori_coh_{variant}"] = {
            "mean": mean,
            "per_doc": [
                {"doc_id": doc_id, "score": score}
                for doc_id, score in zip(doc_ids, per_doc)
            ],
        }
    _emit(payload, args.out)
    return 0


def _caption_set(doc, source: str, decoded, scramble):
    if source == "true":
        return None
    if source == "decoded":
        by_image = {(r["doc_id"], r["image_id"]): r["caption"] for r in decoded}
        return [
            (cap.split() if cap is not None else None)
            for cap in (by_image.get((doc.doc_id, img.image_id)) for img in doc.images)
        ]
    tagger, pool, rng = scramble
    captions = []
    for img in doc.images:
        spans = tag_entities(img.caption, tagger)
        fake = make_fake_caption(img.caption, spans, pool, rng)
        captions.append(list(img.caption) if fake is None else fake[0])
    return captions


if __name__ == "__main__":
    sys.exit(main())
