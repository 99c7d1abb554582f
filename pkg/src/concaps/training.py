"""Training loop, optimizer schedule, checkpointing, and run manifests.

Optimization follows the reference recipe: Adam (beta1 0.9, beta2 0.999,
eps 1e-6) with the learning rate warmed up linearly over the first 5% of
steps to the peak (default 1e-4) and decayed linearly to zero afterwards,
plus global-norm gradient clipping at 1.0 to keep toy runs stable.

Every run is a pure function of (config, corpus, seed): the sampler, fake
captions, and parameter init all derive from the run seed, and the manifest
records per-step loss components so replays can be compared bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn

from .coherence import (
    CoherenceConfig,
    PairScorer,
    enumerate_pairs,
    hori1_loss,
    hori2_loss,
    total_loss,
    vertical_loss,
)
from .corpus import (
    Corpus,
    EntityPool,
    EntityTagger,
    build_entity_pool,
    document_to_record,
)
from .encoders import EncoderConfig, FeatureStore
from .errors import ConfigError, FormatError, TrainingError, ValidationError
from .metrics import CoherenceMetricModel
from .model import (
    CaptionGenerator,
    ModelConfig,
    Vocab,
    generative_loss,
    pack_captions,
    pack_memories,
)
from .sampler import Batch, build_epoch_batches

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    coherence: CoherenceConfig = field(default_factory=CoherenceConfig)
    scorer_hidden: int = 1024
    batch_size: int = 15
    window_tokens: int = 512
    total_steps: int = 200
    warmup_frac: float = 0.05
    peak_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in (0, 1), got {self.warmup_frac}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        for key, sub_cls in (
            ("model", ModelConfig),
            ("encoder", EncoderConfig),
            ("coherence", CoherenceConfig),
        ):
            if key in data and isinstance(data[key], dict):
                data[key] = sub_cls(**data[key])
        return cls(**data)


def lr_at(step: int, total_steps: int, warmup_frac: float, peak_lr: float) -> float:
    """Piecewise-linear schedule; hits exactly peak_lr at the warmup boundary
    and 0 at the final step. ``step`` is 1-based."""
    warmup = max(1, round(warmup_frac * total_steps))
    if step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


class CoherentCaptioner(nn.Module):
    """Caption generator plus the three coherence scorer heads."""

    def __init__(self, cfg: TrainConfig, vocab: Vocab):
        super().__init__()
        self.train_cfg = cfg
        self.generator = CaptionGenerator(cfg.model, cfg.encoder, vocab)
        d = self.generator.cfg.d_model
        self.vert_scorer = PairScorer(d, cfg.scorer_hidden)
        self.hori1_scorer = PairScorer(2 * d, cfg.scorer_hidden)
        self.hori2_scorer = PairScorer(2 * d, cfg.scorer_hidden)

    def scorer_for(self, head: str) -> PairScorer:
        if head == "hori1":
            return self.hori1_scorer
        if head == "hori2":
            return self.hori2_scorer
        raise ConfigError(f"unknown horizontal head {head!r}")


@dataclass
class BatchLosses:
    total: torch.Tensor
    gen: float
    vert: float
    hori1: float
    hori2: float
    n_tokens: int
    n_correct: int


def compute_batch_losses(
    module: CoherentCaptioner, batch: Batch, store: FeatureStore
) -> BatchLosses:
    """All loss components for one batch, skipping disabled mechanisms.

    The true captions are decoded once; their logits feed the generative
    loss and their end states feed every active coherence loss. Fake
    captions are decoded (against the same per-item memories) only when the
    vertical or first horizontal mechanism is on.
    """
    gen = module.generator
    coh = module.train_cfg.coherence
    items = batch.items
    lam_gen, lam_vert, lam_h1, lam_h2 = coh.lambdas()
    need_states = lam_vert > 0 or lam_h1 > 0 or lam_h2 > 0
    need_fakes = lam_vert > 0 or lam_h1 > 0

    memories = [
        gen.memory_from_bundle(gen.build_bundle(item.txt, item.img_features, store))
        for item in items
    ]
    memory, mem_pad = pack_memories(memories)
    true_ids = [gen.vocab.encode(item.true_cap) for item in items]
    cap = pack_captions(true_ids)
    states, logits = gen.forward_batch(cap, memory, mem_pad)

    gen_component: torch.Tensor | float = 0.0
    n_tokens = n_correct = 0
    if lam_gen > 0:
        targets = cap[:, 1:]
        target_mask = targets != Vocab.pad_id
        loss = generative_loss(logits[:, :-1, :], targets, target_mask)
        gen_component = loss.total
        n_tokens = loss.n_tokens
        with torch.no_grad():
            predicted = logits[:, :-1, :].argmax(dim=-1)
            n_correct = int(((predicted == targets) & target_mask).sum())

    vert_component: torch.Tensor | float = 0.0
    h1_component: torch.Tensor | float = 0.0
    h2_component: torch.Tensor | float = 0.0
    if need_states:
        true_end = [_end_state_at(states[i], cap[i]) for i in range(len(items))]
        fake_end: list[Optional[torch.Tensor]] = [None] * len(items)
        if need_fakes:
            fake_rows = [i for i, item in enumerate(items) if item.fake_cap is not None]
            if fake_rows:
                fake_ids = [gen.vocab.encode(items[i].fake_cap) for i in fake_rows]
                fcap = pack_captions(fake_ids)
                fmem, fpad = pack_memories([memories[i] for i in fake_rows])
                fstates, _ = gen.forward_batch(fcap, fmem, fpad)
                for row, i in enumerate(fake_rows):
                    fake_end[i] = _end_state_at(fstates[row], fcap[row])
        pairs = enumerate_pairs(batch, coh.W)
        if lam_vert > 0:
            vert_component = vertical_loss(true_end, fake_end, module.vert_scorer)
        if lam_h1 > 0:
            h1_component = hori1_loss(true_end, fake_end, pairs, module.hori1_scorer)
        if lam_h2 > 0:
            h2_component = hori2_loss(true_end, pairs, module.hori2_scorer)

    total = total_loss(gen_component, vert_component, h1_component, h2_component, coh)

    def as_float(value) -> float:
        return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)

    return BatchLosses(
        total=total,
        gen=as_float(gen_component),
        vert=as_float(vert_component),
        hori1=as_float(h1_component),
        hori2=as_float(h2_component),
        n_tokens=n_tokens,
        n_correct=n_correct,
    )


def _end_state_at(states: torch.Tensor, cap_ids: torch.Tensor) -> torch.Tensor:
    eos_positions = (cap_ids == Vocab.eos_id).nonzero(as_tuple=True)[0]
    if eos_positions.numel() == 0:
        raise ValidationError("caption without </s> reached the loss computation")
    return states[int(eos_positions[0])]


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    corpus_hash: str
    seed: int
    steps: list[dict] = field(default_factory=list)
    wall_clock_sec: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "corpus_hash": self.corpus_hash,
            "seed": self.seed,
            "steps": self.steps,
            "wall_clock_sec": self.wall_clock_sec,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()


def corpus_hash(corpus: Corpus) -> str:
    digest = hashlib.sha256()
    for doc in corpus:
        digest.update(json.dumps(document_to_record(doc), ensure_ascii=False).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    cfg: TrainConfig,
    corpus: Corpus,
    tagger: EntityTagger,
    store: FeatureStore,
    out_dir: str | Path,
    *,
    pool: Optional[EntityPool] = None,
    log_every: int = 0,
) -> tuple[CoherentCaptioner, RunManifest]:
    """Train a model from scratch; returns the module and its manifest.

    Writes ``checkpoint.pt`` and ``manifest.json`` into ``out_dir`` (plus
    ``checkpoint_step*.pt`` at the configured cadence). A non-finite loss
    aborts with a diagnostic dump of the offending batch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)

    train_docs = [d for d in corpus if d.split == "train"]
    if not train_docs:
        raise ValidationError("corpus has no train-split documents")
    vocab = Vocab.from_corpus(corpus)
    if pool is None:
        pool = build_entity_pool(corpus, tagger)
    module = CoherentCaptioner(cfg, vocab)
    module.train()
    optimizer = torch.optim.Adam(
        module.parameters(),
        lr=cfg.peak_lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )

    manifest = RunManifest(
        config_hash=config_hash(cfg), corpus_hash=corpus_hash(corpus), seed=cfg.seed
    )
    started = time.perf_counter()
    step = 0
    batches: list[Batch] = []
    cursor = 0
    while step < cfg.total_steps:
        if cursor >= len(batches):
            batches = build_epoch_batches(
                train_docs,
                tagger,
                pool,
                batch_size=cfg.batch_size,
                W=cfg.coherence.W,
                window_tokens=cfg.window_tokens,
                rng=rng,
            )
            cursor = 0
        batch = batches[cursor]
        cursor += 1
        step += 1

        lr = lr_at(step, cfg.total_steps, cfg.warmup_frac, cfg.peak_lr)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        losses = compute_batch_losses(module, batch, store)
        if not torch.isfinite(losses.total):
            _dump_bad_batch(out_dir, step, batch, losses)
            raise TrainingError(
                f"non-finite loss at step {step}; batch dumped to "
                f"{out_dir / 'diverged_batch.json'}"
            )
        # a batch can contribute nothing to the active losses (e.g. no
        # qualifying pairs); it still consumes a schedule step
        if losses.total.requires_grad:
            losses.total.backward()
            if cfg.grad_clip > 0:
                nn.utils.clip_grad_norm_(module.parameters(), cfg.grad_clip)
            optimizer.step()

        lam = cfg.coherence.lambdas()
        manifest.steps.append(
            {
                "step": step,
                "lr": lr,
                "gen": losses.gen,
                "vert": losses.vert,
                "hori1": losses.hori1,
                "hori2": losses.hori2,
                # recombined in float64 so the manifest invariant holds exactly
                "total": lam[0] * losses.gen + lam[1] * losses.vert
                + lam[2] * losses.hori1 + lam[3] * losses.hori2,
            }
        )
        if log_every and step % log_every == 0:
            print(
                f"step {step}/{cfg.total_steps} lr {lr:.2e} total {float(losses.total.detach()):.4f}"
            )
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_step{step}.pt", module)

    manifest.wall_clock_sec = time.perf_counter() - started
    save_checkpoint(out_dir / "checkpoint.pt", module)
    manifest.save(out_dir / "manifest.json")
    return module, manifest


def _dump_bad_batch(out_dir: Path, step: int, batch: Batch, losses: BatchLosses) -> None:
    payload = {
        "step": step,
        "components": {
            "gen": losses.gen,
            "vert": losses.vert,
            "hori1": losses.hori1,
            "hori2": losses.hori2,
        },
        "items": [
            {
                "doc_id": item.doc_id,
                "image_id": item.image_id,
                "doc_index": item.doc_index,
                "img_index": item.img_index,
                "true_cap": list(item.true_cap),
                "fake_cap": list(item.fake_cap) if item.fake_cap else None,
            }
            for item in batch.items
        ],
    }
    (out_dir / "diverged_batch.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, module: CoherentCaptioner) -> None:
    """Atomic save: write to a temp file in the target directory, then rename."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": module.train_cfg.to_dict(),
        "vocab": module.generator.vocab.to_list(),
        "state": module.state_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> CoherentCaptioner:
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path.name}: unsupported checkpoint version")
    cfg = TrainConfig.from_dict(payload["config"])
    vocab = Vocab(payload["vocab"])
    module = CoherentCaptioner(cfg, vocab)
    module.load_state_dict(payload["state"])
    module.eval()
    return module


def load_metric_model(path: str | Path, variant: int) -> CoherenceMetricModel:
    """Open a checkpoint as a coherence metric model, checking its lambdas."""
    module = load_checkpoint(path)
    scorer = module.hori1_scorer if variant == 1 else module.hori2_scorer
    return CoherenceMetricModel(
        model=module.generator,
        scorer=scorer,
        trained_lambdas=module.train_cfg.coherence.lambdas(),
        variant=variant,
        window_tokens=module.train_cfg.window_tokens,
    )


def teacher_forced_accuracy(
    module: CoherentCaptioner, batches: Sequence[Batch], store: FeatureStore
) -> float:
    """Fraction of non-pad next tokens predicted correctly (greedy)."""
    gen = module.generator
    total = correct = 0
    was_training = module.training
    module.eval()
    with torch.no_grad():
        for batch in batches:
            memories = [
                gen.memory_from_bundle(gen.build_bundle(it.txt, it.img_features, store))
                for it in batch.items
            ]
            memory, mem_pad = pack_memories(memories)
            cap = pack_captions([gen.vocab.encode(it.true_cap) for it in batch.items])
            _, logits = gen.forward_batch(cap, memory, mem_pad)
            targets = cap[:, 1:]
            mask = targets != Vocab.pad_id
            predicted = logits[:, :-1, :].argmax(dim=-1)
            correct += int(((predicted == targets) & mask).sum())
            total += int(mask.sum())
    if was_training:
        module.train()
    return correct / total if total else 0.0
