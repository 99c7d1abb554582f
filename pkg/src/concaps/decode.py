"""Two-level beam search.

Level one is word-level beam search per image, producing C candidate
captions scored by length-normalized log-probability, each then rescored
with the vertical coherence head. Level two is caption-level beam search
over the C^W candidate combinations for the images of one window, scoring a
sequence by the mean single-caption score plus the mean pairwise horizontal
logit of its members.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import torch

from .coherence import PairScorer
from .corpus import BOS, EOS, Document, extract_context_window
from .encoders import FeatureBundle, FeatureStore
from .errors import ContractError, ValidationError
from .model import CaptionGenerator, Vocab
from .sampler import Batch


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 3
    C: Optional[int] = None  # candidates kept per image; defaults to beam_size
    max_len: Optional[int] = None  # defaults to the model's max_len
    W: int = 3
    gen_weight: float = 1.0
    vert_weight: float = 1.0
    hori_weight: float = 1.0
    hori_head: str = "hori1"  # which horizontal scorer ranks combinations

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValidationError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.hori_head not in ("hori1", "hori2"):
            raise ValidationError(f"hori_head must be hori1|hori2, got {self.hori_head!r}")

    def candidates(self) -> int:
        return self.C if self.C is not None else self.beam_size


@dataclass(frozen=True)
class CaptionHypothesis:
    """A finished candidate caption with its decoding scores."""

    tokens: tuple[str, ...]  # <s> ... </s>
    gen_score: float  # mean log-probability per generated token
    vert_score: float = 0.0
    single_score: float = 0.0
    end_state: Optional[torch.Tensor] = field(default=None, compare=False)


@dataclass(frozen=True)
class CaptionSequence:
    """Captions chosen so far for a window of images."""

    chosen: tuple[CaptionHypothesis, ...]
    seq_score: float
    hori_score: float = 0.0


# ---------------------------------------------------------------------------
# Level one: word-level beam search
# ---------------------------------------------------------------------------


def word_beam_search(
    bundle: FeatureBundle,
    model: CaptionGenerator,
    *,
    beam_size: int = 3,
    C: Optional[int] = None,
    max_len: Optional[int] = None,
) -> list[CaptionHypothesis]:
    """Top-C finished captions by length-normalized log-probability.

    Expansion starts from <s>; every token except <s> and <pad> may be
    generated. Beams that reach max_len - 1 tokens are forced to terminate
    with </s> (whose log-probability still counts). Ties are broken by
    lexicographic token-id order, making the search fully deterministic.
    """
    want = C if C is not None else beam_size
    limit = max_len if max_len is not None else model.cfg.max_len
    if limit < 2:
        raise ValidationError(f"max_len must allow at least <s> </s>, got {limit}")
    vocab = model.vocab
    banned = (Vocab.bos_id, Vocab.pad_id)
    candidates_ids = [i for i in range(model.cfg.vocab_size) if i not in banned]

    memory = model.memory_from_bundle(bundle).unsqueeze(0)
    active: list[tuple[tuple[int, ...], float]] = [((Vocab.bos_id,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []

    with torch.no_grad():
        while active:
            ids_batch = torch.tensor([ids for ids, _ in active], dtype=torch.long)
            mem = memory.expand(len(active), -1, -1)
            _, logits = model.forward_batch(ids_batch, mem, None)
            logp = torch.log_softmax(logits[:, -1, :], dim=-1)
            length = len(active[0][0])
            force_eos = length == limit - 1
            expansions: list[tuple[tuple[int, ...], float]] = []
            for row, (ids, score) in enumerate(active):
                step_ids = (Vocab.eos_id,) if force_eos else candidates_ids
                for tok in step_ids:
                    expansions.append((ids + (tok,), score + float(logp[row, tok])))
            finished.extend(e for e in expansions if e[0][-1] == Vocab.eos_id)
            ongoing = [e for e in expansions if e[0][-1] != Vocab.eos_id]
            ongoing.sort(key=lambda e: (-e[1], e[0]))
            active = ongoing[:beam_size]

    finished.sort(key=lambda e: (-(e[1] / (len(e[0]) - 1)), e[0]))
    if len(finished) < want:
        warnings.warn(
            f"word_beam_search found only {len(finished)} finished hypotheses "
            f"of the requested {want}",
            stacklevel=2,
        )
    hyps = []
    for ids, score in finished[:want]:
        gen = score / (len(ids) - 1)
        hyps.append(
            CaptionHypothesis(
                tokens=tuple(vocab.decode(ids)),
                gen_score=gen,
                vert_score=0.0,
                single_score=gen,
            )
        )
    return hyps


def vert_rescore(
    hyp: CaptionHypothesis,
    bundle: FeatureBundle,
    model: CaptionGenerator,
    vert_scorer: PairScorer,
    *,
    gen_weight: float = 1.0,
    vert_weight: float = 1.0,
) -> CaptionHypothesis:
    """Attach the vertical coherence logit and recompute the single score."""
    with torch.no_grad():
        output = model.forward(hyp.tokens, bundle)
        if output.end_state is None:
            raise ContractError("hypothesis is not </s>-terminated")
        vert = float(vert_scorer(output.end_state.unsqueeze(0))[0])
    return replace(
        hyp,
        vert_score=vert,
        single_score=gen_weight * hyp.gen_score + vert_weight * vert,
        end_state=output.end_state.detach(),
    )


# ---------------------------------------------------------------------------
# Level two: caption-level beam search
# ---------------------------------------------------------------------------


def caption_beam_search(
    per_image: Sequence[Sequence[CaptionHypothesis]],
    hori_scorer: PairScorer,
    *,
    beam_size: int = 3,
    hori_weight: float = 1.0,
) -> CaptionSequence:
    """Best caption combination for a window of images.

    Sequences grow image by image; a sequence's score is the mean of its
    members' single scores plus the mean pairwise horizontal logit over all
    unordered member pairs in image order (0 while the sequence has fewer
    than two members). Candidates must already carry end states from
    vert_rescore whenever the window holds more than one image.
    """
    for i, cands in enumerate(per_image):
        if not cands:
            raise ContractError(f"image {i} has no candidate captions")

    beam: list[tuple[tuple[CaptionHypothesis, ...], float, float]] = [((), 0.0, 0.0)]
    with torch.no_grad():
        for candidates in per_image:
            grown: list[tuple[tuple[CaptionHypothesis, ...], float, float]] = []
            for chosen, _, pair_logit_sum in beam:
                for hyp in candidates:
                    new_sum = pair_logit_sum
                    for prev in chosen:
                        if prev.end_state is None or hyp.end_state is None:
                            raise ContractError(
                                "caption-level search needs vert_rescore'd candidates"
                            )
                        pair_in = torch.cat([prev.end_state, hyp.end_state]).unsqueeze(0)
                        new_sum += float(hori_scorer(pair_in)[0])
                    members = chosen + (hyp,)
                    n_pairs = len(members) * (len(members) - 1) // 2
                    hori = new_sum / n_pairs if n_pairs else 0.0
                    avg_single = sum(m.single_score for m in members) / len(members)
                    grown.append((members, avg_single + hori_weight * hori, new_sum))
            grown.sort(key=lambda e: (-e[1], tuple(m.tokens for m in e[0])))
            beam = grown[:beam_size]

    chosen, seq_score, pair_logit_sum = beam[0]
    n_pairs = len(chosen) * (len(chosen) - 1) // 2
    return CaptionSequence(
        chosen=chosen,
        seq_score=seq_score,
        hori_score=pair_logit_sum / n_pairs if n_pairs else 0.0,
    )


# ---------------------------------------------------------------------------
# Document / corpus decoding
# ---------------------------------------------------------------------------


def decode_document(
    doc: Document,
    model: CaptionGenerator,
    vert_scorer: PairScorer,
    hori_scorer: PairScorer,
    store: FeatureStore,
    cfg: DecodeConfig,
    *,
    window_tokens: int = 512,
) -> list[dict]:
    """Decode one document window by window; one output row per image."""
    model.eval()
    rows: list[dict] = []
    images = list(doc.images)
    for chunk_start in range(0, len(images), cfg.W):
        chunk = images[chunk_start : chunk_start + cfg.W]
        per_image = []
        for offset, img in enumerate(chunk):
            img_index = chunk_start + offset + 1
            txt = extract_context_window(doc, img_index, window_tokens)
            bundle = model.build_bundle(txt, img.feature_key, store)
            hyps = word_beam_search(
                bundle, model, beam_size=cfg.beam_size, C=cfg.candidates(), max_len=cfg.max_len
            )
            per_image.append(
                [
                    vert_rescore(
                        h,
                        bundle,
                        model,
                        vert_scorer,
                        gen_weight=cfg.gen_weight,
                        vert_weight=cfg.vert_weight,
                    )
                    for h in hyps
                ]
            )
        sequence = caption_beam_search(
            per_image, hori_scorer, beam_size=cfg.beam_size, hori_weight=cfg.hori_weight
        )
        for img, hyp in zip(chunk, sequence.chosen):
            rows.append(
                {
                    "doc_id": doc.doc_id,
                    "image_id": img.image_id,
                    "caption": " ".join(strip_sentinels(hyp.tokens)),
                    "gen_score": hyp.gen_score,
                    "vert_score": hyp.vert_score,
                    "seq_score": sequence.seq_score,
                }
            )
    return rows


def strip_sentinels(tokens: Sequence[str]) -> list[str]:
    return [t for t in tokens if t not in (BOS, EOS)]


def write_decoded(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def load_decoded(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
