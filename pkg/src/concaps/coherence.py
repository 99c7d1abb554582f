"""Contrastive coherence losses.

Three mechanisms share one recipe: score decoder end states with a two-layer
MLP, push positives toward sigmoid(logit) = 1 and negatives toward 0 with
binary cross-entropy in the numerically stable log-sigmoid form.

  * vertical: a caption against its own image and context, contrasting the
    true caption with its entity-scrambled fake.
  * horizontal 1: adjacent same-document caption pairs as positives against
    true/fake pairs of the same images.
  * horizontal 2: the same positives against cross-document true/true pairs.

Items without a fake caption (captions with no entities) take part in the
generative loss, the horizontal positives, and the cross-document negatives,
but are skipped by the vertical loss and the true/fake negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch
from torch import nn
from torch.nn.functional import logsigmoid

from .errors import ConfigError, ContractError
from .sampler import Batch

LossLike = Union[float, torch.Tensor, Callable[[], Union[float, torch.Tensor]]]


class PairScorer(nn.Module):
    """Two-layer MLP mapping one or two concatenated end states to a logit.

    ``in_dim`` is d_model for the vertical head and 2 * d_model for the
    horizontal heads. The hidden width defaults to the reference 1024 but is
    configurable for toy models.
    """

    def __init__(self, in_dim: int, hidden: int = 1024):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        if states.shape[-1] != self.in_dim:
            raise ContractError(
                f"scorer expects inputs of width {self.in_dim}, got {states.shape[-1]}"
            )
        return self.net(states).squeeze(-1)


@dataclass(frozen=True)
class CoherenceConfig:
    """Loss combination weights and the adjacency window."""

    lambda_gen: float = 1.0
    lambda_vert: float = 0.01
    lambda_hori1: float = 0.01
    lambda_hori2: float = 0.1
    W: int = 3

    def __post_init__(self):
        for name in ("lambda_gen", "lambda_vert", "lambda_hori1", "lambda_hori2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.W < 1:
            raise ConfigError(f"W must be >= 1, got {self.W}")

    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.lambda_gen, self.lambda_vert, self.lambda_hori1, self.lambda_hori2)


@dataclass(frozen=True)
class PairSet:
    """Item-index pairs for the horizontal mechanisms.

    ``hori_pos``: canonical-order (i, j) true/true same-document pairs within
    the window. ``hori_neg1``: directed (i, j) meaning (True_i, Fake_j); both
    directions of each positive, minus directions whose fake is missing.
    ``hori_neg2``: canonical-order cross-document true/true pairs.
    """

    hori_pos: tuple[tuple[int, int], ...]
    hori_neg1: tuple[tuple[int, int], ...]
    hori_neg2: tuple[tuple[int, int], ...]


def enumerate_pairs(batch: Batch, W: int) -> PairSet:
    """All horizontal pairs of a batch by document/image-index predicates."""
    pos: list[tuple[int, int]] = []
    neg1: list[tuple[int, int]] = []
    neg2: list[tuple[int, int]] = []
    items = batch.items
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            a, b = items[i], items[j]
            if a.doc_index == b.doc_index:
                if abs(a.img_index - b.img_index) <= W - 1:
                    pos.append((i, j))
                    if b.fake_cap is not None:
                        neg1.append((i, j))
                    if a.fake_cap is not None:
                        neg1.append((j, i))
            else:
                neg2.append((i, j))
    return PairSet(tuple(pos), tuple(neg1), tuple(neg2))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _zero() -> torch.Tensor:
    return torch.zeros((), dtype=torch.get_default_dtype())


def vertical_loss(
    true_states: Sequence[torch.Tensor],
    fake_states: Sequence[Optional[torch.Tensor]],
    scorer: PairScorer,
) -> torch.Tensor:
    """Per-item true-vs-fake binary cross-entropy on scorer logits.

    Items whose fake state is None (no entities to scramble) contribute
    nothing.
    """
    if len(true_states) != len(fake_states):
        raise ContractError(
            f"{len(true_states)} true states vs {len(fake_states)} fake states"
        )
    pairs = [(t, f) for t, f in zip(true_states, fake_states) if f is not None]
    if not pairs:
        return _zero()
    true_logits = scorer(torch.stack([t for t, _ in pairs]))
    fake_logits = scorer(torch.stack([f for _, f in pairs]))
    return -(logsigmoid(true_logits) + logsigmoid(-fake_logits)).sum()


def _pair_bce(
    left: list[torch.Tensor],
    right: list[torch.Tensor],
    positive: bool,
    scorer: PairScorer,
) -> torch.Tensor:
    logits = scorer(torch.cat([torch.stack(left), torch.stack(right)], dim=-1))
    return -logsigmoid(logits if positive else -logits).sum()


def hori1_loss(
    true_states: Sequence[torch.Tensor],
    fake_states: Sequence[Optional[torch.Tensor]],
    pairs: PairSet,
    scorer: PairScorer,
) -> torch.Tensor:
    """Adjacent true/true positives vs true/fake negatives."""
    loss = _zero()
    if pairs.hori_pos:
        loss = loss + _pair_bce(
            [true_states[i] for i, _ in pairs.hori_pos],
            [true_states[j] for _, j in pairs.hori_pos],
            True,
            scorer,
        )
    if pairs.hori_neg1:
        for i, j in pairs.hori_neg1:
            if fake_states[j] is None:
                raise ContractError(f"negative pair ({i}, {j}) references a missing fake state")
        loss = loss + _pair_bce(
            [true_states[i] for i, _ in pairs.hori_neg1],
            [fake_states[j] for _, j in pairs.hori_neg1],
            False,
            scorer,
        )
    return loss


def hori2_loss(
    true_states: Sequence[torch.Tensor],
    pairs: PairSet,
    scorer: PairScorer,
) -> torch.Tensor:
    """Adjacent true/true positives vs cross-document true/true negatives."""
    loss = _zero()
    if pairs.hori_pos:
        loss = loss + _pair_bce(
            [true_states[i] for i, _ in pairs.hori_pos],
            [true_states[j] for _, j in pairs.hori_pos],
            True,
            scorer,
        )
    if pairs.hori_neg2:
        loss = loss + _pair_bce(
            [true_states[i] for i, _ in pairs.hori_neg2],
            [true_states[j] for _, j in pairs.hori_neg2],
            False,
            scorer,
        )
    return loss


def total_loss(
    gen: LossLike,
    vert: LossLike,
    h1: LossLike,
    h2: LossLike,
    cfg: CoherenceConfig,
) -> torch.Tensor:
    """Weighted combination of the four losses.

    Components may be passed as zero-argument callables; a component whose
    weight is 0 is never evaluated, so disabled mechanisms cost nothing and
    their scorers are never invoked.
    """
    total: Optional[torch.Tensor] = None
    for lam, component in zip(cfg.lambdas(), (gen, vert, h1, h2)):
        if lam == 0:
            continue
        value = component() if callable(component) else component
        if not isinstance(value, torch.Tensor):
            value = torch.as_tensor(float(value), dtype=torch.float64)
        term = value if lam == 1.0 else lam * value
        total = term if total is None else total + term
    return total if total is not None else _zero()
