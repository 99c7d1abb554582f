"""Training batch construction.

An epoch repeatedly draws a random unexhausted document and moves up to W of
its images (always consecutive, resuming where the previous draw stopped)
into the current batch, emitting the batch whenever it reaches batch_size.
Groups that would overflow a batch are truncated, with the remainder staying
in the document for its next selection, so every image is consumed exactly
once per epoch.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .corpus import (
    BOS,
    EOS,
    Corpus,
    EntityPool,
    EntityTagger,
    extract_context_window,
    make_fake_caption,
    tag_entities,
)
from .errors import ValidationError


@dataclass(frozen=True)
class BatchItem:
    """One image-text training sample (the per-image six-tuple)."""

    img_features: str  # feature store key
    txt: tuple[str, ...]  # context window tokens
    true_cap: tuple[str, ...]  # <s> ... </s>
    fake_cap: Optional[tuple[str, ...]]  # <s> ... </s>, or None when no entities
    doc_index: int
    img_index: int  # 1-based position of the image in its document
    doc_id: str = ""
    image_id: str = ""


@dataclass(frozen=True)
class Batch:
    items: tuple[BatchItem, ...]
    # item indices per selection group; each group is <= W consecutive images
    groups: tuple[tuple[int, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.items)


def build_epoch_batches(
    corpus: Corpus,
    tagger: EntityTagger,
    pool: EntityPool,
    *,
    batch_size: int = 15,
    W: int = 3,
    window_tokens: int = 512,
    rng: random.Random,
) -> list[Batch]:
    """One epoch of batches covering every image exactly once.

    A trailing partial batch is kept only if it has at least 2 items
    (a single item can form no coherence pair). Fake captions are drawn
    from ``pool`` with the same ``rng`` that drives document selection,
    so the whole epoch is a pure function of (corpus, parameters, seed).
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if W < 1:
        raise ValidationError(f"W must be >= 1, got {W}")
    if sum(len(doc.images) for doc in corpus) == 0:
        raise ValidationError("corpus has no images to batch")

    next_image = {di: 0 for di, doc in enumerate(corpus) if doc.images}
    active = sorted(next_image)
    batches: list[Batch] = []
    items: list[BatchItem] = []
    groups: list[tuple[int, ...]] = []

    while active:
        doc_index = active[rng.randrange(len(active))]
        doc = corpus[doc_index]
        start = next_image[doc_index]
        space = batch_size - len(items)
        take = min(W, len(doc.images) - start, space)
        group = []
        for offset in range(start, start + take):
            group.append(len(items))
            items.append(
                _make_item(corpus, doc_index, offset, tagger, pool, window_tokens, rng)
            )
        groups.append(tuple(group))
        next_image[doc_index] += take
        if next_image[doc_index] == len(doc.images):
            active.remove(doc_index)
        if len(items) == batch_size:
            batches.append(Batch(tuple(items), tuple(groups)))
            items, groups = [], []

    if len(items) >= 2:
        batches.append(Batch(tuple(items), tuple(groups)))
    return batches


def _make_item(
    corpus: Corpus,
    doc_index: int,
    image_offset: int,
    tagger: EntityTagger,
    pool: EntityPool,
    window_tokens: int,
    rng: random.Random,
) -> BatchItem:
    doc = corpus[doc_index]
    img = doc.images[image_offset]
    img_index = image_offset + 1
    txt = tuple(extract_context_window(doc, img_index, window_tokens))
    spans = img.entities or tag_entities(img.caption, tagger)
    fake = make_fake_caption(img.caption, spans, pool, rng)
    return BatchItem(
        img_features=img.feature_key,
        txt=txt,
        true_cap=(BOS, *img.caption, EOS),
        fake_cap=None if fake is None else (BOS, *fake[0], EOS),
        doc_index=doc_index,
        img_index=img_index,
        doc_id=doc.doc_id,
        image_id=img.image_id,
    )
