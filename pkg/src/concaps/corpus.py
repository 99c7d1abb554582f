"""Multi-image news corpus: loading, context windows, entity tagging, fake captions.

A corpus is a list of documents, each carrying an ordered list of images with
captions. The on-disk format is JSONL, one document per line:

    {"doc_id": ..., "split": "train|dev|test", "title": str, "body": str,
     "images": [{"image_id": ..., "position": int, "caption": str,
                 "feature_key": str}, ...]}

Text is tokenized by lowercasing and splitting on whitespace. Image positions
are token offsets into the body.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .errors import ParseError, ValidationError

# Reserved tokens; ids 0-3 everywhere a vocabulary is involved.
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
PAD = "<pad>"
RESERVED_TOKENS = (BOS, EOS, UNK, PAD)

SPLITS = ("train", "dev", "test")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace."""
    return text.lower().split()


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntitySpan:
    """A typed entity occupying caption tokens [start, end)."""

    start: int
    end: int
    etype: str
    surface: tuple[str, ...]

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValidationError(
                f"entity span must satisfy 0 <= start < end, got [{self.start}, {self.end})"
            )
        if len(self.surface) != self.end - self.start:
            raise ValidationError(
                f"surface length {len(self.surface)} != span width {self.end - self.start}"
            )


@dataclass(frozen=True)
class ImageRecord:
    """One image in a document: caption, body position, feature reference."""

    image_id: str
    position: int
    caption: tuple[str, ...]
    feature_key: str
    entities: tuple[EntitySpan, ...] = ()

    def __post_init__(self):
        _check_spans(self.entities, len(self.caption), where=f"image {self.image_id!r}")


@dataclass(frozen=True)
class Document:
    doc_id: str
    split: str
    title: tuple[str, ...]
    body: tuple[str, ...]
    images: tuple[ImageRecord, ...]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"doc {self.doc_id!r}: unknown split {self.split!r}")
        for img in self.images:
            if not 0 <= img.position <= len(self.body):
                raise ValidationError(
                    f"doc {self.doc_id!r}: image {img.image_id!r} position "
                    f"{img.position} out of range for body of {len(self.body)} tokens"
                )
        positions = [img.position for img in self.images]
        if positions != sorted(positions):
            raise ValidationError(f"doc {self.doc_id!r}: images not ordered by position")


Corpus = list[Document]


def _check_spans(spans: Sequence[EntitySpan], caption_len: int, where: str = "caption"):
    prev_end = 0
    for span in sorted(spans, key=lambda s: s.start):
        if span.start < prev_end:
            raise ValidationError(f"{where}: overlapping entity spans")
        if span.end > caption_len:
            raise ValidationError(f"{where}: entity span exceeds caption bounds")
        prev_end = span.end


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def load_corpus(path: str | Path) -> Corpus:
    """Read a JSONL corpus file.

    Images within a document are sorted by body position (ties keep file
    order), so the k-th image of a document has 1-based image index k.

    Raises ParseError naming the offending line for malformed records and
    ValidationError for duplicate doc_ids or out-of-range image positions.
    """
    path = Path(path)
    docs: Corpus = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                doc = _document_from_record(raw)
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                if isinstance(exc, ValidationError):
                    raise ValidationError(f"{path.name}:{lineno}: {exc}") from None
                raise ParseError(f"{path.name}:{lineno}: {exc}") from None
            if doc.doc_id in seen_ids:
                raise ValidationError(f"{path.name}:{lineno}: duplicate doc_id {doc.doc_id!r}")
            seen_ids.add(doc.doc_id)
            docs.append(doc)
    return docs


def _document_from_record(raw: Mapping) -> Document:
    images = []
    for item in raw["images"]:
        images.append(
            ImageRecord(
                image_id=str(item["image_id"]),
                position=int(item["position"]),
                caption=tuple(tokenize(item["caption"])),
                feature_key=str(item["feature_key"]),
            )
        )
    images.sort(key=lambda img: img.position)
    return Document(
        doc_id=str(raw["doc_id"]),
        split=str(raw["split"]),
        title=tuple(tokenize(raw["title"])),
        body=tuple(tokenize(raw["body"])),
        images=tuple(images),
    )


def document_to_record(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "split": doc.split,
        "title": detokenize(doc.title),
        "body": detokenize(doc.body),
        "images": [
            {
                "image_id": img.image_id,
                "position": img.position,
                "caption": detokenize(img.caption),
                "feature_key": img.feature_key,
            }
            for img in doc.images
        ],
    }


def write_corpus(corpus: Iterable[Document], path: str | Path) -> None:
    """Write documents as JSONL; inverse of load_corpus for canonical corpora."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for doc in corpus:
            fh.write(json.dumps(document_to_record(doc), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Context windows
# ---------------------------------------------------------------------------


def extract_context_window(doc: Document, img_index: int, window_tokens: int = 512) -> list[str]:
    """Body tokens surrounding an image: floor(w/2) before and ceil(w/2) after.

    The window shifts (never shrinks) at document boundaries; documents
    shorter than the window are returned whole. ``img_index`` is 1-based.
    """
    if window_tokens < 2:
        raise ValidationError(f"window_tokens must be >= 2, got {window_tokens}")
    if not 1 <= img_index <= len(doc.images):
        raise IndexError(
            f"img_index {img_index} out of range for doc {doc.doc_id!r} "
            f"with {len(doc.images)} images"
        )
    body = doc.body
    if len(body) <= window_tokens:
        return list(body)
    pos = doc.images[img_index - 1].position
    start = pos - window_tokens // 2
    end = pos + (window_tokens + 1) // 2
    if start < 0:
        start, end = 0, window_tokens
    elif end > len(body):
        start, end = len(body) - window_tokens, len(body)
    return list(body[start:end])


# ---------------------------------------------------------------------------
# Entity tagging
# ---------------------------------------------------------------------------


class EntityTagger(Protocol):
    """Anything that maps a token list to non-overlapping entity spans."""

    def tag(self, tokens: Sequence[str]) -> list[EntitySpan]: ...


class DictionaryTagger:
    """Deterministic tagger: greedy longest match against a surface dictionary.

    Surfaces are token tuples; at each caption position the longest matching
    dictionary entry wins and the scan resumes after it, so spans never
    overlap. Real NER systems can be plugged in through the same ``tag``
    interface.
    """

    def __init__(self, entries: Mapping[str, str] | Mapping[tuple[str, ...], str]):
        self._entries: dict[tuple[str, ...], str] = {}
        for surface, etype in entries.items():
            key = tuple(tokenize(surface)) if isinstance(surface, str) else tuple(surface)
            if not key:
                raise ValidationError("empty surface in entity dictionary")
            self._entries[key] = etype
        self._max_len = max((len(k) for k in self._entries), default=0)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "DictionaryTagger":
        """Load ``surface<TAB>etype`` lines."""
        entries: dict[str, str] = {}
        path = Path(path)
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                    raise ParseError(f"{path.name}:{lineno}: expected 'surface<TAB>etype'")
                entries[parts[0].strip()] = parts[1].strip()
        return cls(entries)

    def tag(self, tokens: Sequence[str]) -> list[EntitySpan]:
        spans: list[EntitySpan] = []
        i = 0
        n = len(tokens)
        while i < n:
            matched = None
            for width in range(min(self._max_len, n - i), 0, -1):
                candidate = tuple(tokens[i : i + width])
                etype = self._entries.get(candidate)
                if etype is not None:
                    matched = EntitySpan(i, i + width, etype, candidate)
                    break
            if matched is not None:
                spans.append(matched)
                i = matched.end
            else:
                i += 1
        return spans


def tag_entities(caption: Sequence[str], tagger: EntityTagger) -> list[EntitySpan]:
    """Tag a caption, validating the non-overlap invariant on the way out."""
    spans = tagger.tag(caption)
    _check_spans(spans, len(caption))
    return spans


def tag_corpus(corpus: Corpus, tagger: EntityTagger) -> Corpus:
    """New corpus with every image's entities filled in."""
    tagged = []
    for doc in corpus:
        images = tuple(
            replace(img, entities=tuple(tag_entities(img.caption, tagger)))
            for img in doc.images
        )
        tagged.append(replace(doc, images=images))
    return tagged


# ---------------------------------------------------------------------------
# Entity pool and fake captions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntityPool:
    """Distinct entity surfaces per type, collected over the training split."""

    surfaces: Mapping[str, tuple[tuple[str, ...], ...]]

    def get(self, etype: str) -> tuple[tuple[str, ...], ...]:
        return self.surfaces.get(etype, ())


def build_entity_pool(corpus: Corpus, tagger: EntityTagger) -> EntityPool:
    """Collect distinct caption entity surfaces per type from train-split docs."""
    by_type: dict[str, dict[tuple[str, ...], None]] = {}
    for doc in corpus:
        if doc.split != "train":
            continue
        for img in doc.images:
            for span in tag_entities(img.caption, tagger):
                by_type.setdefault(span.etype, {})[span.surface] = None
    return EntityPool({etype: tuple(seen) for etype, seen in by_type.items()})


def make_fake_caption(
    caption: Sequence[str],
    entities: Sequence[EntitySpan],
    pool: EntityPool,
    rng: random.Random,
) -> tuple[list[str], list[EntitySpan]] | None:
    """Replace each entity with a random same-typed surface from the pool.

    Each span is redrawn uniformly from its type's pool until the draw
    differs from the original, up to 10 tries; a span whose type has no
    alternative surface is left unchanged. Returns None (the no-fake marker)
    for captions without entities, which contrastive losses then skip.
    Spans are re-indexed to account for replacement length changes.
    """
    if not entities:
        return None
    ordered = sorted(entities, key=lambda s: s.start)
    out_tokens: list[str] = []
    out_spans: list[EntitySpan] = []
    cursor = 0
    for span in ordered:
        out_tokens.extend(caption[cursor : span.start])
        replacement = span.surface
        candidates = pool.get(span.etype)
        if any(surface != span.surface for surface in candidates):
            for _ in range(10):
                drawn = candidates[rng.randrange(len(candidates))]
                if drawn != span.surface:
                    replacement = drawn
                    break
        new_start = len(out_tokens)
        out_tokens.extend(replacement)
        out_spans.append(EntitySpan(new_start, len(out_tokens), span.etype, replacement))
        cursor = span.end
    out_tokens.extend(caption[cursor:])
    return out_tokens, out_spans


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    n_docs: int
    n_images: int
    images_per_doc: float
    avg_doc_len: float
    avg_cap_len: float
    pct_captions_with_entities: float
    pos_tag_percentages: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_docs": self.n_docs,
            "n_images": self.n_images,
            "images_per_doc": self.images_per_doc,
            "avg_doc_len": self.avg_doc_len,
            "avg_cap_len": self.avg_cap_len,
            "pct_captions_with_entities": self.pct_captions_with_entities,
            "pos_tag_percentages": dict(sorted(self.pos_tag_percentages.items())),
        }


def corpus_stats(corpus: Corpus, tagger: EntityTagger) -> CorpusStats:
    """Corpus-level summary: density, lengths, entity coverage per tag."""
    if not corpus:
        raise ValidationError("corpus_stats requires a non-empty corpus")
    n_docs = len(corpus)
    n_images = sum(len(doc.images) for doc in corpus)
    total_body = sum(len(doc.body) for doc in corpus)
    total_cap_tokens = 0
    captions_with_entities = 0
    tokens_by_tag: Counter[str] = Counter()
    for doc in corpus:
        for img in doc.images:
            total_cap_tokens += len(img.caption)
            spans = tag_entities(img.caption, tagger)
            if spans:
                captions_with_entities += 1
            for span in spans:
                tokens_by_tag[span.etype] += span.end - span.start
    pct_by_tag = {
        etype: 100.0 * count / total_cap_tokens if total_cap_tokens else 0.0
        for etype, count in tokens_by_tag.items()
    }
    return CorpusStats(
        n_docs=n_docs,
        n_images=n_images,
        images_per_doc=n_images / n_docs,
        avg_doc_len=total_body / n_docs,
        avg_cap_len=total_cap_tokens / n_images if n_images else 0.0,
        pct_captions_with_entities=(
            100.0 * captions_with_entities / n_images if n_images else 0.0
        ),
        pos_tag_percentages=pct_by_tag,
    )
