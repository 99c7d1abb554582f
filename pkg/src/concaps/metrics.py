"""Caption quality and caption coherence metrics.

Quality metrics compare decoded captions against ground truth: corpus BLEU-4
with epsilon smoothing, mean ROUGE-L F-score, base CIDEr (n = 1..4 TF-IDF
cosine without the length penalty, so values stay in [0, 1]), and micro-
averaged named-entity precision/recall.

Coherence metrics score a document's caption set with a horizontal scorer
head taken from a model trained with only that mechanism's loss enabled: the
score is the mean raw pairwise logit over the document's image pairs.
Absolute values depend on the checkpoint and are only comparable between
caption sets scored with the same metric model.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .coherence import PairScorer
from .corpus import (
    BOS,
    EOS,
    Corpus,
    Document,
    EntityTagger,
    extract_context_window,
    tag_entities,
    tokenize,
)
from .encoders import FeatureBundle, FeatureStore
from .errors import ConfigError, ContractError, ValidationError
from .model import CaptionGenerator

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2


@dataclass(frozen=True)
class MetricReport:
    bleu4: float
    rouge_l: float
    cider: float
    ne_precision: float
    ne_recall: float
    hori_coh_1: Optional[float] = None
    hori_coh_2: Optional[float] = None

    def __post_init__(self):
        for name in ("bleu4", "rouge_l", "cider", "ne_precision", "ne_recall"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0 or not math.isfinite(value):
                raise ValidationError(f"{name} = {value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "cider": self.cider,
            "ne_precision": self.ne_precision,
            "ne_recall": self.ne_recall,
            "hori_coh_1": self.hori_coh_1,
            "hori_coh_2": self.hori_coh_2,
        }


def _check_paired(candidates, references):
    if len(candidates) != len(references):
        raise ContractError(
            f"{len(candidates)} candidates vs {len(references)} references"
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU-4
# ---------------------------------------------------------------------------


def bleu4(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
    eps: float = BLEU_EPS,
) -> float:
    """Corpus-level BLEU with clipped n-gram precision and brevity penalty.

    Zero n-gram matches are smoothed to eps (eps absolute when a precision
    denominator is empty), so degenerate candidates score near zero instead
    of raising.
    """
    _check_paired(candidates, references)
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cc = _ngrams(cand, n)
            rc = _ngrams(ref, n)
            totals[n - 1] += sum(cc.values())
            matches[n - 1] += sum(min(count, rc[gram]) for gram, count in cc.items())
    log_sum = 0.0
    for match, total in zip(matches, totals):
        if total == 0:
            p = eps
        elif match == 0:
            p = eps / total
        else:
            p = match / total
        log_sum += math.log(p)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / max_n)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    beta: float = ROUGE_BETA,
) -> float:
    """Mean per-pair LCS F-score with the standard recall-favoring beta."""
    _check_paired(candidates, references)
    if not candidates:
        return 0.0
    scores = []
    for cand, ref in zip(candidates, references):
        lcs = _lcs_length(cand, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        precision = lcs / len(cand)
        recall = lcs / len(ref)
        scores.append(
            (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
        )
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def compute_idf(references: Sequence[Sequence[str]], max_n: int = 4) -> dict:
    """log(N / document frequency) per n-gram over the reference corpus."""
    n_docs = len(references)
    df: Counter = Counter()
    for ref in references:
        seen = set()
        for n in range(1, max_n + 1):
            seen.update(_ngrams(ref, n).keys())
        df.update(seen)
    return {gram: math.log(n_docs / count) for gram, count in df.items()}


def cider(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    idf: Optional[dict] = None,
    max_n: int = 4,
) -> float:
    """Base CIDEr: mean over n of TF-IDF cosine similarity, averaged over pairs.

    IDF defaults to document frequencies over ``references``; n-grams unseen
    in the IDF corpus get weight 0.
    """
    _check_paired(candidates, references)
    if not candidates:
        return 0.0
    if idf is None:
        idf = compute_idf(references, max_n)
    scores = []
    for cand, ref in zip(candidates, references):
        per_n = []
        for n in range(1, max_n + 1):
            per_n.append(_tfidf_cosine(_ngrams(cand, n), _ngrams(ref, n), idf))
        scores.append(sum(per_n) / max_n)
    return sum(scores) / len(scores)


def _tfidf_cosine(cand_counts: Counter, ref_counts: Counter, idf: dict) -> float:
    cand_vec = {g: c * idf.get(g, 0.0) for g, c in cand_counts.items()}
    ref_vec = {g: c * idf.get(g, 0.0) for g, c in ref_counts.items()}
    dot = sum(w * ref_vec[g] for g, w in cand_vec.items() if g in ref_vec)
    cand_norm = math.sqrt(sum(w * w for w in cand_vec.values()))
    ref_norm = math.sqrt(sum(w * w for w in ref_vec.values()))
    if cand_norm == 0.0 or ref_norm == 0.0:
        return 0.0
    return dot / (cand_norm * ref_norm)


# ---------------------------------------------------------------------------
# Named-entity precision / recall
# ---------------------------------------------------------------------------


def ne_precision_recall(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    tagger: EntityTagger,
) -> tuple[float, float]:
    """Micro-averaged multiset overlap of entity surfaces.

    Pairs with no candidate entities are excluded from the precision
    denominator; pairs with no reference entities from the recall
    denominator.
    """
    _check_paired(candidates, references)
    p_num = p_den = r_num = r_den = 0
    for cand, ref in zip(candidates, references):
        cand_ents = Counter(s.surface for s in tag_entities(cand, tagger))
        ref_ents = Counter(s.surface for s in tag_entities(ref, tagger))
        overlap = sum((cand_ents & ref_ents).values())
        if cand_ents:
            p_num += overlap
            p_den += sum(cand_ents.values())
        if ref_ents:
            r_num += overlap
            r_den += sum(ref_ents.values())
    precision = p_num / p_den if p_den else 0.0
    recall = r_num / r_den if r_den else 0.0
    return precision, recall


# ---------------------------------------------------------------------------
# Horizontal coherence metrics
# ---------------------------------------------------------------------------


@dataclass
class CoherenceMetricModel:
    """A generator plus the horizontal scorer head it was trained with.

    ``trained_lambdas`` is the (gen, vert, hori1, hori2) weight tuple from
    the training run; variant 1 requires the hori1-only pattern and variant 2
    the hori2-only pattern.
    """

    model: CaptionGenerator
    scorer: PairScorer
    trained_lambdas: tuple[float, float, float, float]
    variant: int
    window_tokens: int = 512

    def __post_init__(self):
        gen, vert, h1, h2 = self.trained_lambdas
        if self.variant == 1:
            ok = gen == 0 and vert == 0 and h1 > 0 and h2 == 0
        elif self.variant == 2:
            ok = gen == 0 and vert == 0 and h1 == 0 and h2 > 0
        else:
            raise ConfigError(f"variant must be 1 or 2, got {self.variant}")
        if not ok:
            raise ConfigError(
                f"metric variant {self.variant} requires a model trained with only "
                f"the matching horizontal loss; checkpoint has lambdas {self.trained_lambdas}"
            )


def hori_coh_score(
    doc_captions: Sequence[tuple[Sequence[str], FeatureBundle]],
    metric_model: CoherenceMetricModel,
    *,
    pairs: str = "all",
    W: int = 3,
) -> Optional[float]:
    """Mean pairwise horizontal logit over one document's images.

    ``doc_captions`` lists (caption tokens without sentinels, bundle) in
    image order. ``pairs`` selects all intra-document pairs (default) or only
    pairs within the window W. Returns None for documents with fewer than
    two images (or no qualifying pair), which corpus averages skip.
    """
    if pairs not in ("all", "within-window"):
        raise ConfigError(f"pairs must be all|within-window, got {pairs!r}")
    if len(doc_captions) < 2:
        return None
    gen = metric_model.model
    gen.eval()
    with torch.no_grad():
        states = []
        for caption, bundle in doc_captions:
            output = gen.forward((BOS, *caption, EOS), bundle)
            states.append(output.end_state)
        logits = []
        for i in range(len(states)):
            for j in range(i + 1, len(states)):
                if pairs == "within-window" and j - i > W - 1:
                    continue
                pair_in = torch.cat([states[i], states[j]]).unsqueeze(0)
                logits.append(float(metric_model.scorer(pair_in)[0]))
    if not logits:
        return None
    return sum(logits) / len(logits)


def document_caption_bundles(
    doc: Document,
    generator: CaptionGenerator,
    store: FeatureStore,
    *,
    window_tokens: int = 512,
    captions: Optional[Sequence[Optional[Sequence[str]]]] = None,
) -> list[tuple[list[str], FeatureBundle]]:
    """(caption, bundle) per image of a document, in image order.

    ``captions`` substitutes alternative captions (decoded or scrambled) for
    the ground truth; a None entry skips that image.
    """
    if captions is not None and len(captions) != len(doc.images):
        raise ContractError(
            f"{len(captions)} captions for {len(doc.images)} images in doc {doc.doc_id!r}"
        )
    items = []
    for idx, img in enumerate(doc.images, start=1):
        caption = list(img.caption) if captions is None else captions[idx - 1]
        if caption is None:
            continue
        txt = extract_context_window(doc, idx, window_tokens)
        bundle = generator.build_bundle(txt, img.feature_key, store)
        items.append((list(caption), bundle))
    return items


def hori_coh_corpus(
    docs_items: Sequence[Sequence[tuple[Sequence[str], FeatureBundle]]],
    metric_model: CoherenceMetricModel,
    *,
    pairs: str = "all",
    W: int = 3,
) -> tuple[Optional[float], list[Optional[float]]]:
    """Mean coherence score over documents (skipping single-image ones)."""
    per_doc = [
        hori_coh_score(items, metric_model, pairs=pairs, W=W) for items in docs_items
    ]
    scored = [v for v in per_doc if v is not None]
    return (sum(scored) / len(scored) if scored else None), per_doc


def evaluate_captions(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    tagger: EntityTagger,
    *,
    hori_coh_1: Optional[float] = None,
    hori_coh_2: Optional[float] = None,
) -> MetricReport:
    """All bounded quality metrics for aligned candidate/reference captions."""
    precision, recall = ne_precision_recall(candidates, references, tagger)
    return MetricReport(
        bleu4=bleu4(candidates, references),
        rouge_l=rouge_l(candidates, references),
        cider=cider(candidates, references),
        ne_precision=precision,
        ne_recall=recall,
        hori_coh_1=hori_coh_1,
        hori_coh_2=hori_coh_2,
    )


def align_decoded(decoded_rows: Sequence[dict], corpus: Corpus) -> tuple[list, list]:
    """Match decoded rows to reference captions by (doc_id, image_id)."""
    refs = {
        (doc.doc_id, img.image_id): list(img.caption)
        for doc in corpus
        for img in doc.images
    }
    candidates, references = [], []
    for row in decoded_rows:
        key = (row["doc_id"], row["image_id"])
        if key not in refs:
            raise ValidationError(f"decoded row references unknown image {key}")
        candidates.append(tokenize(row["caption"]))
        references.append(refs[key])
    return candidates, references
