"""Synthetic desk-scale corpus generator.

Produces multi-image documents shaped for coherence learning: every caption
names entities, adjacent captions of a document share the same
craft/person/place topic (so horizontal coherence is learnable), and each
image's surrounding body text mentions the topic entities (so vertical
coherence is learnable).

Entity signature vectors are deterministic functions of the surface string,
so the image streams are informative and reproducible across runs. This
generated data is the test and demo substrate; it makes no attempt to mimic
any real news corpus beyond those structural properties.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, Document, ImageRecord, tokenize, write_corpus
from .encoders import FeatureStore
from .errors import ConfigError

PERSONS = ("anna", "romeo", "diana", "felix", "marco", "leila", "oscar", "petra")
PLACES = ("paris", "tokyo", "cairo", "oslo", "quito", "dakar", "new york", "bern")
ORGS = ("nasa", "esa", "unesco", "interpol", "fifa", "nato")
CRAFTS = ("juno", "voyager", "falcon", "aurora", "titan", "comet")
NOUNS = (
    "spacecraft", "probe", "rocket", "telescope", "satellite", "panels",
    "engine", "antenna",
)

FILLER = (
    "crews worked through the night as reporters waited for updates and officials "
    "described the careful schedule while engineers checked every system again"
).split()

def default_entity_dictionary() -> dict[str, str]:
    entries: dict[str, str] = {}
    entries.update({name: "PERSON" for name in PERSONS})
    entries.update({place: "GPE" for place in PLACES})
    entries.update({org: "ORG" for org in ORGS})
    entries.update({craft: "PRODUCT" for craft in CRAFTS})
    entries.update({noun: "NOUN" for noun in NOUNS})
    return entries


def write_entity_dictionary(path: str | Path) -> None:
    lines = [f"{surface}\t{etype}" for surface, etype in default_entity_dictionary().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SynthConfig:
    n_docs: int = 100
    images_per_doc: float = 4.45  # expected images per document
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    max_images: int = 10
    patches: int = 8
    raw_d_i: int = 16
    raw_d_f: int = 8
    raw_d_o: int = 16

    def __post_init__(self):
        if self.n_docs < 1:
            raise ConfigError("n_docs must be >= 1")
        if not 1.0 <= self.images_per_doc <= self.max_images:
            raise ConfigError(
                f"images_per_doc must be in [1, {self.max_images}], got {self.images_per_doc}"
            )
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")


def _sample_n_images(mean: float, rng: random.Random, max_images: int) -> int:
    # base + Bernoulli(frac) has expectation exactly `mean`; the +-1 jitter
    # is symmetric and only applied where clipping cannot bias it.
    base = int(mean)
    n = base + (1 if rng.random() < mean - base else 0)
    if 2 <= n <= max_images - 1:
        n += rng.choice((-1, 0, 0, 1))
    return n


def _signature(surface: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(f"sig:{surface}".encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim).astype(np.float32)


_CAPTION_TEMPLATES = (
    "the {craft} {noun1} of {org} lifted toward {place}",
    "{person} watched the {craft} {noun1} above {place}",
    "the {noun2} of the {craft} {noun1} unfolded near {place}",
    "{org} said {person} guided the {craft} {noun1}",
    "another view of the {craft} {noun1} over {place}",
)

# which templates mention the person (and therefore get a face feature row)
_TEMPLATES_WITH_PERSON = (1, 3)


def generate_corpus(cfg: SynthConfig) -> tuple[Corpus, dict[str, tuple[np.ndarray, ...]]]:
    """Build documents plus the raw feature arrays keyed by feature_key."""
    rng = random.Random(cfg.seed)
    docs: list[Document] = []
    features: dict[str, tuple[np.ndarray, ...]] = {}
    n_train = round(cfg.split_fractions[0] * cfg.n_docs)
    n_dev = round(cfg.split_fractions[1] * cfg.n_docs)

    for d in range(cfg.n_docs):
        topic = {
            "person": rng.choice(PERSONS),
            "place": rng.choice(PLACES),
            "org": rng.choice(ORGS),
            "craft": rng.choice(CRAFTS),
            "noun1": rng.choice(NOUNS),
        }
        topic["noun2"] = rng.choice([n for n in NOUNS if n != topic["noun1"]])
        n_images = _sample_n_images(cfg.images_per_doc, rng, cfg.max_images)
        split = "train" if d < n_train else ("dev" if d < n_train + n_dev else "test")
        doc_id = f"doc{d:04d}"

        body_tokens: list[str] = []
        images: list[ImageRecord] = []
        for k in range(n_images):
            template_idx = k % len(_CAPTION_TEMPLATES)
            caption = _CAPTION_TEMPLATES[template_idx].format(**topic)
            position = len(body_tokens)
            body_tokens.extend(_body_block(topic, rng))
            key = f"{doc_id}/img{k}"
            features[key] = _image_features(cfg, topic, template_idx, rng)
            images.append(
                ImageRecord(
                    image_id=f"img{k}",
                    position=position,
                    caption=tuple(tokenize(caption)),
                    feature_key=key,
                )
            )
        docs.append(
            Document(
                doc_id=doc_id,
                split=split,
                title=tuple(tokenize(f"mission report on the {topic['craft']} {topic['noun1']}")),
                body=tuple(body_tokens),
                images=tuple(images),
            )
        )
    return docs, features


def _body_block(topic: dict[str, str], rng: random.Random) -> list[str]:
    """Body text around one image: the document topic's entities plus a short
    run of neutral filler. Every block grounds all caption entities."""
    block = (
        f"the {topic['org']} team in {topic['place']} prepared the "
        f"{topic['craft']} {topic['noun1']} and {topic['person']} spoke about "
        f"the {topic['noun2']}"
    )
    tokens = tokenize(block)
    filler_start = rng.randrange(len(FILLER))
    for f in range(4 + rng.randrange(4)):
        tokens.append(FILLER[(filler_start + f) % len(FILLER)])
    return tokens


def _image_features(
    cfg: SynthConfig, topic: dict[str, str], template_idx: int, rng: random.Random
) -> tuple[np.ndarray, ...]:
    """Signature rows for the topic entities the image depicts, plus noise."""
    noise = np.random.default_rng(rng.randrange(2**32))
    grid = noise.standard_normal((cfg.patches, cfg.raw_d_i)).astype(np.float32) * 0.1
    for row, slot in enumerate(("craft", "noun1", "place", "org")):
        grid[row] += _signature(topic[slot], cfg.raw_d_i)

    if template_idx in _TEMPLATES_WITH_PERSON:
        faces = _signature(topic["person"], cfg.raw_d_f)[None, :].astype(np.float32)
    else:
        faces = np.zeros((0, cfg.raw_d_f), dtype=np.float32)

    objects = np.stack(
        [_signature(topic["noun1"], cfg.raw_d_o), _signature(topic["noun2"], cfg.raw_d_o)]
    ).astype(np.float32)
    text_slot = np.zeros((0, 0), dtype=np.float32)  # toy mode encodes text itself
    return (text_slot, grid, faces, objects)


def generate_to_dir(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write corpus.jsonl, entities.tsv, and the feature store under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus, features = generate_corpus(cfg)
    corpus_path = out_dir / "corpus.jsonl"
    write_corpus(corpus, corpus_path)
    entities_path = out_dir / "entities.tsv"
    write_entity_dictionary(entities_path)
    features_dir = out_dir / "features"
    store = FeatureStore.create(features_dir)
    for key, arrays in features.items():
        store.write(key, arrays)
    store.save_manifest()
    return {"corpus": corpus_path, "entities": entities_path, "features": features_dir}
