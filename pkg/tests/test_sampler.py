"""Batch construction: grouping, truncation, coverage, determinism."""

import random
from collections import Counter

import pytest

from concaps.corpus import BOS, EOS, DictionaryTagger, Document, EntityPool, ImageRecord
from concaps.errors import ValidationError
from concaps.sampler import build_epoch_batches

EMPTY_TAGGER = DictionaryTagger({})
EMPTY_POOL = EntityPool({})


def doc_with_images(doc_id: str, n_images: int, split="train") -> Document:
    body = tuple(f"tok{i}" for i in range(4 * n_images + 4))
    images = tuple(
        ImageRecord(
            image_id=f"{doc_id}-img{k}",
            position=4 * k,
            caption=("caption", "for", f"{doc_id}", f"pic{k}"),
            feature_key=f"{doc_id}/f{k}",
        )
        for k in range(n_images)
    )
    return Document(doc_id=doc_id, split=split, title=(), body=body, images=images)


def epoch(corpus, batch_size, W, seed=0):
    return build_epoch_batches(
        corpus,
        EMPTY_TAGGER,
        EMPTY_POOL,
        batch_size=batch_size,
        W=W,
        window_tokens=8,
        rng=random.Random(seed),
    )


class TestGrouping:
    def test_batch_of_15_with_w3_holds_5_groups(self):
        corpus = [doc_with_images(f"d{i}", 3) for i in range(10)]
        batches = epoch(corpus, batch_size=15, W=3)
        full = [b for b in batches if len(b) == 15]
        assert full, "expected at least one full batch"
        for batch in full:
            assert len(batch.groups) == 5
            assert all(len(g) == 3 for g in batch.groups)

    def test_groups_are_consecutive_and_bounded(self):
        corpus = [doc_with_images(f"d{i}", n) for i, n in enumerate((1, 2, 5, 7, 3))]
        for seed in range(10):
            for W in (1, 2, 3):
                for batch in epoch(corpus, batch_size=5, W=W, seed=seed):
                    for group in batch.groups:
                        assert 1 <= len(group) <= W
                        indices = [batch.items[g].img_index for g in group]
                        docs = {batch.items[g].doc_index for g in group}
                        assert len(docs) == 1
                        assert indices == list(
                            range(indices[0], indices[0] + len(indices))
                        )
                        assert max(indices) - min(indices) <= W - 1

    def test_single_image_partial_batch_dropped(self):
        corpus = [doc_with_images("only", 1)]
        assert epoch(corpus, batch_size=15, W=3) == []

    def test_partial_batch_of_two_kept(self):
        corpus = [doc_with_images("pair", 2)]
        batches = epoch(corpus, batch_size=15, W=3)
        assert len(batches) == 1 and len(batches[0]) == 2

    def test_zero_image_corpus_rejected(self):
        corpus = [doc_with_images("empty", 0)]
        with pytest.raises(ValidationError):
            epoch(corpus, batch_size=4, W=3)


class TestCoverage:
    def test_four_docs_three_images_two_full_batches(self):
        # Oracle: multiset of (doc_id, img_index) over the epoch must equal
        # every image exactly once.
        corpus = [doc_with_images(f"d{i}", 3) for i in range(4)]
        batches = epoch(corpus, batch_size=6, W=3, seed=7)
        assert [len(b) for b in batches] == [6, 6]
        seen = Counter(
            (item.doc_id, item.img_index) for b in batches for item in b.items
        )
        expected = Counter(
            (doc.doc_id, k + 1) for doc in corpus for k in range(len(doc.images))
        )
        assert seen == expected

    def test_truncation_carries_remainder(self):
        # batch_size 4 with W 3 forces group truncation; nothing is lost.
        corpus = [doc_with_images("a", 5), doc_with_images("b", 5)]
        for seed in range(20):
            batches = epoch(corpus, batch_size=4, W=3, seed=seed)
            seen = Counter(
                (item.doc_id, item.img_index) for b in batches for item in b.items
            )
            assert all(count == 1 for count in seen.values())
            assert sum(seen.values()) in (8, 10)  # 10 images, trailing 1-2 may drop

    def test_each_image_at_most_once_per_epoch(self):
        corpus = [doc_with_images(f"d{i}", n) for i, n in enumerate((4, 1, 6, 2))]
        for seed in range(25):
            seen = Counter(
                (item.doc_id, item.img_index)
                for b in epoch(corpus, batch_size=5, W=2, seed=seed)
                for item in b.items
            )
            assert all(count == 1 for count in seen.values())

    def test_every_image_appears_across_seeds(self):
        corpus = [doc_with_images(f"d{i}", 3) for i in range(3)]
        seen = set()
        for seed in range(30):
            for b in epoch(corpus, batch_size=4, W=2, seed=seed):
                seen.update((item.doc_id, item.img_index) for item in b.items)
        expected = {(d.doc_id, k + 1) for d in corpus for k in range(len(d.images))}
        assert seen == expected


class TestDeterminismAndItems:
    def test_same_seed_same_batches(self, corpus, tagger, pool):
        def run():
            return build_epoch_batches(
                corpus, tagger, pool, batch_size=6, W=3, window_tokens=32,
                rng=random.Random(123),
            )

        assert run() == run()

    def test_different_seed_differs(self, corpus, tagger, pool):
        runs = {
            tuple(
                (item.doc_id, item.img_index)
                for b in build_epoch_batches(
                    corpus, tagger, pool, batch_size=6, W=3, window_tokens=32,
                    rng=random.Random(seed),
                )
                for item in b.items
            )
            for seed in range(6)
        }
        assert len(runs) > 1

    def test_items_carry_sentinels_and_fakes(self, corpus, tagger, pool, batches):
        for batch in batches:
            for item in batch.items:
                assert item.true_cap[0] == BOS and item.true_cap[-1] == EOS
                if item.fake_cap is not None:
                    assert item.fake_cap[0] == BOS and item.fake_cap[-1] == EOS
                    assert len(item.txt) >= 1
