import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrere.data import (
    PAD_ID,
    UNK_ID,
    Bag,
    LabeledDataset,
    RawSentence,
    SentenceMention,
    Vocabulary,
    align_corpus,
    build_test_bags,
    default_templates,
    generate_synthetic_corpus,
    load_corpus,
    load_dataset,
    normalize_bag,
    normalize_sentence,
    save_corpus,
    save_dataset,
    evaluation_dataset,
)
from hrere.errors import DataError
from hrere.kb import Entity, KnowledgeBase, Relation, Triple, generate_synthetic_kb


def make_kb(n_entities, n_relations, triple_keys, symbols=None):
    entities = [Entity(i, symbols[i] if symbols else f"e{i}") for i in range(n_entities)]
    relations = [Relation(i, f"r{i}") for i in range(n_relations)]
    relations.append(Relation(n_relations, "NA", is_na=True))
    return KnowledgeBase(entities, relations, [Triple(*k) for k in triple_keys])


class TestNormalizeSentence:
    def test_short_sentence_right_padded(self):
        m = normalize_sentence([5, 6, 7], 0, 2, L=6)
        assert m.tokens == (5, 6, 7, PAD_ID, PAD_ID, PAD_ID)
        assert (m.head_pos, m.tail_pos) == (0, 2)
        assert m.pad_mask.tolist() == [False, False, False, True, True, True]

    def test_exact_length(self):
        m = normalize_sentence([5, 6, 7], 0, 1, L=3)
        assert m.tokens == (5, 6, 7)

    def test_centered_window(self):
        toks = list(range(10, 30))  # n=20
        m = normalize_sentence(toks, 9, 10, L=5)
        # midpoint 9.5, ideal start 7.5 -> rounds to 8
        assert m.tokens == (18, 19, 20, 21, 22)
        assert (m.head_pos, m.tail_pos) == (1, 2)

    def test_window_shifts_to_keep_mentions(self):
        toks = list(range(10, 30))
        m = normalize_sentence(toks, 0, 4, L=5)
        assert m.tokens == (10, 11, 12, 13, 14)
        m = normalize_sentence(toks, 15, 19, L=5)
        assert m.tokens == (25, 26, 27, 28, 29)
        assert (m.head_pos, m.tail_pos) == (0, 4)

    def test_span_too_wide_dropped(self):
        assert normalize_sentence(list(range(10, 30)), 0, 6, L=5) is None

    def test_invalid_positions(self):
        with pytest.raises(DataError):
            normalize_sentence([1, 2, 3], 1, 1, L=4)
        with pytest.raises(DataError):
            normalize_sentence([1, 2, 3], 0, 5, L=4)

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_against_nearest_feasible_start(self, data):
        n = data.draw(st.integers(2, 40))
        L = data.draw(st.integers(2, 12))
        head = data.draw(st.integers(0, n - 1))
        tail = data.draw(st.integers(0, n - 1).filter(lambda t: t != head))
        toks = list(range(100, 100 + n))
        m = normalize_sentence(toks, head, tail, L)
        lo, hi = min(head, tail), max(head, tail)
        if hi - lo + 1 > L:
            assert m is None
            return
        assert len(m.tokens) == L
        if n <= L:
            start = 0
            assert m.tokens == tuple(toks) + (PAD_ID,) * (L - n)
        else:
            # oracle: the feasible start closest to perfect centering,
            # half-way ties rounding up
            x = (head + tail) / 2.0 - (L - 1) / 2.0
            feasible = [s for s in range(0, n - L + 1) if s <= lo and hi < s + L]
            start = min(feasible, key=lambda s: (abs(s - x), -s))
            assert m.tokens == tuple(toks[start : start + L])
        assert m.head_pos == head - start
        assert m.tail_pos == tail - start


class TestNormalizeBag:
    def mk(self, n):
        return [SentenceMention((10 + i, 3), 0, 1) for i in range(n)]

    def test_exhaustive_small_against_rules(self):
        for n in range(1, 7):
            for T in range(1, 4):
                sents = self.mk(n)
                chunks = normalize_bag(sents, T, np.random.default_rng(0))
                assert len(chunks) == math.ceil(n / T)
                for ci, chunk in enumerate(chunks):
                    assert len(chunk) == T
                    base = sents[ci * T : (ci + 1) * T]
                    # original members first, in input order
                    assert list(chunk[: len(base)]) == base
                    # refills drawn from the same chunk's members only
                    assert all(s in base for s in chunk[len(base) :])

    def test_deterministic(self):
        sents = self.mk(5)
        a = normalize_bag(sents, 3, np.random.default_rng(4))
        b = normalize_bag(sents, 3, np.random.default_rng(4))
        assert a == b

    def test_empty_group_rejected(self):
        with pytest.raises(DataError):
            normalize_bag([], 2)


class TestBuildTestBags:
    def test_t_copies(self):
        m = SentenceMention((4, 5, PAD_ID), 0, 1)
        bags = build_test_bags([(0, 1, 2, m)], T=3)
        assert len(bags) == 1
        assert bags[0].sentences == (m, m, m)
        assert (bags[0].head, bags[0].rel, bags[0].tail) == (0, 1, 2)


class TestEvaluationDataset:
    def kb(self):
        return make_kb(3, 2, [(0, 0, 1)], symbols=["a", "b", "c"])

    def corpus(self):
        return [
            RawSentence("a", "b", ("a", "likes", "b")),
            RawSentence("c", "a", ("c", "met", "a")),
        ]

    def test_labels_and_copies(self):
        kb = self.kb()
        vocab = Vocabulary()
        for s in self.corpus():
            for tok in s.tokens:
                vocab.lookup(tok)
        ds = evaluation_dataset(kb, self.corpus(), vocab.freeze(), T=2, L=5)
        assert len(ds) == 2
        assert [b.rel for b in ds.bags] == [0, kb.na_id]
        assert all(len(set(b.sentences)) == 1 for b in ds.bags)

    def test_unknown_tokens_become_unk(self):
        kb = self.kb()
        vocab = Vocabulary()
        vocab.lookup("a"), vocab.lookup("b")
        ds = evaluation_dataset(kb, self.corpus()[:1], vocab.freeze(), T=2, L=5)
        assert UNK_ID in ds.bags[0].sentences[0].tokens

    def test_requires_frozen_vocab(self):
        with pytest.raises(DataError, match="frozen"):
            evaluation_dataset(self.kb(), self.corpus(), Vocabulary(), T=2, L=5)


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary()
        assert v.lookup("<PAD>") == PAD_ID
        assert v.lookup("<UNK>") == UNK_ID
        assert v.lookup("cat") == 2
        assert v.lookup("cat") == 2

    def test_frozen_maps_to_unk(self):
        v = Vocabulary()
        v.lookup("cat")
        v.freeze()
        assert v.lookup("dog") == UNK_ID
        assert v.lookup("cat") == 2


def toy_corpus():
    return [
        RawSentence("a", "b", ("a", "likes", "b")),
        RawSentence("a", "b", ("b", "liked", "by", "a")),
        RawSentence("a", "c", ("a", "met", "c")),
    ]


class TestAlignCorpus:
    def test_labels_and_grouping(self):
        kb = make_kb(3, 2, [(0, 0, 1)], symbols=["a", "b", "c"])
        ds = align_corpus(kb, toy_corpus(), T=2, L=5, na_rate=0.5, rng=np.random.default_rng(0))
        by_label = {}
        for bag in ds.bags:
            by_label.setdefault(bag.rel, []).append(bag)
        assert len(by_label[0]) == 1  # (a,b) group, 2 sentences -> 1 bag of 2
        assert len(by_label[kb.na_id]) == 1  # (a,c) kept at na_rate=0.5
        assert by_label[0][0].head == 0 and by_label[0][0].tail == 1

    def test_multi_relation_pair_duplicates_group(self):
        kb = make_kb(2, 2, [(0, 0, 1), (0, 1, 1)], symbols=["a", "b"])
        corpus = [RawSentence("a", "b", ("a", "likes", "b"))]
        ds = align_corpus(kb, corpus, T=1, L=4, na_rate=0.0)
        assert sorted(bag.rel for bag in ds.bags) == [0, 1]
        assert ds.bags[0].sentences == ds.bags[1].sentences

    def test_na_rate_zero_drops_unlinked(self):
        kb = make_kb(3, 2, [(0, 0, 1)], symbols=["a", "b", "c"])
        ds = align_corpus(kb, toy_corpus(), T=2, L=5, na_rate=0.0)
        assert all(bag.rel != kb.na_id for bag in ds.bags)

    def test_na_share_stays_at_most_rate(self):
        kb = generate_synthetic_kb(30, 3, 60, seed=2)
        corpus = generate_synthetic_corpus(kb, default_templates(kb), 0.0, 0.0, seed=3)
        for rate in (0.1, 0.25, 0.4):
            ds = align_corpus(kb, corpus, T=3, L=12, na_rate=rate, rng=np.random.default_rng(1))
            na = sum(bag.rel == kb.na_id for bag in ds.bags)
            assert na / len(ds.bags) <= rate
            assert na > 0

    def test_wide_span_dropped_with_warning(self, caplog):
        kb = make_kb(2, 1, [(0, 0, 1)], symbols=["a", "b"])
        corpus = [
            RawSentence("a", "b", ("a",) + tuple(f"w{i}" for i in range(8)) + ("b",)),
            RawSentence("a", "b", ("a", "likes", "b")),
        ]
        with caplog.at_level(logging.WARNING):
            ds = align_corpus(kb, corpus, T=1, L=4, na_rate=0.0)
        assert "dropped 1" in caplog.text
        assert len(ds.bags) == 1

    def test_unknown_symbol_rejected(self):
        kb = make_kb(2, 1, [(0, 0, 1)], symbols=["a", "b"])
        with pytest.raises(DataError, match="unknown entity"):
            align_corpus(kb, [RawSentence("a", "z", ("a", "x", "z"))], T=1, L=4, na_rate=0.0)

    def test_mention_absent_rejected(self):
        kb = make_kb(2, 1, [(0, 0, 1)], symbols=["a", "b"])
        with pytest.raises(DataError, match="absent"):
            align_corpus(kb, [RawSentence("a", "b", ("a", "x", "y"))], T=1, L=4, na_rate=0.0)

    def test_deterministic(self):
        kb = generate_synthetic_kb(20, 3, 40, seed=5)
        corpus = generate_synthetic_corpus(kb, default_templates(kb), 0.1, 0.1, seed=6)
        a = align_corpus(kb, corpus, T=3, L=12, na_rate=0.25, rng=np.random.default_rng(9))
        b = align_corpus(kb, corpus, T=3, L=12, na_rate=0.25, rng=np.random.default_rng(9))
        assert a == b

    def test_frozen_vocab_unk(self):
        kb = make_kb(2, 1, [(0, 0, 1)], symbols=["a", "b"])
        v = Vocabulary()
        for tok in ("a", "b", "likes"):
            v.lookup(tok)
        v.freeze()
        corpus = [RawSentence("a", "b", ("a", "adores", "b"))]
        ds = align_corpus(kb, corpus, T=1, L=4, na_rate=0.0, vocab=v)
        assert UNK_ID in ds.bags[0].sentences[0].tokens


class TestDatasetIO:
    def build(self):
        kb = generate_synthetic_kb(20, 3, 40, seed=5)
        corpus = generate_synthetic_corpus(kb, default_templates(kb), 0.2, 0.1, seed=6)
        return align_corpus(kb, corpus, T=3, L=12, na_rate=0.25, rng=np.random.default_rng(9))

    def test_round_trip(self, tmp_path):
        ds = self.build()
        p1, p2 = tmp_path / "a.ds", tmp_path / "b.ds"
        save_dataset(ds, p1)
        back = load_dataset(p1)
        assert back == ds
        save_dataset(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ds"
        p.write_bytes(b"nope" + b"\0" * 40)
        with pytest.raises(DataError, match="magic"):
            load_dataset(p)

    def test_pad_only_suffix_enforced(self):
        v = Vocabulary()
        v.lookup("w")
        bad = Bag(0, 0, 1, (SentenceMention((2, PAD_ID, 2), 0, 2),))
        with pytest.raises(DataError, match="suffix"):
            LabeledDataset([bad], v, T=1, L=3)

    def test_corpus_round_trip(self, tmp_path):
        corpus = toy_corpus()
        p = tmp_path / "c.tsv"
        save_corpus(corpus, p)
        assert load_corpus(p) == corpus


def strip_to_pattern(sent):
    return ["{h}" if t == sent.head else "{t}" if t == sent.tail else t for t in sent.tokens]


class TestSyntheticCorpus:
    def test_noise_free_matches_templates(self):
        kb = generate_synthetic_kb(20, 3, 30, seed=1)
        templates = default_templates(kb)
        corpus = generate_synthetic_corpus(kb, templates, 0.0, 0.0, seed=2)
        pair_rel = {}
        for t in kb.triples:
            pair_rel[(kb.entities[t.head].symbol, kb.entities[t.tail].symbol)] = kb.relations[t.rel].name
        assert corpus
        for sent in corpus:
            label = pair_rel.get((sent.head, sent.tail), "NA")
            assert strip_to_pattern(sent) in templates[label]

    def test_full_mislabel_never_matches(self):
        kb = generate_synthetic_kb(20, 3, 30, seed=1)
        templates = default_templates(kb)
        corpus = generate_synthetic_corpus(kb, templates, 0.0, 1.0, seed=2)
        pair_rel = {}
        for t in kb.triples:
            pair_rel[(kb.entities[t.head].symbol, kb.entities[t.tail].symbol)] = kb.relations[t.rel].name
        for sent in corpus:
            label = pair_rel.get((sent.head, sent.tail), "NA")
            assert strip_to_pattern(sent) not in templates[label]

    def test_na_pairs_unlinked(self):
        kb = generate_synthetic_kb(20, 3, 30, seed=1)
        corpus = generate_synthetic_corpus(kb, default_templates(kb), 0.0, 0.0, seed=2)
        linked = {
            frozenset((kb.entities[t.head].symbol, kb.entities[t.tail].symbol)) for t in kb.triples
        }
        na_pairs = {
            (s.head, s.tail) for s in corpus if frozenset((s.head, s.tail)) not in linked
        }
        assert na_pairs  # the generator supplies unlinked pairs
        for h, t in na_pairs:
            assert frozenset((h, t)) not in linked

    def test_deterministic(self):
        kb = generate_synthetic_kb(20, 3, 30, seed=1)
        a = generate_synthetic_corpus(kb, default_templates(kb), 0.3, 0.1, seed=7)
        b = generate_synthetic_corpus(kb, default_templates(kb), 0.3, 0.1, seed=7)
        assert a == b

    def test_missing_template_rejected(self):
        kb = generate_synthetic_kb(10, 2, 10, seed=1)
        templates = default_templates(kb)
        del templates["NA"]
        with pytest.raises(DataError, match="no templates"):
            generate_synthetic_corpus(kb, templates, 0.0, 0.0, seed=0)

    def test_bad_rates_rejected(self):
        kb = generate_synthetic_kb(10, 2, 10, seed=1)
        with pytest.raises(DataError):
            generate_synthetic_corpus(kb, default_templates(kb), 0.8, 0.4, seed=0)
