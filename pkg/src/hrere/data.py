"""Distant supervision plumbing: corpora, mentions, bags, datasets.

A corpus is a list of raw sentences, each tagged with the head and tail
entity symbols it mentions (tab-separated text: ``head\ttail\ttokens``
with space-separated tokens). Alignment against a KB turns it into a
LabeledDataset: bags of exactly T fixed-length (L) token-id sentences,
labeled with a relation id (the KB's NA id when no triple links the
pair). Labels come from the KB alone, so they are only as true as
distant supervision allows.

Datasets serialize to a little-endian binary format (magic ``HRDS``) so
that equal inputs produce byte-identical files; npz/zip containers embed
timestamps and would break that.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .kb import KnowledgeBase

log = logging.getLogger(__name__)

PAD_TOKEN = "<PAD>"
UNK_TOKEN = "<UNK>"
PAD_ID = 0
UNK_ID = 1

_MAGIC = b"HRDS"
_VERSION = 1


class Vocabulary:
    """Token <-> id map with reserved PAD (0) and UNK (1) entries.

    While unfrozen, unknown tokens are interned; once frozen, they map to
    UNK. Ids are dense in first-seen order.
    """

    def __init__(self, tokens=None):
        self._tokens = [PAD_TOKEN, UNK_TOKEN]
        self._ids = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        self.frozen = False
        if tokens is not None:
            given = list(tokens)
            if given[:2] != [PAD_TOKEN, UNK_TOKEN]:
                raise DataError("vocabulary must start with the PAD and UNK tokens")
            for tok in given[2:]:
                if tok in self._ids:
                    raise DataError(f"duplicate vocabulary token {tok!r}")
                self._ids[tok] = len(self._tokens)
                self._tokens.append(tok)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    @property
    def tokens(self):
        return tuple(self._tokens)

    def token(self, idx):
        return self._tokens[idx]

    def lookup(self, token):
        """Id for a token: interned while unfrozen, else UNK for unknowns."""
        idx = self._ids.get(token)
        if idx is not None:
            return idx
        if self.frozen:
            return UNK_ID
        self._ids[token] = len(self._tokens)
        self._tokens.append(token)
        return self._ids[token]

    def freeze(self):
        self.frozen = True
        return self


@dataclass(frozen=True)
class RawSentence:
    """One corpus line: entity symbols plus the literal token sequence."""

    head: str
    tail: str
    tokens: tuple[str, ...]


@dataclass(frozen=True)
class SentenceMention:
    """A length-L token-id window with in-window mention positions."""

    tokens: tuple[int, ...]
    head_pos: int
    tail_pos: int

    def __post_init__(self):
        n = len(self.tokens)
        if not (0 <= self.head_pos < n and 0 <= self.tail_pos < n):
            raise DataError("mention positions out of range")
        if self.head_pos == self.tail_pos:
            raise DataError("head and tail mention positions coincide")
        if self.tokens[self.head_pos] == PAD_ID or self.tokens[self.tail_pos] == PAD_ID:
            raise DataError("mention positions must point at real tokens")

    @property
    def pad_mask(self):
        """Boolean array, True at PAD positions."""
        return np.asarray(self.tokens) == PAD_ID


@dataclass(frozen=True)
class Bag:
    """T sentences sharing one (head, tail) pair, labeled with one relation."""

    head: int
    rel: int
    tail: int
    sentences: tuple[SentenceMention, ...]


def normalize_sentence(token_ids, head_pos, tail_pos, L):
    """Cut/pad a sentence to exactly L tokens around the mention midpoint.

    The window is centered on the mention midpoint (start rounds toward
    the midpoint), clamped to the sentence, then shifted minimally so both
    mentions stay inside. Shorter sentences are right-padded with PAD.
    Returns None when the two mentions cannot fit in one window.
    """
    tokens = list(token_ids)
    n = len(tokens)
    if L < 2:
        raise DataError(f"window length must be >= 2, got {L}")
    if not tokens:
        raise DataError("empty sentence")
    if not (0 <= head_pos < n and 0 <= tail_pos < n) or head_pos == tail_pos:
        raise DataError("invalid mention positions")
    lo, hi = min(head_pos, tail_pos), max(head_pos, tail_pos)
    if hi - lo + 1 > L:
        return None
    if n <= L:
        start = 0
    else:
        mid = (head_pos + tail_pos) / 2.0
        start = math.floor(mid - (L - 1) / 2.0 + 0.5)
        start = max(0, min(start, n - L))
        if lo < start:
            start = lo
        elif hi >= start + L:
            start = hi - L + 1
    window = tokens[start : start + L]
    window.extend([PAD_ID] * (L - len(window)))
    return SentenceMention(tuple(window), head_pos - start, tail_pos - start)


def normalize_bag(sentences, T, rng=None):
    """Split a sentence group into chunks of exactly T, in input order.

    The final short chunk is refilled by sampling with replacement from
    its own members (seeded rng; defaults to a fixed seed 0 stream).
    """
    sentences = list(sentences)
    if not sentences:
        raise DataError("cannot normalize an empty sentence group")
    if T < 1:
        raise DataError(f"bag size must be >= 1, got {T}")
    if rng is None:
        rng = np.random.default_rng(0)
    chunks = []
    for i in range(0, len(sentences), T):
        chunk = sentences[i : i + T]
        base = len(chunk)
        while len(chunk) < T:
            chunk.append(chunk[int(rng.integers(base))])
        chunks.append(tuple(chunk))
    return chunks


def build_test_bags(labeled_sentences, T):
    """One bag per test sentence: T copies, so every sentence is scored alone."""
    if T < 1:
        raise DataError(f"bag size must be >= 1, got {T}")
    return [Bag(h, r, t, (m,) * T) for h, r, t, m in labeled_sentences]


def evaluation_dataset(kb, corpus, vocab, T, L):
    """Per-sentence evaluation bags labeled against the KB, frozen vocab.

    Each surviving sentence becomes one bag of T copies. Pairs linked by a
    triple are labeled with their smallest relation id (diagnostic only,
    inference ignores labels); unlinked pairs get NA. Unknown tokens map
    to UNK, so the vocabulary must already be frozen.
    """
    if not vocab.frozen:
        raise DataError("test sentences need a frozen vocabulary")
    if not corpus:
        raise DataError("empty corpus")
    dropped = 0
    labeled = []
    for sent in corpus:
        h = kb.entity_id(sent.head)
        t = kb.entity_id(sent.tail)
        head_pos, tail_pos = _mention_positions(sent)
        ids = [vocab.lookup(tok) for tok in sent.tokens]
        m = normalize_sentence(ids, head_pos, tail_pos, L)
        if m is None:
            dropped += 1
            continue
        rels = kb.relations_between(h, t)
        labeled.append((h, min(rels) if rels else kb.na_id, t, m))
    if dropped:
        log.warning("evaluation_dataset: dropped %d sentence(s) with mention span wider than L=%d",
                    dropped, L)
    if not labeled:
        raise DataError("no test bags survived normalization")
    return LabeledDataset(build_test_bags(labeled, T), vocab, T, L)


class LabeledDataset:
    """Bags plus the vocabulary and the (T, L) normalization they obey."""

    def __init__(self, bags, vocab, T, L):
        self.bags = tuple(bags)
        self.vocab = vocab
        self.T = int(T)
        self.L = int(L)
        if not self.bags:
            raise DataError("dataset has no bags")
        self._arrays = self._build_arrays()

    def _build_arrays(self):
        B, T, L = len(self.bags), self.T, self.L
        tokens = np.empty((B, T, L), dtype=np.int32)
        hpos = np.empty((B, T), dtype=np.int32)
        tpos = np.empty((B, T), dtype=np.int32)
        heads = np.empty(B, dtype=np.int32)
        tails = np.empty(B, dtype=np.int32)
        labels = np.empty(B, dtype=np.int32)
        for b, bag in enumerate(self.bags):
            if len(bag.sentences) != T:
                raise DataError(f"bag {b} has {len(bag.sentences)} sentences, expected {T}")
            if bag.head == bag.tail:
                raise DataError(f"bag {b} links an entity to itself")
            heads[b], tails[b], labels[b] = bag.head, bag.tail, bag.rel
            for s, m in enumerate(bag.sentences):
                if len(m.tokens) != L:
                    raise DataError(f"bag {b} sentence {s} has length {len(m.tokens)}, expected {L}")
                tokens[b, s] = m.tokens
                hpos[b, s] = m.head_pos
                tpos[b, s] = m.tail_pos
        if tokens.min() < 0 or tokens.max() >= len(self.vocab):
            raise DataError("token id outside the vocabulary")
        pad = tokens == PAD_ID
        if not (pad[..., :-1] <= pad[..., 1:]).all():
            raise DataError("PAD must only appear as a suffix")
        if labels.min() < 0:
            raise DataError("negative relation label")
        return {
            "tokens": tokens,
            "head_pos": hpos,
            "tail_pos": tpos,
            "heads": heads,
            "tails": tails,
            "labels": labels,
        }

    def arrays(self):
        """Dense views: tokens (B,T,L), head/tail positions (B,T), heads/tails/labels (B,)."""
        return self._arrays

    def __len__(self):
        return len(self.bags)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.T == other.T
            and self.L == other.L
            and self.vocab.tokens == other.vocab.tokens
            and self.bags == other.bags
        )


def save_dataset(ds, path):
    """Write a dataset in the versioned ``HRDS`` binary layout."""
    a = ds.arrays()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIII", _VERSION, ds.T, ds.L, len(ds.vocab), len(ds)))
        for tok in ds.vocab.tokens:
            raw = tok.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise DataError(f"vocabulary token too long ({len(raw)} bytes)")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        for name in ("tokens", "head_pos", "tail_pos", "heads", "tails", "labels"):
            fh.write(a[name].astype("<u4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a dataset file (bad magic)")
    version, T, L, V, B = struct.unpack_from("<IIIII", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    off = 4 + 20
    toks = []
    for _ in range(V):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        toks.append(blob[off : off + n].decode("utf-8"))
        off += n
    vocab = Vocabulary(toks).freeze()

    def take(shape, off):
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<u4", count=count, offset=off).reshape(shape)
        return arr, off + count * 4

    arrs = {}
    for name, shape in (
        ("tokens", (B, T, L)),
        ("head_pos", (B, T)),
        ("tail_pos", (B, T)),
        ("heads", (B,)),
        ("tails", (B,)),
        ("labels", (B,)),
    ):
        arrs[name], off = take(shape, off)
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes in dataset file")
    bags = []
    for b in range(B):
        sents = tuple(
            SentenceMention(
                tuple(int(x) for x in arrs["tokens"][b, s]),
                int(arrs["head_pos"][b, s]),
                int(arrs["tail_pos"][b, s]),
            )
            for s in range(T)
        )
        bags.append(Bag(int(arrs["heads"][b]), int(arrs["labels"][b]), int(arrs["tails"][b]), sents))
    return LabeledDataset(bags, vocab, T, L)


def save_corpus(corpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus:
            fh.write(f"{s.head}\t{s.tail}\t{' '.join(s.tokens)}\n")


def load_corpus(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            head, tail, toks = fields
            tokens = tuple(toks.split())
            if not tokens:
                raise DataError(f"{path}:{lineno}: empty token sequence")
            out.append(RawSentence(head, tail, tokens))
    return out


def _mention_positions(sentence):
    toks = sentence.tokens
    if sentence.head == sentence.tail:
        raise DataError(f"sentence mentions one entity twice: {sentence.head!r}")
    try:
        head_pos = toks.index(sentence.head)
    except ValueError:
        raise DataError(f"head symbol {sentence.head!r} absent from sentence") from None
    tail_pos = next((i for i, t in enumerate(toks) if t == sentence.tail and i != head_pos), None)
    if tail_pos is None:
        raise DataError(f"tail symbol {sentence.tail!r} absent from sentence")
    return head_pos, tail_pos


def align_corpus(kb, corpus, T, L, na_rate, rng=None, vocab=None):
    """Group corpus sentences by entity pair and label them from the KB.

    Pairs joined by k > 0 triples yield k bags per sentence-group chunk
    (one per relation, all sharing the sentences); unlinked pairs become
    NA groups, subsampled so NA bags stay at most the na_rate share of the
    dataset. Sentences whose mentions cannot share one window are dropped
    with a counted warning.
    """
    if not corpus:
        raise DataError("empty corpus")
    if not (0.0 <= na_rate < 1.0):
        raise DataError(f"na_rate must lie in [0, 1), got {na_rate}")
    if T < 1:
        raise DataError(f"bag size must be >= 1, got {T}")
    if rng is None:
        rng = np.random.default_rng(0)
    if vocab is None:
        vocab = Vocabulary()

    dropped = 0
    groups: dict[tuple[int, int], list[SentenceMention]] = {}
    for sent in corpus:
        h = kb.entity_id(sent.head)
        t = kb.entity_id(sent.tail)
        head_pos, tail_pos = _mention_positions(sent)
        ids = [vocab.lookup(tok) for tok in sent.tokens]
        m = normalize_sentence(ids, head_pos, tail_pos, L)
        if m is None:
            dropped += 1
            continue
        groups.setdefault((h, t), []).append(m)
    if dropped:
        log.warning("align_corpus: dropped %d sentence(s) with mention span wider than L=%d",
                    dropped, L)

    labeled = []
    na_pool = []
    for (h, t), ms in groups.items():
        rels = kb.relations_between(h, t)
        if rels:
            labeled.extend((h, t, r, ms) for r in rels)
        else:
            na_pool.append((h, t, kb.na_id, ms))

    def n_bags(ms):
        return -(-len(ms) // T)

    nonna_bags = sum(n_bags(ms) for *_, ms in labeled)
    na_bags = 0
    kept_na = []
    for i in rng.permutation(len(na_pool)):
        cand = na_pool[int(i)]
        nb = n_bags(cand[3])
        total = nonna_bags + na_bags + nb
        if total > 0 and (na_bags + nb) / total <= na_rate:
            kept_na.append(cand)
            na_bags += nb

    bags = []
    for h, t, r, ms in sorted(labeled + kept_na, key=lambda g: (g[0], g[1], g[2])):
        for chunk in normalize_bag(ms, T, rng):
            bags.append(Bag(h, r, t, chunk))
    if not bags:
        raise DataError("no bags survived alignment")
    return LabeledDataset(bags, vocab, T, L)


_FILLERS = ("the", "report", "notes", "that", "was", "seen", "with", "last", "year", "again")


def default_templates(kb):
    """Three token patterns per relation, keyed by relation name.

    Each relation gets its own lexical markers so a clean corpus is
    learnable from text alone; one pattern mentions the tail first so
    position features carry signal. NA gets neutral patterns.
    """
    out = {}
    for r in kb.relations:
        if r.is_na:
            out[r.name] = [
                ["{h}", "and", "{t}", "met"],
                ["{h}", "appeared", "near", "{t}", "last", "year"],
                ["{t}", "and", "{h}", "were", "unrelated"],
            ]
        else:
            verb, prep = f"{r.name}_verb", f"{r.name}_prep"
            out[r.name] = [
                ["{h}", verb, "{t}"],
                ["the", "report", "notes", "that", "{h}", verb, "{t}", "again"],
                ["{t}", prep, "{h}", "was", "seen"],
            ]
    return out


def _check_templates(kb, templates):
    for r in kb.relations:
        pats = templates.get(r.name)
        if not pats:
            raise DataError(f"no templates for relation {r.name!r}")
        for pat in pats:
            if pat.count("{h}") != 1 or pat.count("{t}") != 1:
                raise DataError(
                    f"template for {r.name!r} must contain exactly one {{h}} and one {{t}}: {pat}"
                )


def _instantiate(pat, head_sym, tail_sym):
    return tuple(head_sym if tok == "{h}" else tail_sym if tok == "{t}" else tok for tok in pat)


def generate_synthetic_corpus(
    kb,
    templates,
    implicit_rate,
    mislabel_rate,
    seed,
    na_pair_factor=0.5,
    max_mentions=6,
):
    """Emit template sentences for every KB triple plus unlinked NA pairs.

    Each triple gets 1..max_mentions sentences. Per sentence, with
    probability mislabel_rate the pattern comes from a uniformly random
    *other* relation (pure label noise); otherwise with probability
    implicit_rate it comes from the triple relation's fixed partner (the
    cyclically next non-NA relation), standing in for text that entails
    the fact without stating it. The remainder use the labeled relation's
    own patterns. With both rates zero, every sentence matches one of its
    relation's patterns. NA pairs (never linked in the KB, in either
    direction) are added at na_pair_factor times the distinct linked-pair
    count; their sentences use NA patterns, subject to the same mislabel
    noise.
    """
    if not (0.0 <= implicit_rate <= 1.0 and 0.0 <= mislabel_rate <= 1.0):
        raise DataError("noise rates must lie in [0, 1]")
    if implicit_rate + mislabel_rate > 1.0:
        raise DataError("implicit_rate + mislabel_rate must not exceed 1")
    if max_mentions < 1:
        raise DataError("max_mentions must be >= 1")
    if implicit_rate > 0 and kb.num_relations < 2:
        raise DataError("implicit noise needs at least two non-NA relations")
    _check_templates(kb, templates)
    rng = np.random.default_rng(seed)
    rel_names = [r.name for r in kb.relations]
    na_name = rel_names[kb.na_id]

    def partner(rel_id):
        return rel_names[(rel_id + 1) % kb.num_relations]

    def emit(head_sym, tail_sym, label_name, rel_id):
        u = rng.random()
        if u < mislabel_rate:
            others = [n for n in rel_names if n != label_name]
            src = others[int(rng.integers(len(others)))]
        elif rel_id is not None and u < mislabel_rate + implicit_rate:
            src = partner(rel_id)
        else:
            src = label_name
        pats = templates[src]
        pat = pats[int(rng.integers(len(pats)))]
        return RawSentence(head_sym, tail_sym, _instantiate(pat, head_sym, tail_sym))

    sentences = []
    for trip in kb.triples:
        h_sym = kb.entities[trip.head].symbol
        t_sym = kb.entities[trip.tail].symbol
        label = rel_names[trip.rel]
        for _ in range(int(rng.integers(1, max_mentions + 1))):
            sentences.append(emit(h_sym, t_sym, label, trip.rel))

    linked = {frozenset((t.head, t.tail)) for t in kb.triples}
    n_na = int(round(na_pair_factor * len({(t.head, t.tail) for t in kb.triples})))
    picked = set()
    attempts = 0
    while len(picked) < n_na and attempts < 200 * max(1, n_na):
        attempts += 1
        h, t = (int(x) for x in rng.integers(kb.num_entities, size=2))
        if h == t or frozenset((h, t)) in linked or (h, t) in picked:
            continue
        picked.add((h, t))
        h_sym, t_sym = kb.entities[h].symbol, kb.entities[t].symbol
        for _ in range(int(rng.integers(1, max_mentions + 1))):
            sentences.append(emit(h_sym, t_sym, na_name, None))
    if len(picked) < n_na:
        log.warning("generate_synthetic_corpus: only %d/%d NA pairs available", len(picked), n_na)
    return sentences
