"""Weighted-average inference and the ranked held-out evaluation protocol.

Both sides of the model emit a distribution over R+1 classes with the
"no relation" class last, so rows can be mixed elementwise. Ranking never
emits that class; every candidate (bag, relation) pair is scored against
the reference fact set and the sorted list yields the precision/recall
curve plus precision at the top N percent of the list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import language_forward
from .errors import ConfigError, DataError
from .kbe import pair_distributions

_EVAL_BATCH = 200


def combine(p_lang, p_kb, alpha):
    """Mix the two distributions: alpha*p_lang + (1-alpha)*p_kb.

    Accepts single rows or stacked (B, R+1) blocks. The endpoints return a
    copy of the corresponding input so alpha=0 and alpha=1 are exact.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    p_lang = np.asarray(p_lang, dtype=np.float64)
    p_kb = np.asarray(p_kb, dtype=np.float64)
    if p_lang.shape != p_kb.shape:
        raise DataError(
            f"distribution shapes differ: {p_lang.shape} vs {p_kb.shape}"
        )
    if alpha == 1.0:
        return p_lang.copy()
    if alpha == 0.0:
        return p_kb.copy()
    return alpha * p_lang + (1.0 - alpha) * p_kb


def predict(p_combined):
    """Most likely relation id; ties go to the smallest id."""
    p = np.asarray(p_combined, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DataError("predict expects one non-empty distribution row")
    return int(np.argmax(p))


@dataclass(frozen=True)
class Prediction:
    head: int
    tail: int
    relation: int
    confidence: float
    gold: bool

    def __post_init__(self):
        # convex mixes of float probabilities can overshoot by an ulp
        if not -1e-9 <= self.confidence <= 1.0 + 1e-9:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class PrCurve:
    """Precision and recall after each prefix of the ranked list."""

    recall: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.recall, dtype=np.float64)
        p = np.asarray(self.precision, dtype=np.float64)
        if r.ndim != 1 or r.shape != p.shape or r.size == 0:
            raise DataError("curve needs matching non-empty recall/precision arrays")
        if np.any(np.diff(r) < 0):
            raise DataError("recall must be non-decreasing along the curve")
        if r.min() < 0 or r.max() > 1 or p.min() < 0 or p.max() > 1:
            raise DataError("precision and recall must lie in [0, 1]")
        object.__setattr__(self, "recall", r)
        object.__setattr__(self, "precision", p)

    @property
    def points(self):
        return list(zip(self.recall.tolist(), self.precision.tolist()))


def rank_predictions(predictions):
    """Descending confidence; ties by (head, tail, relation), then input order.

    sorted() is stable, so predictions that tie on every key keep the order
    they were emitted in, which follows the dataset's bag order.
    """
    return sorted(
        predictions, key=lambda q: (-q.confidence, q.head, q.tail, q.relation)
    )


def pr_curve(ranked):
    """Curve over every prefix of an already ranked prediction list."""
    if not ranked:
        raise DataError("cannot build a curve from an empty prediction list")
    gold = np.array([q.gold for q in ranked], dtype=np.float64)
    hits = np.cumsum(gold)
    k = np.arange(1, len(ranked) + 1, dtype=np.float64)
    total = hits[-1]
    recall = hits / total if total > 0 else np.zeros_like(hits)
    return PrCurve(recall=recall, precision=hits / k)


def precision_at_percent(curve, percent):
    """Precision at the top ceil(percent% of the list), at least one row."""
    if not 0 < percent <= 100:
        raise ConfigError(f"percent must lie in (0, 100], got {percent}")
    k = max(1, math.ceil(percent / 100.0 * len(curve.precision)))
    return float(curve.precision[k - 1])


P_AT_N_PERCENTS = (10, 30, 50)


@dataclass(frozen=True)
class EvalResult:
    curve: PrCurve
    p_at_n: dict
    predictions: list = field(repr=False)


def _truth_keys(kb_truth):
    triples = getattr(kb_truth, "triples", kb_truth)
    return {t.key() if hasattr(t, "key") else tuple(t) for t in triples}


def evaluate(state, test_bags, kb_truth, alpha):
    """Rank every (bag, non-NA relation) candidate by combined probability.

    kb_truth may be a KnowledgeBase or any iterable of triples; membership
    there is what marks a candidate gold. The base variant carries no KB
    side at prediction time, so its alpha is forced to 1.
    """
    truth = _truth_keys(kb_truth)
    arrays = test_bags.arrays() if hasattr(test_bags, "arrays") else test_bags
    n_bags = arrays["tokens"].shape[0]
    if n_bags == 0:
        raise DataError("no test bags to evaluate")
    if state.variant == "base":
        alpha = 1.0

    num_rel = state.language.params.num_relations
    predictions = []
    for start in range(0, n_bags, _EVAL_BATCH):
        sl = slice(start, min(start + _EVAL_BATCH, n_bags))
        p_lang, _ = language_forward(
            state.language,
            arrays["tokens"][sl],
            arrays["head_pos"][sl],
            arrays["tail_pos"][sl],
            labels=None,
        )
        p_kb = pair_distributions(
            state.knowledge, arrays["heads"][sl], arrays["tails"][sl]
        )
        mixed = combine(p_lang, p_kb, alpha)
        heads = arrays["heads"][sl]
        tails = arrays["tails"][sl]
        for i in range(mixed.shape[0]):
            h, t = int(heads[i]), int(tails[i])
            for r in range(num_rel):
                predictions.append(
                    Prediction(
                        head=h,
                        tail=t,
                        relation=r,
                        confidence=float(mixed[i, r]),
                        gold=(h, r, t) in truth,
                    )
                )
    ranked = rank_predictions(predictions)
    curve = pr_curve(ranked)
    p_at_n = {n: precision_at_percent(curve, n) for n in P_AT_N_PERCENTS}
    return EvalResult(curve=curve, p_at_n=p_at_n, predictions=ranked)


def average_p_at_n(tables):
    """Mean precision per percent across per-run P@N tables."""
    if not tables:
        raise DataError("nothing to average")
    keys = set(tables[0])
    if any(set(t) != keys for t in tables):
        raise DataError("P@N tables cover different percents")
    return {n: float(np.mean([t[n] for t in tables])) for n in sorted(keys)}


def write_curve_csv(curve, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("recall,precision\n")
        for r, p in zip(curve.recall, curve.precision):
            fh.write(f"{r:.12g},{p:.12g}\n")


def read_curve_csv(path):
    recall, precision = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "recall,precision":
            raise DataError(f"{path}: unexpected curve header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two columns")
            try:
                recall.append(float(parts[0]))
                precision.append(float(parts[1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return PrCurve(recall=np.array(recall), precision=np.array(precision))


def write_p_at_n_csv(p_at_n, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("percent,precision\n")
        for n in sorted(p_at_n):
            fh.write(f"{n},{p_at_n[n]:.12g}\n")
