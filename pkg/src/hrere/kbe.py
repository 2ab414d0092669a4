"""Complex-valued bilinear KB embeddings.

Entities and relations are complex d_k-vectors stored as separate real
and imaginary float64 tables. The triple score is

    phi(h, r, t) = Re(sum_k e_h[k] * w_r[k] * conj(e_t[k]))

computed via its fixed real expansion

    sum_k (h_re r_re t_re + h_im r_re t_im + h_re r_im t_im - h_im r_im t_re)

so results are reproducible bit for bit. The relation table has one extra
row: a trainable catch-all vector for the NA relation, which pretraining
never touches (negatives only corrupt entities) and joint training learns.

Pretraining minimizes a logistic loss, softplus(-y * phi), over KB facts
(y = +1) and uniformly corrupted head-or-tail negatives (y = -1,
resampled while they collide with known facts).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .numerics import sigmoid, softmax, softplus
from .optim import Adam

log = logging.getLogger(__name__)

_MAGIC = b"HRKB"
_VERSION = 1
_BATCH = 1024
_MAX_RESAMPLE_ROUNDS = 1000


@dataclass
class KbeHyper:
    d_k: int = 50
    neg_ratio: int = 5
    pretrain_lr: float = 0.02
    pretrain_epochs: int = 200
    init_scale: float = 0.1

    def __post_init__(self):
        if self.d_k < 1:
            raise DataError(f"d_k must be >= 1, got {self.d_k}")
        if self.neg_ratio < 1:
            raise DataError(f"neg_ratio must be >= 1, got {self.neg_ratio}")
        if self.pretrain_lr <= 0:
            raise DataError(f"pretrain_lr must be positive, got {self.pretrain_lr}")
        if self.pretrain_epochs < 0:
            raise DataError(f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        if self.init_scale <= 0:
            raise DataError(f"init_scale must be positive, got {self.init_scale}")


@dataclass
class ComplexEmbeddingTable:
    """Dense embeddings: entities (E, d_k), relations incl. NA (R+1, d_k)."""

    entity_re: np.ndarray
    entity_im: np.ndarray
    relation_re: np.ndarray
    relation_im: np.ndarray

    def __post_init__(self):
        if self.entity_re.shape != self.entity_im.shape or self.entity_re.ndim != 2:
            raise DataError("entity tables must be two matching 2-D arrays")
        if self.relation_re.shape != self.relation_im.shape or self.relation_re.ndim != 2:
            raise DataError("relation tables must be two matching 2-D arrays")
        if self.entity_re.shape[1] != self.relation_re.shape[1]:
            raise DataError("entity and relation embedding widths differ")
        for a in (self.entity_re, self.entity_im, self.relation_re, self.relation_im):
            if not np.isfinite(a).all():
                raise DataError("non-finite embedding values")

    @property
    def d_k(self):
        return self.entity_re.shape[1]

    @property
    def num_entities(self):
        return self.entity_re.shape[0]

    @property
    def num_relations_total(self):
        """Relation rows including the NA catch-all."""
        return self.relation_re.shape[0]

    def entity_vector(self, idx):
        return self.entity_re[idx] + 1j * self.entity_im[idx]

    def relation_vector(self, idx):
        return self.relation_re[idx] + 1j * self.relation_im[idx]

    def params(self):
        return {
            "kbe.entity_re": self.entity_re,
            "kbe.entity_im": self.entity_im,
            "kbe.relation_re": self.relation_re,
            "kbe.relation_im": self.relation_im,
        }

    def copy(self):
        return ComplexEmbeddingTable(
            self.entity_re.copy(),
            self.entity_im.copy(),
            self.relation_re.copy(),
            self.relation_im.copy(),
        )


def _as_components(vec, name):
    arr = np.asarray(vec, dtype=np.complex128)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a 1-D vector")
    return arr.real.astype(np.float64), arr.imag.astype(np.float64)


def score(e_h, w_r, e_t):
    """Triple score via the fixed real expansion; returns a float."""
    hre, him = _as_components(e_h, "e_h")
    rre, rim = _as_components(w_r, "w_r")
    tre, tim = _as_components(e_t, "e_t")
    if not (hre.shape == rre.shape == tre.shape):
        raise DataError("score arguments must share one embedding width")
    return float(np.sum(hre * rre * tre + him * rre * tim + hre * rim * tim - him * rim * tre))


def grad_score(e_h, w_r, e_t):
    """Analytic partials of score, one complex vector per argument.

    Real parts hold d(phi)/d(re), imaginary parts d(phi)/d(im).
    """
    hre, him = _as_components(e_h, "e_h")
    rre, rim = _as_components(w_r, "w_r")
    tre, tim = _as_components(e_t, "e_t")
    g_h = (rre * tre + rim * tim) + 1j * (rre * tim - rim * tre)
    g_r = (hre * tre + him * tim) + 1j * (hre * tim - him * tre)
    g_t = (hre * rre - him * rim) + 1j * (him * rre + hre * rim)
    return g_h, g_r, g_t


def pair_scores(table, heads, tails):
    """Scores of every relation (incl. NA) for each pair: (B, R+1)."""
    heads = np.asarray(heads, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    hre = table.entity_re[heads]
    him = table.entity_im[heads]
    tre = table.entity_re[tails]
    tim = table.entity_im[tails]
    a = hre * tre + him * tim
    b = hre * tim - him * tre
    return a @ table.relation_re.T + b @ table.relation_im.T


def kb_relation_distribution(table, head, tail):
    """Softmax over all relations (incl. NA) of the pair's scores."""
    return softmax(pair_scores(table, [head], [tail]))[0]


def pair_distributions(table, heads, tails):
    return softmax(pair_scores(table, heads, tails), axis=1)


def init_table(num_entities, num_relations_total, d_k, init_scale, rng):
    """Gaussian init, drawn in a fixed order so seeds reproduce bytes."""
    if num_entities < 1 or num_relations_total < 1:
        raise DataError("embedding tables need at least one entity and relation row")
    ent_re = rng.normal(0.0, init_scale, (num_entities, d_k))
    ent_im = rng.normal(0.0, init_scale, (num_entities, d_k))
    rel_re = rng.normal(0.0, init_scale, (num_relations_total, d_k))
    rel_im = rng.normal(0.0, init_scale, (num_relations_total, d_k))
    return ComplexEmbeddingTable(ent_re, ent_im, rel_re, rel_im)


def _fact_keys(kb):
    n_e = kb.num_entities
    r_total = kb.num_relations + 1
    keys = np.array(
        [(t.head * r_total + t.rel) * n_e + t.tail for t in kb.triples], dtype=np.int64
    )
    keys.sort()
    return keys


def _corrupt(pos, neg_ratio, n_entities, r_total, fact_keys, rng):
    n = len(pos) * neg_ratio
    out = np.repeat(pos, neg_ratio, axis=0)
    corrupt_head = rng.random(n) < 0.5
    pending = np.arange(n)
    for _ in range(_MAX_RESAMPLE_ROUNDS):
        if len(pending) == 0:
            return out
        cand = rng.integers(n_entities, size=len(pending))
        ch = corrupt_head[pending]
        out[pending[ch], 0] = cand[ch]
        out[pending[~ch], 2] = cand[~ch]
        keys = (out[pending, 0] * r_total + out[pending, 1]) * n_entities + out[pending, 2]
        idx = np.searchsorted(fact_keys, keys)
        idx_c = np.minimum(idx, len(fact_keys) - 1)
        still_fact = (idx < len(fact_keys)) & (fact_keys[idx_c] == keys)
        pending = pending[still_fact]
    raise NumericError("could not sample negatives: KB too dense")


def _logistic_batch(table, rows, labels):
    """Loss and dense-table gradients of mean softplus(-y * phi)."""
    h, r, t = rows[:, 0], rows[:, 1], rows[:, 2]
    hre, him = table.entity_re[h], table.entity_im[h]
    tre, tim = table.entity_re[t], table.entity_im[t]
    rre, rim = table.relation_re[r], table.relation_im[r]
    a = hre * tre + him * tim
    b = hre * tim - him * tre
    phi = np.sum(a * rre + b * rim, axis=1)
    z = labels * phi
    loss = float(np.mean(softplus(-z)))
    dphi = (-labels * sigmoid(-z) / len(rows))[:, None]
    da = dphi * rre
    db = dphi * rim
    grads = {name: np.zeros_like(p) for name, p in table.params().items()}
    np.add.at(grads["kbe.entity_re"], h, da * tre + db * tim)
    np.add.at(grads["kbe.entity_im"], h, da * tim - db * tre)
    np.add.at(grads["kbe.entity_re"], t, da * hre - db * him)
    np.add.at(grads["kbe.entity_im"], t, da * him + db * hre)
    np.add.at(grads["kbe.relation_re"], r, dphi * a)
    np.add.at(grads["kbe.relation_im"], r, dphi * b)
    return loss, grads


def kb_training_arrays(kb):
    """Triple id array plus the sorted fact keys negative sampling needs."""
    triples = np.array([[t.head, t.rel, t.tail] for t in kb.triples], dtype=np.int64)
    return triples, _fact_keys(kb)


def logistic_pass(table, triples, fact_keys, n_entities, neg_ratio, rng, adam, lr):
    """One shuffled epoch of the logistic objective; returns the mean loss."""
    r_total = table.num_relations_total
    params = table.params()
    perm = rng.permutation(len(triples))
    total = 0.0
    for lo in range(0, len(triples), _BATCH):
        pos = triples[perm[lo : lo + _BATCH]]
        neg = _corrupt(pos, neg_ratio, n_entities, r_total, fact_keys, rng)
        rows = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        loss, grads = _logistic_batch(table, rows, labels)
        if not np.isfinite(loss):
            raise NumericError("non-finite logistic loss over KB triples")
        adam.step(params, grads, lr)
        total += loss * len(pos)
    return total / len(triples)


def pretrain(kb, hyper, seed):
    """Fit embeddings to the KB's facts; returns the trained table.

    The NA relation row keeps its random init (no triple mentions it).
    Deterministic for a fixed (kb, hyper, seed).
    """
    rng = np.random.default_rng(seed)
    table = init_table(kb.num_entities, kb.num_relations + 1, hyper.d_k, hyper.init_scale, rng)
    if not kb.triples or hyper.pretrain_epochs == 0:
        return table
    triples, fact_keys = kb_training_arrays(kb)
    adam = Adam()
    for epoch in range(hyper.pretrain_epochs):
        mean_loss = logistic_pass(
            table, triples, fact_keys, kb.num_entities, hyper.neg_ratio, rng, adam,
            hyper.pretrain_lr,
        )
        log.debug("pretrain epoch %d/%d: loss %.6f", epoch + 1, hyper.pretrain_epochs, mean_loss)
    return table


def save_checkpoint(table, path):
    """Binary layout: magic, version, dims, then the four row-major tables."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIII", _VERSION, table.num_entities, table.num_relations_total, table.d_k
            )
        )
        for arr in (table.entity_re, table.entity_im, table.relation_re, table.relation_im):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not an embedding checkpoint (bad magic)")
    version, n_e, r_total, d_k = struct.unpack_from("<IIII", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    arrays = []
    for shape in ((n_e, d_k), (n_e, d_k), (r_total, d_k), (r_total, d_k)):
        count = shape[0] * shape[1]
        if off + count * 8 > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        arrays.append(
            np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        )
        off += count * 8
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return ComplexEmbeddingTable(*arrays)
