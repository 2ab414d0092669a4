"""Sentence encoder: embeddings, BiLSTM, word and sentence attention.

Forward and backward passes are written out by hand over float64 numpy so
every gradient is analytic and every run is reproducible bit for bit.

Layout conventions, fixed across the package:
  - a batch of bags is flattened to S = B * T sentence rows of length L;
  - token embeddings are word vectors (d_w) concatenated with two position
    embeddings of d_p/2 each (offset to head and tail mention, shifted by
    L-1 into table rows 0..2L-2);
  - LSTM gate blocks are ordered i, f, g, o along the last axis;
  - PAD steps carry the recurrent state through unchanged in both
    directions and are masked out of word attention, so PAD tokens never
    receive attention mass and contribute exactly zero gradient;
  - word attention scores are v . tanh(W h_t) with projection width d_s;
  - sentence (bag) attention scores are x_i . diag(a) . q_r, where q_r is
    the gold relation's query row during training (mean query for
    NA-labeled bags, which have no row) and the mean query at inference;
  - dropout is of the inverted kind with keep probabilities p_in (on
    embedded token rows) and p_out (on the sentence vector), applied only
    when an rng is supplied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import PAD_ID, UNK_ID
from .errors import DataError
from .numerics import NEG_INF, sigmoid, softmax

log = logging.getLogger(__name__)


@dataclass
class WordEmbedding:
    vectors: np.ndarray  # (V, d_w)
    trainable: np.ndarray  # (V,) bool; PAD is always frozen at zero

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.trainable) != len(self.vectors):
            raise DataError("word table and trainable mask sizes differ")
        if self.trainable[PAD_ID]:
            raise DataError("PAD row must stay frozen")
        if np.any(self.vectors[PAD_ID] != 0.0):
            raise DataError("PAD row must be zero")


@dataclass
class PositionEmbedding:
    head: np.ndarray  # (2L-1, d_p/2)
    tail: np.ndarray  # (2L-1, d_p/2)

    def __post_init__(self):
        if self.head.shape != self.tail.shape or self.head.ndim != 2:
            raise DataError("position tables must be two matching 2-D arrays")
        if self.head.shape[0] % 2 != 1:
            raise DataError("position tables need 2L-1 rows")


@dataclass
class EncoderParams:
    wx_f: np.ndarray  # (d_in, 4*d_s)
    wh_f: np.ndarray  # (d_s, 4*d_s)
    b_f: np.ndarray  # (4*d_s,)
    wx_b: np.ndarray
    wh_b: np.ndarray
    b_b: np.ndarray
    w_att: np.ndarray  # (2*d_s, d_s)
    v_att: np.ndarray  # (d_s,)
    a_diag: np.ndarray  # (2*d_s,)
    queries: np.ndarray  # (R, 2*d_s), one row per non-NA relation
    w_out: np.ndarray  # (2*d_s, R+1)
    b_out: np.ndarray  # (R+1,)
    p_in: float = 0.9
    p_out: float = 0.7

    def __post_init__(self):
        d_in, h4 = self.wx_f.shape
        if h4 % 4 != 0:
            raise DataError("gate width must be a multiple of 4")
        d_s = h4 // 4
        if self.wh_f.shape != (d_s, h4) or self.b_f.shape != (h4,):
            raise DataError("forward LSTM shapes inconsistent")
        if self.wx_b.shape != (d_in, h4) or self.wh_b.shape != (d_s, h4) or self.b_b.shape != (h4,):
            raise DataError("backward LSTM shapes inconsistent")
        if self.w_att.shape != (2 * d_s, d_s) or self.v_att.shape != (d_s,):
            raise DataError("word attention shapes inconsistent")
        if self.a_diag.shape != (2 * d_s,):
            raise DataError("sentence attention diagonal shape inconsistent")
        r_total = self.w_out.shape[1]
        if self.w_out.shape != (2 * d_s, r_total) or self.b_out.shape != (r_total,):
            raise DataError("output layer shapes inconsistent")
        if self.queries.shape != (r_total - 1, 2 * d_s):
            raise DataError("need one query row per non-NA relation")
        if not (0.0 < self.p_in <= 1.0 and 0.0 < self.p_out <= 1.0):
            raise DataError("keep probabilities must lie in (0, 1]")

    @property
    def d_in(self):
        return self.wx_f.shape[0]

    @property
    def d_s(self):
        return self.wh_f.shape[0]

    @property
    def num_relations(self):
        return self.queries.shape[0]


@dataclass
class LanguageSide:
    """Everything the text side owns: tables plus encoder weights."""

    words: WordEmbedding
    positions: PositionEmbedding
    params: EncoderParams
    L: int

    def __post_init__(self):
        if self.positions.head.shape[0] != 2 * self.L - 1:
            raise DataError(f"position tables must have {2 * self.L - 1} rows for L={self.L}")
        d_p = 2 * self.positions.head.shape[1]
        if self.params.d_in != self.words.vectors.shape[1] + d_p:
            raise DataError("encoder input width != d_w + d_p")


def init_language(
    vocab_size,
    num_relations,
    d_w,
    d_p,
    d_s,
    L,
    rng,
    init_scale=0.1,
    p_in=0.9,
    p_out=0.7,
    words=None,
):
    """Fresh language side; all weights N(0, init_scale) in a fixed draw order."""
    if d_p % 2 != 0:
        raise DataError(f"d_p must be even (split across head/tail tables), got {d_p}")
    if num_relations < 1:
        raise DataError("need at least one non-NA relation")
    if vocab_size < 2:
        raise DataError("vocabulary must at least hold PAD and UNK")

    def draw(*shape):
        return rng.normal(0.0, init_scale, shape)

    if words is None:
        vecs = draw(vocab_size, d_w)
        vecs[PAD_ID] = 0.0
        trainable = np.ones(vocab_size, dtype=bool)
        trainable[PAD_ID] = False
        words = WordEmbedding(vecs, trainable)
    elif words.vectors.shape != (vocab_size, d_w):
        raise DataError("given word table does not match vocab_size x d_w")
    positions = PositionEmbedding(draw(2 * L - 1, d_p // 2), draw(2 * L - 1, d_p // 2))
    d_in = d_w + d_p
    params = EncoderParams(
        wx_f=draw(d_in, 4 * d_s),
        wh_f=draw(d_s, 4 * d_s),
        b_f=draw(4 * d_s),
        wx_b=draw(d_in, 4 * d_s),
        wh_b=draw(d_s, 4 * d_s),
        b_b=draw(4 * d_s),
        w_att=draw(2 * d_s, d_s),
        v_att=draw(d_s),
        a_diag=draw(2 * d_s),
        queries=draw(num_relations, 2 * d_s),
        w_out=draw(2 * d_s, num_relations + 1),
        b_out=draw(num_relations + 1),
        p_in=p_in,
        p_out=p_out,
    )
    return LanguageSide(words, positions, params, L)


def load_word_embeddings(path, vocab, d_w, rng, init_scale=0.1):
    """Read ``token v1 .. v_dw`` lines; matched rows are frozen.

    Vocabulary tokens absent from the file (UNK included) get random
    trainable rows; PAD stays zero and frozen.
    """
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) != d_w + 1:
                raise DataError(f"{path}:{lineno}: expected a token and {d_w} floats")
            try:
                table[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad float") from None
    vecs = rng.normal(0.0, init_scale, (len(vocab), d_w))
    trainable = np.ones(len(vocab), dtype=bool)
    hits = 0
    for idx, tok in enumerate(vocab.tokens):
        if tok in table:
            vecs[idx] = table[tok]
            trainable[idx] = False
            hits += 1
    vecs[PAD_ID] = 0.0
    trainable[PAD_ID] = False
    trainable[UNK_ID] = True
    log.info("load_word_embeddings: %d/%d vocabulary tokens matched", hits, len(vocab))
    return WordEmbedding(vecs, trainable)


def language_params(lang):
    """Name -> array registry used by the optimizer and gradients."""
    p = lang.params
    return {
        "lang.word": lang.words.vectors,
        "lang.pos_head": lang.positions.head,
        "lang.pos_tail": lang.positions.tail,
        "lang.wx_f": p.wx_f,
        "lang.wh_f": p.wh_f,
        "lang.b_f": p.b_f,
        "lang.wx_b": p.wx_b,
        "lang.wh_b": p.wh_b,
        "lang.b_b": p.b_b,
        "lang.w_att": p.w_att,
        "lang.v_att": p.v_att,
        "lang.a_diag": p.a_diag,
        "lang.queries": p.queries,
        "lang.w_out": p.w_out,
        "lang.b_out": p.b_out,
    }


def _lstm_forward(xw, wh, b, step_mask, reverse):
    S, L, h4 = xw.shape
    d = h4 // 4
    h = np.zeros((S, d))
    c = np.zeros((S, d))
    cache = {
        "i": np.empty((S, L, d)),
        "f": np.empty((S, L, d)),
        "g": np.empty((S, L, d)),
        "o": np.empty((S, L, d)),
        "tc": np.empty((S, L, d)),
        "h_prev": np.empty((S, L, d)),
        "c_prev": np.empty((S, L, d)),
        "h": np.empty((S, L, d)),
    }
    steps = range(L - 1, -1, -1) if reverse else range(L)
    for t in steps:
        cache["h_prev"][:, t] = h
        cache["c_prev"][:, t] = c
        z = xw[:, t] + h @ wh + b
        i = sigmoid(z[:, :d])
        f = sigmoid(z[:, d : 2 * d])
        g = np.tanh(z[:, 2 * d : 3 * d])
        o = sigmoid(z[:, 3 * d :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = step_mask[:, t : t + 1]
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        for key, val in (("i", i), ("f", f), ("g", g), ("o", o), ("tc", tc), ("h", h)):
            cache[key][:, t] = val
    return cache


def _lstm_backward(cache, dh_seq, wh, step_mask, reverse):
    S, L, d = dh_seq.shape
    dz_all = np.empty((S, L, 4 * d))
    dh_next = np.zeros((S, d))
    dc_next = np.zeros((S, d))
    steps = range(L) if reverse else range(L - 1, -1, -1)
    for t in steps:
        i = cache["i"][:, t]
        f = cache["f"][:, t]
        g = cache["g"][:, t]
        o = cache["o"][:, t]
        tc = cache["tc"][:, t]
        m = step_mask[:, t : t + 1]
        dh = dh_seq[:, t] + dh_next
        dh_t = m * dh
        dcc = m * dc_next
        dctilde = dcc + dh_t * o * (1.0 - tc * tc)
        do = dh_t * tc
        di = dctilde * g
        dg = dctilde * i
        df = dctilde * cache["c_prev"][:, t]
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)],
            axis=1,
        )
        dz_all[:, t] = dz
        dh_next = dz @ wh.T + (dh - dh_t)
        dc_next = dctilde * f + (dc_next - dcc)
    return dz_all


def language_forward(lang, tokens, head_pos, tail_pos, labels=None, rng=None):
    """Relation distribution per bag, plus the cache the backward pass needs.

    tokens (B,T,L) int, positions (B,T) int, labels (B,) int or None (None
    selects the mean attention query everywhere, as at inference). With an
    rng, dropout masks are drawn (input mask first, then output mask).
    """
    p = lang.params
    B, T, L = tokens.shape
    if L != lang.L:
        raise DataError(f"batch sentence length {L} != model L {lang.L}")
    S = B * T
    toks = tokens.reshape(S, L)
    hpos = head_pos.reshape(S)
    tpos = tail_pos.reshape(S)
    d_w = lang.words.vectors.shape[1]
    dp2 = lang.positions.head.shape[1]

    pos_range = np.arange(L)[None, :]
    off_h = pos_range - hpos[:, None] + (L - 1)
    off_t = pos_range - tpos[:, None] + (L - 1)
    x = np.concatenate(
        [lang.words.vectors[toks], lang.positions.head[off_h], lang.positions.tail[off_t]],
        axis=2,
    )
    pad = toks == PAD_ID
    step_mask = (~pad).astype(np.float64)

    mask_in = None
    mask_out = None
    if rng is not None:
        mask_in = (rng.random(x.shape) < p.p_in).astype(np.float64) / p.p_in
        mask_out = (rng.random((S, 2 * p.d_s)) < p.p_out).astype(np.float64) / p.p_out
        x = x * mask_in

    xw_f = x.reshape(S * L, -1) @ p.wx_f
    xw_b = x.reshape(S * L, -1) @ p.wx_b
    fwd = _lstm_forward(xw_f.reshape(S, L, -1), p.wh_f, p.b_f, step_mask, reverse=False)
    bwd = _lstm_forward(xw_b.reshape(S, L, -1), p.wh_b, p.b_b, step_mask, reverse=True)
    h_cat = np.concatenate([fwd["h"], bwd["h"]], axis=2)  # (S, L, 2*d_s)

    m_att = np.tanh(h_cat.reshape(S * L, -1) @ p.w_att).reshape(S, L, -1)
    u = m_att @ p.v_att
    u = np.where(pad, NEG_INF, u)
    a = softmax(u, axis=1)
    a = np.where(pad, 0.0, a)
    s_sent = np.einsum("sl,sld->sd", a, h_cat)

    s_drop = s_sent if mask_out is None else s_sent * mask_out
    x_bag = s_drop.reshape(B, T, -1)

    mean_q = p.queries.mean(axis=0)
    if labels is None:
        q = np.tile(mean_q, (B, 1))
        use_mean = np.ones(B, dtype=bool)
    else:
        labels = np.asarray(labels)
        use_mean = labels >= p.num_relations  # NA has no query row
        safe = np.where(use_mean, 0, labels)
        q = p.queries[safe]
        q[use_mean] = mean_q
    scores = np.einsum("btd,bd->bt", x_bag * p.a_diag[None, None, :], q)
    b_w = softmax(scores, axis=1)
    s_bag = np.einsum("bt,btd->bd", b_w, x_bag)
    logits = s_bag @ p.w_out + p.b_out
    probs = softmax(logits, axis=1)

    cache = {
        "B": B, "T": T, "L": L,
        "toks": toks, "off_h": off_h, "off_t": off_t, "pad": pad,
        "step_mask": step_mask, "x": x, "mask_in": mask_in, "mask_out": mask_out,
        "fwd": fwd, "bwd": bwd, "h_cat": h_cat, "m_att": m_att, "a": a,
        "s_sent": s_sent, "s_drop": s_drop, "x_bag": x_bag,
        "q": q, "use_mean": use_mean, "labels": labels,
        "b_w": b_w, "s_bag": s_bag, "probs": probs,
        "d_w": d_w, "dp2": dp2,
    }
    return probs, cache


def language_backward(lang, cache, dlogits):
    """Gradients of sum(dlogits * logits) w.r.t. every language parameter.

    Callers fold softmax/loss derivatives into dlogits (for cross-entropy
    on mean log-loss: (probs - onehot) / N).
    """
    p = lang.params
    B, T, L = cache["B"], cache["T"], cache["L"]
    S = B * T
    grads = {name: np.zeros_like(arr) for name, arr in language_params(lang).items()}

    grads["lang.w_out"] += cache["s_bag"].T @ dlogits
    grads["lang.b_out"] += dlogits.sum(axis=0)
    ds_bag = dlogits @ p.w_out.T

    x_bag, b_w, q = cache["x_bag"], cache["b_w"], cache["q"]
    db_w = np.einsum("bd,btd->bt", ds_bag, x_bag)
    dx_bag = b_w[:, :, None] * ds_bag[:, None, :]
    dscores = b_w * (db_w - np.sum(b_w * db_w, axis=1, keepdims=True))
    dx_bag += dscores[:, :, None] * (p.a_diag[None, None, :] * q[:, None, :])
    grads["lang.a_diag"] += np.einsum("bt,btd,bd->d", dscores, x_bag, q)
    dq = np.einsum("bt,btd->bd", dscores, x_bag * p.a_diag[None, None, :])

    use_mean = cache["use_mean"]
    r = p.num_relations
    if use_mean.any():
        grads["lang.queries"] += dq[use_mean].sum(axis=0)[None, :] / r
    if not use_mean.all():
        np.add.at(grads["lang.queries"], cache["labels"][~use_mean], dq[~use_mean])

    ds_drop = dx_bag.reshape(S, -1)
    ds_sent = ds_drop if cache["mask_out"] is None else ds_drop * cache["mask_out"]

    a, h_cat, m_att = cache["a"], cache["h_cat"], cache["m_att"]
    da = np.einsum("sd,sld->sl", ds_sent, h_cat)
    dh_cat = a[:, :, None] * ds_sent[:, None, :]
    du = a * (da - np.sum(a * da, axis=1, keepdims=True))
    dm = du[:, :, None] * p.v_att[None, None, :]
    grads["lang.v_att"] += np.einsum("sl,sld->d", du, m_att)
    dpre = dm * (1.0 - m_att * m_att)
    grads["lang.w_att"] += h_cat.reshape(S * L, -1).T @ dpre.reshape(S * L, -1)
    dh_cat += (dpre.reshape(S * L, -1) @ p.w_att.T).reshape(S, L, -1)

    d_s = p.d_s
    step_mask = cache["step_mask"]
    dz_f = _lstm_backward(cache["fwd"], dh_cat[:, :, :d_s], p.wh_f, step_mask, reverse=False)
    dz_b = _lstm_backward(cache["bwd"], dh_cat[:, :, d_s:], p.wh_b, step_mask, reverse=True)

    x_flat = cache["x"].reshape(S * L, -1)
    for dz, wx, wh, names in (
        (dz_f, p.wx_f, p.wh_f, ("lang.wx_f", "lang.wh_f", "lang.b_f")),
        (dz_b, p.wx_b, p.wh_b, ("lang.wx_b", "lang.wh_b", "lang.b_b")),
    ):
        dz_flat = dz.reshape(S * L, -1)
        grads[names[0]] += x_flat.T @ dz_flat
        hp = (cache["fwd"] if names[0] == "lang.wx_f" else cache["bwd"])["h_prev"]
        grads[names[1]] += hp.reshape(S * L, -1).T @ dz_flat
        grads[names[2]] += dz_flat.sum(axis=0)
    dx = (dz_f.reshape(S * L, -1) @ p.wx_f.T + dz_b.reshape(S * L, -1) @ p.wx_b.T).reshape(
        S, L, -1
    )
    if cache["mask_in"] is not None:
        dx = dx * cache["mask_in"]

    d_w, dp2 = cache["d_w"], cache["dp2"]
    np.add.at(grads["lang.word"], cache["toks"].ravel(), dx[:, :, :d_w].reshape(S * L, -1))
    grads["lang.word"][~lang.words.trainable] = 0.0
    np.add.at(
        grads["lang.pos_head"], cache["off_h"].ravel(), dx[:, :, d_w : d_w + dp2].reshape(S * L, -1)
    )
    np.add.at(
        grads["lang.pos_tail"], cache["off_t"].ravel(), dx[:, :, d_w + dp2 :].reshape(S * L, -1)
    )
    return grads


def embed_tokens(mention, words, positions, L):
    """Embed a single mention: (L, d_w + d_p) rows of word + position parts."""
    toks = np.asarray(mention.tokens)
    if len(toks) != L:
        raise DataError(f"mention has {len(toks)} tokens, expected {L}")
    rng_pos = np.arange(L)
    off_h = rng_pos - mention.head_pos + (L - 1)
    off_t = rng_pos - mention.tail_pos + (L - 1)
    return np.concatenate(
        [words.vectors[toks], positions.head[off_h], positions.tail[off_t]], axis=1
    )


def encode_sentence(embedded, pad_mask, params, rng=None):
    """One sentence through the BiLSTM + word attention: (2*d_s,) vector."""
    x = np.asarray(embedded, dtype=np.float64)[None, :, :]
    pad = np.asarray(pad_mask, dtype=bool)[None, :]
    if rng is not None:
        x = x * ((rng.random(x.shape) < params.p_in) / params.p_in)
    S, L, _ = x.shape
    step_mask = (~pad).astype(np.float64)
    xw_f = (x.reshape(S * L, -1) @ params.wx_f).reshape(S, L, -1)
    xw_b = (x.reshape(S * L, -1) @ params.wx_b).reshape(S, L, -1)
    fwd = _lstm_forward(xw_f, params.wh_f, params.b_f, step_mask, reverse=False)
    bwd = _lstm_forward(xw_b, params.wh_b, params.b_b, step_mask, reverse=True)
    h_cat = np.concatenate([fwd["h"], bwd["h"]], axis=2)
    m_att = np.tanh(h_cat.reshape(S * L, -1) @ params.w_att).reshape(S, L, -1)
    u = np.where(pad, NEG_INF, m_att @ params.v_att)
    a = np.where(pad, 0.0, softmax(u, axis=1))
    vec = np.einsum("sl,sld->sd", a, h_cat)[0]
    if rng is not None:
        vec = vec * ((rng.random(vec.shape) < params.p_out) / params.p_out)
    return vec


def attend_sentences(sentence_vectors, params, rel=None):
    """Weight T sentence vectors into one bag vector.

    rel selects the query row; None (or the NA id) uses the mean query, as
    at inference.
    """
    x = np.asarray(sentence_vectors, dtype=np.float64)
    if rel is None or rel >= params.num_relations:
        q = params.queries.mean(axis=0)
    else:
        q = params.queries[rel]
    scores = (x * params.a_diag[None, :]) @ q
    w = softmax(scores)
    return w @ x


def language_distribution(bag_vector, params):
    """Softmax relation distribution (incl. NA) for one bag vector."""
    return softmax(np.asarray(bag_vector) @ params.w_out + params.b_out)
