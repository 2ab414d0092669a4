"""Joint training of the text encoder and the KB embedding.

Loss terms, all means over the batch's bags with a 1e-12 log floor
(clamped bags contribute zero gradient):

  J_L  cross-entropy of the language distribution at the bag label;
  J_G  cross-entropy of the KB-side softmax at the bag label;
  J_D  cross-entropy of the language distribution at the KB side's
       argmax relation r* (smallest id on ties); r* is a constant, so
       J_D sends no gradient into the KB side.

Variants select the optimized objective J (plus an L2 term over the
variant's active parameter groups):

  base    J_L                       (text only; KB side untouched)
  naive   J_L + J_G
  full    J_L + J_G + J_D
  weston  J_L for the text side, while the KB side independently
          continues its logistic objective (the two meet only at
          inference)

The public loss functions are deterministic (no dropout); train() draws
dropout masks and batch shuffles from one seeded generator, optimizing
with Adam at lr1 for text parameters and lr2 for KB tables.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, fields

import numpy as np

from .encoder import (
    EncoderParams,
    LanguageSide,
    PositionEmbedding,
    WordEmbedding,
    init_language,
    language_backward,
    language_forward,
    language_params,
)
from .errors import ConfigError, DataError, NumericError
from .kbe import (
    ComplexEmbeddingTable,
    KbeHyper,
    init_table,
    kb_training_arrays,
    logistic_pass,
    pair_scores,
    pretrain,
)
from .numerics import LOG_FLOOR, clamped_log, softmax
from .optim import Adam

log = logging.getLogger(__name__)

VARIANTS = ("base", "naive", "full", "weston")

_MAGIC = b"HRMD"
_VERSION = 1


@dataclass
class TrainingConfig:
    variant: str = "full"
    lr1: float = 5e-4
    lr2: float = 1e-5
    lambda_: float = 3e-4
    alpha: float = 0.6
    epochs: int = 30
    batch_size: int = 50
    seed: int = 7
    T: int = 5
    L: int = 30
    d_w: int = 16
    d_p: int = 8
    d_s: int = 32
    p_in: float = 0.9
    p_out: float = 0.7
    init_scale: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.lr1 < 0 or self.lr2 < 0 or self.lambda_ < 0:
            raise ConfigError("learning rates and lambda must be non-negative")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 0 or self.batch_size < 1 or self.T < 1 or self.L < 2:
            raise ConfigError("epochs >= 0, batch_size >= 1, T >= 1, L >= 2 required")
        if self.d_w < 1 or self.d_s < 1 or self.d_p < 2 or self.d_p % 2:
            raise ConfigError("d_w >= 1, d_s >= 1 and even d_p >= 2 required")
        if not (0.0 < self.p_in <= 1.0 and 0.0 < self.p_out <= 1.0):
            raise ConfigError("keep probabilities must lie in (0, 1]")


# "lambda" is the file/CLI key; the dataclass field needs the underscore
_KEY_TO_FIELD = {"lambda": "lambda_"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}


def parse_kv_file(path):
    """Flat ``key=value`` text; blank lines and ``#`` comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def config_from_mapping(mapping, cls=TrainingConfig):
    """Build a config dataclass from string-or-typed values, type-checked."""
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        name = _KEY_TO_FIELD.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            typ = known[name]
            try:
                if typ == "int":
                    value = int(value)
                elif typ == "float":
                    value = float(value)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {value!r}") from None
        kwargs[name] = value
    return cls(**kwargs)


def load_training_config(path):
    raw = parse_kv_file(path)
    known_keys = {_FIELD_TO_KEY.get(f.name, f.name) for f in fields(TrainingConfig)}
    return config_from_mapping({k: v for k, v in raw.items() if k in known_keys})


@dataclass
class ModelState:
    language: LanguageSide
    knowledge: ComplexEmbeddingTable
    variant: str

    def params(self):
        return {**language_params(self.language), **self.knowledge.params()}


def trainable_params(state, variant=None):
    """The parameter groups the variant's objective actually moves."""
    variant = state.variant if variant is None else variant
    p = language_params(state.language)
    if variant in ("naive", "full"):
        p.update(state.knowledge.params())
    return p


def learning_rates(state, config):
    return {
        name: config.lr1 if name.startswith("lang.") else config.lr2
        for name in trainable_params(state, config.variant)
    }


def as_batch(data):
    """Accept a LabeledDataset or an arrays dict; return the arrays dict."""
    if hasattr(data, "arrays"):
        return data.arrays()
    return data


def _slice_batch(arrays, idx):
    return {k: v[idx] for k, v in arrays.items()}


def _ce_from_probs(probs, targets):
    """Mean clamped cross-entropy and its dlogits (zero rows when clamped)."""
    n = probs.shape[0]
    picked = probs[np.arange(n), targets]
    loss = -float(np.mean(clamped_log(picked)))
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits *= (picked >= LOG_FLOOR)[:, None] / n
    return loss, dlogits


def _kb_backward(table, heads, tails, dscores):
    """Gradients of sum(dscores * pair_scores) into the embedding tables."""
    heads = np.asarray(heads, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    hre, him = table.entity_re[heads], table.entity_im[heads]
    tre, tim = table.entity_re[tails], table.entity_im[tails]
    a = hre * tre + him * tim
    b = hre * tim - him * tre
    grads = {name: np.zeros_like(arr) for name, arr in table.params().items()}
    grads["kbe.relation_re"] += dscores.T @ a
    grads["kbe.relation_im"] += dscores.T @ b
    da = dscores @ table.relation_re
    db = dscores @ table.relation_im
    np.add.at(grads["kbe.entity_re"], heads, da * tre + db * tim)
    np.add.at(grads["kbe.entity_im"], heads, da * tim - db * tre)
    np.add.at(grads["kbe.entity_re"], tails, da * hre - db * him)
    np.add.at(grads["kbe.entity_im"], tails, da * him + db * hre)
    return grads


def loss_language(batch, state):
    """(J_L, gradients over the text parameters); deterministic, no dropout."""
    b = as_batch(batch)
    probs, cache = language_forward(
        state.language, b["tokens"], b["head_pos"], b["tail_pos"], b["labels"]
    )
    loss, dlogits = _ce_from_probs(probs, b["labels"])
    return loss, language_backward(state.language, cache, dlogits)


def loss_knowledge(batch, state):
    """(J_G, gradients over the KB tables); deterministic."""
    b = as_batch(batch)
    scores = pair_scores(state.knowledge, b["heads"], b["tails"])
    loss, dscores = _ce_from_probs(softmax(scores, axis=1), b["labels"])
    return loss, _kb_backward(state.knowledge, b["heads"], b["tails"], dscores)


def kb_argmax(state, heads, tails):
    """r* per pair: argmax of the KB-side scores, smallest id on ties."""
    return np.argmax(pair_scores(state.knowledge, heads, tails), axis=1)


def loss_dissimilarity(batch, state):
    """(J_D, gradients over the text parameters only).

    r* is recomputed from the current KB side and then treated as a
    constant target, so no gradient flows into the KB tables.
    """
    b = as_batch(batch)
    rstar = kb_argmax(state, b["heads"], b["tails"])
    probs, cache = language_forward(
        state.language, b["tokens"], b["head_pos"], b["tail_pos"], b["labels"]
    )
    loss, dlogits = _ce_from_probs(probs, rstar)
    return loss, language_backward(state.language, cache, dlogits)


def _reg_masked(state, name, arr):
    if name == "lang.word":
        out = np.zeros_like(arr)
        mask = state.language.words.trainable
        out[mask] = arr[mask]
        return out
    return arr


def regularization(state, variant, lambda_):
    """lambda * ||theta||^2 over the variant's active groups, plus gradients.

    Frozen word rows (PAD included) stay outside the norm.
    """
    value = 0.0
    grads = {}
    for name, arr in trainable_params(state, variant).items():
        masked = _reg_masked(state, name, arr)
        value += float(np.sum(masked * masked))
        grads[name] = 2.0 * lambda_ * masked
    return lambda_ * value, grads


def joint_loss(batch, state, config):
    """(J, gradients over the variant's trainable parameters); no dropout.

    The objective follows config.variant, so one state can be scored
    under several objectives.
    """
    b = as_batch(batch)
    j, _, grads, _ = _objective(b, state, config.variant, config.lambda_, rng=None)
    return j, grads


def loss_terms(batch, state):
    """All three terms at once (shared forwards), for logging and tests."""
    b = as_batch(batch)
    probs, _ = language_forward(
        state.language, b["tokens"], b["head_pos"], b["tail_pos"], b["labels"]
    )
    scores = pair_scores(state.knowledge, b["heads"], b["tails"])
    n = probs.shape[0]
    jl = -float(np.mean(clamped_log(probs[np.arange(n), b["labels"]])))
    jg = -float(np.mean(clamped_log(softmax(scores, axis=1)[np.arange(n), b["labels"]])))
    rstar = np.argmax(scores, axis=1)
    jd = -float(np.mean(clamped_log(probs[np.arange(n), rstar])))
    return jl, jg, jd


def _objective(b, state, variant, lambda_, rng):
    """One fused forward/backward for the variant's objective.

    Returns (J, per-term tuple, gradient dict, language probs).
    """
    probs, cache = language_forward(
        state.language, b["tokens"], b["head_pos"], b["tail_pos"], b["labels"], rng=rng
    )
    scores = pair_scores(state.knowledge, b["heads"], b["tails"])
    kb_probs = softmax(scores, axis=1)
    rstar = np.argmax(scores, axis=1)

    jl, dlogits = _ce_from_probs(probs, b["labels"])
    jg, dscores = _ce_from_probs(kb_probs, b["labels"])
    jd, dlogits_d = _ce_from_probs(probs, rstar)

    total_dlogits = dlogits
    if variant == "full":
        total_dlogits = dlogits + dlogits_d
    grads = language_backward(state.language, cache, total_dlogits)
    if variant in ("naive", "full"):
        grads.update(_kb_backward(state.knowledge, b["heads"], b["tails"], dscores))

    reg_value, reg_grads = regularization(state, variant, lambda_)
    for name, g in reg_grads.items():
        grads[name] += g

    if variant == "base" or variant == "weston":
        j = jl + reg_value
    elif variant == "naive":
        j = jl + jg + reg_value
    else:
        j = jl + jg + jd + reg_value
    return j, (jl, jg, jd), grads, probs


@dataclass
class EpochLoss:
    epoch: int
    j_l: float
    j_g: float
    j_d: float
    j: float


def train(dataset, kb, config, kbe_table=None, kbe_hyper=None, words=None):
    """Run the variant's training loop; returns (ModelState, loss log).

    The KB side starts from `kbe_table` when given (checkpoint warm
    start); otherwise base gets a fresh random table and every other
    variant pretrains one with `kbe_hyper` (defaults) at config.seed.
    Everything is deterministic for fixed inputs and seed.
    """
    arrays = dataset.arrays()
    if dataset.T != config.T or dataset.L != config.L:
        raise DataError(
            f"dataset (T={dataset.T}, L={dataset.L}) does not match "
            f"config (T={config.T}, L={config.L})"
        )
    r_total = kb.num_relations + 1
    if arrays["labels"].max() >= r_total:
        raise DataError("dataset labels exceed the KB's relation count")
    if max(arrays["heads"].max(), arrays["tails"].max()) >= kb.num_entities:
        raise DataError("dataset entities exceed the KB's entity count")
    hyper = kbe_hyper if kbe_hyper is not None else KbeHyper()

    rng = np.random.default_rng(config.seed)
    lang = init_language(
        len(dataset.vocab),
        kb.num_relations,
        config.d_w,
        config.d_p,
        config.d_s,
        config.L,
        rng,
        init_scale=config.init_scale,
        p_in=config.p_in,
        p_out=config.p_out,
        words=words,
    )
    if kbe_table is not None:
        if (
            kbe_table.num_entities != kb.num_entities
            or kbe_table.num_relations_total != r_total
        ):
            raise DataError(
                f"embedding checkpoint shape ({kbe_table.num_entities} entities, "
                f"{kbe_table.num_relations_total} relations) does not match the KB"
            )
        table = kbe_table.copy()
    elif config.variant == "base":
        table = init_table(kb.num_entities, r_total, hyper.d_k, hyper.init_scale, rng)
    else:
        table = pretrain(kb, hyper, config.seed)
    state = ModelState(lang, table, config.variant)

    adam = Adam()
    params = trainable_params(state)
    lrs = learning_rates(state, config)
    if config.variant == "weston":
        kb_triples, fact_keys = kb_training_arrays(kb)
        kb_adam = Adam()

    n = len(dataset)
    losses = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            b = _slice_batch(arrays, idx)
            j, (jl, jg, jd), grads, _ = _objective(b, state, config.variant, config.lambda_, rng)
            if not np.isfinite(j):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}")
            adam.step(params, grads, lrs)
            sums += np.array([jl, jg, jd, j]) * len(idx)
        if config.variant == "weston" and len(kb_triples):
            logistic_pass(
                state.knowledge, kb_triples, fact_keys, kb.num_entities,
                hyper.neg_ratio, rng, kb_adam, config.lr2,
            )
        row = EpochLoss(epoch + 1, *(sums / n))
        losses.append(row)
        log.info(
            "epoch %d/%d: J_L=%.4f J_G=%.4f J_D=%.4f J=%.4f",
            row.epoch, config.epochs, row.j_l, row.j_g, row.j_d, row.j,
        )
    return state, losses


def write_loss_csv(losses, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,J_L,J_G,J_D,J\n")
        for row in losses:
            fh.write(f"{row.epoch},{row.j_l:.12g},{row.j_g:.12g},{row.j_d:.12g},{row.j:.12g}\n")


_ARRAY_ORDER = (
    "lang.word",
    "lang.pos_head",
    "lang.pos_tail",
    "lang.wx_f",
    "lang.wh_f",
    "lang.b_f",
    "lang.wx_b",
    "lang.wh_b",
    "lang.b_b",
    "lang.w_att",
    "lang.v_att",
    "lang.a_diag",
    "lang.queries",
    "lang.w_out",
    "lang.b_out",
    "kbe.entity_re",
    "kbe.entity_im",
    "kbe.relation_re",
    "kbe.relation_im",
)


def save_model(state, path):
    """Full model checkpoint: JSON header plus fixed-order float64 blocks."""
    lang = state.language
    meta = {
        "variant": state.variant,
        "L": lang.L,
        "vocab_size": int(lang.words.vectors.shape[0]),
        "d_w": int(lang.words.vectors.shape[1]),
        "d_p": int(2 * lang.positions.head.shape[1]),
        "d_s": int(lang.params.d_s),
        "num_relations": int(lang.params.num_relations),
        "num_entities": int(state.knowledge.num_entities),
        "d_k": int(state.knowledge.d_k),
        "p_in": lang.params.p_in,
        "p_out": lang.params.p_out,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = state.params()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(lang.words.trainable.astype("<u1").tobytes())
        for name in _ARRAY_ORDER:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    off = 12
    meta = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    V, d_w, d_p, d_s, L = (meta[k] for k in ("vocab_size", "d_w", "d_p", "d_s", "L"))
    R, E, d_k = meta["num_relations"], meta["num_entities"], meta["d_k"]
    trainable = np.frombuffer(blob, dtype="<u1", count=V, offset=off).astype(bool)
    off += V
    shapes = {
        "lang.word": (V, d_w),
        "lang.pos_head": (2 * L - 1, d_p // 2),
        "lang.pos_tail": (2 * L - 1, d_p // 2),
        "lang.wx_f": (d_w + d_p, 4 * d_s),
        "lang.wh_f": (d_s, 4 * d_s),
        "lang.b_f": (4 * d_s,),
        "lang.wx_b": (d_w + d_p, 4 * d_s),
        "lang.wh_b": (d_s, 4 * d_s),
        "lang.b_b": (4 * d_s,),
        "lang.w_att": (2 * d_s, d_s),
        "lang.v_att": (d_s,),
        "lang.a_diag": (2 * d_s,),
        "lang.queries": (R, 2 * d_s),
        "lang.w_out": (2 * d_s, R + 1),
        "lang.b_out": (R + 1,),
        "kbe.entity_re": (E, d_k),
        "kbe.entity_im": (E, d_k),
        "kbe.relation_re": (R + 1, d_k),
        "kbe.relation_im": (R + 1, d_k),
    }
    arrays = {}
    for name in _ARRAY_ORDER:
        shape = shapes[name]
        count = int(np.prod(shape))
        if off + count * 8 > len(blob):
            raise DataError(f"{path}: truncated model checkpoint at {name}")
        arrays[name] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        )
        off += count * 8
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes in model checkpoint")
    lang = LanguageSide(
        WordEmbedding(arrays["lang.word"], trainable),
        PositionEmbedding(arrays["lang.pos_head"], arrays["lang.pos_tail"]),
        EncoderParams(
            wx_f=arrays["lang.wx_f"],
            wh_f=arrays["lang.wh_f"],
            b_f=arrays["lang.b_f"],
            wx_b=arrays["lang.wx_b"],
            wh_b=arrays["lang.wh_b"],
            b_b=arrays["lang.b_b"],
            w_att=arrays["lang.w_att"],
            v_att=arrays["lang.v_att"],
            a_diag=arrays["lang.a_diag"],
            queries=arrays["lang.queries"],
            w_out=arrays["lang.w_out"],
            b_out=arrays["lang.b_out"],
            p_in=meta["p_in"],
            p_out=meta["p_out"],
        ),
        L,
    )
    table = ComplexEmbeddingTable(
        arrays["kbe.entity_re"],
        arrays["kbe.entity_im"],
        arrays["kbe.relation_re"],
        arrays["kbe.relation_im"],
    )
    if meta["variant"] not in VARIANTS:
        raise DataError(f"{path}: unknown variant {meta['variant']!r} in checkpoint")
    return ModelState(lang, table, meta["variant"])
