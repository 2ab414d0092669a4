"""Run-level configuration and provenance manifests for the pipeline.

One flat key=value file drives every subcommand; the same mapping is
snapshotted into a JSON manifest next to the outputs, together with
sha256 digests of the inputs (taken before the command runs) and
wall-clock timings, so any run can be traced back and replayed.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError, DataError
from .kbe import KbeHyper
from .training import (
    _FIELD_TO_KEY,
    TrainingConfig,
    config_from_mapping,
    parse_kv_file,
)


@dataclass
class RunConfig:
    """Every pipeline knob, defaulted to the synthetic benchmark scale."""

    seed: int = 7
    variant: str = "full"
    alpha: float = 0.6
    lr1: float = 5e-4
    lr2: float = 1e-5
    lambda_: float = 3e-4
    epochs: int = 30
    batch_size: int = 50
    T: int = 5
    L: int = 30
    d_w: int = 16
    d_p: int = 8
    d_s: int = 32
    p_in: float = 0.9
    p_out: float = 0.7
    init_scale: float = 0.1
    d_k: int = 50
    neg_ratio: int = 5
    pretrain_lr: float = 0.02
    pretrain_epochs: int = 200
    kb_entities: int = 200
    kb_relations: int = 12
    kb_triples: int = 3000
    implicit_rate: float = 0.0
    mislabel_rate: float = 0.0
    na_pair_factor: float = 0.5
    max_mentions: int = 6
    na_rate: float = 0.25
    n_test_sentences: int = 800
    word_embeddings: str = ""
    out_dir: str = "runs"

    def __post_init__(self):
        try:
            self.training()
            self.kbe()
        except DataError as exc:
            raise ConfigError(str(exc)) from None
        if self.kb_entities < 2 or self.kb_relations < 1 or self.kb_triples < 1:
            raise ConfigError("KB sizes must be positive (>= 2 entities)")
        for name in ("implicit_rate", "mislabel_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.implicit_rate + self.mislabel_rate > 1.0:
            raise ConfigError("implicit_rate + mislabel_rate must not exceed 1")
        if not (0.0 <= self.na_rate < 1.0):
            raise ConfigError(f"na_rate must lie in [0, 1), got {self.na_rate}")
        if self.na_pair_factor < 0 or self.max_mentions < 1:
            raise ConfigError("na_pair_factor >= 0 and max_mentions >= 1 required")
        if self.n_test_sentences < 0:
            raise ConfigError("n_test_sentences must be >= 0")
        if not self.out_dir:
            raise ConfigError("out_dir must be non-empty")

    def training(self):
        kw = {f.name: getattr(self, f.name) for f in fields(TrainingConfig)}
        return TrainingConfig(**kw)

    def kbe(self):
        kw = {f.name: getattr(self, f.name) for f in fields(KbeHyper)}
        return KbeHyper(**kw)

    def snapshot(self):
        """File-key mapping of every field, JSON-safe."""
        return {
            _FIELD_TO_KEY.get(f.name, f.name): getattr(self, f.name)
            for f in fields(self)
        }


def load_run_config(path=None, overrides=None):
    """RunConfig from an optional key=value file plus non-None overrides."""
    mapping = dict(parse_kv_file(path)) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            mapping[key] = value
    return config_from_mapping(mapping, cls=RunConfig)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class ManifestRun:
    """Collects one command's provenance; always writes the manifest.

    Input digests are taken when inputs are registered, before the work
    runs; the JSON lands on disk whether the command succeeds or fails.
    """

    def __init__(self, command, config, path):
        self.path = Path(path)
        self._t0 = time.perf_counter()
        self._doc = {
            "command": command,
            "config": config.snapshot(),
            "seed": config.seed,
            "variant": config.variant,
            "inputs": {},
            "outputs": [],
            "timings": {},
            "status": "failed",
            "error": None,
        }

    def add_inputs(self, *paths):
        for p in paths:
            p = Path(p)
            self._doc["inputs"][str(p)] = sha256_file(p) if p.is_file() else None

    def add_outputs(self, *paths):
        self._doc["outputs"].extend(str(p) for p in paths)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self._doc["status"] = "ok"
        else:
            self._doc["error"] = f"{exc_type.__name__}: {exc}"
        self._doc["timings"]["wall_s"] = round(time.perf_counter() - self._t0, 6)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self._doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return False
