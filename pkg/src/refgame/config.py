"""Run configuration: one flat dataclass, a key = value file format, and
flag overrides.  Every field can appear in a config file under its own
name; command-line flags win over file values, which win over defaults."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

ESTIMATORS = ("reinforce", "gs", "st-gs")
DECODE_MODES = ("sample", "greedy")
GROUNDING_MODES = ("indirect", "direct")


@dataclass
class RunConfig:
    # world
    n_attributes: int = 3
    values_per_attribute: int = 4
    feature_dim: int = 32
    instance_noise: float = 0.1
    world_seed: int = 0
    # architecture
    vocab_size: int = 20
    max_len: int = 6
    distractors: int = 7
    batch_size: int = 32
    embed_dim: int = 32
    hidden_dim: int = 64
    # estimator and temperature
    estimator: str = "st-gs"
    temperature: float = 1.2
    learn_temperature: bool = False
    tau0: float = 0.2
    # optimizer
    lr: float = 1e-3
    # grounding
    grounding: str = "indirect"
    kl_weight: float = 0.0
    caption_weight: float = 0.0
    lm_fraction: float = 0.5
    caption_fraction: float = 0.25
    lm_epochs: int = 40
    # schedule; a success_threshold above 1 disables threshold stopping
    max_updates: int = 5000
    eval_interval: int = 50
    eval_rounds: int = 400
    success_threshold: float = 0.98
    patience: int = 10
    # run identity and artifacts
    seed: int = 1
    out: str = "runs/default"
    decode: str = "sample"
    features: str = ""
    captions: str = ""

    def validate(self):
        positive = ("n_attributes", "values_per_attribute", "feature_dim",
                    "vocab_size", "max_len", "distractors", "batch_size",
                    "embed_dim", "hidden_dim", "eval_interval", "eval_rounds",
                    "patience", "lm_epochs")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"config: {name} must be positive, "
                                 f"got {getattr(self, name)}")
        for name in ("instance_noise", "temperature", "tau0", "lr",
                     "kl_weight", "caption_weight", "success_threshold"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"config: {name} must be finite and "
                                 f"non-negative, got {v}")
        if self.max_updates < 0:
            raise ValueError(f"config: max_updates must be >= 0, "
                             f"got {self.max_updates}")
        if self.lr <= 0 or self.temperature <= 0 or self.success_threshold <= 0:
            raise ValueError("config: lr, temperature and success_threshold "
                             "must be positive")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"config: estimator must be one of {ESTIMATORS}, "
                             f"got {self.estimator!r}")
        if self.decode not in DECODE_MODES:
            raise ValueError(f"config: decode must be one of {DECODE_MODES}, "
                             f"got {self.decode!r}")
        if self.grounding not in GROUNDING_MODES:
            raise ValueError(f"config: grounding must be one of "
                             f"{GROUNDING_MODES}, got {self.grounding!r}")
        for name in ("lm_fraction", "caption_fraction"):
            v = float(getattr(self, name))
            if not 0.0 < v < 1.0:
                raise ValueError(f"config: {name} must lie in (0, 1), got {v}")
        for name in ("features", "captions"):
            path = getattr(self, name)
            if path and not os.path.isfile(path):
                raise ValueError(f"config: {name} file not readable: {path}")
        return self


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def _coerce(key, raw):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"config: bad boolean for {key}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text):
    """key = value lines -> dict; blank lines and # comments allowed."""
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {ln}: expected key = value, "
                             f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ValueError(f"config line {ln}: {exc}") from None
    return out


def load_config(path=None, overrides=None):
    """Defaults, then file values, then overrides; validated."""
    cfg = RunConfig()
    if path:
        with open(path) as f:
            values = parse_config_text(f.read())
        for key, value in values.items():
            setattr(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ValueError(f"config: unknown override {key!r}")
        setattr(cfg, key, value)
    return cfg.validate()


def config_lines(cfg):
    """Stable key = value echo of every field, one per line."""
    out = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        out.append(f"{f.name} = {value}")
    return out


def save_config(cfg, path):
    with open(path, "w") as f:
        f.write("\n".join(config_lines(cfg)) + "\n")
