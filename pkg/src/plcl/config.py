"""Run configuration: corpus, model and training sections, loaded from YAML,
range-checked field by field, and echoed back in normalized form."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .verifier import ModelConfig


def _check_range(section: str, name: str, value, lo=None, hi=None, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{name} must be a number, got {value!r}")
    low_bad = lo is not None and (value <= lo if lo_open else value < lo)
    if low_bad or (hi is not None and value > hi):
        lo_s = "-inf" if lo is None else lo
        hi_s = "inf" if hi is None else hi
        bracket = "(" if lo_open else "["
        raise ConfigError(f"{section}.{name}={value} outside {bracket}{lo_s}, {hi_s}]")


def _check_int(section, name, value, lo, hi):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{name} must be an integer, got {value!r}")
    _check_range(section, name, value, lo, hi)


def _check_bool(section, name, value):
    if not isinstance(value, bool):
        raise ConfigError(f"{section}.{name} must be true or false, got {value!r}")


@dataclass(frozen=True)
class CorpusConfig:
    K: int = 40
    d_in: int = 16
    n_keywords: int = 60
    family_size: int = 4
    min_len: int = 3
    max_len: int = 8
    dur_min: int = 2
    dur_max: int = 4
    noise_sigma: float = 0.3
    speaker_sigma: float = 0.3
    separation: float = 2.0
    hard_threshold: int = 2
    open_vocab: bool = True
    n_pairs: int = 2400
    split_ratios: tuple = (0.7, 0.1, 0.2)
    class_mix: tuple = (0.4, 0.3, 0.3)
    max_reuse: int = 10
    seed: int = 7

    def validate(self):
        s = "corpus"
        _check_int(s, "K", self.K, 2, 4096)
        _check_int(s, "d_in", self.d_in, 2, 1024)
        _check_int(s, "n_keywords", self.n_keywords, 2, 100000)
        _check_int(s, "family_size", self.family_size, 1, 64)
        _check_int(s, "min_len", self.min_len, 1, 64)
        _check_int(s, "max_len", self.max_len, self.min_len, 64)
        _check_int(s, "dur_min", self.dur_min, 1, 100)
        _check_int(s, "dur_max", self.dur_max, self.dur_min, 100)
        _check_range(s, "noise_sigma", self.noise_sigma, 0.0, 100.0)
        _check_range(s, "speaker_sigma", self.speaker_sigma, 0.0, 100.0)
        _check_range(s, "separation", self.separation, 0.0, 1000.0, lo_open=True)
        _check_int(s, "hard_threshold", self.hard_threshold, 1, 64)
        _check_bool(s, "open_vocab", self.open_vocab)
        _check_int(s, "n_pairs", self.n_pairs, 3, 10**7)
        _check_int(s, "max_reuse", self.max_reuse, 1, 10**6)
        _check_int(s, "seed", self.seed, 0, 2**63 - 1)
        for name, vals, n in (("split_ratios", self.split_ratios, 3), ("class_mix", self.class_mix, 3)):
            if len(vals) != n:
                raise ConfigError(f"{s}.{name} needs {n} entries, got {len(vals)}")
            for i, v in enumerate(vals):
                _check_range(s, f"{name}[{i}]", v, 0.0, 1.0, lo_open=True)
            if abs(sum(vals) - 1.0) > 1e-9:
                raise ConfigError(f"{s}.{name} must sum to 1, got {sum(vals)}")
        if self.open_vocab and self.n_keywords < 3 * max(2, self.family_size):
            raise ConfigError("corpus.open_vocab needs enough keywords for three disjoint family groups")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.5
    grad_clip: float = 5.0
    weight_decay: float = 0.0
    batch_size: int = 32
    eval_batch_size: int = 64
    epochs: int = 30
    seed: int = 7
    alpha: float = 0.8
    bank_margin: float = 0.2
    augment_ratio: float = 1.0
    p_single_edit: float = 0.7
    boost_factor: float = 1.0
    clat: bool = True
    claa: bool = True
    uat3: bool = True
    uat: bool = True
    uaa: bool = True
    uata: bool = True
    memory_bank: bool = True
    rebalance: bool = True

    def validate(self):
        s = "train"
        _check_range(s, "lr", self.lr, 0.0, 10.0, lo_open=True)
        _check_range(s, "momentum", self.momentum, 0.0, 0.999)
        _check_range(s, "grad_clip", self.grad_clip, 0.0, 1e6)
        _check_range(s, "weight_decay", self.weight_decay, 0.0, 1.0)
        _check_int(s, "batch_size", self.batch_size, 1, 100000)
        _check_int(s, "eval_batch_size", self.eval_batch_size, 1, 100000)
        _check_int(s, "epochs", self.epochs, 0, 100000)
        _check_int(s, "seed", self.seed, 0, 2**63 - 1)
        _check_range(s, "alpha", self.alpha, 0.0, 1.0, lo_open=True)
        if self.alpha >= 1.0:
            raise ConfigError("train.alpha must lie strictly below 1")
        _check_range(s, "bank_margin", self.bank_margin, 0.0, 0.5)
        _check_range(s, "augment_ratio", self.augment_ratio, 0.0, 10.0)
        _check_range(s, "p_single_edit", self.p_single_edit, 0.0, 1.0)
        _check_range(s, "boost_factor", self.boost_factor, 0.0, 100.0)
        for name in ("clat", "claa", "uat3", "uat", "uaa", "uata", "memory_bank", "rebalance"):
            _check_bool(s, name, getattr(self, name))


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.corpus.validate()
        self.train.validate()
        m = self.model
        s = "model"
        _check_int(s, "d_model", m.d_model, 1, 4096)
        _check_int(s, "d_proj", m.d_proj, 1, m.d_model)
        _check_int(s, "d_head", m.d_head, 1, 4096)
        _check_range(s, "temperature", m.temperature, 0.0, 100.0, lo_open=True)
        _check_int(s, "inject_count", m.inject_count, 0, 1024)
        _check_range(s, "focal_gamma", m.focal_gamma, 0.0, 20.0)
        _check_range(s, "focal_weight", m.focal_weight, 0.0, 1.0, lo_open=True)
        _check_range(s, "position_sharpness", m.position_sharpness, 0.0, 1000.0, lo_open=True)
        if m.K != self.corpus.K or m.d_in != self.corpus.d_in:
            raise ConfigError(
                f"model.K/d_in ({m.K}, {m.d_in}) must match corpus.K/d_in ({self.corpus.K}, {self.corpus.d_in})"
            )
        return self

    def to_dict(self) -> dict:
        def sec(obj):
            return {f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v) for f in fields(obj)}

        return {"corpus": sec(self.corpus), "model": sec(self.model), "train": sec(self.train)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping with corpus/model/train sections")
        unknown = set(d) - {"corpus", "model", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        corpus = _build(CorpusConfig, "corpus", d.get("corpus"))
        model_d = dict(d.get("model") or {})
        model_d.setdefault("K", corpus.K)
        model_d.setdefault("d_in", corpus.d_in)
        model = _build(ModelConfig, "model", model_d)
        train = _build(TrainConfig, "train", d.get("train"))
        return cls(corpus, model, train).validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """``overrides`` maps ``section.field`` to already-typed values."""
        d = self.to_dict()
        for key, value in overrides.items():
            sec, _, name = key.partition(".")
            if sec not in d or name not in d[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            d[sec][name] = value
        return RunConfig.from_dict(d)


def _build(cls, section: str, values):
    values = dict(values or {})
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    for k, v in list(values.items()):
        if isinstance(v, list):
            values[k] = tuple(v)
        if isinstance(v, int) and not isinstance(v, bool) and isinstance(getattr(cls(), k, None), float):
            values[k] = float(v)
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(raw)


def write_echo(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml(), encoding="utf-8")
