"""Experiment config: one YAML file, strict schema, field-level errors."""
from __future__ import annotations

import copy
import math

import yaml

from . import codec, data, fl, nn
from .contract import UNIT
from .errors import ConfigError, PreconditionError
from .forensics import TrojanSpec

DEFAULTS = {
    "seed": 0,
    "rounds": 100,
    "agents": 10,
    "corrupt_fraction": 0.1,
    "select_fraction": 1.0,
    "local_epochs": 2,
    "batch_size": 256,
    "eta": 1.0,
    "kappa": 1000,
    "lr": 0.01,
    "aggregator": fl.FEDAVG,
    "samples_per_agent": 500,
    "validation_size": 1000,
    "noise": 0.2,
    "split": {"kind": "iid", "concentration": 0.5},
    "trojan": {"base_class": 5, "target_class": 7, "position": [0, 0], "value": 1.0, "fraction": 1.0},
    "architecture": {"conv_filters": 8, "kernel_size": 3, "pool_size": 2, "hidden": [64],
                     "activation": "relu", "dropout": 0.0},
    "chain": {"chunk_chars": codec.DEFAULT_CHUNK_CHARS, "scheduler_seed": 0, "conflict_rate": 0.0,
              "key_scheme": "sharded"},
    "economics": {"initial_balance": 10.0, "deposit": 1.0, "base_reward": 0.1, "speed_bonus": 0.1,
                  "pool": 10.0},
    "detection": {"assume_adversaries": None, "min_backdoor_accuracy": 0.8},
    "loo": True,
    "min_adversary_base_samples": 10,
}

_INT = (int,)
_NUM = (int, float)


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        field = f"{path}{key}"
        if key not in base:
            raise ConfigError(field, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(field, "expected a mapping")
            out[key] = _merge(base[key], value, field + ".")
        else:
            out[key] = value
    return out


def _expect(cfg, field, types, check=None, message=""):
    node = cfg
    for part in field.split("."):
        node = node[part]
    if isinstance(node, bool) and bool not in types:
        raise ConfigError(field, f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(node, types):
        raise ConfigError(field, f"expected {'/'.join(t.__name__ for t in types)}, got {type(node).__name__}")
    if check is not None and not check(node):
        raise ConfigError(field, message)
    return node


class ExperimentConfig:
    """Validated view over the merged config mapping."""

    def __init__(self, raw=None, **overrides):
        raw = dict(raw or {})
        raw.update(overrides)
        self.raw = _merge(DEFAULTS, raw)
        self._validate()

    @classmethod
    def load(cls, path, **overrides):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"not valid YAML: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be a mapping")
        return cls(raw, **overrides)

    def __getattr__(self, name):
        raw = self.__dict__.get("raw")
        if raw is not None and name in raw:
            return raw[name]
        raise AttributeError(name)

    def to_yaml(self):
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)

    def _validate(self):
        c = self.raw
        _expect(c, "seed", _INT, lambda v: v >= 0, "must be >= 0")
        for f in ("rounds", "agents", "kappa", "batch_size", "samples_per_agent", "validation_size"):
            _expect(c, f, _INT, lambda v: v >= 1, "must be >= 1")
        _expect(c, "local_epochs", _INT, lambda v: v >= 0, "must be >= 0")
        _expect(c, "corrupt_fraction", _NUM, lambda v: 0 <= v <= 1, "must be in [0, 1]")
        _expect(c, "select_fraction", _NUM, lambda v: 0 < v <= 1, "must be in (0, 1]")
        _expect(c, "eta", _NUM, lambda v: v > 0 and math.isfinite(v), "must be positive")
        _expect(c, "lr", _NUM, lambda v: v > 0 and math.isfinite(v), "must be positive")
        _expect(c, "noise", _NUM, lambda v: v >= 0, "must be >= 0")
        _expect(c, "aggregator", (str,), lambda v: v in fl.AGGREGATORS, f"one of {fl.AGGREGATORS}")
        _expect(c, "split.kind", (str,), lambda v: v in ("iid", "dirichlet"), "iid or dirichlet")
        _expect(c, "split.concentration", _NUM, lambda v: v > 0, "must be positive")
        _expect(c, "trojan.base_class", _INT, lambda v: 0 <= v < data.NUM_CLASSES, "not a class index")
        _expect(c, "trojan.target_class", _INT, lambda v: 0 <= v < data.NUM_CLASSES, "not a class index")
        _expect(c, "trojan.value", _NUM, lambda v: 0 <= v <= 1, "must be a pixel value in [0, 1]")
        _expect(c, "trojan.fraction", _NUM, lambda v: 0 < v <= 1, "must be in (0, 1]")
        _expect(c, "trojan.position", (list,), lambda v: len(v) == 2 and all(
            isinstance(x, int) and not isinstance(x, bool) for x in v), "must be [row, col]")
        _expect(c, "architecture.conv_filters", _INT, lambda v: v >= 0, "must be >= 0")
        _expect(c, "architecture.kernel_size", _INT, lambda v: v >= 1, "must be >= 1")
        _expect(c, "architecture.pool_size", _INT, lambda v: v >= 1, "must be >= 1")
        _expect(c, "architecture.hidden", (list,), lambda v: all(
            isinstance(x, int) and not isinstance(x, bool) and x >= 1 for x in v), "positive ints")
        _expect(c, "architecture.activation", (str,), lambda v: v in ("relu", "tanh"), "relu or tanh")
        _expect(c, "architecture.dropout", _NUM, lambda v: 0 <= v < 1, "must be in [0, 1)")
        _expect(c, "chain.chunk_chars", _INT, lambda v: v >= 1, "must be >= 1")
        _expect(c, "chain.scheduler_seed", _INT, lambda v: v >= 0, "must be >= 0")
        _expect(c, "chain.conflict_rate", _NUM, lambda v: 0 <= v < 1, "must be in [0, 1)")
        _expect(c, "chain.key_scheme", (str,), lambda v: v in ("sharded", "single"), "sharded or single")
        for f in ("initial_balance", "deposit", "base_reward", "speed_bonus", "pool"):
            _expect(c, f"economics.{f}", _NUM, lambda v: v >= 0 and math.isfinite(v), "must be >= 0")
        _expect(c, "economics.deposit", _NUM, lambda v: v > 0, "must be positive")
        if c["economics"]["deposit"] > c["economics"]["initial_balance"]:
            raise ConfigError("economics.deposit", "exceeds economics.initial_balance")
        m = c["detection"]["assume_adversaries"]
        if m is not None:
            _expect(c, "detection.assume_adversaries", _INT, lambda v: 0 <= v <= c["agents"],
                    "must be in [0, agents]")
        _expect(c, "detection.min_backdoor_accuracy", _NUM, lambda v: 0 <= v <= 1, "must be in [0, 1]")
        _expect(c, "loo", (bool,))
        _expect(c, "min_adversary_base_samples", _INT, lambda v: v >= 1, "must be >= 1")

        try:
            arch = self.architecture_obj()
        except (ValueError, PreconditionError) as exc:
            raise ConfigError("architecture", str(exc)) from exc
        if c["kappa"] > arch.dim:
            raise ConfigError("kappa", f"exceeds the model dimension {arch.dim}")
        try:
            spec = self.trojan_spec()
            spec.check_fits(arch.input_shape)
        except PreconditionError as exc:
            raise ConfigError("trojan", str(exc)) from exc
        try:
            self.fl_config()
        except ValueError as exc:
            raise ConfigError("config", str(exc)) from exc
        gas_budget = 95_000 * 20 + 25_000 * 20 * max(0, c["rounds"] - 1)
        if self.units("initial_balance") - self.units("deposit") < gas_budget:
            raise ConfigError("economics.initial_balance",
                              f"too small to pay gas for {c['rounds']} commitments after the deposit")

    # typed views
    def architecture_obj(self):
        a = self.raw["architecture"]
        return nn.Architecture(
            input_shape=(data.IMAGE, data.IMAGE, 1), conv_filters=a["conv_filters"],
            kernel_size=a["kernel_size"], pool_size=a["pool_size"], hidden=tuple(a["hidden"]),
            num_classes=data.NUM_CLASSES, activation=a["activation"], dropout=float(a["dropout"]),
        )

    def trojan_spec(self):
        t = self.raw["trojan"]
        return TrojanSpec(t["base_class"], t["target_class"], tuple(t["position"]), float(t["value"]))

    def fl_config(self):
        c = self.raw
        return fl.FLConfig(
            rounds=c["rounds"], agents=c["agents"], corrupt_fraction=float(c["corrupt_fraction"]),
            select_fraction=float(c["select_fraction"]), local_epochs=c["local_epochs"],
            batch_size=c["batch_size"], eta=float(c["eta"]), kappa=c["kappa"], seed=c["seed"],
            lr=float(c["lr"]),
        )

    def assumed_adversaries(self):
        m = self.raw["detection"]["assume_adversaries"]
        return self.fl_config().n_corrupt if m is None else m

    def units(self, field):
        return int(round(float(self.raw["economics"][field]) * UNIT))
