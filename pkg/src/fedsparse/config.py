"""Experiment configuration: flat ``key = value`` text with ``#`` comments.

Nested settings use dotted keys (``partition.mode``, ``partition.c``).  Unknown
keys are rejected rather than silently ignored.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from fedsparse.nn import (
    REFERENCE_TOPOLOGIES,
    Conv2D,
    Dense,
    Flatten,
    MaxPool2D,
    NetworkTopology,
    ReLU,
    TopologyError,
)

METHODS = ("regularized", "fedpm", "topk", "mv_signsgd")
OUTPUT_ENV = "FEDSPARSE_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _seed(v: str) -> int:
    s = int(v, 0)
    if not 0 <= s < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return s


# key -> (parser, default); a default of None means "required when relevant"
KEYS: dict[str, tuple] = {
    "method": (str, None),
    "seed": (_seed, 0),
    "rounds": (int, None),
    "output": (str, "runs"),
    "workers": (int, 1),
    "eval_mode": (str, "sampled"),
    "eval_draws": (int, 1),
    "local_epochs": (int, 3),
    "batch_size": (int, 128),
    "eta": (float, 0.1),
    "lambda": (float, 0.0),
    "participation": (float, 1.0),
    "topology": (str, "mlp-s"),
    "topology.input": (str, None),
    "topology.layers": (str, None),
    "dataset": (str, "synthetic"),
    "dataset.train_images": (str, None),
    "dataset.train_labels": (str, None),
    "dataset.test_images": (str, None),
    "dataset.test_labels": (str, None),
    "dataset.train_limit": (int, None),
    "dataset.test_limit": (int, None),
    "dataset.cifar_train": (str, None),
    "dataset.cifar_test": (str, None),
    "dataset.classes": (int, 10),
    "dataset.dims": (int, 64),
    "dataset.per_class": (int, 200),
    "dataset.noise": (float, 0.05),
    "partition.mode": (str, "iid"),
    "partition.clients": (int, 10),
    "partition.c": (int, None),
    "validation.fraction": (float, 0.1),
    "topk.k_fraction": (float, None),
    "signsgd.eta_server": (float, None),
    "checkpoint.keep": (int, 1),
    "dump_masks": (_bool, False),
}


def parse_text(text: str) -> dict[str, str]:
    """Raw ``key -> value`` strings; raises on malformed lines, duplicates and unknown keys."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return raw


_LAYER_RE = re.compile(r"(\w+)(?:\(([^)]*)\))?")


def parse_layers(spec: str) -> tuple:
    """``dense(784,256) relu conv(1,16,3,stride=1,padding=1) pool(2) flatten``."""
    layers = []
    for token in re.split(r"[\s;]+", spec.strip()):
        if not token:
            continue
        m = _LAYER_RE.fullmatch(token)
        if not m:
            raise ConfigError(f"cannot parse layer {token!r}")
        name, argstr = m.group(1).lower(), m.group(2)
        args, kwargs = [], {}
        for a in filter(None, (x.strip() for x in (argstr or "").split(","))):
            if "=" in a:
                k, v = a.split("=", 1)
                kwargs[k.strip()] = int(v)
            else:
                args.append(int(a))
        try:
            if name == "dense":
                layers.append(Dense(*args, **kwargs))
            elif name == "conv":
                layers.append(Conv2D(*args, **kwargs))
            elif name == "relu":
                layers.append(ReLU())
            elif name in ("pool", "maxpool"):
                layers.append(MaxPool2D(*args, **kwargs))
            elif name == "flatten":
                layers.append(Flatten())
            else:
                raise ConfigError(f"unknown layer type {name!r}")
        except TypeError as exc:
            raise ConfigError(f"bad arguments for layer {token!r}: {exc}") from exc
    return tuple(layers)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        v = self.values.get(key)
        return default if v is None else v

    @property
    def method(self) -> str:
        return self.values["method"]

    @property
    def lam(self) -> float:
        return self.values["lambda"]

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.values["output"])

    def topology(self) -> NetworkTopology:
        name = self.values["topology"]
        if name != "inline":
            return REFERENCE_TOPOLOGIES[name]()
        shape = tuple(int(d) for d in re.split(r"[x,\s]+", self.values["topology.input"].strip()) if d)
        try:
            return NetworkTopology(shape, parse_layers(self.values["topology.layers"]))
        except TopologyError as exc:
            raise ConfigError(f"invalid inline topology: {exc}") from exc

    def to_text(self) -> str:
        """Canonical form: one ``key = value`` line per explicitly set key, sorted."""
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if v is None:
                continue
            if isinstance(v, float):
                v = repr(v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def from_text(text: str, seed: int | None = None) -> ExperimentConfig:
    raw = parse_text(text)
    values = {}
    for key, (parser, default) in KEYS.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        else:
            values[key] = default
    if seed is not None:
        values["seed"] = _seed(str(seed))
    cfg = ExperimentConfig(values)
    validate(cfg, explicit=set(raw))
    return cfg


def load(path, seed: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_text(text, seed=seed)


def _require(cfg: ExperimentConfig, *keys: str) -> None:
    missing = [k for k in keys if cfg.values.get(k) is None]
    if missing:
        raise ConfigError(f"method {cfg.method!r} with these settings requires: {', '.join(missing)}")


def validate(cfg: ExperimentConfig, explicit: set[str] = frozenset()) -> None:
    v = cfg.values
    if v["method"] is None:
        raise ConfigError("missing required key: method")
    if v["method"] not in METHODS:
        raise ConfigError(f"method must be one of {', '.join(METHODS)}, got {v['method']!r}")
    _require(cfg, "rounds")
    if v["rounds"] < 0:
        raise ConfigError("rounds must be nonnegative")
    if v["method"] == "fedpm":
        if "lambda" in explicit and v["lambda"] != 0:
            raise ConfigError("method fedpm is the unregularized baseline; lambda must be 0")
        v["lambda"] = 0.0
    if v["method"] == "topk":
        _require(cfg, "topk.k_fraction")
        if not 0 < v["topk.k_fraction"] <= 1:
            raise ConfigError("topk.k_fraction must lie in (0, 1]")
    if v["method"] == "mv_signsgd":
        _require(cfg, "signsgd.eta_server")
        if not v["signsgd.eta_server"] > 0:
            raise ConfigError("signsgd.eta_server must be positive")
    for key in ("local_epochs", "batch_size", "workers", "eval_draws", "partition.clients", "checkpoint.keep"):
        if v[key] < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if not v["eta"] > 0:
        raise ConfigError("eta must be positive")
    if not v["lambda"] >= 0:
        raise ConfigError("lambda must be nonnegative")
    if not 0 < v["participation"] <= 1:
        raise ConfigError("participation must lie in (0, 1]")
    if not 0 <= v["validation.fraction"] < 1:
        raise ConfigError("validation.fraction must lie in [0, 1)")
    if v["eval_mode"] not in ("sampled", "expected", "thresholded"):
        raise ConfigError(f"eval_mode must be sampled, expected or thresholded, got {v['eval_mode']!r}")
    if v["topology"] == "inline":
        _require(cfg, "topology.input", "topology.layers")
    elif v["topology"] not in REFERENCE_TOPOLOGIES:
        raise ConfigError(f"topology must be inline or one of {', '.join(REFERENCE_TOPOLOGIES)}")
    cfg.topology()
    kind = v["dataset"]
    if kind in ("mnist", "idx"):
        _require(cfg, "dataset.train_images", "dataset.train_labels")
    elif kind in ("cifar10", "cifar100"):
        _require(cfg, "dataset.cifar_train")
    elif kind != "synthetic":
        raise ConfigError(f"dataset must be mnist, idx, cifar10, cifar100 or synthetic, got {kind!r}")
    mode = v["partition.mode"]
    if mode == "label_limited":
        _require(cfg, "partition.c")
    elif mode != "iid":
        raise ConfigError(f"partition.mode must be iid or label_limited, got {mode!r}")
