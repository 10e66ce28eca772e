"""Flat key=value run configuration with task presets.

Precedence: task preset defaults, then the config file, then command-line
overrides. Unknown keys and unparsable values are errors that name the key.
The resolved configuration is a canonical sorted text block whose hash is
stored in checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .sensor import SensorConfig


class ConfigError(ValueError):
    pass


# every known key with its preset-independent default
_BASE = {
    "task": "pairs",
    "seed": 0,
    "num_classes": 55,
    "canvas_h": 100,
    "canvas_w": 100,
    "max_digits": 1,
    "sequential": False,
    # model
    "lstm_units": 256,
    "glimpse_dim": 256,
    "glimpse_net": "fc",
    "glimpse_hidden": 256,
    "glimpse_filters": (16, 32, 32),
    "glimpse_kernels": (5, 3, 3),
    "glimpse_strides": (2, 2, 1),
    "emission_hidden": 256,
    "classifier_hidden": 256,
    "baseline_hidden": 256,
    "context_filters": (16, 16, 32),
    "context_kernels": (5, 3, 3),
    "context_strides": (2, 2, 2),
    "no_context": False,
    "glimpses_per_target": 4,
    # sensor
    "unit_width_px": 20.0,
    "patch_size": 12,
    "coarse_factor": 3,
    "context_size": 32,
    # training
    "lr": 0.01,
    "lr_decay": 0.97,
    "momentum": 0.9,
    "batch_size": 128,
    "location_std": 0.03,
    "reinforce_weight": 1.0,
    "mc_samples": 1,
    "epochs": 10,
    "dropout": 0.0,
    "dtype": "float64",
}

PRESETS = {
    "pairs": {},
    "addition": {"num_classes": 19},
    "sequence": {
        "num_classes": 11,
        "canvas_h": 36,
        "canvas_w": 100,
        "max_digits": 3,
        "sequential": True,
        "lstm_units": 128,
        "glimpse_dim": 128,
        "glimpse_net": "conv",
        "glimpse_hidden": 128,
        "emission_hidden": 128,
        "classifier_hidden": 128,
        "baseline_hidden": 128,
        "glimpses_per_target": 3,
        "unit_width_px": 12.0,
        "patch_size": 20,
        "coarse_factor": 2,
    },
}
PRESETS["sequence-large"] = dict(PRESETS["sequence"], canvas_h=72, canvas_w=200)


@dataclass
class ModelConfig:
    num_classes: int
    sequential: bool
    lstm_units: int
    glimpse_dim: int
    glimpse_net: str
    glimpse_hidden: int
    glimpse_filters: tuple
    glimpse_kernels: tuple
    glimpse_strides: tuple
    emission_hidden: int
    classifier_hidden: int
    baseline_hidden: int
    context_filters: tuple
    context_kernels: tuple
    context_strides: tuple
    no_context: bool
    glimpses_per_target: int
    max_targets: int          # label positions incl. EOS slot when sequential

    @property
    def eos_class(self):
        return self.num_classes - 1 if self.sequential else None


@dataclass
class TrainConfig:
    lr: float
    lr_decay: float
    momentum: float
    batch_size: int
    location_std: float
    reinforce_weight: float
    mc_samples: int
    epochs: int
    seed: int
    dropout: float
    dtype: str


@dataclass
class Config:
    raw: dict

    @property
    def task(self) -> str:
        return self.raw["task"]

    @property
    def model(self) -> ModelConfig:
        r = self.raw
        max_targets = r["max_digits"] + 1 if r["sequential"] else 1
        return ModelConfig(
            num_classes=r["num_classes"], sequential=r["sequential"],
            lstm_units=r["lstm_units"], glimpse_dim=r["glimpse_dim"],
            glimpse_net=r["glimpse_net"], glimpse_hidden=r["glimpse_hidden"],
            glimpse_filters=r["glimpse_filters"], glimpse_kernels=r["glimpse_kernels"],
            glimpse_strides=r["glimpse_strides"], emission_hidden=r["emission_hidden"],
            classifier_hidden=r["classifier_hidden"], baseline_hidden=r["baseline_hidden"],
            context_filters=r["context_filters"], context_kernels=r["context_kernels"],
            context_strides=r["context_strides"], no_context=r["no_context"],
            glimpses_per_target=r["glimpses_per_target"], max_targets=max_targets,
        )

    @property
    def sensor(self) -> SensorConfig:
        r = self.raw
        return SensorConfig(unit_width_px=r["unit_width_px"], patch_size=r["patch_size"],
                            coarse_factor=r["coarse_factor"], context_size=r["context_size"])

    @property
    def train(self) -> TrainConfig:
        r = self.raw
        return TrainConfig(lr=r["lr"], lr_decay=r["lr_decay"], momentum=r["momentum"],
                           batch_size=r["batch_size"], location_std=r["location_std"],
                           reinforce_weight=r["reinforce_weight"], mc_samples=r["mc_samples"],
                           epochs=r["epochs"], seed=r["seed"], dropout=r["dropout"],
                           dtype=r["dtype"])

    def resolved_text(self) -> str:
        lines = []
        for k in sorted(self.raw):
            v = self.raw[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf8")).hexdigest()[:16]


def _convert(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse value {text!r}") from None


def _parse_pairs(lines, source: str) -> dict:
    out = {}
    for ln, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source} line {ln}: expected key=value, got {body!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        if key not in _BASE:
            raise ConfigError(f"{source} line {ln}: unknown config key '{key}'")
        out[key] = _convert(key, value, _BASE[key])
    return out


def parse_config(path=None, overrides=(), task=None, text=None) -> Config:
    """Build a resolved Config from preset defaults, file/text, and overrides."""
    file_kv = {}
    if path is not None and text is not None:
        raise ValueError("pass either a config path or config text, not both")
    if path is not None:
        with open(path, "r", encoding="utf8") as f:
            file_kv = _parse_pairs(f.read().splitlines(), str(path))
    elif text is not None:
        file_kv = _parse_pairs(text.splitlines(), "config text")
    over_kv = _parse_pairs(list(overrides), "override")
    picked_task = over_kv.get("task") or file_kv.get("task") or task or _BASE["task"]
    if picked_task not in PRESETS:
        raise ConfigError(f"unknown task '{picked_task}' (choose from {sorted(PRESETS)})")
    raw = dict(_BASE)
    raw.update(PRESETS[picked_task])
    raw["task"] = picked_task
    raw.update(file_kv)
    raw.update(over_kv)
    raw["task"] = picked_task
    return Config(raw=raw)
