"""Run configuration: one JSON document, validated against the defaults below.

Unknown keys are rejected and values must match the type of their default
(ints are accepted where floats are expected).  ``--set a.b=value`` overrides
parse ``value`` as JSON and fall back to a plain string.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Iterable, Optional

from tame.attention import VariantFlags
from tame.backbone import BackboneConfig, BackboneTrainSettings, BlockSpec, default_taps
from tame.data import SyntheticDatasetSpec
from tame.errors import ConfigError
from tame.objective import LossWeights
from tame.trainer import TrainConfig

DEFAULTS = {
    "seed": 0,
    "output": "runs",
    "dataset": {
        "root": "data",
        "num_classes": 3,
        "image_size": 64,
        "train": 600,
        "val": 200,
        "test": 200,
        "seed": 0,
        "radius_range": [9.0, 16.0],
        "background_range": [0.0, 0.45],
        "foreground_range": [0.55, 1.0],
        "noise_std": 0.04,
    },
    "backbone": {
        "blocks": [[2, 16, True], [2, 32, True], [2, 64, True]],
        "head_width": 64,
        "head_pool": "max",
        "tap_point": "pool",
        "tap_layers": None,
    },
    "backbone_training": {
        "epochs": 10,
        "batch_size": 32,
        "max_lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "shift": 4,
        "clip_norm": 1.0,
        "rescale_samples": 256,
        "seed": 0,
    },
    "variant": {
        "skip_connection": True,
        "batch_norm": True,
        "branch_activation": "relu",
        "layer_subset": 3,
    },
    "loss": {
        "lambda1": 1.5,
        "lambda2": 2.0,
        "lambda3": 0.01,
        "lambda4": 0.3,
        "area_reduction": "mean",
    },
    "train": {
        "epochs": 8,
        "batch_size": 32,
        "max_lr": 0.05,
        "start_div": 25.0,
        "final_div": 1e4,
        "peak_fraction": 0.3,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "mask_fill": "mean",
        "fusion_init_scale": 0.1,
        "eval_batch_size": 50,
    },
    "evaluation": {
        "thresholds": [100, 50, 15],
        "batch_size": 50,
        "baselines": ["random"],
    },
}

# keys whose value may be null instead of the default's type
NULLABLE = {"backbone.tap_layers"}
# paths do not change what is computed, so they stay out of digests
UNDIGESTED = {"output", "dataset.root"}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool) or isinstance(value, bool):
        return isinstance(default, bool) and isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float))
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(default, value, path + ".")
        elif value is None and path in NULLABLE:
            base[key] = None
        elif default is None and path in NULLABLE:
            if not isinstance(value, list):
                raise ConfigError(f"config key {path!r} must be a list or null")
            base[key] = value
        elif not _type_ok(default, value):
            raise ConfigError(f"config key {path!r} expects {type(default).__name__}, got {value!r}")
        else:
            base[key] = float(value) if isinstance(default, float) else value


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


class RunConfig:
    """Resolved configuration with typed accessors for every module."""

    def __init__(self, values: Optional[dict] = None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            _merge(self.values, values)
        self._build()

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise OSError(f"cannot read config {path}: {exc}") from exc
            try:
                values = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: top level must be an object")
        cfg = cls(values)
        for text in overrides:
            cfg = cfg.with_override(text)
        return cfg

    def with_override(self, text: str) -> "RunConfig":
        keys, value = parse_override(text)
        nested: dict = {}
        cur = nested
        for k in keys[:-1]:
            cur = cur.setdefault(k, {})
        cur[keys[-1]] = value
        merged = copy.deepcopy(self.values)
        _merge(merged, nested)
        return RunConfig(merged)

    def _build(self) -> None:
        v = self.values
        try:
            d = {k: val for k, val in v["dataset"].items() if k != "root"}
            self.dataset_spec = SyntheticDatasetSpec(**d)
            b = v["backbone"]
            blocks = tuple(BlockSpec(*blk) for blk in b["blocks"])
            taps = b["tap_layers"] if b["tap_layers"] is not None else default_taps(blocks, b["tap_point"])
            self.backbone_config = BackboneConfig(
                input_channels=3,
                input_size=(self.dataset_spec.image_size, self.dataset_spec.image_size),
                blocks=blocks,
                head_width=b["head_width"],
                num_classes=self.dataset_spec.num_classes,
                head_pool=b["head_pool"],
                tap_layers=tuple(taps),
            )
            self.backbone_settings = BackboneTrainSettings(**v["backbone_training"])
            self.flags = VariantFlags(**v["variant"])
            self.loss_weights = LossWeights(**v["loss"])
            self.train_config = TrainConfig(seed=v["seed"], weights=self.loss_weights, flags=self.flags, **v["train"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        thresholds = v["evaluation"]["thresholds"]
        if not thresholds or any(not 0 < t <= 100 for t in thresholds):
            raise ConfigError("evaluation.thresholds must be non-empty and lie in (0, 100]")
        if self.flags.layer_subset > len(self.backbone_config.tap_layers):
            raise ConfigError("variant.layer_subset exceeds the number of tap layers")

    # ------------------------------------------------------------ access
    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def output(self) -> Path:
        return Path(self.values["output"])

    @property
    def dataset_root(self) -> Path:
        return Path(self.values["dataset"]["root"])

    @property
    def thresholds(self) -> tuple:
        return tuple(self.values["evaluation"]["thresholds"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    def _digestible(self) -> dict:
        out = copy.deepcopy(self.values)
        for path in UNDIGESTED:
            parts = path.split(".")
            cur = out
            for p in parts[:-1]:
                cur = cur[p]
            cur.pop(parts[-1], None)
        return out

    def digest(self) -> str:
        """sha256 of the resolved configuration, paths excluded."""
        return sha256_hex(self._digestible())

    def training_digest(self) -> str:
        """sha256 of everything that determines the attention weights (evaluation settings excluded)."""
        v = self._digestible()
        v.pop("evaluation")
        return sha256_hex(v)

    def backbone_digest(self) -> str:
        """sha256 of the settings that determine the backbone weights."""
        v = self._digestible()
        return sha256_hex({k: v[k] for k in ("dataset", "backbone", "backbone_training")})
