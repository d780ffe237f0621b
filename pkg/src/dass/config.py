"""Run configuration: a flat, strictly validated JSON schema plus named presets."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

DATA_DIR_ENV = "DASS_DATA_DIR"


class ConfigError(ValueError):
    """Invalid or unknown configuration value (CLI exit code 1)."""


@dataclass
class SearchConfig:
    # data
    dataset: str = "synthetic"          # synthetic | cifar10-subset
    data_dir: str | None = None
    train_val_split: float = 0.5
    subset_size: int | None = None      # per-split cap for cifar10-subset
    n_classes: int = 10
    synthetic_n: int = 960              # points per split for the synthetic dataset
    synthetic_image_size: int = 12
    synthetic_amplitude: float = 1.0    # class-pattern strength vs the fixed noise
    augment: bool = False               # random crop + horizontal flip on train batches

    # macro architecture
    n_cells: int = 8
    n_nodes: int = 7                    # 2 inputs + intermediates + 1 output node
    init_channels: int = 16
    include_zero_op: bool = False
    double_sep_conv: bool = True

    # optimization
    pruning_ratio: float = 0.99
    epochs_pretrain: int = 50
    epochs_prune: int = 20
    epochs_finetune: int = 200
    batch_size: int = 64
    lr_theta: float = 0.025
    lr_score: float = 0.1
    lr_finetune: float = 0.01
    lr_alpha: float = 3e-4
    momentum: float = 0.9
    weight_decay: float = 3e-4
    alpha_weight_decay: float = 1e-3

    # pipeline behaviour
    seed: int = 1
    finetune_mode: str = "inherit"      # inherit | scratch
    alpha_init_mode: str = "from_pretrain"  # from_pretrain | fresh
    finetune_target: str = "derived"    # derived | supernet
    compression_baseline_params: float | None = None

    @property
    def steps(self) -> int:
        """Intermediate nodes per cell (n_nodes counts 2 inputs and the output node)."""
        return self.n_nodes - 3

    def validate(self) -> "SearchConfig":
        def fail(field, why):
            raise ConfigError(f"config field {field!r}: {why}")

        if self.dataset not in ("synthetic", "cifar10-subset"):
            fail("dataset", f"must be 'synthetic' or 'cifar10-subset', got {self.dataset!r}")
        if not 0.0 < self.train_val_split < 1.0:
            fail("train_val_split", f"must be in (0, 1), got {self.train_val_split}")
        if not 0.0 <= self.pruning_ratio <= 1.0:
            fail("pruning_ratio", f"must be in [0, 1], got {self.pruning_ratio}")
        if self.n_cells < 2:
            fail("n_cells", f"must be >= 2, got {self.n_cells}")
        if self.n_nodes < 4:
            fail("n_nodes", f"must be >= 4, got {self.n_nodes}")
        if self.init_channels < 1:
            fail("init_channels", f"must be positive, got {self.init_channels}")
        if self.init_channels % 2 != 0:
            fail("init_channels", f"must be even (factorized reduce), got {self.init_channels}")
        if self.batch_size < 1:
            fail("batch_size", f"must be positive, got {self.batch_size}")
        for name in ("epochs_pretrain", "epochs_prune", "epochs_finetune"):
            if getattr(self, name) < 0:
                fail(name, f"must be nonnegative, got {getattr(self, name)}")
        for name in ("lr_theta", "lr_score", "lr_finetune", "lr_alpha"):
            if getattr(self, name) <= 0:
                fail(name, f"must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            fail("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.alpha_weight_decay < 0:
            fail("weight_decay", "must be nonnegative")
        if self.finetune_mode not in ("inherit", "scratch"):
            fail("finetune_mode", f"must be 'inherit' or 'scratch', got {self.finetune_mode!r}")
        if self.alpha_init_mode not in ("from_pretrain", "fresh"):
            fail("alpha_init_mode",
                 f"must be 'from_pretrain' or 'fresh', got {self.alpha_init_mode!r}")
        if self.finetune_target not in ("derived", "supernet"):
            fail("finetune_target",
                 f"must be 'derived' or 'supernet', got {self.finetune_target!r}")
        if self.n_classes < 2:
            fail("n_classes", f"must be >= 2, got {self.n_classes}")
        if self.synthetic_n < self.n_classes:
            fail("synthetic_n", f"must be >= n_classes, got {self.synthetic_n}")
        if self.synthetic_amplitude <= 0:
            fail("synthetic_amplitude", "must be positive")
        if self.compression_baseline_params is not None \
                and self.compression_baseline_params <= 0:
            fail("compression_baseline_params", "must be positive when set")
        return self

    def resolved_data_dir(self) -> str | None:
        """Explicit config value wins over the DASS_DATA_DIR environment fallback."""
        return self.data_dir if self.data_dir else os.environ.get(DATA_DIR_ENV)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


_FIELD_NAMES = {f.name for f in fields(SearchConfig)}


def config_from_dict(values: dict, base: SearchConfig | None = None) -> SearchConfig:
    unknown = set(values) - _FIELD_NAMES
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = SearchConfig(**{**(asdict(base) if base else {}), **values})
    return cfg.validate()


def load_config(path: str | Path) -> SearchConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path}: invalid JSON at position {e.pos}: {e.msg}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    return config_from_dict(values)


PRESETS = {
    # full-scale settings (needs GPU-class patience on a CPU)
    "full": {
        "dataset": "cifar10-subset", "subset_size": 30000, "n_cells": 8, "n_nodes": 7,
        "init_channels": 16, "batch_size": 64,
        "epochs_pretrain": 50, "epochs_prune": 20, "epochs_finetune": 200,
    },
    # desk-scale profile: paired search + baseline sweeps stay within CPU minutes
    "desk": {
        "dataset": "synthetic", "subset_size": 4000, "n_cells": 2, "n_nodes": 5,
        "init_channels": 8, "batch_size": 32, "n_classes": 10,
        "synthetic_n": 640, "synthetic_image_size": 10, "synthetic_amplitude": 0.4,
        "epochs_pretrain": 15, "epochs_prune": 8, "epochs_finetune": 40,
    },
    # smoke-test scale
    "micro": {
        "dataset": "synthetic", "n_cells": 2, "n_nodes": 4, "init_channels": 8,
        "batch_size": 16, "n_classes": 4, "synthetic_n": 128,
        "synthetic_image_size": 8, "pruning_ratio": 0.9,
        "epochs_pretrain": 2, "epochs_prune": 2, "epochs_finetune": 3,
    },
}


def preset_config(name: str, overrides: dict | None = None) -> SearchConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    if overrides:
        values.update(overrides)
    return config_from_dict(values)
