"""
Experiment configuration.

Config files are flat `key = value` files (`#` comments) parsed with python-dotenv.
Process-level settings (GRFU_THREADS, GRFU_LOG_LEVEL) come from the environment,
optionally seeded from a local .env file.
"""

import logging
import os
from typing import Callable, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from .cells import RESIDUAL_STRATEGIES
from .errors import ConfigError, ContractError
from .model import CELL_KINDS, ModelSpec
from .synthdata import (
    CORRUPTION_MODES, CorruptionWindow, ScenarioSpec, default_classification_spec,
    default_regression_spec,
)
from .train import TrainConfig

logger = logging.getLogger("grfu.config")

TASKS = ("classify", "regress")

FULL_SCALE = {"d_h": 2000, "seq_len": 90, "epochs": 50}


def load_environment() -> None:
    """Load a local .env (if any) without overriding variables already set."""
    load_dotenv(override=False)


def threads_from_env() -> int:
    raw = os.getenv("GRFU_THREADS", "1")
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"GRFU_THREADS must be an integer, got '{raw}'", key="GRFU_THREADS") from e
    if value < 1:
        raise ConfigError(f"GRFU_THREADS must be >= 1, got {value}", key="GRFU_THREADS")
    return value


def log_level_from_env() -> str:
    level = os.getenv("GRFU_LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise ConfigError(f"unknown log level '{level}'", key="GRFU_LOG_LEVEL")
    return level


# ====== VALUE PARSERS ======

def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"'{key}' must be an integer, got '{raw}'", key=key) from e


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError as e:
        raise ConfigError(f"'{key}' must be a number, got '{raw}'", key=key) from e


def _parse_optional_float(key: str, raw: str) -> Optional[float]:
    if raw.strip().lower() in ("none", "off", "0"):
        return None
    return _parse_float(key, raw)


def _parse_bool(key: str, raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"'{key}' must be true or false, got '{raw}'", key=key)


def _parse_int_list(key: str, raw: str) -> List[int]:
    return [_parse_int(key, part) for part in raw.split(",") if part.strip()]


def _parse_str(key: str, raw: str) -> str:
    return raw.strip()


def _parse_windows(key: str, raw: str) -> List[CorruptionWindow]:
    """`sensor:start:end:mode` entries separated by commas; `none` for no windows."""
    if raw.strip().lower() == "none":
        return []
    windows = []
    for entry in raw.split(","):
        parts = [p.strip() for p in entry.split(":")]
        if len(parts) != 4 or parts[3] not in CORRUPTION_MODES:
            raise ConfigError(f"'{key}' entries look like 1:31:60:noise_replace, got '{entry.strip()}'", key=key)
        windows.append(CorruptionWindow(_parse_int(key, parts[0]), _parse_int(key, parts[1]),
                                        _parse_int(key, parts[2]), parts[3]))
    return windows


def _parse_views(key: str, raw: str) -> List[Optional[List[int]]]:
    """Per-sensor class->regime lists separated by `|`; `none` marks an uninformative sensor."""
    views: List[Optional[List[int]]] = []
    for part in raw.split("|"):
        part = part.strip()
        views.append(None if part.lower() == "none" else _parse_int_list(key, part))
    return views


def _parse_str_list(key: str, raw: str) -> List[str]:
    return [p.strip() for p in raw.split(",") if p.strip()]


PARSERS: Dict[str, Callable] = {
    "task": _parse_str,
    "cell": _parse_str,
    "seed": _parse_int,
    "out": _parse_str,
    "dataset": _parse_str,
    "checkpoint": _parse_str,
    "sensor_dims": _parse_int_list,
    "d_e": _parse_int,
    "d_h": _parse_int,
    "num_classes": _parse_int,
    "residual_strategy": _parse_str,
    "sensor_index": _parse_int,
    "seq_len": _parse_int,
    "batch_size": _parse_int,
    "epochs": _parse_int,
    "lr": _parse_float,
    "clip_norm": _parse_optional_float,
    "reset_state": _parse_bool,
    "T": _parse_int,
    "train_sequences": _parse_int,
    "test_sequences": _parse_int,
    "sigma": _parse_float,
    "amp": _parse_float,
    "curvature_scale": _parse_float,
    "gain": _parse_float,
    "self_transition": _parse_float,
    "windows": _parse_windows,
    "views": _parse_views,
    "full_scale": _parse_bool,
    "bench_seeds": _parse_int,
    "bench_cells": _parse_str_list,
    "gradcheck_d_e": _parse_int,
    "gradcheck_d_h": _parse_int,
}


def _defaults(task: str) -> Dict:
    if task == "classify":
        scenario = default_classification_spec()
        return {
            "sensor_dims": list(scenario.sensor_dims), "num_classes": scenario.num_classes,
            "seq_len": 30, "reset_state": False, "T": scenario.T,
            "train_sequences": 200, "test_sequences": 60, "sigma": scenario.sigma, "amp": scenario.amp,
            "windows": scenario.windows, "views": scenario.views,
            "bench_cells": ["lstm_single_sensor", "early_concat", "early_add", "late_concat", "late_add",
                            "lrs", "egrf", "lgrf"],
        }
    scenario = default_regression_spec()
    return {
        "sensor_dims": list(scenario.sensor_dims), "num_classes": 1,
        "seq_len": 4, "reset_state": True, "T": scenario.T,
        "train_sequences": 160, "test_sequences": 40, "sigma": scenario.sigma, "amp": scenario.amp,
        "windows": scenario.windows, "views": scenario.views,
        "bench_cells": ["early_concat", "lrs", "egrf", "lgrf"],
    }


COMMON_DEFAULTS = {
    "cell": None, "seed": 0, "out": "out", "dataset": None, "checkpoint": None,
    "d_e": 20, "d_h": 64, "residual_strategy": None, "sensor_index": 0,
    "batch_size": 40, "epochs": 20, "lr": 5e-4, "clip_norm": 5.0,
    "curvature_scale": 1.0, "gain": 1.5, "self_transition": 0.9, "full_scale": False,
    "bench_seeds": 5, "gradcheck_d_e": 4, "gradcheck_d_h": 5,
}


class ExperimentConfig:
    """Validated experiment settings; build model, training and scenario objects from it."""

    def __init__(self, values: Dict, explicit: Optional[set] = None):
        task = values.get("task")
        if task is None:
            raise ConfigError("missing required key 'task'", key="task")
        if task not in TASKS:
            raise ConfigError(f"'task' must be one of {TASKS}, got '{task}'", key="task")
        merged = {**COMMON_DEFAULTS, **_defaults(task), **values}
        explicit = explicit if explicit is not None else set(values)
        if merged["full_scale"]:
            for key, value in FULL_SCALE.items():
                if key not in explicit:
                    merged[key] = value
        for key, value in merged.items():
            setattr(self, key, value)
        self.task = task
        self.threads = 1
        self._validate()

    def _validate(self) -> None:
        if self.cell is not None and self.cell not in CELL_KINDS:
            raise ConfigError(f"'cell' must be one of {CELL_KINDS}, got '{self.cell}'", key="cell")
        for cell in self.bench_cells:
            if cell not in CELL_KINDS:
                raise ConfigError(f"unknown cell '{cell}' in bench_cells", key="bench_cells")
        if self.residual_strategy is not None and self.residual_strategy not in RESIDUAL_STRATEGIES:
            raise ConfigError(f"'residual_strategy' must be one of {RESIDUAL_STRATEGIES}", key="residual_strategy")
        for key in ("d_e", "d_h", "seq_len", "batch_size", "T", "train_sequences", "bench_seeds",
                    "gradcheck_d_e", "gradcheck_d_h"):
            if getattr(self, key) < 1:
                raise ConfigError(f"'{key}' must be positive, got {getattr(self, key)}", key=key)
        for key in ("epochs", "test_sequences", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"'{key}' must be non-negative, got {getattr(self, key)}", key=key)
        if self.lr < 0:
            raise ConfigError(f"'lr' must be non-negative, got {self.lr}", key="lr")
        if not self.sensor_dims:
            raise ConfigError("'sensor_dims' must list at least one sensor", key="sensor_dims")
        try:
            self.scenario("train")
        except ContractError as e:
            raise ConfigError(f"invalid scenario: {e}", key="scenario") from e

    def require(self, key: str):
        value = getattr(self, key, None)
        if value is None:
            raise ConfigError(f"missing required key '{key}'", key=key)
        return value

    @property
    def head(self) -> str:
        return "classifier" if self.task == "classify" else "regressor"

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classify" else 1

    def model_spec(self, cell: Optional[str] = None, sensor_index: Optional[int] = None,
                   d_e: Optional[int] = None, d_h: Optional[int] = None) -> ModelSpec:
        try:
            return ModelSpec(cell or self.require("cell"), self.sensor_dims, d_e or self.d_e, d_h or self.d_h,
                             self.head, self.out_dim, self.residual_strategy,
                             self.sensor_index if sensor_index is None else sensor_index)
        except ContractError as e:
            raise ConfigError(f"invalid model spec: {e}", key="cell") from e

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.seq_len, self.batch_size, self.epochs, self.lr, self.seed,
                           self.clip_norm, self.reset_state, self.threads)

    def scenario(self, split: str = "train", seed: Optional[int] = None) -> ScenarioSpec:
        """Train and test splits share the seed; the test split starts after the train keys."""
        count = self.train_sequences if split == "train" else self.test_sequences
        first = 0 if split == "train" else self.train_sequences
        return ScenarioSpec(
            task=self.task, sensor_dims=self.sensor_dims, T=self.T, num_sequences=count,
            num_classes=self.num_classes if self.task == "classify" else 1,
            windows=self.windows, views=self.views, sigma=self.sigma, amp=self.amp,
            seed=self.seed if seed is None else seed, first_index=first,
            curvature_scale=self.curvature_scale, gain=self.gain, self_transition=self.self_transition,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        clone = object.__new__(ExperimentConfig)
        clone.__dict__.update(self.__dict__)
        clone.seed = seed
        return clone


def parse_values(raw: Dict[str, Optional[str]]) -> Dict:
    values = {}
    for key, text in raw.items():
        if key not in PARSERS:
            raise ConfigError(f"unknown key '{key}'", key=key)
        if text is None or not text.strip():
            raise ConfigError(f"key '{key}' has no value", key=key)
        values[key] = PARSERS[key](key, text)
    return values


def load_config(path, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """
    Parse a config file and apply command-line overrides.

    Args:
        path: `key = value` config file
        overrides: values that win over the file (None entries are ignored)

    Returns:
        ExperimentConfig with GRFU_THREADS applied
    """
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}", key="config")
    raw = dict(dotenv_values(path, interpolate=False))
    values = parse_values(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    config = ExperimentConfig(values)
    config.threads = threads_from_env()
    logger.debug(f"config {path}: task {config.task}, cell {config.cell}, seed {config.seed}")
    return config
