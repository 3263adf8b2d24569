"""Experiment configuration: INI file with sections, every key defaulted, CLI overrides."""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError
from .validation import check_accuracies

OUTPUT_ROOT_ENV = "KGREPORT_OUTPUT_ROOT"

# INI section for every config key
SECTIONS = {
    "corpus": ("n", "corpus_seed", "imbalance_exponent", "noise_sd", "split_seed", "train_ratio",
               "val_ratio", "test_ratio"),
    "model": ("width", "layers", "heads", "patch", "proj_dim", "momentum", "share_mode",
              "queue_size", "temperature", "hard_negatives", "max_len"),
    "training": ("lr", "weight_decay", "epochs", "batch_size", "seed", "dtype", "eval_every"),
    "classifier": ("clf_lr", "clf_epochs", "clf_batch_size", "threshold"),
    "decoding": ("strategy", "beam_width"),
    "metrics": ("cider_variant",),
    "sweep": ("accuracies", "sweep_seeds"),
    "output": ("output_dir",),
}


@dataclass
class ExperimentConfig:
    n: int = 1000
    corpus_seed: int = 0
    imbalance_exponent: float = 1.5
    noise_sd: float = 0.15
    split_seed: int = 0
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2

    width: int = 64
    layers: int = 2
    heads: int = 4
    patch: int = 8
    proj_dim: int = 32
    momentum: float = 0.995
    share_mode: str = "all_but_sa"
    queue_size: int = 256
    temperature: float = 0.07
    hard_negatives: bool = False
    max_len: int = 64

    lr: float = 1e-4
    weight_decay: float = 5e-5
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    dtype: str = "float32"
    eval_every: int = 1

    clf_lr: float = 1e-3
    clf_epochs: int = 30
    clf_batch_size: int = 16
    threshold: float = 0.5

    strategy: str = "greedy"
    beam_width: int = 3

    cider_variant: str = "d"

    accuracies: tuple = (0.7, 0.8, 0.9)
    sweep_seeds: tuple = (0,)

    output_dir: str = field(default_factory=lambda: os.environ.get(OUTPUT_ROOT_ENV, "runs"))

    def __post_init__(self):
        self.accuracies = tuple(check_accuracies(self.accuracies))
        self.sweep_seeds = tuple(int(s) for s in self.sweep_seeds)
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
        if self.n < 1:
            raise ConfigError(f"corpus size must be >= 1, got {self.n}")
        if self.strategy not in ("greedy", "beam"):
            raise ConfigError(f"strategy must be greedy or beam, got {self.strategy!r}")
        if self.cider_variant not in ("d", "plain"):
            raise ConfigError(f"cider_variant must be d or plain, got {self.cider_variant!r}")
        if self.share_mode not in ("all_but_sa", "sa_only"):
            raise ConfigError(f"unknown share_mode {self.share_mode!r}")
        for name in ("epochs", "batch_size", "clf_epochs", "clf_batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def ratios(self) -> tuple:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    @property
    def sweep_levels(self) -> list:
        """Requested accuracies plus the ground-truth reference level 1.0."""
        return check_accuracies(list(self.accuracies) + [1.0])

    def generator_params(self) -> dict:
        return dict(width=self.width, layers=self.layers, heads=self.heads,
                    proj_dim=self.proj_dim, patch=self.patch, max_len=self.max_len,
                    share_mode=self.share_mode, queue_size=self.queue_size,
                    momentum=self.momentum, temperature=self.temperature,
                    hard_negatives=self.hard_negatives, epochs=self.epochs,
                    batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                    seed=self.seed, dtype=self.dtype, strategy=self.strategy,
                    beam_width=self.beam_width, eval_every=self.eval_every)

    def classifier_params(self) -> dict:
        return dict(epochs=self.clf_epochs, batch_size=self.clf_batch_size, lr=self.clf_lr,
                    weight_decay=self.weight_decay, threshold=self.threshold, seed=self.seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, keys in SECTIONS.items():
            cp[section] = {k: _format(getattr(self, k)) for k in keys}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, raw):
    default = getattr(ExperimentConfig(output_dir="."), name)
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return text


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the INI file (if any), then ``overrides`` (None values skipped)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in cp.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in cp[section].items():
                if key not in SECTIONS[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
