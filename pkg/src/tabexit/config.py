"""Run configuration: flat ``section.key = value`` files plus flag overrides.

Grammar, one entry per line::

    # comment (also after a value)
    prior.n_samples_per_task = 128
    prior.mlp_depth_range = 1, 3
    exit.normalize_entropy = false
    eval.taus = 0, 0.1, 0.2

Sections: ``prior``, ``model``, ``train``, ``exit``, ``eval``, ``paths``.
Keys are the field names of the corresponding dataclasses; values are
parsed according to the field's type (int, float, bool, comma-separated
tuple, or string). Unknown sections or keys are errors. Later lines win.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import ModelConfig
from .early_exit import ExitConfig
from .errors import ConfigurationError
from .evaluation import DEFAULT_TAUS
from .prior import PriorConfig


@dataclass(frozen=True)
class TrainConfig:
    backbone_steps: int = 2000
    backbone_batch_size: int = 8
    backbone_lr: float = 1e-3
    decoder_epochs: int = 5
    decoder_steps_per_epoch: int = 200
    decoder_batch_size: int = 8
    decoder_lr: float = 1e-3
    heldout_tasks: int = 100


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 10
    taus: tuple = DEFAULT_TAUS
    seed: int = 0
    max_context: int = 1024


@dataclass(frozen=True)
class PathsConfig:
    checkpoint: str = ""
    manifest: str = ""
    out_dir: str = ""


@dataclass(frozen=True)
class RunConfig:
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    exit: ExitConfig = field(default_factory=ExitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.prior.validate()
        self.model.validate()
        self.exit.validate(self.model.n_layers)
        if self.prior.max_features > self.model.max_features:
            raise ConfigurationError("prior.max_features exceeds model.max_features")
        if self.prior.max_classes > self.model.max_classes:
            raise ConfigurationError("prior.max_classes exceeds model.max_classes")
        if self.eval.folds < 2:
            raise ConfigurationError("eval.folds must be >= 2")

    def with_seed(self, seed: int) -> "RunConfig":
        """Set every seed (prior, model, evaluation) to ``seed``."""
        return replace(self, prior=replace(self.prior, seed=seed),
                       model=replace(self.model, seed=seed), eval=replace(self.eval, seed=seed))

    def set(self, key: str, raw: str) -> "RunConfig":
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(f"unknown config key {key!r}")
        current = getattr(self, section)
        types = {f.name: f for f in fields(current)}
        if name not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        value = _parse_value(raw, getattr(current, name), key)
        return replace(self, **{section: replace(current, **{name: value})})

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


SECTIONS = ("prior", "model", "train", "exit", "eval", "paths")


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from exc


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'section.key = value'")
        cfg = cfg.set(key.strip(), value)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def write_provenance(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir) / "run_config.txt"
    out.write_text(cfg.to_text())
    return out


__all__ = ["RunConfig", "TrainConfig", "EvalConfig", "PathsConfig", "parse_config_text",
           "load_config", "write_provenance"]
