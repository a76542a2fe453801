"""Seeded stream of synthetic classification tasks for pretraining.

Each task comes from a small random structural model: latent rows are drawn
from a standard normal, a random tanh MLP maps them to a scalar score, and
the score is cut at its empirical K-quantiles to obtain class labels. The
observed features are the latent rows plus Gaussian noise.

Every task is a pure function of ``(config.seed, task_index)``: the index
keys its own PCG64 generator through ``SeedSequence``, so the stream can be
accessed at any offset without replaying earlier tasks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigurationError

# Values used for the original decoder pretraining; desk defaults are smaller.
FULL_SCALE_SAMPLES_PER_TASK = 1152
FULL_SCALE_MAX_FEATURES = 100
FULL_SCALE_MAX_CLASSES = 10

MAX_SPLIT_ATTEMPTS = 100
REGEN_STRIDE = 1 << 40
MAX_REGENERATIONS = 64


@dataclass(frozen=True)
class PriorConfig:
    n_samples_per_task: int = 128
    max_features: int = 8
    max_classes: int = 4
    train_fraction: float = 0.7
    mlp_depth_range: tuple = (1, 3)
    mlp_width_range: tuple = (4, 16)
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.max_classes < 2:
            raise ConfigurationError(f"max_classes must be >= 2, got {self.max_classes}")
        if self.max_features < 1:
            raise ConfigurationError(f"max_features must be >= 1, got {self.max_features}")
        if self.n_samples_per_task < 4:
            raise ConfigurationError(
                f"n_samples_per_task must be >= 4, got {self.n_samples_per_task}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.n_train < self.max_classes:
            raise ConfigurationError(
                f"train split of {self.n_train} rows cannot hold {self.max_classes} classes")
        if self.n_train >= self.n_samples_per_task:
            raise ConfigurationError("train_fraction leaves no test rows")
        for name in ("mlp_depth_range", "mlp_width_range"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigurationError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def n_train(self) -> int:
        return int(self.train_fraction * self.n_samples_per_task)


@dataclass
class SyntheticTask:
    """A classification task split into context (train) and query (test) rows."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    task_index: int = -1
    # latent scores the labels were cut from, aligned with the rows above
    scores_train: np.ndarray | None = field(default=None, repr=False)
    scores_test: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def n_test(self) -> int:
        return self.x_test.shape[0]


def quantile_labels(scores: np.ndarray, n_classes: int) -> np.ndarray:
    """Cut scores into ``n_classes`` bins at their empirical quantiles."""
    cuts = np.quantile(scores, np.arange(1, n_classes) / n_classes)
    return np.searchsorted(cuts, scores, side="right").astype(np.int64)


def _random_mlp_scores(rng: np.random.Generator, latent: np.ndarray, depth: int,
                       widths: list[int]) -> np.ndarray:
    h = latent
    for w in widths[:depth]:
        fan_in = h.shape[1]
        weight = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, w))
        bias = rng.normal(0.0, 1.0, size=w)
        h = np.tanh(h @ weight + bias)
    weight = rng.normal(0.0, np.sqrt(1.0 / h.shape[1]), size=(h.shape[1], 1))
    return (h @ weight)[:, 0]


def _attempt(config: PriorConfig, index: int) -> SyntheticTask | None:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, index])))
    n = config.n_samples_per_task
    f = int(rng.integers(1, config.max_features, endpoint=True))
    k = int(rng.integers(2, config.max_classes, endpoint=True))
    depth = int(rng.integers(*config.mlp_depth_range, endpoint=True))
    widths = [int(rng.integers(*config.mlp_width_range, endpoint=True)) for _ in range(depth)]

    latent = rng.normal(size=(n, f))
    x = latent + config.noise_std * rng.normal(size=(n, f))
    scores = _random_mlp_scores(rng, latent, depth, widths)
    y = quantile_labels(scores, k)

    n_train = config.n_train
    for _ in range(MAX_SPLIT_ATTEMPTS):
        perm = rng.permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        if np.unique(y[tr]).size == k:
            break
    else:
        return None

    mu = x[tr].mean(axis=0)
    sd = x[tr].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    return SyntheticTask(x[tr], y[tr], x[te], y[te], k, index, scores[tr], scores[te])


def sample_task(config: PriorConfig, task_index: int) -> SyntheticTask:
    """Deterministically generate task number ``task_index`` of the stream."""
    config.validate()
    index = task_index
    for _ in range(MAX_REGENERATIONS):
        task = _attempt(config, index)
        if task is not None:
            task.task_index = task_index
            return task
        index += REGEN_STRIDE
    raise ConfigurationError(
        f"could not place every class in the train split for task {task_index}")


def task_stream(config: PriorConfig, start: int, count: int) -> Iterator[SyntheticTask]:
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    config.validate()
    return (sample_task(config, start + i) for i in range(count))
