"""Entropy-gated early exit over the per-layer decoder bank.

After every encoder block the query rows are decoded, the mean predictive
entropy over the whole query set is computed, and the forward pass stops
at the first layer whose mean entropy is strictly below ``tau``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneWeights, ModelConfig, embed, encode_layer
from .decoders import DecoderBank, decode
from .errors import ConfigurationError, ContractError

POLICIES = ("batch_mean",)


@dataclass(frozen=True)
class ExitConfig:
    tau: float = 0.0
    policy: str = "batch_mean"
    normalize_entropy: bool = False
    min_layer: int = 1

    def validate(self, n_layers: int | None = None) -> None:
        if not self.tau >= 0:
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown exit policy {self.policy!r}")
        if self.min_layer < 1 or (n_layers is not None and self.min_layer > n_layers):
            raise ConfigurationError(f"min_layer {self.min_layer} outside [1, {n_layers}]")


@dataclass
class ExitReport:
    probs: np.ndarray
    exit_layer: int
    entropy_trace: list[float] = field(default_factory=list)
    decode_count: int = 0
    elapsed: float = 0.0

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    def to_record(self) -> str:
        """One JSON line; probabilities are summarised by their argmax."""
        return json.dumps({
            "exit_layer": self.exit_layer,
            "decode_count": self.decode_count,
            "elapsed_s": self.elapsed,
            "entropy_trace": self.entropy_trace,
            "predictions": self.predictions.tolist(),
        })


def mean_entropy(probs) -> float:
    """Average Shannon entropy (nats) of the rows of ``probs``, 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ContractError(f"expected a non-empty [n, K] matrix, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ContractError("every row must be a probability distribution")
    safe = np.where(p > 0, p, 1.0)
    return float(np.mean(-np.sum(p * np.log(safe), axis=1)))


def predict_early_exit(task, backbone: BackboneWeights, bank: DecoderBank,
                       cfg: ExitConfig) -> ExitReport:
    n_layers = backbone.config.n_layers
    if bank.n_layers != n_layers:
        raise ContractError(f"bank has {bank.n_layers} decoders for a {n_layers}-layer backbone")
    cfg.validate(n_layers)
    scale = math.log(task.n_classes) if cfg.normalize_entropy else 1.0

    start = time.perf_counter()
    acts = embed(task, backbone)
    trace: list[float] = []
    probs = None
    exit_layer = n_layers
    for i in range(1, n_layers + 1):
        acts = encode_layer(acts, i - 1, backbone)
        if i < cfg.min_layer:
            continue
        probs = T.softmax(decode(acts, bank[i], task.n_test, task.n_classes)).data
        h = mean_entropy(probs) / scale
        trace.append(h)
        if h < cfg.tau:
            exit_layer = i
            break
    elapsed = time.perf_counter() - start
    return ExitReport(probs, exit_layer, trace, len(trace), elapsed)


def layer_flops(config: ModelConfig, n_train: int, n_test: int) -> dict[str, int]:
    """Closed-form FLOPs (2 per multiply-add) of each pipeline stage.

    ``embed``: feature projection, 2 n F d.
    ``layer``: Q/K/V/output projections 8 n d^2, context scores and value
    mixing 2 x 2 n n_train d, query self-scores 2 n d, feed-forward 4 n d d_ff.
    ``decode``: 2 n_test d h + 2 n_test h K_max.
    """
    n = n_train + n_test
    d = config.d_model
    return {
        "embed": 2 * n * config.max_features * d,
        "layer": 8 * n * d * d + 4 * n * n_train * d + 2 * n * d + 4 * n * d * config.ff_dim,
        "decode": 2 * n_test * d * config.decoder_dim
        + 2 * n_test * config.decoder_dim * config.max_classes,
    }


def count_flops(task, config: ModelConfig, exit_layer: int, min_layer: int = 1) -> int:
    """FLOPs of an early-exit run that stops at ``exit_layer``."""
    if not 1 <= exit_layer <= config.n_layers:
        raise ContractError(f"exit_layer {exit_layer} outside [1, {config.n_layers}]")
    parts = layer_flops(config, task.n_train, task.n_test)
    decodes = max(0, exit_layer - min_layer + 1)
    return parts["embed"] + exit_layer * parts["layer"] + decodes * parts["decode"]
