"""Per-layer classification heads and their pretraining.

Every encoder depth ``i`` gets its own two-layer GELU head mapping query-row
tokens to class logits. Heads for ``i < N`` are fitted on prior tasks while
the backbone stays frozen; the head at ``i = N`` is the one trained jointly
with the backbone and is reused unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import (
    INIT_STD, BackboneWeights, LayerActivations, ModelConfig, _block, _embed_arrays, _rng,
    forward_until, masked_cross_entropy, stack_tasks,
)
from .errors import ConfigurationError, ContractError, TrainingError
from .optim import Adam
from .prior import PriorConfig, sample_task
from .tensor import Tensor

log = logging.getLogger(__name__)

# Original decoder pretraining schedule (100 epochs x 1024 steps x 8 tasks).
FULL_SCALE_EPOCHS = 100
FULL_SCALE_STEPS_PER_EPOCH = 1024
FULL_SCALE_BATCH_SIZE = 8
FULL_SCALE_LR = 3e-5

DECODER_PARAMS = ("hidden.w", "hidden.b", "out.w", "out.b")
# task-index ranges used by each decoder's training stream
DECODER_STREAM_STRIDE = 1 << 32


@dataclass
class DecoderWeights:
    layer_index: int
    params: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


@dataclass
class DecoderBank:
    """Heads indexed by encoder depth: ``bank[i]`` reads layer ``i`` (1-based)."""

    decoders: list[DecoderWeights] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.decoders)

    def __getitem__(self, layer: int) -> DecoderWeights:
        if not 1 <= layer <= len(self.decoders):
            raise ContractError(f"no decoder for layer {layer}")
        return self.decoders[layer - 1]

    @property
    def n_layers(self) -> int:
        return len(self.decoders)


def init_decoder(config: ModelConfig, layer_index: int) -> DecoderWeights:
    rng = _rng(config.seed, 1, layer_index)
    d, h, k = config.d_model, config.decoder_dim, config.max_classes
    params = {
        "hidden.w": Tensor(rng.normal(0.0, INIT_STD, size=(d, h)), requires_grad=True),
        "hidden.b": Tensor(np.zeros(h), requires_grad=True),
        "out.w": Tensor(rng.normal(0.0, INIT_STD, size=(h, k)), requires_grad=True),
        "out.b": Tensor(np.zeros(k), requires_grad=True),
    }
    return DecoderWeights(layer_index, params)


def decoder_logits(tokens: Tensor, dec: DecoderWeights) -> Tensor:
    """Full-width (K_max) logits for a block of query tokens."""
    p = dec.params
    hidden = T.gelu(tokens @ p["hidden.w"] + p["hidden.b"])
    return hidden @ p["out.w"] + p["out.b"]


def decode(acts: LayerActivations, dec: DecoderWeights, n_test: int, n_classes: int) -> Tensor:
    """Logits [n_test, n_classes] from the last ``n_test`` token rows."""
    if acts.layer_index != dec.layer_index:
        raise ContractError(
            f"decoder for layer {dec.layer_index} applied to activations at layer "
            f"{acts.layer_index}")
    if n_test != acts.n_test:
        raise ContractError(f"n_test={n_test} but activations hold {acts.n_test} query rows")
    logits = decoder_logits(acts.tokens[..., acts.n_train:, :], dec)
    return logits[..., :n_classes]


def _frozen_prefix(backbone: BackboneWeights, layer: int, x_tr, y_tr, x_te) -> np.ndarray:
    with T.fast_kernels():
        x = _embed_arrays(backbone, x_tr, y_tr, x_te)
        for i in range(1, layer + 1):
            x = _block(backbone, i, x, x_tr.shape[-2])
    return x.data


def train_decoder(layer: int, backbone: BackboneWeights, prior: PriorConfig, epochs: int = 5,
                  steps_per_epoch: int = 200, batch_size: int = 8, lr: float = 1e-3,
                  history: list | None = None) -> DecoderWeights:
    """Fit the head for encoder depth ``layer`` with the backbone frozen.

    Backbone activations are computed outside the gradient tape, so only the
    head's parameters receive gradients. Per-step losses are appended to
    ``history`` when given.
    """
    cfg = backbone.config
    if not 1 <= layer < cfg.n_layers:
        raise ConfigurationError(f"intermediate decoder layer must lie in [1, {cfg.n_layers})")
    if min(epochs, steps_per_epoch, batch_size) < 1 or lr < 0:
        raise ConfigurationError("epochs, steps and batch size must be positive, lr >= 0")
    dec = init_decoder(cfg, layer)
    opt = Adam(dec.parameters(), lr=lr)
    start = layer * DECODER_STREAM_STRIDE
    total = epochs * steps_per_epoch
    for step in range(total):
        base = start + step * batch_size
        tasks = [sample_task(prior, base + b) for b in range(batch_size)]
        x_tr, y_tr, x_te, y_te, k = stack_tasks(tasks, cfg.max_features)
        tokens = _frozen_prefix(backbone, layer, x_tr, y_tr, x_te)
        query = Tensor._wrap(tokens[..., x_tr.shape[-2]:, :])
        with T.fast_kernels(), T.GradTape() as tape:
            try:
                loss = masked_cross_entropy(decoder_logits(query, dec), y_te, k)
            except ValueError as exc:
                raise TrainingError(f"non-finite logits at step {step}", step) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"decoder loss diverged at step {step}", step)
        if history is not None:
            history.append(value)
        opt.zero_grad()
        T.backward(tape, loss)
        opt.step()
        if step % steps_per_epoch == 0:
            log.debug("decoder %d step %d loss %.4f", layer, step, value)
    T.zero_grad(dec.parameters())
    return dec


def train_bank(backbone: BackboneWeights, prior: PriorConfig, epochs: int = 5,
               steps_per_epoch: int = 200, batch_size: int = 8, lr: float = 1e-3) -> DecoderBank:
    if backbone.final_decoder is None:
        raise ContractError("backbone has no final decoder; train it with train_backbone first")
    n = backbone.config.n_layers
    decoders = [train_decoder(i, backbone, prior, epochs, steps_per_epoch, batch_size, lr)
                for i in range(1, n)]
    decoders.append(backbone.final_decoder)
    return DecoderBank(decoders)


def layer_predict(task, backbone: BackboneWeights, dec: DecoderWeights) -> np.ndarray:
    """Class probabilities from the encoder truncated at ``dec``'s depth."""
    acts = forward_until(task, backbone, dec.layer_index)
    return T.softmax(decode(acts, dec, task.n_test, task.n_classes)).data


def route_predict(task, backbone: BackboneWeights, dec: DecoderWeights, layer: int) -> np.ndarray:
    """Probabilities from layer-``layer`` activations pushed through ``dec``
    regardless of the depth ``dec`` was trained for."""
    acts = forward_until(task, backbone, layer)
    logits = decoder_logits(acts.tokens[acts.n_train:], dec)[:, :task.n_classes]
    return T.softmax(logits).data
