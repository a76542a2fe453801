"""Row-token transformer encoder for in-context classification.

Each table row becomes one token: context rows carry ``features + label``,
query rows carry ``features + <unknown label>``. Attention runs over the
sample axis only, under the usual prior-fitted-network mask: context tokens
see context tokens, a query token sees the context and itself.

Two details make the invariances exact rather than approximate. Matrix
products use the row-stable kernel from :mod:`tabexit.tensor`, and inside
every attention block the context keys/values are put into a canonical
order (lexicographic on the normalised context tokens) before the softmax
sums over them. A permutation of the context rows therefore never changes
any summation order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigurationError, ContractError, TrainingError
from .optim import Adam
from .prior import PriorConfig, sample_task
from .tensor import Tensor

log = logging.getLogger(__name__)

MASK_VALUE = -1e30
INIT_STD = 0.02
# task indices reserved for held-out evaluation, far from any training range
HELDOUT_START = 1 << 50


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    max_features: int = 8
    max_classes: int = 4
    seed: int = 0
    d_hidden: int = 0  # decoder width, 0 means 2 * d_model

    def validate(self) -> None:
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.max_classes < 2:
            raise ConfigurationError(f"max_classes must be >= 2, got {self.max_classes}")
        if self.max_features < 1 or self.d_ff < 0 or self.d_hidden < 0:
            raise ConfigurationError("max_features must be positive, d_ff and d_hidden >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def decoder_dim(self) -> int:
        return self.d_hidden or 2 * self.d_model


LAYER_PARAMS = (
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
)


@dataclass
class BackboneWeights:
    config: ModelConfig
    params: dict[str, Tensor]
    final_decoder: "object | None" = None  # DecoderWeights at layer N

    def layer(self, i: int, name: str) -> Tensor:
        return self.params[f"layer{i}.{name}"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


@dataclass
class LayerActivations:
    """Token matrix after ``layer_index`` blocks; context rows come first."""

    tokens: Tensor
    layer_index: int
    n_train: int

    @property
    def n_test(self) -> int:
        return self.tokens.shape[-2] - self.n_train


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def init_backbone(config: ModelConfig) -> BackboneWeights:
    """Normal(0, 0.02) projections and embeddings, zero biases, unit LN gains."""
    config.validate()
    rng = _rng(config.seed, 0)
    d, f = config.d_model, config.ff_dim

    def normal(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "feat.w": normal(config.max_features, d),
        "feat.b": zeros(d),
        "label_emb": normal(config.max_classes + 1, d),
    }
    for i in range(1, config.n_layers + 1):
        shapes = {
            "ln1.g": None, "ln1.b": (d,), "attn.wq": (d, d), "attn.bq": (d,),
            "attn.wk": (d, d), "attn.bk": (d,), "attn.wv": (d, d), "attn.bv": (d,),
            "attn.wo": (d, d), "attn.bo": (d,), "ln2.g": None, "ln2.b": (d,),
            "ff1.w": (d, f), "ff1.b": (f,), "ff2.w": (f, d), "ff2.b": (d,),
        }
        for name in LAYER_PARAMS:
            key = f"layer{i}.{name}"
            if name.endswith(".g"):
                params[key] = Tensor(np.ones(d), requires_grad=True)
            elif name.split(".")[-1].startswith("b"):
                params[key] = zeros(*shapes[name])
            else:
                params[key] = normal(*shapes[name])
    return BackboneWeights(config, params)


# --- forward pass ------------------------------------------------------------

def _check_capacity(task, config: ModelConfig) -> None:
    f = task.x_train.shape[-1]
    if f > config.max_features:
        raise CapacityError(
            f"task has {f} features but the backbone accepts at most {config.max_features}")
    if task.n_classes > config.max_classes:
        raise CapacityError(
            f"task has {task.n_classes} classes but the backbone supports at most "
            f"{config.max_classes}")
    y = np.asarray(task.y_train)
    if y.size and (y.min() < 0 or y.max() >= task.n_classes):
        raise CapacityError("train labels must lie in [0, n_classes)")


def _pad(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == width:
        return x
    pad = [(0, 0)] * (x.ndim - 1) + [(0, width - x.shape[-1])]
    return np.pad(x, pad)


def _embed_arrays(weights: BackboneWeights, x_train, y_train, x_test) -> Tensor:
    cfg = weights.config
    x = np.concatenate([_pad(x_train, cfg.max_features), _pad(x_test, cfg.max_features)], axis=-2)
    y_test = np.full(np.shape(x_test)[:-1], cfg.max_classes, dtype=np.int64)
    labels = np.concatenate([np.asarray(y_train, dtype=np.int64), y_test], axis=-1)
    p = weights.params
    feats = T.matmul(Tensor._wrap(x), p["feat.w"]) + p["feat.b"]
    return feats + T.take(p["label_emb"], labels)


def embed(task, weights: BackboneWeights) -> LayerActivations:
    """Layer-0 tokens for ``task`` (context rows, then query rows)."""
    _check_capacity(task, weights.config)
    tokens = _embed_arrays(weights, task.x_train, task.y_train, task.x_test)
    return LayerActivations(tokens, 0, int(np.shape(task.x_train)[-2]))


def _canonical_order(h: np.ndarray, n_train: int) -> np.ndarray:
    ctx = h[..., :n_train, :]
    lead = ctx.shape[:-2]
    flat = ctx.reshape((-1,) + ctx.shape[-2:])
    order = np.stack([np.lexsort(rows.T[::-1]) for rows in flat])
    return order.reshape(lead + (n_train,))


def _attention_mask(n: int, n_train: int) -> np.ndarray:
    mask = np.zeros((n, n_train + 1))
    mask[:n_train, n_train] = MASK_VALUE
    return mask


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    shape = x.shape[:-1] + (n_heads, x.shape[-1] // n_heads)
    return T.swapaxes(T.reshape(x, shape), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _block(weights: BackboneWeights, i: int, x: Tensor, n_train: int) -> Tensor:
    cfg = weights.config
    p = lambda name: weights.layer(i, name)  # noqa: E731
    n = x.shape[-2]

    h = T.layer_norm(x, p("ln1.g"), p("ln1.b"))
    q = h @ p("attn.wq") + p("attn.bq")
    k = h @ p("attn.wk") + p("attn.bk")
    v = h @ p("attn.wv") + p("attn.bv")

    order = _canonical_order(h.data, n_train)
    k_ctx = T.gather_rows(k[..., :n_train, :], order)
    v_ctx = T.gather_rows(v[..., :n_train, :], order)

    qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
    kh_ctx = _split_heads(k_ctx, cfg.n_heads)
    vh_ctx = _split_heads(v_ctx, cfg.n_heads)

    scale = 1.0 / np.sqrt(cfg.d_head)
    scores = T.concat([T.matmul(qh, T.swapaxes(kh_ctx, -1, -2)), T.rowdot(qh, kh)], axis=-1)
    probs = T.softmax(scores * scale + _attention_mask(n, n_train))
    mixed = T.matmul(probs[..., :n_train], vh_ctx) + probs[..., n_train:] * vh
    x = x + (_merge_heads(mixed) @ p("attn.wo") + p("attn.bo"))

    h = T.layer_norm(x, p("ln2.g"), p("ln2.b"))
    return x + (T.gelu(h @ p("ff1.w") + p("ff1.b")) @ p("ff2.w") + p("ff2.b"))


def encode_layer(acts: LayerActivations, layer: int, weights: BackboneWeights) -> LayerActivations:
    """Apply transformer block ``layer + 1`` to activations at depth ``layer``."""
    n_layers = weights.config.n_layers
    if not 0 <= layer < n_layers:
        raise ContractError(f"layer index {layer} outside [0, {n_layers})")
    if acts.layer_index != layer:
        raise ContractError(
            f"activations are at depth {acts.layer_index}, cannot apply block {layer + 1}")
    tokens = _block(weights, layer + 1, acts.tokens, acts.n_train)
    return LayerActivations(tokens, layer + 1, acts.n_train)


def forward_until(task, weights: BackboneWeights, k: int) -> LayerActivations:
    if not 0 <= k <= weights.config.n_layers:
        raise ContractError(f"layer count {k} outside [0, {weights.config.n_layers}]")
    acts = embed(task, weights)
    for i in range(k):
        acts = encode_layer(acts, i, weights)
    return acts


# --- training ----------------------------------------------------------------

def stack_tasks(tasks, max_features: int):
    """Batch equally-sized tasks into arrays with a leading task axis."""
    sizes = {(t.n_train, t.n_test) for t in tasks}
    if len(sizes) != 1:
        raise ContractError(f"cannot batch tasks of differing sizes {sorted(sizes)}")
    x_tr = np.stack([_pad(t.x_train, max_features) for t in tasks])
    x_te = np.stack([_pad(t.x_test, max_features) for t in tasks])
    y_tr = np.stack([np.asarray(t.y_train, dtype=np.int64) for t in tasks])
    y_te = np.stack([np.asarray(t.y_test, dtype=np.int64) for t in tasks])
    k = np.array([t.n_classes for t in tasks])
    return x_tr, y_tr, x_te, y_te, k


def class_mask(n_classes: np.ndarray, max_classes: int) -> np.ndarray:
    """Additive logit mask [B, 1, K_max] removing columns >= each task's K."""
    cols = np.arange(max_classes)
    return np.where(cols[None, :] < np.asarray(n_classes)[:, None], 0.0, MASK_VALUE)[:, None, :]


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, n_classes: np.ndarray) -> Tensor:
    """Mean cross-entropy of [B, n, K_max] logits restricted to each task's classes."""
    lp = T.log_softmax(logits + class_mask(n_classes, logits.shape[-1]))
    onehot = np.eye(logits.shape[-1])[targets]
    return -T.mean(T.sum(lp * onehot, axis=-1))


def train_backbone(config: ModelConfig, prior: PriorConfig, steps: int = 2000,
                   batch_size: int = 8, lr: float = 1e-3, start_index: int = 0,
                   log_every: int = 0) -> BackboneWeights:
    """Train encoder and final decoder jointly on prior tasks.

    Loss is cross-entropy on query rows. Returns the backbone with its
    final decoder attached as ``final_decoder``.
    """
    from .decoders import decoder_logits, init_decoder

    if steps < 1 or batch_size < 1 or lr < 0:
        raise ConfigurationError("steps and batch_size must be positive and lr non-negative")
    config.validate()
    prior.validate()
    if prior.max_features > config.max_features or prior.max_classes > config.max_classes:
        raise ConfigurationError("prior produces tasks beyond the model's capacity")

    weights = init_backbone(config)
    decoder = init_decoder(config, config.n_layers)
    opt = Adam(weights.parameters() + decoder.parameters(), lr=lr)
    for step in range(steps):
        tasks = [sample_task(prior, start_index + step * batch_size + b) for b in range(batch_size)]
        x_tr, y_tr, x_te, y_te, k = stack_tasks(tasks, config.max_features)
        with T.fast_kernels(), T.GradTape() as tape:
            x = _embed_arrays(weights, x_tr, y_tr, x_te)
            n_train = x_tr.shape[-2]
            for i in range(1, config.n_layers + 1):
                x = _block(weights, i, x, n_train)
            try:
                loss = masked_cross_entropy(decoder_logits(x[..., n_train:, :], decoder), y_te, k)
            except ValueError as exc:
                raise TrainingError(f"non-finite logits at step {step}", step) from exc
        if not np.isfinite(loss.item()):
            raise TrainingError(f"loss diverged at step {step}", step)
        opt.zero_grad()
        T.backward(tape, loss)
        opt.step()
        if log_every and step % log_every == 0:
            log.info("backbone step %d loss %.4f", step, loss.item())
    for p in weights.parameters() + decoder.parameters():
        p.grad = None
    weights.final_decoder = decoder
    return weights
