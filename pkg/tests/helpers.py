"""Shared builders for untrained models and handmade tasks."""
import numpy as np

from tabexit.backbone import ModelConfig, init_backbone
from tabexit.decoders import DecoderBank, init_decoder
from tabexit.prior import SyntheticTask

TINY = ModelConfig(d_model=8, n_layers=3, n_heads=2, max_features=4, max_classes=3, seed=4)


def randomize(tensors, scale, seed):
    """Overwrite parameter data with Normal(0, scale) so activations are far from trivial."""
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.data = rng.normal(0.0, scale, size=t.data.shape)


def random_backbone(config=TINY, scale=0.5, seed=0):
    weights = init_backbone(config)
    randomize(weights.parameters(), scale, seed)
    return weights


def random_bank(backbone, scale=1.0, seed=1):
    decoders = [init_decoder(backbone.config, i) for i in range(1, backbone.config.n_layers + 1)]
    for i, dec in enumerate(decoders):
        randomize(dec.parameters(), scale * (1 + i), seed + i)
    return DecoderBank(decoders)


def make_task(n_train=12, n_test=5, f=3, k=3, seed=0):
    rng = np.random.default_rng(seed)
    y_train = np.concatenate([np.arange(k), rng.integers(0, k, n_train - k)])
    return SyntheticTask(rng.normal(size=(n_train, f)), y_train, rng.normal(size=(n_test, f)),
                         rng.integers(0, k, n_test), k)


# criterion number -> (passed, detail); filled by test_acceptance, printed by conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class criterion:
    """Context manager recording one acceptance criterion's outcome."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok or not exc else f"{self.detail} | {exc_type.__name__}: {exc}"
        ACCEPTANCE[self.number] = (ok, f"{self.title}: {detail}".strip())
        print(f"criterion {self.number}: {'PASS' if ok else 'FAIL'}  {self.title}: {detail}")
        return False
