import hashlib
import logging
from pathlib import Path

import pytest

from tabexit.backbone import train_backbone
from tabexit.checkpoint import load_checkpoint, save_checkpoint
from tabexit.config import RunConfig
from tabexit.decoders import train_bank

ROOT = Path(__file__).resolve().parents[1]
# bump when a code change invalidates previously trained weights
MODEL_CACHE_VERSION = 1


def desk_config() -> RunConfig:
    return RunConfig().with_seed(1)


def desk_checkpoint_path(cfg: RunConfig) -> Path:
    key = hashlib.sha256(f"{MODEL_CACHE_VERSION}\n{cfg.to_text()}".encode()).hexdigest()[:12]
    return ROOT / ".model_cache" / f"desk-{key}.ckpt"


def train_desk_model(cfg: RunConfig):
    t = cfg.train
    backbone = train_backbone(cfg.model, cfg.prior, t.backbone_steps, t.backbone_batch_size,
                              t.backbone_lr, log_every=100)
    bank = train_bank(backbone, cfg.prior, t.decoder_epochs, t.decoder_steps_per_epoch,
                      t.decoder_batch_size, t.decoder_lr)
    return backbone, bank


@pytest.fixture(scope="session")
def desk_model():
    """Desk-default backbone + bank, trained once (~20 min on one core) and cached."""
    cfg = desk_config()
    path = desk_checkpoint_path(cfg)
    if not path.exists():
        logging.getLogger(__name__).warning("training desk model into %s", path)
        path.parent.mkdir(exist_ok=True)
        backbone, bank = train_desk_model(cfg)
        save_checkpoint(path, backbone, bank)
    backbone, bank = load_checkpoint(path)
    return cfg, backbone, bank


TINY_CONFIG_TEXT = """\
# small enough for a full train + sweep in a few seconds
prior.n_samples_per_task = 40
prior.max_features = 4
prior.max_classes = 3
model.d_model = 8
model.n_layers = 3
model.n_heads = 2
model.max_features = 4
model.max_classes = 3
train.backbone_steps = 4
train.backbone_batch_size = 2
train.decoder_epochs = 1
train.decoder_steps_per_epoch = 3
train.decoder_batch_size = 2
train.heldout_tasks = 5
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY_CONFIG_TEXT)
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_config, tmp_path_factory):
    """A checkpoint written by ``tabexit train`` with the tiny config."""
    from tabexit.cli import main

    out = tmp_path_factory.mktemp("tiny_model")
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out / "model.ckpt"


@pytest.fixture(scope="session")
def manifest(tmp_path_factory):
    """Manifest with two small CSV datasets the tiny model can read."""
    import numpy as np

    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(11)
    lines = ["name,path,label_column"]
    for name, k in (("alpha", 2), ("beta", 3)):
        x = rng.normal(size=(60, 3))
        y = np.digitize(x[:, 0] + 0.3 * rng.normal(size=60), [-0.4, 0.4][:k - 1])
        rows = ["f0,f1,f2,target"] + [",".join(f"{v!r}" for v in r) + f",c{c}"
                                      for r, c in zip(x.tolist(), y)]
        (root / f"{name}.csv").write_text("\n".join(rows) + "\n")
        lines.append(f"{name},{name}.csv,target")
    path = root / "manifest.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}  {detail}")
