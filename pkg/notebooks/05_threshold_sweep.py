"""
Cross-validated threshold sweep
===============================

A CSV dataset is loaded, split into folds, and every threshold is run on
every fold. The report mirrors the usual early-exit table: ROC AUC,
runtime delta against tau = 0, and the average exit layer, followed by the
cross-dataset aggregate and the relative speed/AUC tradeoff.
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from tabexit.backbone import ModelConfig, train_backbone
from tabexit.decoders import train_bank
from tabexit.evaluation import evaluate_dataset, load_csv, render_report
from tabexit.prior import PriorConfig

prior = PriorConfig(n_samples_per_task=48, max_features=4, max_classes=3, seed=2)
model = ModelConfig(d_model=16, n_layers=4, n_heads=2, max_features=4, max_classes=3, seed=2)
backbone = train_backbone(model, prior, steps=150, batch_size=8, lr=3e-3)
bank = train_bank(backbone, prior, epochs=1, steps_per_epoch=100, batch_size=8, lr=3e-3)

# %%
# two small datasets written as CSV, one with a categorical column
tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
x = rng.normal(size=(120, 3))
y = np.where(x[:, 0] - x[:, 1] + 0.3 * rng.normal(size=120) > 0, "yes", "no")
colour = rng.choice(["red", "green"], size=120)
lines = ["a,b,c,colour,target"] + [f"{r[0]!r},{r[1]!r},{r[2]!r},{c},{t}"
                                   for r, c, t in zip(x.tolist(), colour, y)]
(tmp / "linear.csv").write_text("\n".join(lines) + "\n")

z = rng.normal(size=(90, 2))
k = np.digitize(np.hypot(*z.T), [0.8, 1.4])
(tmp / "rings.csv").write_text("u,v,ring\n" + "\n".join(
    f"{a!r},{b!r},r{c}" for (a, b), c in zip(z.tolist(), k)) + "\n")

datasets = [load_csv(tmp / "linear.csv", "target"), load_csv(tmp / "rings.csv", "ring")]
for ds in datasets:
    print(ds.name, ds.features.shape, "classes", ds.class_names)

# %%
reports = [evaluate_dataset(ds, backbone, bank, folds=10, seed=0) for ds in datasets]
print(render_report(reports, "text"))

# %%
# the same numbers as CSV, ready for a plotting tool
print(render_report(reports, "csv").splitlines()[:4])
