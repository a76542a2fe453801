"""
Training a backbone and its per-layer decoders
==============================================

A small in-context transformer is trained on prior tasks together with its
final decoder. Afterwards the backbone is frozen and one decoder is fitted
to each intermediate layer. The layer profile compares every dedicated
decoder with routing the same activations through the final decoder.

Sizes are shrunk so the script finishes in well under a minute; the CLI
``tabexit train`` runs the desk-scale defaults.
"""

# %%
from dataclasses import replace

import numpy as np

from tabexit.backbone import ModelConfig, forward_until, train_backbone
from tabexit.decoders import train_bank
from tabexit.evaluation import layer_profile, render_layer_profile
from tabexit.prior import PriorConfig, sample_task

prior = PriorConfig(n_samples_per_task=48, max_features=4, max_classes=3, seed=0)
model = ModelConfig(d_model=16, n_layers=4, n_heads=2, max_features=4, max_classes=3, seed=0)

backbone = train_backbone(model, prior, steps=150, batch_size=8, lr=3e-3)
bank = train_bank(backbone, prior, epochs=1, steps_per_epoch=100, batch_size=8, lr=3e-3)
print("decoders:", [d.layer_index for d in bank.decoders])

# %%
print(render_layer_profile(layer_profile(backbone, bank, prior, n_tasks=40)))

# %%
# the attention mask keeps query rows independent of each other:
# adding one more query row leaves the others bit-identical
task = sample_task(prior, 10**6)
grown = replace(task, x_test=np.vstack([task.x_test, task.x_test[:1] + 1.0]),
                y_test=np.append(task.y_test, 0))
a = forward_until(task, backbone, model.n_layers).tokens.data
b = forward_until(grown, backbone, model.n_layers).tokens.data
print("other rows unchanged:", np.array_equal(a, b[:-1]))
