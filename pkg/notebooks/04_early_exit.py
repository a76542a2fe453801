"""
Entropy-gated early exit
========================

After each layer the query rows are decoded and the mean predictive entropy
is compared with a threshold tau. The pass stops at the first layer whose
entropy is strictly below tau; tau = 0 is therefore the full forward pass.
"""

# %%
import math

import numpy as np

from tabexit.backbone import ModelConfig, train_backbone
from tabexit.decoders import train_bank
from tabexit.early_exit import ExitConfig, count_flops, mean_entropy, predict_early_exit
from tabexit.prior import PriorConfig, sample_task

print("worked example:", mean_entropy([[0.9, 0.1], [0.5, 0.5]]))

prior = PriorConfig(n_samples_per_task=48, max_features=4, max_classes=3, seed=1)
model = ModelConfig(d_model=16, n_layers=4, n_heads=2, max_features=4, max_classes=3, seed=1)
backbone = train_backbone(model, prior, steps=150, batch_size=8, lr=3e-3)
bank = train_bank(backbone, prior, epochs=1, steps_per_epoch=100, batch_size=8, lr=3e-3)

# %%
task = sample_task(prior, 10**6)
full = predict_early_exit(task, backbone, bank, ExitConfig(tau=0.0))
print("entropy trace:", np.round(full.entropy_trace, 4))
print("ln K =", round(math.log(task.n_classes), 4))

# %%
for tau in (0.0, 0.1, 0.3, 0.5, 0.8, math.inf):
    rep = predict_early_exit(task, backbone, bank, ExitConfig(tau=tau))
    acc = np.mean(rep.predictions == task.y_test)
    print(f"tau {tau:>4}: exit layer {rep.exit_layer}, decodes {rep.decode_count}, "
          f"accuracy {acc:.3f}, FLOPs {count_flops(task, model, rep.exit_layer):,}")

# %%
# with entropies scaled by ln K the same tau means the same thing for any K
rep = predict_early_exit(task, backbone, bank, ExitConfig(tau=0.5, normalize_entropy=True))
print("normalized trace:", np.round(rep.entropy_trace, 4), "exit", rep.exit_layer)
print(rep.to_record())
