"""
Synthetic tasks from the prior
==============================

Every task is a deterministic function of (seed, index): a random tanh MLP
scores Gaussian latents, the scores are cut at their K-quantiles, and the
rows are split into a context (train) and query (test) part.
"""

# %%
from collections import Counter

import numpy as np

from tabexit.prior import PriorConfig, quantile_labels, sample_task, task_stream

cfg = PriorConfig(seed=0)
task = sample_task(cfg, 0)
print(f"features {task.n_features}, classes {task.n_classes}, "
      f"train {task.n_train}, test {task.n_test}")
print("class counts in context:", np.bincount(task.y_train))

# %%
# same index, same task; the stream is random-access
again = next(iter(task_stream(cfg, 0, 1)))
print("identical:", np.array_equal(task.x_train, again.x_train))

# %%
# labels are quantile cuts of the stored latent scores
scores = np.concatenate([task.scores_train, task.scores_test])
labels = np.concatenate([task.y_train, task.y_test])
print("re-derived labels match:", np.array_equal(quantile_labels(scores, task.n_classes), labels))

# %%
# distribution of K and feature counts over many tasks
tasks = list(task_stream(cfg, 0, 500))
print("K:", sorted(Counter(t.n_classes for t in tasks).items()))
print("f:", sorted(Counter(t.n_features for t in tasks).items()))
largest = [np.bincount(np.r_[t.y_train, t.y_test]).max() / cfg.n_samples_per_task for t in tasks]
print("mean share of the largest class: %.3f" % np.mean(largest))
