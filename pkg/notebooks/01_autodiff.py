"""
Reverse-mode autodiff on numpy arrays
=====================================

The tensor core records every operation on a tape and replays it backwards.
Here we build a small expression, compare the tape gradient with central
differences and look at the FLOP counter.
"""

# %%
import numpy as np

from tabexit import tensor as T
from tabexit.tensor import FlopCounter, GradTape, Tensor, backward

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

with GradTape() as tape:
    h = T.gelu(x @ w)
    loss = T.mean(T.log_softmax(h)[:, 0])

backward(tape, loss)
print("loss", loss.item())
print("tape length", len(tape.nodes))
print("dL/dw\n", w.grad)

# %%
# central differences for one entry of w
eps = 1e-6


def value(wd):
    return T.mean(T.log_softmax(T.gelu(Tensor(x.data) @ Tensor(wd)))[:, 0]).item()


wp, wm = w.data.copy(), w.data.copy()
wp[1, 0] += eps
wm[1, 0] -= eps
print("finite difference", (value(wp) - value(wm)) / (2 * eps), "tape", w.grad[1, 0])

# %%
# softmax is stabilised, layer norm keeps eps inside the root
print(T.softmax(Tensor([1000.0, 1000.0, 1000.0])).data)
print(T.layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data)

# %%
# matmul counts 2 FLOPs per multiply-add
with FlopCounter() as fc:
    Tensor(np.ones((128, 64))) @ Tensor(np.ones((64, 64)))
print("FLOPs", fc.total, "=", 2 * 128 * 64 * 64)
