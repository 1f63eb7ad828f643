"""
Reverse-mode autodiff on numpy arrays
=====================================

Every layer of the extrapolator is built from the small ``Tensor`` class.
This script builds a tiny computation, runs ``backward`` and compares the
result against central finite differences.
"""

import numpy as np

from mdfce.tensor import Tensor, backward, grad_check, layer_norm, relu, softmax_rows

rng = np.random.default_rng(0)

# a two-layer perceptron with a softmax read-out
x = Tensor(rng.standard_normal((5, 4)))
w1 = Tensor(rng.standard_normal((4, 8)) * 0.5, requires_grad=True)
w2 = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)
gain = Tensor(np.ones(8), requires_grad=True)
bias = Tensor(np.zeros(8), requires_grad=True)


def loss(_=None):
    h = relu(layer_norm(x @ w1, gain, bias))
    p = softmax_rows(h @ w2)
    return (p * p).sum()


out = loss()
backward(out)
print("loss:", out.item())
print("dL/dw2 (first row):", np.round(w2.grad[0], 5))

# grad_check perturbs every entry of a tensor and reports the worst
# relative error between the analytic and numerical gradients
for name, w in (("w1", w1), ("w2", w2), ("gain", gain)):
    w.grad = None
    print(f"max relative error for {name}: {grad_check(loss, w, 1e-6):.2e}")
