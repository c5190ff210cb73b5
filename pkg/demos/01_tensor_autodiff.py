#!/usr/bin/env python3
"""A walk through the autodiff engine: build expressions, differentiate,
and confirm the analytic gradients against central finite differences."""

import numpy as np

from tabaconv import tensor as tt
from tabaconv.tensor import Tensor, grad_check, use_dtype

print("== forward/backward on a small expression ==")
x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
w = Tensor(np.array([[0.5, -1.0], [2.0, 0.0]]), requires_grad=True)
loss = tt.sum_all(tt.relu(tt.matmul(x, w)))
loss.backward()
print("loss =", float(loss.data))
print("x.grad =\n", x.grad)
print("w.grad =\n", w.grad)

print("\n== a length-preserving 1-D convolution ==")
signal = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
box = Tensor(np.ones((3, 1, 1)))
out = tt.conv1d(signal, box, Tensor(np.zeros(1)), padding="zero")
print("conv([1,2,3], box kernel) =", out.data.ravel(), " (edges read zeros)")
out_c = tt.conv1d(signal, box, Tensor(np.zeros(1)), padding="circular")
print("circular padding instead   =", out_c.data.ravel())

print("\n== gradient checking (float64) ==")
with use_dtype("float64"):
    rng = np.random.default_rng(0)
    params = {
        "x": Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True),
        "w": Tensor(rng.normal(size=(3, 3, 5)), requires_grad=True),
        "b": Tensor(rng.normal(size=5), requires_grad=True),
    }
    report = grad_check(
        lambda p: tt.mean_all(tt.conv1d(p["x"], p["w"], p["b"], "circular")), params
    )
print(report.summary())
