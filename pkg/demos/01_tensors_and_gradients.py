"""Tour of the tensor engine: forward ops, the tape, and exact gradients.

Everything downstream (the transformer, the loss, fine-tuning) reduces to
the handful of primitives shown here. The punchline at the end compares a
reverse-mode gradient against central finite differences.
"""

import numpy as np

from stressvit.autodiff import (
    OptimizerConfig,
    Parameter,
    Tape,
    Tensor,
    backward,
    gelu,
    layer_norm,
    matmul,
    optimizer_step,
    softmax_rows,
)

print("== basic ops ==")
a = Tensor([[1.0, 2.0], [3.0, 4.0]])
b = Tensor([[5.0, 6.0], [7.0, 8.0]])
print("a @ b =\n", matmul(a, b).data)
print("softmax of [0, ln 2]:", softmax_rows(Tensor([0.0, np.log(2.0)])).data, "(thirds)")
print("gelu at -10, 0, 10:", gelu(Tensor([-10.0, 0.0, 10.0])).data)

print("\n== layer norm standardises the last axis ==")
x = Tensor(np.random.default_rng(0).normal(5.0, 3.0, size=(2, 8)))
normed = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
print("row means:", normed.data.mean(axis=-1))
print("row vars: ", normed.data.var(axis=-1))

print("\n== reverse mode on a tape ==")
w = Parameter(np.array([[0.5, -0.3], [0.1, 0.8]]), name="w")
inputs = Tensor([[1.0, 2.0]])
tape = Tape()
with tape:
    out = matmul(inputs, w.value)
    loss = matmul(out, Tensor([[1.0], [1.0]]))  # scalar via a column of ones
backward(loss, tape)
print("analytic dL/dw =\n", w.grad.data)

h = 1e-6
numeric = np.zeros_like(w.value.data)
flat = w.value.data.reshape(-1)
for i in range(flat.size):
    orig = flat[i]
    flat[i] = orig + h
    up = float((inputs.data @ w.value.data).sum())
    flat[i] = orig - h
    down = float((inputs.data @ w.value.data).sum())
    flat[i] = orig
    numeric.reshape(-1)[i] = (up - down) / (2 * h)
print("finite-difference dL/dw =\n", numeric)

print("\n== ten Adam steps shrink a quadratic ==")
theta = Parameter(np.array([3.0, -2.0]), name="theta")
config = OptimizerConfig(kind="adam", lr=0.1)
for step in range(10):
    tape = Tape()
    with tape:
        from stressvit.autodiff import mul, tsum

        loss = tsum(mul(theta.value, theta.value))
    backward(loss, tape)
    optimizer_step([theta], config)
    if step % 3 == 0:
        print(f"step {step}: loss {loss.item():.4f} theta {theta.value.data}")
print("final theta:", theta.value.data)
