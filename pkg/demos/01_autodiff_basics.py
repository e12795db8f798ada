"""A tour of the tensor engine: tapes, gradients and the verification mode.

Run with: python demos/01_autodiff_basics.py
"""
import numpy as np

import nightadapt.tensor as T
from nightadapt.tensor import Tape, Tensor

print("== forward arithmetic ==")
a = Tensor([1.0, 2.0, 3.0])
b = Tensor([10.0, 20.0, 30.0])
print("a + b       =", (a + b).numpy())
print("relu(a - 2) =", T.relu(a - 2.0).numpy())

print("\n== reverse-mode gradients on a tape ==")
x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
with Tape() as tape:
    loss = T.sum(T.mul(x, x))  # sum of squares
tape.backward(loss)
print("d(sum x^2)/dx at [1,2] ->", x.grad, "(expect [2, 4])")

print("\n== a tiny convolution and its adjoint ==")
img = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
kernel = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32), requires_grad=True)
bias = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
with Tape() as tape:
    out = T.conv2d(img, kernel, bias)
    total = T.sum(out)
tape.backward(total)
print("conv output (zero padding visible at the border):\n", out.numpy()[0, 0])
print("kernel gradient:\n", kernel.grad[0, 0])

print("\n== float64 verification mode: finite differences ==")
x = Tensor(np.array([0.3, -1.2, 0.9]), requires_grad=True)  # float64
w = Tensor(np.array([1.0, 2.0, 3.0]))
with Tape() as tape:
    loss = T.sum(T.mul(T.log_softmax(x), w))
tape.backward(loss)
h = 1e-6
numeric = np.zeros(3)
for i in range(3):
    for sign, slot in ((1, 0), (-1, 1)):
        x.data[i] += sign * h
        val = T.sum(T.mul(T.log_softmax(x), w)).item()
        numeric[i] += sign * val / (2 * h)
        x.data[i] -= sign * h
print("analytic:", x.grad)
print("numeric: ", numeric)
print("max rel err:", np.max(np.abs(x.grad - numeric) / np.maximum(np.abs(numeric), 1)))
