"""
Reverse-mode autodiff on a tape
===============================

Every op records itself on the active tape; ``backward`` walks the tape in
reverse and accumulates gradients into the leaves.
"""

import numpy as np

from ncnn import tensor as T

# a scalar example: d/dx (x * y + x) = y + 1
x = T.Tensor(2.0, requires_grad=True)
y = T.Tensor(-3.0, requires_grad=True)
with T.Tape() as tape:
    z = T.add(T.mul(x, y), x)
tape.backward(z)
print("z =", z.item(), " dz/dx =", x.grad, " dz/dy =", y.grad)

# %%
# A convolution followed by ReLU, max-pooling and a dense head, checked
# against central finite differences.

rng = np.random.default_rng(0)
image = T.Tensor(rng.normal(size=(1, 8, 8)), requires_grad=True)
kernels = T.Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
bias = T.Tensor(np.zeros(4), requires_grad=True)
head = rng.normal(size=(2, 4 * 3 * 3))


def loss():
    h = T.maxpool2d(T.relu(T.conv2d(image, kernels, bias)), 2)
    logits = T.dense(T.flatten(h), head, np.zeros(2))
    return T.cross_entropy_soft(T.softmax(logits), np.array([0.2, 0.8]))


kernels.zero_grad()
with T.Tape() as tape:
    value = loss()
tape.backward(value)

step = 1e-5
numeric = np.zeros_like(kernels.values)
for idx in np.ndindex(kernels.shape):
    orig = kernels.values[idx]
    kernels.values[idx] = orig + step
    up = loss().item()
    kernels.values[idx] = orig - step
    down = loss().item()
    kernels.values[idx] = orig
    numeric[idx] = (up - down) / (2 * step)

err = np.linalg.norm(kernels.grad - numeric) / np.linalg.norm(numeric)
print(f"loss {value.item():.4f}; relative error of the kernel gradient: {err:.2e}")
