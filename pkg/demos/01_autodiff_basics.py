"""Tour of the autodiff substrate: build a graph, run backward, and check
a gradient against central finite differences."""

import numpy as np

from tdmfew import numeric as nm
from tdmfew.numeric import Rng

rng = Rng(0)

# A tiny computation: mean squared distance between a parameter vector and
# a target, plus a tanh regularizer.
x = nm.parameter(rng.normal(1.0, (5,)))
target = nm.constant(np.linspace(-1, 1, 5))
loss = nm.add(nm.squared_l2_distance(x, target),
              nm.tsum(nm.tanh(x)))
print("loss:", loss.item())

loss.backward()
print("analytic gradient:", np.round(x.grad, 6))

# Finite-difference check (the graph is rebuilt on every evaluation).
step = 1e-6
fd = np.zeros(5)
for i in range(5):
    for sign in (+1, -1):
        x.data[i] += sign * step
        with nm.no_grad():
            val = nm.add(nm.squared_l2_distance(x, target),
                         nm.tsum(nm.tanh(x))).item()
        fd[i] += sign * val / (2 * step)
        x.data[i] -= sign * step
print("finite differences:", np.round(fd, 6))
print("max abs difference:", np.abs(fd - x.grad).max())

# Layers compose the same way; conv + pool + norm behave like any op.
images = nm.constant(rng.normal(1.0, (2, 3, 16, 16)))
kernel = nm.parameter(rng.uniform(-0.2, 0.2, (8, 3, 3, 3)))
bias = nm.parameter(np.zeros(8))
bn = nm.BatchNormParams(8)
feats = nm.maxpool2(nm.relu(nm.batchnorm(nm.conv2d(images, kernel, bias), bn, "train")))
print("conv block output shape:", feats.shape)
nm.tsum(feats).backward()
print("kernel gradient norm:", float(np.abs(kernel.grad).sum()))
