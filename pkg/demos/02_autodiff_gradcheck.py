"""The reverse-mode engine against finite differences.

Builds a little dilated-conv network out of the same primitives the
separator uses and compares every analytic gradient with a central
finite difference.
"""

import numpy as np

import quantsep.tensor as tz
from quantsep.tensor import Tensor

rng = np.random.default_rng(0)

x = Tensor(rng.standard_normal((3, 16)), dtype=np.float64)
w1 = Tensor(rng.standard_normal((6, 3, 3)), requires_grad=True, dtype=np.float64)
gain = Tensor(np.ones(6), requires_grad=True, dtype=np.float64)
bias = Tensor(np.zeros(6), requires_grad=True, dtype=np.float64)
slope = Tensor(0.25, requires_grad=True, dtype=np.float64)
w2 = Tensor(rng.standard_normal((1, 6, 3)), requires_grad=True, dtype=np.float64)


def forward():
    h = tz.conv1d(x, w1, dilation=2)
    h = tz.prelu(h, slope)
    h = tz.glob_layer_norm(h, gain, bias)
    return tz.tsum(tz.sigmoid(tz.conv1d(h, w2)))


loss = forward()
loss.backward()
print(f"loss = {loss.item():.6f}")

eps = 1e-6
for name, p in [("w1", w1), ("gain", gain), ("slope", slope), ("w2", w2)]:
    flat = p.data.ravel()
    idx = rng.integers(flat.size)
    orig = flat[idx]
    flat[idx] = orig + eps
    up = forward().item()
    flat[idx] = orig - eps
    down = forward().item()
    flat[idx] = orig
    numeric = (up - down) / (2 * eps)
    analytic = p.grad.ravel()[idx]
    print(f"{name}[{idx}]: analytic {analytic:+.8f} vs numeric {numeric:+.8f} "
          f"(diff {abs(analytic - numeric):.2e})")
