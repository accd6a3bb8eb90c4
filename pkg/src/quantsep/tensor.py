"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run tape: every primitive that sees a grad-requiring input
records a backward closure on its output. ``backward()`` on a scalar
walks the recorded graph in reverse topological order and accumulates
gradients into the leaves.

The primitive set is exactly what the separation network and its
training loss need: 1-D convolution (stride 1, arbitrary dilation,
optional grouping), PReLU, global layer norm, sigmoid, tanh,
elementwise add/sub/mul/div, log, channel concatenation / row slicing,
mean and sum. Broadcasting is limited to scalar-with-array and the
per-channel gain/bias inside the norm; everything else requires equal
shapes.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class GraphError(RuntimeError):
    """Raised on invalid use of the recorded graph (e.g. backward on a non-scalar)."""


def _as_array(x, dtype):
    a = np.asarray(x)
    if a.dtype != dtype:
        a = a.astype(dtype)
    return a


class Tensor:
    """A dense float array plus optional gradient tape bookkeeping.

    data is float32 by default (the full-precision reference of the
    toolkit); float64 is supported for high-accuracy probes such as
    finite-difference Hessian work.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=np.float32, op="leaf"):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = op

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float32):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad, dtype=dtype)

    @staticmethod
    def _result(data, parents, backward, op):
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, dtype=data.dtype, op=op)
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- backward pass --------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every grad-requiring leaf reachable from self.

        Only valid on scalars. The recorded graph is consumed: closures are
        released after the pass so a tensor cannot be backpropagated twice.
        """
        if self.data.shape != ():
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require grad")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None
                node._parents = ()

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_elementwise(name, a, b):
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not match")


def _reduce_to(shape, g):
    # Undo scalar broadcasting: a scalar operand receives the summed gradient.
    if shape == () and g.shape != ():
        return g.sum()
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    _check_elementwise("add", a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(a.data.shape, g))
        if b.requires_grad:
            b._accumulate(_reduce_to(b.data.shape, g))

    return Tensor._result(data, (a, b), backward, "add")


def sub(a, b):
    _check_elementwise("sub", a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(a.data.shape, g))
        if b.requires_grad:
            b._accumulate(_reduce_to(b.data.shape, -g))

    return Tensor._result(data, (a, b), backward, "sub")


def mul(a, b):
    _check_elementwise("mul", a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(a.data.shape, g * b.data))
        if b.requires_grad:
            b._accumulate(_reduce_to(b.data.shape, g * a.data))

    return Tensor._result(data, (a, b), backward, "mul")


def div(a, b):
    _check_elementwise("div", a, b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(a.data.shape, g / b.data))
        if b.requires_grad:
            b._accumulate(_reduce_to(b.data.shape, -g * a.data / (b.data * b.data)))

    return Tensor._result(data, (a, b), backward, "div")


def neg(a):
    def backward(g):
        a._accumulate(-g)

    return Tensor._result(-a.data, (a,), backward, "neg")


# -- nonlinearities -------------------------------------------------------


def sigmoid(a):
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return Tensor._result(data, (a,), backward, "sigmoid")


def tanh(a):
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return Tensor._result(data, (a,), backward, "tanh")


def prelu(a, slope):
    """PReLU with a learnable scalar slope for the negative part."""
    if slope.data.shape != ():
        raise ShapeError(f"prelu: slope must be scalar, got shape {slope.data.shape}")
    pos = a.data > 0
    data = np.where(pos, a.data, slope.data * a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(pos, g, slope.data * g))
        if slope.requires_grad:
            slope._accumulate(np.where(pos, 0.0, g * a.data).sum())

    return Tensor._result(data, (a, slope), backward, "prelu")


def log(a):
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._result(data, (a,), backward, "log")


# -- reductions -------------------------------------------------------------


def tsum(a):
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._result(data, (a,), backward, "sum")


def tmean(a):
    n = a.data.size
    data = np.asarray(a.data.sum() / n, dtype=a.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    return Tensor._result(data, (a,), backward, "mean")


# -- structure ---------------------------------------------------------------


def concat(tensors, axis=0):
    """Concatenate [C_i, T] feature maps along the channel axis."""
    if axis != 0:
        raise ShapeError("concat: only the channel axis (0) is supported")
    frames = {t.data.shape[1:] for t in tensors}
    if len(frames) != 1:
        raise ShapeError(
            f"concat: inputs disagree beyond the channel axis: {sorted(frames)}"
        )
    data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[lo:hi])

    return Tensor._result(data, tuple(tensors), backward, "concat")


def slice_rows(a, start, stop):
    """Take rows [start:stop] along axis 0; backward scatters into zeros."""
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(
            f"slice_rows: [{start}:{stop}] out of bounds for shape {a.data.shape}"
        )
    data = a.data[start:stop].copy()

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        a._accumulate(full)

    return Tensor._result(data, (a,), backward, "slice_rows")


# -- convolution -------------------------------------------------------------


def conv1d(x, w, b=None, dilation=1, groups=1):
    """1-D convolution over [C_in, T] with stride 1 and symmetric zero padding.

    w has shape [C_out, C_in // groups, K]; K must be odd so the frame count
    is preserved. groups=1 is the dense / pointwise case, groups=C_in the
    depthwise case.
    """
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ShapeError(
            f"conv1d: expected input [C_in, T] and weight [C_out, C_in/groups, K],"
            f" got {x.data.shape} and {w.data.shape}"
        )
    c_in, T = x.data.shape
    c_out, c_in_g, K = w.data.shape
    if K % 2 == 0:
        raise ShapeError(f"conv1d: kernel size must be odd, got {K}")
    if c_in_g * groups != c_in or c_out % groups != 0:
        raise ShapeError(
            f"conv1d: weight {w.data.shape} incompatible with input {x.data.shape}"
            f" for groups={groups}"
        )
    if b is not None and b.data.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {b.data.shape} != ({c_out},)")

    pad = dilation * (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad))) if pad else x.data

    if groups == 1:
        y = np.zeros((c_out, T), dtype=x.data.dtype)
        for k in range(K):
            y += w.data[:, :, k] @ xp[:, k * dilation : k * dilation + T]
    else:
        g_out = c_out // groups
        xg = xp.reshape(groups, c_in_g, xp.shape[1])
        wg = w.data.reshape(groups, g_out, c_in_g, K)
        y = np.zeros((groups, g_out, T), dtype=x.data.dtype)
        for k in range(K):
            y += np.einsum(
                "goc,gct->got", wg[:, :, :, k], xg[:, :, k * dilation : k * dilation + T]
            )
        y = y.reshape(c_out, T)
    if b is not None:
        y = y + b.data[:, None]

    def backward(g):
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=1))
        if groups == 1:
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for k in range(K):
                    gw[:, :, k] = g @ xp[:, k * dilation : k * dilation + T].T
                w._accumulate(gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for k in range(K):
                    gxp[:, k * dilation : k * dilation + T] += w.data[:, :, k].T @ g
                x._accumulate(gxp[:, pad : pad + T] if pad else gxp)
        else:
            g_out = c_out // groups
            gg = g.reshape(groups, g_out, T)
            xg = xp.reshape(groups, c_in_g, xp.shape[1])
            wg = w.data.reshape(groups, g_out, c_in_g, K)
            if w.requires_grad:
                gw = np.empty_like(wg)
                for k in range(K):
                    gw[:, :, :, k] = np.einsum(
                        "got,gct->goc", gg, xg[:, :, k * dilation : k * dilation + T]
                    )
                w._accumulate(gw.reshape(w.data.shape))
            if x.requires_grad:
                gxp = np.zeros_like(xg)
                for k in range(K):
                    gxp[:, :, k * dilation : k * dilation + T] += np.einsum(
                        "goc,got->gct", wg[:, :, :, k], gg
                    )
                gxp = gxp.reshape(c_in, xp.shape[1])
                x._accumulate(gxp[:, pad : pad + T] if pad else gxp)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(y, parents, backward, "conv1d")


def glob_layer_norm(x, gain, bias, eps=1e-8):
    """Global layer norm: normalize over channels and frames jointly,
    then apply a learned per-channel gain and bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"glob_layer_norm: expected [C, T], got {x.data.shape}")
    C = x.data.shape[0]
    if gain.data.shape != (C,) or bias.data.shape != (C,):
        raise ShapeError(
            f"glob_layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape}"
            f" != ({C},)"
        )
    mu = x.data.mean()
    var = x.data.var()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gain.data[:, None] * xhat + bias.data[:, None]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=1))
        if x.requires_grad:
            h = g * gain.data[:, None]
            gx = inv * (h - h.mean() - xhat * (h * xhat).mean())
            x._accumulate(gx.astype(x.data.dtype, copy=False))

    return Tensor._result(y.astype(x.data.dtype, copy=False), (x, gain, bias), backward, "gln")
