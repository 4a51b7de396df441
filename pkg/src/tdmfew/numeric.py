"""Reverse-mode autodiff substrate on float64 numpy arrays.

Every operation takes and returns :class:`Tensor` objects, records the
inputs it needs for the chain rule, and accumulates gradients additively
when ``backward()`` is called on a scalar result. The graph is rebuilt on
every forward pass (define-by-run), so training loops simply drop the old
loss tensor and build a new one.

Conventions:
  * values are contiguous ``float64`` arrays (scalars are 0-d arrays);
  * elementwise ``+ - *`` and ``div`` follow numpy broadcasting, with the
    gradient summed back over broadcast axes; no other op broadcasts;
  * shape violations raise :class:`ShapeError` naming both shapes;
  * stochastic ops draw from an explicit :class:`Rng`, so a fixed seed
    makes every run bit-reproducible.
"""

from __future__ import annotations

import threading
import warnings

import numpy as np


class _Flags(threading.local):
    """Per-thread op flags, so parallel evaluators cannot race each other."""

    def __init__(self):
        self.grad_enabled = True
        self.check_finite = False


_FLAGS = _Flags()


class ShapeError(ValueError):
    """An operation received tensors of incompatible shapes."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, repeated backward)."""


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-op ``isfinite`` assertion (off by default for speed)."""
    _FLAGS.check_finite = bool(enabled)


class no_grad:
    """Context manager that builds graph-free tensors (evaluation mode)."""

    def __enter__(self):
        self._prev = _FLAGS.grad_enabled
        _FLAGS.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _FLAGS.grad_enabled = self._prev
        return False


class Rng:
    """Deterministic random stream. Identical seeds give identical draws."""

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self._spawn_key))
        )

    def child(self, *keys: int) -> "Rng":
        """Independent derived stream, reproducible from (seed, keys)."""
        return Rng(self.seed, self._spawn_key + tuple(int(k) for k in keys))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, scale=1.0, size=None):
        return self._gen.normal(0.0, scale, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, k):
        """k indices from range(n), without replacement."""
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n):
        return self._gen.permutation(n)


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A value in the computation graph.

    Holds the numpy array, the gradient accumulator (same shape, filled in
    by ``backward``), and the closure that propagates the chain rule to the
    inputs that produced it.
    """

    __slots__ = ("data", "grad", "op", "inputs", "requires_grad",
                 "_backward_fn", "_backward_done")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf", inputs=()):
        self.data = _as_array(values)
        self.grad = None
        self.op = op
        self.inputs = tuple(inputs)
        self.requires_grad = bool(requires_grad)
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # Arithmetic sugar; scalars are lifted to constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self) -> None:
        """Reverse-topological gradient accumulation from a scalar root."""
        backward(self)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False, op="const")


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True, op="param")


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x)


def _result(data: np.ndarray, op: str, inputs) -> Tensor:
    requires = _FLAGS.grad_enabled and any(t.requires_grad for t in inputs)
    if _FLAGS.check_finite and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    return Tensor(data, requires_grad=requires, op=op,
                  inputs=inputs if requires else ())


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate gradients for every reachable leaf of a scalar root.

    Fails on a non-scalar root and on a second call for the same root
    (the graph is single-use; rebuild the forward pass instead).
    """
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    if root._backward_done:
        raise GraphError("backward already ran for this root; rebuild the graph")
    root._backward_done = True

    # Iterative DFS: training graphs are deep enough to overflow recursion.
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn()
    # The closures capture their own output (a reference cycle), so large
    # buffers would otherwise wait for the cycle collector. The graph is
    # single-use; drop it eagerly.
    for node in topo:
        node._backward_fn = None
        node.inputs = ()
        if node is not root and node.op not in ("param", "leaf"):
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data + b.data, "add", (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(out.grad, b.shape))
        out._backward_fn = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data - b.data, "sub", (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad, a.shape))
            _accum(b, _unbroadcast(-out.grad, b.shape))
        out._backward_fn = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data * b.data, "mul", (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))
        out._backward_fn = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data / b.data, "div", (a, b))
    if out.requires_grad:
        def _bw():
            _accum(a, _unbroadcast(out.grad / b.data, a.shape))
            _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))
        out._backward_fn = _bw
    return out


def sqrt(x) -> Tensor:
    x = _wrap(x)
    out = _result(np.sqrt(x.data), "sqrt", (x,))
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * 0.5 / out.data)
        out._backward_fn = _bw
    return out


def relu(x) -> Tensor:
    x = _wrap(x)
    out = _result(np.maximum(x.data, 0.0), "relu", (x,))
    if out.requires_grad:
        mask = x.data > 0
        def _bw():
            _accum(x, out.grad * mask)
        out._backward_fn = _bw
    return out


def tanh(x) -> Tensor:
    x = _wrap(x)
    t = np.tanh(x.data)
    out = _result(t, "tanh", (x,))
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * (1.0 - t * t))
        out._backward_fn = _bw
    return out


# Smallest/largest representable values strictly inside (0, 2); the tanh
# tails saturate to exactly 0.0/2.0 in float64 past |x| ~ 19, which would
# break the open-interval guarantee downstream code relies on.
_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(2.0, 0.0)


def one_plus_tanh(x) -> Tensor:
    """1 + tanh(x), strictly inside (0, 2) for every finite input."""
    x = _wrap(x)
    t = np.tanh(x.data)
    y = np.clip(1.0 + t, _OPEN_LO, _OPEN_HI)
    out = _result(y, "one_plus_tanh", (x,))
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad * (1.0 - t * t))
        out._backward_fn = _bw
    return out


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is 1 inside the interval and 0 outside."""
    if not lo < hi:
        raise ValueError(f"clamp needs lo < hi, got ({lo}, {hi})")
    x = _wrap(x)
    out = _result(np.clip(x.data, lo, hi), "clamp", (x,))
    if out.requires_grad:
        mask = (x.data >= lo) & (x.data <= hi)
        def _bw():
            _accum(x, out.grad * mask)
        out._backward_fn = _bw
    return out


def add_noise(x, rng: Rng, lo: float, hi: float) -> Tensor:
    """Add elementwise uniform noise; the noise is a constant for gradients."""
    x = _wrap(x)
    noise = rng.uniform(lo, hi, x.shape)
    out = _result(x.data + noise, "add_noise", (x,))
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad)
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = _result(x.data.reshape(shape), "reshape", (x,))
    if out.requires_grad:
        def _bw():
            _accum(x, out.grad.reshape(x.shape))
        out._backward_fn = _bw
    return out


def broadcast_to(x, shape) -> Tensor:
    """Copy a tensor out to a broadcast-compatible shape (bitwise repeats)."""
    x = _wrap(x)
    out = _result(np.ascontiguousarray(np.broadcast_to(x.data, shape)), "broadcast_to", (x,))
    if out.requires_grad:
        def _bw():
            _accum(x, _unbroadcast(out.grad, x.shape))
        out._backward_fn = _bw
    return out


def slice0(x, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 0."""
    x = _wrap(x)
    out = _result(x.data[start:stop], "slice0", (x,))
    if out.requires_grad:
        def _bw():
            g = np.zeros(x.shape)
            g[start:stop] = out.grad
            _accum(x, g)
        out._backward_fn = _bw
    return out


def stack0(tensors) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack0 of zero tensors")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError(f"stack0 shapes differ: {base} vs {t.shape}")
    out = _result(np.stack([t.data for t in tensors]), "stack0", tuple(tensors))
    if out.requires_grad:
        def _bw():
            for i, t in enumerate(tensors):
                _accum(t, out.grad[i])
        out._backward_fn = _bw
    return out


def take_flat(x, flat_indices, out_shape) -> Tensor:
    """Gather by flat index; the gradient scatters back additively."""
    x = _wrap(x)
    idx = np.asarray(flat_indices, dtype=np.int64)
    out = _result(x.data.reshape(-1)[idx].reshape(out_shape), "take_flat", (x,))
    if out.requires_grad:
        def _bw():
            g = np.zeros(x.size)
            np.add.at(g, idx.reshape(-1), out.grad.reshape(-1))
            _accum(x, g.reshape(x.shape))
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# reductions


def _check_axis(x: Tensor, axis) -> tuple:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    for a in axes:
        if x.shape[a] == 0:
            raise ShapeError(f"reduction over empty axis {a} of shape {x.shape}")
    return axes


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _check_axis(x, axis)
    out = _result(x.data.sum(axis=axes, keepdims=keepdims), "sum", (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(g, x.shape))
        out._backward_fn = _bw
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _check_axis(x, axis)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = _result(x.data.mean(axis=axes, keepdims=keepdims), "mean", (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accum(x, np.broadcast_to(g, x.shape) / count)
        out._backward_fn = _bw
    return out


def squared_l2_distance(a, b) -> Tensor:
    """Sum of squared elementwise differences (a scalar)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_l2_distance shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = _result((diff * diff).sum(), "squared_l2_distance", (a, b))
    if out.requires_grad:
        def _bw():
            g = 2.0 * out.grad * diff
            _accum(a, g)
            _accum(b, -g)
        out._backward_fn = _bw
    return out


def global_avg_pool(x) -> Tensor:
    """Spatial mean: (C,H,W) -> (C,) or (B,C,H,W) -> (B,C)."""
    x = _wrap(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs (C,H,W) or (B,C,H,W), got {x.shape}")
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# neural-net layers


def linear(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (B, F_in) @ weight(F_out, F_in).T + bias(F_out)."""
    x = _wrap(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {bias.shape} vs weight {weight.shape}")
    out = _result(x.data @ weight.data.T + bias.data, "linear", (x, weight, bias))
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(x, g @ weight.data)
            _accum(weight, g.T @ x.data)
            _accum(bias, g.sum(axis=0))
        out._backward_fn = _bw
    return out


def _im2col(xpad: np.ndarray, height: int, width: int) -> np.ndarray:
    """Materialize 3x3 patches of a padded (B,C,H+2,W+2) batch.

    Returns a contiguous (B, C*9, H*W) array whose middle axis matches a
    kernel flattened as (O, C*9), so the convolution is one matmul.
    """
    b, c = xpad.shape[:2]
    col = np.empty((b, c, 9, height, width))
    for idx in range(9):
        i, j = divmod(idx, 3)
        col[:, :, idx] = xpad[:, :, i:i + height, j:j + width]
    return col.reshape(b, c * 9, height * width)


def conv2d(x, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding, stride 1.

    x: (B, C, H, W), kernel: (O, C, 3, 3), bias: (O,) -> (B, O, H, W).
    """
    if stride != 1 or padding != 1:
        raise ValueError("conv2d supports stride=1, padding=1 only")
    x = _wrap(x)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input/kernel, got {x.shape} and {kernel.shape}")
    if kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d bias {bias.shape} vs kernel {kernel.shape}")

    B, C, H, W = x.shape
    O = kernel.shape[0]
    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    col = _im2col(xpad, H, W)                       # (B, C*9, H*W)
    k2 = kernel.data.reshape(O, C * 9)
    val = np.matmul(k2, col).reshape(B, O, H, W)
    out = _result(val + bias.data[:, None, None], "conv2d", (x, kernel, bias))
    if out.requires_grad:
        def _bw():
            g2 = out.grad.reshape(B, O, H * W)
            _accum(kernel,
                   np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0).reshape(O, C, 3, 3))
            _accum(bias, out.grad.sum(axis=(0, 2, 3)))
            # col2im: scatter the patch gradients back onto the padded input
            dcol = np.matmul(k2.T, g2).reshape(B, C, 9, H, W)
            dxpad = np.zeros_like(xpad)
            for idx in range(9):
                i, j = divmod(idx, 3)
                dxpad[:, :, i:i + H, j:j + W] += dcol[:, :, idx]
            _accum(x, dxpad[:, :, 1:-1, 1:-1])
        out._backward_fn = _bw
    return out


def maxpool2(x) -> Tensor:
    """2x2 max pooling, stride 2, odd trailing rows/cols dropped.

    The gradient routes to the first (row-major) argmax in each window.
    """
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 needs (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    if H < 2 or W < 2:
        raise ShapeError(f"maxpool2 needs H,W >= 2, got {x.shape}")
    Ho, Wo = H // 2, W // 2
    crop = x.data[:, :, :2 * Ho, :2 * Wo]
    win = crop.reshape(B, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, 4)
    idx = win.argmax(axis=-1)  # first max on ties
    val = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = _result(val, "maxpool2", (x,))
    if out.requires_grad:
        def _bw():
            gwin = np.zeros((B, C, Ho, Wo, 4))
            np.put_along_axis(gwin, idx[..., None], out.grad[..., None], axis=-1)
            g = np.zeros((B, C, H, W))
            g[:, :, :2 * Ho, :2 * Wo] = (
                gwin.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
                .reshape(B, C, 2 * Ho, 2 * Wo)
            )
            _accum(x, g)
        out._backward_fn = _bw
    return out


class BatchNormParams:
    """Affine batch-norm state for one layer (per-feature or per-channel)."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(num_features))
        self.beta = parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm(x, bn: BatchNormParams, mode: str) -> Tensor:
    """Batch normalization over (B,F) or (B,C,H,W) inputs.

    Train mode normalizes with batch statistics (population variance) and
    updates the running buffers with momentum; eval mode uses the buffers.
    A train-mode batch of one falls back to the buffers with a warning,
    since a single sample has no usable variance.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _wrap(x)
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm needs (B,F) or (B,C,H,W), got {x.shape}")
    if x.shape[1] != bn.num_features:
        raise ShapeError(f"batchnorm features {bn.num_features} vs input {x.shape}")
    B = x.shape[0]
    if B < 1:
        raise ShapeError(f"batchnorm needs B >= 1, got {x.shape}")

    use_batch_stats = mode == "train" and B > 1
    if mode == "train" and B == 1:
        warnings.warn("batchnorm: train-mode batch of 1, using running statistics",
                      RuntimeWarning, stacklevel=2)

    gamma, beta = bn.gamma, bn.beta
    spec = "bf,bf->f" if x.ndim == 2 else "bchw,bchw->c"
    if use_batch_stats:
        m = 1
        for a in axes:
            m *= x.shape[a]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(view)
        var = np.einsum(spec, xc, xc) / m
        bn.running_mean += bn.momentum * (mu - bn.running_mean)
        bn.running_var += bn.momentum * (var - bn.running_var)
        inv = 1.0 / np.sqrt(var + bn.eps)
        out = _result(xc * (gamma.data * inv).reshape(view) + beta.data.reshape(view),
                      "batchnorm", (x, gamma, beta))
        if out.requires_grad:
            def _bw():
                g = out.grad
                dbeta = g.sum(axis=axes)
                dgamma = np.einsum(spec, g, xc) * inv
                _accum(gamma, dgamma)
                _accum(beta, dbeta)
                # dx = gamma*inv * (g - dbeta/m - xhat * dgamma/m), xhat = xc*inv
                a = gamma.data * inv
                _accum(x, a.reshape(view) * g
                       - (a * dbeta / m).reshape(view)
                       - xc * (gamma.data * inv * inv * dgamma / m).reshape(view))
            out._backward_fn = _bw
        return out

    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    xc = x.data - bn.running_mean.reshape(view)
    out = _result(xc * (gamma.data * inv).reshape(view) + beta.data.reshape(view),
                  "batchnorm", (x, gamma, beta))
    if out.requires_grad:
        def _bw():
            g = out.grad
            _accum(gamma, np.einsum(spec, g, xc) * inv)
            _accum(beta, g.sum(axis=axes))
            _accum(x, g * (gamma.data * inv).reshape(view))
        out._backward_fn = _bw
    return out


def softmax_cross_entropy(logits, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy over a (B, N) batch of logits.

    Returns the scalar loss tensor and the (B, N) probability array.
    The row sums are accumulated in ascending value order, so permuting a
    row's classes permutes its probabilities bitwise.
    """
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy needs (B,N) logits, got {logits.shape}")
    B, N = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= N:
        raise ValueError(f"labels out of range [0, {N}): {labels}")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = np.sort(e, axis=1).sum(axis=1, keepdims=True)
    probs = e / denom
    rows = np.arange(B)
    loss_val = np.float64((np.log(denom[:, 0]) + zmax[:, 0] - z[rows, labels]).mean())
    out = _result(loss_val, "softmax_cross_entropy", (logits,))
    if out.requires_grad:
        def _bw():
            g = probs.copy()
            g[rows, labels] -= 1.0
            _accum(logits, out.grad * g / B)
        out._backward_fn = _bw
    return out, probs
