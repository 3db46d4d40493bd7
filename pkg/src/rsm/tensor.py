"""Dense-array engine with reverse-mode automatic differentiation.

Arrays are contiguous row-major numpy buffers (float32 by default, float64
for verification runs). Every primitive records a tape node when an input
requires gradients; ``backward`` walks the tape once in reverse topological
order. Tensors are immutable after creation except for gradient
accumulation and explicit in-place parameter updates by the optimizer, so
read-only sharing across threads is safe.

Design constraints:
  - no strided views; any reindexing primitive copies
  - deterministic: identical inputs give bit-identical outputs and grads
  - checked mode scans every primitive output for NaN/Inf
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import GraphError, NumericError, PermutationError, ShapeError

DEFAULT_DTYPE = np.float32

_checked = False


def set_checked(flag):
    """Globally enable/disable the per-op non-finite scan."""
    global _checked
    _checked = bool(flag)


def is_checked():
    return _checked


@contextlib.contextmanager
def checked_mode(flag=True):
    """Temporarily toggle checked mode (used by tests and the CLI)."""
    global _checked
    prev = _checked
    _checked = bool(flag)
    try:
        yield
    finally:
        _checked = prev


class TapeNode:
    """One recorded primitive: op id, input tensors, and the backward rule.

    ``backward(grad_out)`` returns one gradient array per parent (None for
    parents that do not require grad). Saved activations live in the
    closure. Nodes form a DAG; ``backward`` visits each exactly once.
    """

    __slots__ = ("op", "parents", "fn", "consumed")

    def __init__(self, op, parents, fn):
        self.op = op
        self.parents = parents
        self.fn = fn
        self.consumed = False


class Tensor:
    """N-dimensional real array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        """Detached copy of the underlying buffer."""
        return self.data.copy()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # operator sugar; constants are treated as non-differentiable
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_reduce(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_reduce(self, axis, keepdims)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(data, op):
    if _checked and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by '{op}'")


def _node_out(data, parents, op, fn):
    """Wrap a primitive result; record a tape node if any parent needs grad."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags["C_CONTIGUOUS"] else np.ascontiguousarray(data)
    out.grad = None
    out.node = None
    out.requires_grad = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, parents, fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    _broadcast_shapes("add", a, b)

    def fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _node_out(a.data + b.data, (a, b), "add", fn)


def mul(a, b):
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    _broadcast_shapes("mul", a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _node_out(a.data * b.data, (a, b), "mul", fn)


def div(a, b):
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a.dtype)
    _broadcast_shapes("div", a, b)

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return (ga, gb)

    return _node_out(a.data / b.data, (a, b), "div", fn)


def exp(x):
    with np.errstate(over="ignore"):  # inf propagates unless checked mode
        out_data = np.exp(x.data)

    def fn(g):
        return (g * out_data,)

    return _node_out(out_data, (x,), "exp", fn)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    s = _sigmoid_np(x.data)

    def fn(g):
        return (g * s * (1.0 - s),)

    return _node_out(s, (x,), "sigmoid", fn)


def softplus(x):
    out_data = np.logaddexp(0.0, x.data)

    def fn(g):
        return (g * _sigmoid_np(x.data),)

    return _node_out(out_data, (x,), "softplus", fn)


def silu(x):
    s = _sigmoid_np(x.data)

    def fn(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _node_out(x.data * s, (x,), "silu", fn)


_EM1X_CUTOFF = 1e-4


def _expm1x_np(x):
    """(e^x - 1)/x with a series fallback so the x->0 limit is exact."""
    small = np.abs(x) < _EM1X_CUTOFF
    safe = np.where(small, 1.0, x)
    series = 1.0 + x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0)))
    return np.where(small, series, np.expm1(safe) / safe)


def _expm1x_grad_np(x):
    small = np.abs(x) < _EM1X_CUTOFF
    safe = np.where(small, 1.0, x)
    series = 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x * (1.0 / 30.0)))
    exact = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    return np.where(small, series, exact)


def expm1x(x):
    """Elementwise (e^x - 1)/x, the zero-order-hold input-weight factor."""

    def fn(g):
        return (g * _expm1x_grad_np(x.data),)

    return _node_out(_expm1x_np(x.data), (x,), "expm1x", fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} vs {b.shape}")

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return (ga, gb)

    return _node_out(np.matmul(a.data, b.data), (a, b), "matmul", fn)


def linear(x, w, b=None):
    """x[..., in] @ w[in, out] (+ b[out])."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: feature extent {x.shape} does not match weight {w.shape}")
    y = np.matmul(x.data, w.data)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        gx = gw = gb = None
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            gx = np.matmul(g, w.data.T)
        if w.requires_grad:
            gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, g2)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _node_out(y, parents, "linear", fn)


def layernorm(x, gamma, beta, axis=-1, eps=1e-5):
    """Normalize over one axis (biased variance), then scale and shift."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layernorm: gamma/beta must have shape ({n},), got {gamma.shape}/{beta.shape}")
    bshape = [1] * x.ndim
    bshape[ax] = n
    mu = x.data.mean(axis=ax, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gb = gamma.data.reshape(bshape)
    out_data = xhat * gb + beta.data.reshape(bshape)

    def fn(g):
        gx = ggamma = gbeta = None
        other = tuple(i for i in range(x.ndim) if i != ax)
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=other)
        if beta.requires_grad:
            gbeta = g.sum(axis=other)
        if x.requires_grad:
            gh = g * gb
            m1 = gh.mean(axis=ax, keepdims=True)
            m2 = (gh * xhat).mean(axis=ax, keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        return (gx, ggamma, gbeta)

    return _node_out(out_data, (x, gamma, beta), "layernorm", fn)


# ---------------------------------------------------------------------------
# convolutions (NCHW)


def conv2d_depthwise(x, w, b=None):
    """Per-channel kxk convolution, stride 1, zero 'same' padding (odd k)."""
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv2d_depthwise: got input {x.shape}, kernel {w.shape}")
    kh, kw = w.shape[1], w.shape[2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d_depthwise: kernel extents must be odd, got {w.shape}")
    ph, pw = kh // 2, kw // 2
    bsz, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out_data = np.zeros_like(x.data)
    for u in range(kh):
        for v in range(kw):
            out_data += w.data[:, u, v][None, :, None, None] * xp[:, :, u:u + h, v:v + wd]
    if b is not None:
        out_data += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        gx = gw = gbias = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for u in range(kh):
                for v in range(kw):
                    gw[:, u, v] = np.einsum("bchw,bchw->c", g, xp[:, :, u:u + h, v:v + wd])
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + h, v:v + wd] += w.data[:, u, v][None, :, None, None] * g
            gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        if b is not None and b.requires_grad:
            gbias = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gbias)

    return _node_out(out_data, parents, "conv2d_depthwise", fn)


def conv2d_pointwise(x, w, b=None):
    """1x1 convolution: w[out, in] mixed across the channel axis."""
    if x.ndim != 4 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d_pointwise: got input {x.shape}, weight {w.shape}")
    bsz, cin, h, wd = x.shape
    xm = x.data.reshape(bsz, cin, h * wd)
    y = np.matmul(w.data, xm)
    if b is not None:
        y = y + b.data[None, :, None]
    out_data = y.reshape(bsz, w.shape[0], h, wd)
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        gx = gw = gbias = None
        gm = g.reshape(bsz, w.shape[0], h * wd)
        if x.requires_grad:
            gx = np.matmul(w.data.T, gm).reshape(x.shape)
        if w.requires_grad:
            gw = np.einsum("bol,bcl->oc", gm, xm, optimize=True)
        if b is not None and b.requires_grad:
            gbias = gm.sum(axis=(0, 2))
        return (gx, gw) if b is None else (gx, gw, gbias)

    return _node_out(out_data, parents, "conv2d_pointwise", fn)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x, shape):
    def fn(g):
        return (g.reshape(x.shape),)

    return _node_out(np.reshape(x.data, shape), (x,), "reshape", fn)


def transpose(x, axes=None):
    perm = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(perm)

    def fn(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _node_out(np.ascontiguousarray(np.transpose(x.data, perm)), (x,), "transpose", fn)


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax))
            if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    return _node_out(data, tensors, "concat", fn)


def split(x, sections, axis=0):
    """Split into equal sections along an axis; returns a list of Tensors."""
    ax = axis % x.ndim
    if x.shape[ax] % sections != 0:
        raise ShapeError(f"split: axis extent {x.shape[ax]} not divisible by {sections}")
    step = x.shape[ax] // sections
    outs = []
    for i in range(sections):
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)

        def fn(g, idx=idx):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[idx] = g
            return (gx,)

        outs.append(_node_out(np.ascontiguousarray(x.data[idx]), (x,), "split", fn))
    return outs


def pad(x, pad_width):
    """Zero padding; pad_width as in numpy ((before, after) per axis)."""
    pw = tuple(tuple(p) for p in pad_width)

    def fn(g):
        idx = tuple(slice(b, g.shape[i] - a if a else None) for i, (b, a) in enumerate(pw))
        return (np.ascontiguousarray(g[idx]),)

    return _node_out(np.pad(x.data, pw), (x,), "pad", fn)


def _validate_perm(perm, n, op):
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise PermutationError(f"{op}: permutation must be {n} integers, got shape {perm.shape}")
    counts = np.bincount(perm, minlength=n) if perm.size and perm.min() >= 0 and perm.max() < n else None
    if counts is None or not np.all(counts == 1):
        raise PermutationError(f"{op}: index array is not a bijection on 0..{n - 1}")
    return perm


def gather_permute(x, perm):
    """out[..., k] = x[..., perm[k]] along the last axis."""
    n = x.shape[-1]
    perm = _validate_perm(perm, n, "gather_permute")
    inv = np.empty(n, dtype=perm.dtype)
    inv[perm] = np.arange(n, dtype=perm.dtype)

    def fn(g):
        return (np.ascontiguousarray(g[..., inv]),)

    return _node_out(np.ascontiguousarray(x.data[..., perm]), (x,), "gather_permute", fn)


def scatter_permute(x, perm):
    """out[..., perm[k]] = x[..., k]; exact inverse of gather_permute."""
    n = x.shape[-1]
    perm = _validate_perm(perm, n, "scatter_permute")
    inv = np.empty(n, dtype=perm.dtype)
    inv[perm] = np.arange(n, dtype=perm.dtype)

    def fn(g):
        return (np.ascontiguousarray(g[..., perm]),)

    return _node_out(np.ascontiguousarray(x.data[..., inv]), (x,), "scatter_permute", fn)


# ---------------------------------------------------------------------------
# resampling


def _up2_last(x):
    # even output 2i reads 0.25*x[i-1] + 0.75*x[i], odd 2i+1 reads
    # 0.75*x[i] + 0.25*x[i+1]; neighbors clamp at the edges
    xl = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    xr = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    out = np.empty(x.shape[:-1] + (2 * x.shape[-1],), dtype=x.dtype)
    out[..., 0::2] = 0.75 * x + 0.25 * xl
    out[..., 1::2] = 0.75 * x + 0.25 * xr
    return out


def _up2_last_grad(g):
    ge = g[..., 0::2]
    go = g[..., 1::2]
    gx = 0.75 * (ge + go)
    gx[..., :-1] += 0.25 * ge[..., 1:]
    gx[..., 0] += 0.25 * ge[..., 0]
    gx[..., 1:] += 0.25 * go[..., :-1]
    gx[..., -1] += 0.25 * go[..., -1]
    return gx


def bilinear_upsample2x(x):
    """Double the two trailing spatial extents (align-corners=false)."""
    if x.ndim < 2:
        raise ShapeError(f"bilinear_upsample2x: need >= 2 axes, got {x.shape}")
    xh = np.ascontiguousarray(np.swapaxes(_up2_last(np.swapaxes(x.data, -1, -2)), -1, -2))
    out_data = _up2_last(xh)

    def fn(g):
        gh = _up2_last_grad(g)
        gx = np.swapaxes(_up2_last_grad(np.ascontiguousarray(np.swapaxes(gh, -1, -2))), -1, -2)
        return (np.ascontiguousarray(gx),)

    return _node_out(out_data, (x,), "bilinear_upsample2x", fn)


def strided_downsample(x, stride):
    """Keep every stride-th sample of the two trailing axes."""
    if x.ndim < 2:
        raise ShapeError(f"strided_downsample: need >= 2 axes, got {x.shape}")
    s = int(stride)

    def fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., ::s, ::s] = g
        return (gx,)

    return _node_out(np.ascontiguousarray(x.data[..., ::s, ::s]), (x,), "strided_downsample", fn)


# ---------------------------------------------------------------------------
# reductions


def sum_reduce(x, axis=None, keepdims=False):
    ax = axis if axis is None else (tuple(axis) if isinstance(axis, (tuple, list)) else (axis,))

    def fn(g):
        if ax is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _node_out(np.asarray(x.data.sum(axis=ax, keepdims=keepdims)), (x,), "sum_reduce", fn)


def mean_reduce(x, axis=None, keepdims=False):
    ax = axis if axis is None else (tuple(axis) if isinstance(axis, (tuple, list)) else (axis,))
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))

    def fn(g):
        if ax is None:
            return (np.full(x.shape, g / count, dtype=x.dtype),)
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg / count, x.shape).copy(),)

    return _node_out(np.asarray(x.data.mean(axis=ax, keepdims=keepdims)), (x,), "mean_reduce", fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    The tape is consumed: a second call on the same graph raises GraphError.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("backward: loss is detached from the tape (no recorded ops)")
    if loss.node.consumed:
        raise GraphError("backward: tape already consumed; rebuild the graph before calling again")

    # iterative topological order (graphs can be thousands of nodes deep)
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.requires_grad and p.node is not None and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:  # leaf: accumulate into .grad
                p.grad = pg if p.grad is None else p.grad + pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    loss.node.consumed = True
    # drop saved activations so the graph memory is reclaimed promptly
    for t in order:
        if t is not loss:
            t.node = None
    loss.node.parents = ()
    loss.node.fn = None
