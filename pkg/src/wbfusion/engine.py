"""Minimal reverse-mode autodiff on numpy arrays.

Implements exactly the operators the preset-fusion network needs (no
general broadcasting) plus finite-difference gradient utilities. float32
is the working precision; build graphs from float64 leaves when running
gradient checks.
"""

from __future__ import annotations

import contextlib
import math

import numba
import numpy as np
from scipy.special import erf

# skip the TBB probe (noisy version warning); workqueue is always available
numba.config.THREADING_LAYER = "workqueue"

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d float array with optional gradient and graph linkage.

    `data` is contiguous row-major float32 (or float64 for gradient-check
    builds). `grad`, once populated by `backward`, has the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, grad_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(x, v, axis):
    """Multiply x by 1-d vector v broadcast along `axis` (per-head temperature)."""
    if v.data.ndim != 1 or v.data.shape[0] != x.data.shape[axis]:
        raise ValueError(
            f"scale: vector length {v.data.shape} does not match x axis {axis} of shape {x.data.shape}"
        )
    bshape = [1] * x.data.ndim
    bshape[axis] = -1
    vb = v.data.reshape(bshape)
    other_axes = tuple(i for i in range(x.data.ndim) if i != axis)

    def grad_fn(g):
        return (g * vb, (g * x.data).sum(axis=other_axes))

    return _result(x.data * vb, (x, v), grad_fn)


@numba.njit(cache=True)
def _gelu_fwd(flat, out):
    for i in range(flat.size):
        out[i] = flat[i] * 0.5 * (1.0 + math.erf(flat[i] * _INV_SQRT2))


@numba.njit(cache=True)
def _gelu_bwd(flat, g, out):
    for i in range(flat.size):
        cdf = 0.5 * (1.0 + math.erf(flat[i] * _INV_SQRT2))
        pdf = math.exp(-0.5 * flat[i] * flat[i]) * _INV_SQRT2PI
        out[i] = g[i] * (cdf + flat[i] * pdf)


def gelu(x):
    """Exact (erf) GELU."""
    d = x.data
    flat = np.ascontiguousarray(d).reshape(-1)
    out = np.empty_like(flat)
    _gelu_fwd(flat, out)

    def grad_fn(g):
        gx = np.empty_like(flat)
        _gelu_bwd(flat, np.ascontiguousarray(g).reshape(-1), gx)
        return (gx.reshape(d.shape),)

    return _result(out.reshape(d.shape), (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    old = x.data.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inv),),
    )


def narrow(x, axis, start, size):
    """Slice `size` entries starting at `start` along `axis`."""
    if start < 0 or start + size > x.data.shape[axis]:
        raise ValueError(
            f"narrow: [{start}, {start + size}) out of range for axis {axis} of shape {x.data.shape}"
        )
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _result(x.data[sl], (x,), grad_fn)


def matmul(a, b):
    """Stacked matrix product; batch dims must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be >=2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ, {a.data.shape} vs {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}")

    def grad_fn(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return (ga, gb)

    return _result(a.data @ b.data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# normalization and activation over axes


def softmax(x, axis):
    """Numerically stabilized softmax along `axis` (max-subtraction)."""
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def l2_normalize(x, axis, eps=1e-12):
    """x / ||x||_2 along `axis`, smoothed by eps inside the square root."""
    d = x.data
    inv = 1.0 / np.sqrt((d * d).sum(axis=axis, keepdims=True) + eps)
    y = d * inv

    def grad_fn(g):
        return (inv * (g - y * (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), grad_fn)


@numba.njit(cache=True)
def _layer_norm_fwd(x2, gamma, beta, eps, out2, xhat2, inv1, record):
    m, c = x2.shape
    for i in range(m):
        mu = 0.0
        for k in range(c):
            mu += x2[i, k]
        mu /= c
        var = 0.0
        for k in range(c):
            dv = x2[i, k] - mu
            var += dv * dv
        var /= c
        s = 1.0 / math.sqrt(var + eps)
        if record:
            inv1[i] = s
        for k in range(c):
            xh = (x2[i, k] - mu) * s
            if record:
                xhat2[i, k] = xh
            out2[i, k] = xh * gamma[k] + beta[k]


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance (population), then affine."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} do not match channel count {c}"
        )
    d = np.ascontiguousarray(x.data)
    x2 = d.reshape(-1, c)
    out2 = np.empty_like(x2)
    recording = _grad_enabled and (x.requires_grad or gamma.requires_grad or beta.requires_grad)
    if recording:
        xhat2 = np.empty_like(x2)
        inv1 = np.empty(x2.shape[0], dtype=x2.dtype)
    else:
        xhat2 = np.empty((0, 0), dtype=x2.dtype)
        inv1 = np.empty(0, dtype=x2.dtype)
    _layer_norm_fwd(x2, gamma.data, beta.data, eps, out2, xhat2, inv1, recording)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g).reshape(-1, c)
        inv = inv1[:, None]
        dxhat = g2 * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat2 * (dxhat * xhat2).mean(axis=-1, keepdims=True)
        )
        return (dx.reshape(d.shape), (g2 * xhat2).sum(axis=0), g2.sum(axis=0))

    return _result(out2.reshape(d.shape), (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# convolutions (stride 1, zero padding, spatial size preserved)


def _as_batched(arr):
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ValueError(f"conv input must be [H,W,C] or [N,H,W,C], got shape {arr.shape}")


def _pad_hw(x4, p):
    n, h, w, c = x4.shape
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x4.dtype)
    out[:, p : p + h, p : p + w, :] = x4
    return out


def _im2col(x4, k):
    """[N,H,W,Ci] -> [N*H*W, k*k*Ci] patch matrix, zero-padded same size."""
    n, h, w, ci = x4.shape
    xp = _pad_hw(x4, k // 2)
    cols = np.empty((n, h, w, k * k * ci), dtype=x4.dtype)
    idx = 0
    for u in range(k):
        for v in range(k):
            cols[..., idx : idx + ci] = xp[:, u : u + h, v : v + w, :]
            idx += ci
    return cols.reshape(n * h * w, k * k * ci)


def _col2im(gcols, n, h, w, ci, k):
    """Adjoint of _im2col: scatter-add patch gradients back to the image."""
    p = k // 2
    acc = np.zeros((n, h + 2 * p, w + 2 * p, ci), dtype=gcols.dtype)
    g4 = gcols.reshape(n, h, w, k * k * ci)
    idx = 0
    for u in range(k):
        for v in range(k):
            acc[:, u : u + h, v : v + w, :] += g4[..., idx : idx + ci]
            idx += ci
    return acc[:, p : p + h, p : p + w, :]


_CONV_CHUNK = 1 << 16  # pixels per GEMM when not caching patches


def conv2d(x, kernel, bias):
    """2-d convolution, odd kernel, zero padding (k-1)/2, stride 1.

    x: [H,W,Cin] or [N,H,W,Cin]; kernel: [k,k,Cin,Cout]; bias: [Cout].
    """
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[0] != kd.shape[1]:
        raise ValueError(f"conv2d: kernel must be [k,k,Cin,Cout], got {kd.shape}")
    if kd.shape[0] % 2 != 1:
        raise ValueError(f"conv2d: kernel size must be odd, got k={kd.shape[0]}")
    x4, squeeze = _as_batched(x.data)
    if x4.shape[3] != kd.shape[2]:
        raise ValueError(
            f"conv2d: input channels {x4.shape[3]} do not match kernel Cin {kd.shape[2]}"
        )
    if bias.data.shape != (kd.shape[3],):
        raise ValueError(
            f"conv2d: bias shape {bias.data.shape} does not match Cout {kd.shape[3]}"
        )
    kh = kd.shape[0]
    n, h, w, ci = x4.shape
    co = kd.shape[3]
    kmat = kd.reshape(-1, co)
    recording = _grad_enabled and (x.requires_grad or kernel.requires_grad or bias.requires_grad)

    if kh == 1:
        cols = x4.reshape(-1, ci)
        out = cols @ kmat
        if not recording:
            cols = None
    elif recording or n * h * w <= _CONV_CHUNK:
        cols = _im2col(x4, kh)
        out = cols @ kmat
        if not recording:
            cols = None
    else:
        # stream row bands through a bounded patch buffer (large-image inference)
        cols = None
        p = kh // 2
        xp = _pad_hw(x4, p)
        out = np.empty((n * h * w, co), dtype=x4.dtype)
        band = max(1, _CONV_CHUNK // max(w, 1))
        buf = np.empty((n * min(band, h) * w, kh * kh * ci), dtype=x4.dtype)
        for r0 in range(0, h, band):
            r1 = min(r0 + band, h)
            rows = r1 - r0
            chunk = buf[: n * rows * w].reshape(n, rows, w, kh * kh * ci)
            idx = 0
            for u in range(kh):
                for v in range(kh):
                    chunk[..., idx : idx + ci] = xp[:, r0 + u : r0 + u + rows, v : v + w, :]
                    idx += ci
            gemm = chunk.reshape(-1, kh * kh * ci) @ kmat
            out.reshape(n, h * w, co)[:, r0 * w : r1 * w, :] = gemm.reshape(n, rows * w, co)
        xp = None
    out += bias.data
    out = out.reshape(n, h, w, co)

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        gflat = g4.reshape(-1, co)
        gx = gk = gb = None
        if x.requires_grad:
            if kh == 1:
                gx = (gflat @ kmat.T).reshape(x4.shape)
            else:
                gx = _col2im(gflat @ kmat.T, n, h, w, ci, kh)
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = (cols.T @ gflat).reshape(kd.shape)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 1, 2))
        return (gx, gk, gb)

    return _result(out[0] if squeeze else out, (x, kernel, bias), grad_fn)


@numba.njit(cache=True)
def _dw3x3_apply(x4, kd, bias, out):
    """out[b,r,c,:] = bias + sum_uv x4[b,r+u-1,c+v-1,:] * kd[u,v,:], zero pad."""
    n, h, w, ch = out.shape
    for b in range(n):
        for r in range(h):
            orow = out[b, r]
            for col in range(w):
                for k in range(ch):
                    orow[col, k] = bias[k]
            for u in range(3):
                rr = r + u - 1
                if rr < 0 or rr >= h:
                    continue
                xrow = x4[b, rr]
                for v in range(3):
                    kvec = kd[u, v]
                    c0 = 1 if v == 0 else 0
                    c1 = w - 1 if v == 2 else w
                    for col in range(c0, c1):
                        cc = col + v - 1
                        for k in range(ch):
                            orow[col, k] += xrow[cc, k] * kvec[k]


@numba.njit(cache=True)
def _dw3x3_kernel_grad(x4, g4, gk):
    """gk[u,v,k] = sum over pixels of x4[b,r+u-1,c+v-1,k] * g4[b,r,c,k].

    Sequential accumulation in a fixed order, so gradients stay bit-identical
    run to run.
    """
    n, h, w, ch = g4.shape
    acc = np.zeros((3, 3, ch), dtype=np.float64)
    for b in range(n):
        for r in range(h):
            grow = g4[b, r]
            for u in range(3):
                rr = r + u - 1
                if rr < 0 or rr >= h:
                    continue
                xrow = x4[b, rr]
                for v in range(3):
                    arow = acc[u, v]
                    c0 = 1 if v == 0 else 0
                    c1 = w - 1 if v == 2 else w
                    for col in range(c0, c1):
                        cc = col + v - 1
                        for k in range(ch):
                            arow[k] += xrow[cc, k] * grow[col, k]
    for u in range(3):
        for v in range(3):
            for k in range(ch):
                gk[u, v, k] = acc[u, v, k]


def depthwise_conv3x3(x, kernel, bias):
    """Per-channel 3x3 convolution; channel p only reads channel p.

    x: [H,W,C] or [N,H,W,C]; kernel: [3,3,C]; bias: [C].
    """
    kd = kernel.data
    if kd.ndim != 3 or kd.shape[:2] != (3, 3):
        raise ValueError(f"depthwise_conv3x3: kernel must be [3,3,C], got {kd.shape}")
    x4, squeeze = _as_batched(x.data)
    c = x4.shape[3]
    if kd.shape[2] != c:
        raise ValueError(
            f"depthwise_conv3x3: kernel channels {kd.shape[2]} do not match input channels {c}"
        )
    if bias.data.shape != (c,):
        raise ValueError(
            f"depthwise_conv3x3: bias shape {bias.data.shape} does not match channels {c}"
        )
    x4 = np.ascontiguousarray(x4)
    out = np.empty_like(x4)
    _dw3x3_apply(x4, kd, bias.data, out)

    def grad_fn(g):
        g4 = g[None] if squeeze else g
        g4 = np.ascontiguousarray(g4)
        gx = gk = gb = None
        if x.requires_grad:
            gx = np.empty_like(x4)
            flipped = np.ascontiguousarray(kd[::-1, ::-1])
            _dw3x3_apply(g4, flipped, np.zeros(c, dtype=kd.dtype), gx)
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = np.empty_like(kd)
            _dw3x3_kernel_grad(x4, g4, gk)
        if bias.requires_grad:
            gb = g4.sum(axis=(0, 1, 2))
        return (gx, gk, gb)

    return _result(out[0] if squeeze else out, (x, kernel, bias), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def mean_all(x):
    """Mean over all elements, as a 0-d tensor."""
    n = x.data.size

    def grad_fn(g):
        return (np.full(x.data.shape, float(g) / n, dtype=x.data.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), grad_fn)


def sum_all(x):
    """Sum over all elements, as a 0-d tensor."""

    def grad_fn(g):
        return (np.full(x.data.shape, float(g), dtype=x.data.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), grad_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Backpropagate from a scalar loss through the recorded op graph.

    Visits each recorded node exactly once, in reverse topological order;
    gradients accumulate additively across fan-out.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# finite-difference utilities (the independent oracle for gradient checks)


def numerical_gradient(f, wrt, h):
    """Central finite differences of scalar f() with respect to `wrt.data`.

    f must recompute the forward pass from current tensor contents; `wrt.data`
    is perturbed in place one element at a time. The divisor uses the step
    actually realized after rounding to the tensor's dtype.
    """
    base = wrt.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        xp = float(flat[i])
        fp = f()
        flat[i] = orig - h
        xm = float(flat[i])
        fm = f()
        flat[i] = orig
        gflat[i] = (float(fp) - float(fm)) / (xp - xm)
    return grad


def gradient_check(build_out, leaves, h=None):
    """Max relative error between backprop and central finite differences.

    `build_out()` constructs the graph from `leaves` and returns any tensor.
    The check projects it against fixed random weights; the finite-difference
    side reduces in float64 and never touches the backward pass. Per leaf, the
    error is the max absolute deviation normalized by the largest gradient
    magnitude of that leaf.
    """
    if h is None:
        h = 1e-5 if leaves[0].data.dtype == np.float64 else 1e-3
    for leaf in leaves:
        leaf.zero_grad()
    out = build_out()
    weights = np.random.default_rng(0xC0FFEE).uniform(0.5, 1.5, size=out.data.shape)
    loss = sum_all(mul(out, Tensor(weights, dtype=out.data.dtype)))
    backward(loss)
    analytic = [
        np.zeros(l.data.shape) if l.grad is None else np.array(l.grad, dtype=np.float64)
        for l in leaves
    ]

    def forward_only():
        with no_grad():
            o = build_out()
        return float((o.data.astype(np.float64) * weights).sum())

    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        n = numerical_gradient(forward_only, leaf, h)
        denom = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        worst = max(worst, float(np.abs(a - n).max() / denom))
    return worst
