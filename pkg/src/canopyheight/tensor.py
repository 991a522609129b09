"""Dense float tensors with taped reverse-mode differentiation.

Small fixed op set: 2-D convolutions (dense 3x3/1x1, depthwise, separable),
broadcast arithmetic, exp/relu/clamp, full reductions and boolean masking.
Everything downstream (network forward pass, Gaussian NLL loss) is composed
from these ops, so their backward rules are the only gradient code in the
package. Default dtype is float32; ops preserve the dtype of their inputs so
gradient checks can run the same graph in float64.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# The sandboxed TBB build predates what numba wants; OpenMP behaves everywhere.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange  # noqa: E402

DTYPE = np.float32


@njit(parallel=True, cache=True)
def _dw_corr(xp, w, out):
    """Per-channel 3x3 correlation; xp is the input padded by 1.

    Each output pixel accumulates its nine taps in a fixed order, so results
    are bit-identical regardless of array extent or thread count.
    """
    B, C, H, W = out.shape
    for bc in prange(B * C):
        b = bc // C
        c = bc % C
        for i in range(H):
            for j in range(W):
                acc = xp[b, c, i, j] * w[c, 0]
                acc += xp[b, c, i, j + 1] * w[c, 1]
                acc += xp[b, c, i, j + 2] * w[c, 2]
                acc += xp[b, c, i + 1, j] * w[c, 3]
                acc += xp[b, c, i + 1, j + 1] * w[c, 4]
                acc += xp[b, c, i + 1, j + 2] * w[c, 5]
                acc += xp[b, c, i + 2, j] * w[c, 6]
                acc += xp[b, c, i + 2, j + 1] * w[c, 7]
                acc += xp[b, c, i + 2, j + 2] * w[c, 8]
                out[b, c, i, j] = acc


@njit(parallel=True, cache=True)
def _dw_grad_w(xp, g, gw):
    """Weight gradient of the per-channel correlation; one thread per channel."""
    B, C, H, W = g.shape
    for c in prange(C):
        a0 = a1 = a2 = a3 = a4 = a5 = a6 = a7 = a8 = g[0, 0, 0, 0] * 0
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    gi = g[b, c, i, j]
                    a0 += gi * xp[b, c, i, j]
                    a1 += gi * xp[b, c, i, j + 1]
                    a2 += gi * xp[b, c, i, j + 2]
                    a3 += gi * xp[b, c, i + 1, j]
                    a4 += gi * xp[b, c, i + 1, j + 1]
                    a5 += gi * xp[b, c, i + 1, j + 2]
                    a6 += gi * xp[b, c, i + 2, j]
                    a7 += gi * xp[b, c, i + 2, j + 1]
                    a8 += gi * xp[b, c, i + 2, j + 2]
        gw[c, 0] = a0
        gw[c, 1] = a1
        gw[c, 2] = a2
        gw[c, 3] = a3
        gw[c, 4] = a4
        gw[c, 5] = a5
        gw[c, 6] = a6
        gw[c, 7] = a7
        gw[c, 8] = a8


def _coerce(value, dtype):
    arr = np.asarray(value)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """A node in the recorded computation graph.

    Leaf tensors hold data (optionally marked ``requires_grad``); op outputs
    additionally hold their parents and a closure that routes the output
    gradient to them. ``backward`` may be called once per recorded graph and
    only on scalars.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DTYPE
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self):
        """Reverse-mode sweep from this scalar through the recorded graph."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran for this graph; re-run the forward pass first")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node._backward = None  # release closures / cached activations
        self._backward_ran = True

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def tensor(data, requires_grad=False, name=None, dtype=None):
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def parameter(data, name, dtype=None):
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _make(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_tensor_pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(_coerce(a, b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(_coerce(b, a.dtype))
    return a, b


def add(a, b):
    a, b = _as_tensor_pair(a, b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor_pair(a, b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor_pair(a, b)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def neg(x):
    def backward(g):
        _accum(x, -g)

    return _make(-x.data, (x,), backward)


def square(x):
    def backward(g):
        _accum(x, g * (2.0 * x.data))

    return _make(x.data * x.data, (x,), backward)


def exp(x):
    out = np.exp(x.data)

    def backward(g):
        _accum(x, g * out)

    return _make(out, (x,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward)


def clamp(x, lo, hi):
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accum(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def tsum(x):
    def backward(g):
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(x.data.sum(dtype=x.dtype)), (x,), backward)


def tmean(x):
    n = x.data.size
    if n == 0:
        raise ValueError("mean of an empty tensor")

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.data.shape).astype(x.dtype, copy=False))

    return _make(np.asarray(x.data.sum(dtype=x.dtype) / n, dtype=x.dtype), (x,), backward)


def masked_select(x, mask):
    """Gather elements of `x` where the boolean `mask` is True (1-D output)."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise TypeError("mask must be boolean")
    if mask.shape != x.data.shape:
        raise ValueError(f"mask shape {mask.shape} does not match tensor shape {x.data.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[mask] = g
        _accum(x, full)

    return _make(x.data[mask], (x,), backward)


# ---------------------------------------------------------------------------
# Convolutions (stride 1, square kernels, same-size output)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of one convolution layer (3x3, padding 1, stride 1)."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    padding: int = 1
    separable: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kernel not in (1, 3):
            raise ValueError(f"unsupported kernel size {self.kernel}")
        if self.padding != self.kernel // 2:
            raise ValueError("padding must keep output spatial dims equal to input")


def _check_4d(x, what="input"):
    if x.data.ndim != 4:
        raise ValueError(f"{what} must be 4-D (batch, channels, height, width), got {x.data.ndim}-D")


def _im2col3(xp, H, W):
    """View the padded array as (B, C, 3, 3, H, W) sliding windows."""
    B, C = xp.shape[:2]
    sB, sC, sH, sW = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(B, C, 3, 3, H, W), strides=(sB, sC, sH, sW, sH, sW), writeable=False
    )


def conv2d(x, weight, bias=None):
    """Dense convolution, kernel 3x3 (padding 1) or 1x1, stride 1.

    weight: [Cout, Cin, k, k]; bias: [Cout] or None. Output spatial dims equal
    input spatial dims.
    """
    _check_4d(x)
    if weight.data.ndim != 4:
        raise ValueError(f"weight must be 4-D [out, in, k, k], got {weight.data.ndim}-D")
    Cout, Cin, kh, kw = weight.data.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"unsupported kernel {kh}x{kw} (axes 2,3 of weight)")
    B, C, H, W = x.data.shape
    if C != Cin:
        raise ValueError(f"channel mismatch on input axis 1: input has {C}, weight expects {Cin}")
    if bias is not None and bias.data.shape != (Cout,):
        raise ValueError(f"bias axis 0 must have {Cout} entries, got {bias.data.shape}")

    if kh == 1:
        w2 = weight.data.reshape(Cout, Cin)
        xm = x.data.reshape(B, Cin, H * W)
        out = np.matmul(w2, xm).reshape(B, Cout, H, W)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def backward(g):
            gm = g.reshape(B, Cout, H * W)
            if x.requires_grad:
                _accum(x, np.matmul(w2.T, gm).reshape(x.data.shape))
            if weight.requires_grad:
                gw = np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0)
                _accum(weight, gw.reshape(weight.data.shape))
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2, 3)))

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _make(out.astype(x.dtype, copy=False), parents, backward)

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(xp, H, W).reshape(B, Cin * 9, H * W)
    wmat = weight.data.reshape(Cout, Cin * 9)
    out = np.matmul(wmat, cols).reshape(B, Cout, H, W)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        go = g.reshape(B, Cout, H * W)
        if weight.requires_grad:
            gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, go).reshape(B, Cin, 3, 3, H, W)
            gxp = np.zeros_like(xp)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky : ky + H, kx : kx + W] += gcols[:, :, ky, kx]
            _accum(x, gxp[:, :, 1 : 1 + H, 1 : 1 + W])
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.astype(x.dtype, copy=False), parents, backward)


def depthwise_conv2d(x, weight):
    """Per-channel 3x3 convolution, padding 1. weight: [C, 1, 3, 3]."""
    _check_4d(x)
    B, C, H, W = x.data.shape
    if weight.data.shape != (C, 1, 3, 3):
        raise ValueError(
            f"depthwise weight must be [{C}, 1, 3, 3] to match input axis 1, got {weight.data.shape}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    w9 = np.ascontiguousarray(weight.data.reshape(C, 9))
    out = np.empty_like(x.data)
    _dw_corr(xp, w9, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        if weight.requires_grad:
            gw = np.empty((C, 9), dtype=g.dtype)
            _dw_grad_w(xp, g, gw)
            _accum(weight, gw.reshape(weight.data.shape))
        if x.requires_grad:
            # dL/dx is the correlation of the padded output gradient with the
            # flipped kernel.
            gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
            gx = np.empty_like(x.data)
            _dw_corr(gp, np.ascontiguousarray(w9[:, ::-1]), gx)
            _accum(x, gx)

    return _make(out, (x, weight), backward)


def separable_conv2d(x, depthwise, pointwise, bias=None):
    """Depthwise 3x3 followed by pointwise 1x1 (bias on the pointwise stage)."""
    return conv2d(depthwise_conv2d(x, depthwise), pointwise, bias)


def conv2d_forward(x, spec: ConvSpec, weights, bias=None):
    """Spec-level dispatcher: dense weights or a (depthwise, pointwise) pair."""
    _check_4d(x)
    if x.data.shape[1] != spec.in_channels:
        raise ValueError(
            f"channel mismatch on input axis 1: input has {x.data.shape[1]}, spec expects {spec.in_channels}"
        )
    if spec.separable:
        dw, pw = weights
        if pw.data.shape[:2] != (spec.out_channels, spec.in_channels):
            raise ValueError(
                f"pointwise weight axes 0,1 must be ({spec.out_channels}, {spec.in_channels}), "
                f"got {pw.data.shape[:2]}"
            )
        return separable_conv2d(x, dw, pw, bias)
    if weights.data.shape[0] != spec.out_channels:
        raise ValueError(
            f"weight axis 0 must have {spec.out_channels} filters, got {weights.data.shape[0]}"
        )
    return conv2d(x, weights, bias)


def composed_dense_kernel(depthwise, pointwise):
    """Dense [Cout, Cin, 3, 3] kernel equivalent to depthwise-then-pointwise."""
    dw = depthwise.data if isinstance(depthwise, Tensor) else np.asarray(depthwise)
    pw = pointwise.data if isinstance(pointwise, Tensor) else np.asarray(pointwise)
    return np.einsum("oc,ckl->ockl", pw[:, :, 0, 0], dw[:, 0])
