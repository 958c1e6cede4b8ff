"""Reverse-mode automatic differentiation over numpy arrays.

A minimal tape-based engine covering exactly the operation set the
completion networks need: convolution (plain and transposed), bilinear
resampling, (leaky) ReLU, affine maps, elementwise arithmetic, reductions,
concatenation, cropping, and the two weight-reparameterization ops
(per-channel weight normalization and spectral division).

Ops record onto the active :class:`Graph`; the backward pass walks the tape
in exact reverse append order and accumulates gradients additively, so
fan-out works without any topological bookkeeping.  Runtime data is
float32; gradient checking promotes everything to float64 to separate
algorithmic errors from rounding.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import convops
from .errors import ContractError, NumericError

_state = threading.local()


def _graph_stack():
    if not hasattr(_state, "graphs"):
        _state.graphs = []
    return _state.graphs


def active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-D value participating (optionally) in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=np.float32, name=None):
        arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, shape is {self.data.shape}")
        return float(self.data.reshape(()))

    def check_finite(self, context=""):
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite values in {context or self.name or 'tensor'}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Append-only op tape; backward runs in exact reverse append order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor):
        """Accumulate gradients of ``loss`` onto every requires_grad tensor."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not any(n.output is loss for n in self.nodes):
            raise ContractError("loss tensor was not produced on this graph")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward_fn(g)


def _accum(t: Tensor, g: np.ndarray):
    # Gradients are never mutated in place, so views may be stored directly.
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ContractError(f"gradient shape {g.shape} does not match tensor {t.data.shape}")
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum out axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, op, inputs, backward_builder):
    """Wrap a forward result, recording a node if gradients are in play."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = requires
    out.grad = None
    out.name = None
    graph = active_graph()
    if graph is not None and requires:
        graph.record(op, inputs, out, backward_builder(out))
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or np.float32)


# ---------------------------------------------------------------------------
# elementwise and affine ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(out):
        def fn(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        return fn

    return _make(data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(out):
        def fn(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        return fn

    return _make(data, "sub", (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise (or scalar) product."""
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        a = as_tensor(a)
        c = a.data.dtype.type(b)
        data = a.data * c

        def bwd_scalar(out):
            def fn(g):
                _accum(a, g * c)
            return fn

        return _make(data, "scale", (a,), bwd_scalar)

    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(out):
        def fn(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        return fn

    return _make(data, "mul", (a, b), bwd)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = a.data * a.data

    def bwd(out):
        def fn(g):
            _accum(a, g * (2.0 * a.data))
        return fn

    return _make(data, "square", (a,), bwd)


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.mean(dtype=a.data.dtype))

    def bwd(out):
        inv = 1.0 / a.data.size

        def fn(g):
            _accum(a, np.broadcast_to(g * a.data.dtype.type(inv), a.data.shape))
        return fn

    return _make(data, "mean", (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(dtype=a.data.dtype))

    def bwd(out):
        def fn(g):
            _accum(a, np.broadcast_to(g, a.data.shape))
        return fn

    return _make(data, "sum", (a,), bwd)


def activation(a: Tensor, kind: str = "relu", slope: float = 0.2) -> Tensor:
    """ReLU family; the subgradient at 0 is the negative-side slope."""
    a = as_tensor(a)
    if kind == "relu":
        slope = 0.0
    elif kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ContractError(f"leaky slope must be in (0,1), got {slope}")
    else:
        raise ContractError(f"unknown activation {kind!r}")
    pos = a.data > 0
    data = np.where(pos, a.data, a.data * a.data.dtype.type(slope))

    def bwd(out):
        def fn(g):
            _accum(a, np.where(pos, g, g * g.dtype.type(slope)))
        return fn

    return _make(data, kind, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    return activation(a, "leaky_relu", slope)


def center_channels(a: Tensor) -> Tensor:
    """Subtract the per-channel mean over (batch, height, width) of [B,C,H,W].

    The backward pass removes the same mean from the gradient (the exact
    adjoint of the centering projection).
    """
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise ContractError(f"center_channels expects [B,C,H,W], got {a.data.shape}")
    mean = a.data.mean(axis=(0, 2, 3), keepdims=True, dtype=a.data.dtype)
    data = a.data - mean

    def bwd(out):
        def fn(g):
            _accum(a, g - g.mean(axis=(0, 2, 3), keepdims=True))
        return fn

    return _make(data, "center_channels", (a,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on flattened features: x[B,F] @ w[F,D] (+ b[D])."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ContractError(f"linear shape mismatch: {x.data.shape} @ {w.data.shape}")
    data = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        data = data + b.data

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(out):
        def fn(g):
            _accum(x, g @ w.data.T)
            _accum(w, x.data.T @ g)
            if b is not None:
                _accum(b, g.sum(axis=0))
        return fn

    return _make(data, "linear", inputs, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(out):
        def fn(g):
            _accum(a, g.reshape(a.data.shape))
        return fn

    return _make(data, "reshape", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(out):
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def fn(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])
        return fn

    return _make(data, "concat", tuple(tensors), bwd)


def crop(a: Tensor, r0: int, c0: int, h: int, w: int) -> Tensor:
    """Spatial crop on the trailing two axes; backward scatters into zeros."""
    a = as_tensor(a)
    if r0 < 0 or c0 < 0 or r0 + h > a.data.shape[-2] or c0 + w > a.data.shape[-1]:
        raise ContractError(f"crop [{r0}:{r0+h}, {c0}:{c0+w}] exceeds {a.data.shape}")
    data = np.ascontiguousarray(a.data[..., r0:r0 + h, c0:c0 + w])

    def bwd(out):
        def fn(g):
            full = np.zeros_like(a.data)
            full[..., r0:r0 + h, c0:c0 + w] = g
            _accum(a, full)
        return fn

    return _make(data, "crop", (a,), bwd)


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: str = "same") -> Tensor:
    """Cross-correlation of x[B,Ci,H,W] with w[Co,Ci,k,k]; no bias."""
    x, w = as_tensor(x), as_tensor(w)
    data = convops.conv2d_fwd(x.data, w.data, stride, pad)

    def bwd(out):
        k = w.data.shape[2]
        hw = x.data.shape[2:]

        def fn(g):
            _accum(x, convops.conv2d_grad_x(g, w.data, stride, pad, hw))
            _accum(w, convops.conv2d_grad_w(x.data, g, k, stride, pad))
        return fn

    return _make(data, "conv2d", (x, w), bwd)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of the "same" strided conv: x[B,Co,h,w], w[Co,Ci,k,k]."""
    x, w = as_tensor(x), as_tensor(w)
    data = convops.conv2d_transpose_fwd(x.data, w.data, stride)

    def bwd(out):
        k = w.data.shape[2]

        def fn(g):
            _accum(x, convops.conv2d_fwd(g, w.data, stride, "same"))
            _accum(w, convops.conv2d_grad_w(g, x.data, k, stride, "same"))
        return fn

    return _make(data, "conv2d_transpose", (x, w), bwd)


def bilinear_resample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resample of the trailing two axes."""
    x = as_tensor(x)
    h, w = x.data.shape[-2], x.data.shape[-1]
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resample target must be positive, got {out_h}x{out_w}")
    if out_h == h and out_w == w:
        data = x.data.copy()

        def bwd_id(out):
            def fn(g):
                _accum(x, g)
            return fn

        return _make(data, "bilinear_resample", (x,), bwd_id)

    a_h = convops.bilinear_matrix(out_h, h, dtype=x.data.dtype)
    a_w = convops.bilinear_matrix(out_w, w, dtype=x.data.dtype)
    data = convops.bilinear_fwd(x.data, a_h, a_w)

    def bwd(out):
        def fn(g):
            _accum(x, convops.bilinear_grad(g, a_h, a_w))
        return fn

    return _make(data, "bilinear_resample", (x,), bwd)


# ---------------------------------------------------------------------------
# weight reparameterizations


def weight_norm(raw: Tensor, scale: Tensor, out_axis: int = 0) -> Tensor:
    """Effective weight ``scale * raw / ||raw||_2`` per output channel.

    ``out_axis`` selects which axis indexes output channels (0 for plain
    convs and linear maps, 1 for transposed-conv weights).
    """
    raw, scale = as_tensor(raw), as_tensor(scale)
    axes = tuple(i for i in range(raw.data.ndim) if i != out_axis)
    if scale.data.shape != (raw.data.shape[out_axis],):
        raise ContractError(
            f"scale shape {scale.data.shape} does not match output channels {raw.data.shape[out_axis]}")
    norm = np.sqrt((raw.data.astype(np.float64) ** 2).sum(axis=axes, keepdims=True))
    norm = np.maximum(norm, 1e-12).astype(raw.data.dtype)
    shape = [1] * raw.data.ndim
    shape[out_axis] = -1
    g = scale.data.reshape(shape)
    direction = raw.data / norm
    data = g * direction

    def bwd(out):
        def fn(gout):
            _accum(scale, (gout * direction).sum(axis=axes))
            gv = g * gout / norm
            gv -= direction * ((gout * data).sum(axis=axes, keepdims=True) / norm)
            _accum(raw, gv)
        return fn

    return _make(data, "weight_norm", (raw, scale), bwd)


def spectral_div(w: Tensor, u: np.ndarray, v: np.ndarray) -> Tensor:
    """Divide w by its power-iteration estimate sigma = u^T W v.

    ``u`` and ``v`` are constants maintained outside the graph; the backward
    pass differentiates through the quotient with them held fixed.
    """
    w = as_tensor(w)
    w2d = w.data.reshape(w.data.shape[0], -1)
    if u.shape != (w2d.shape[0],) or v.shape != (w2d.shape[1],):
        raise ContractError("power-iteration vectors do not match the weight matrix view")
    sigma = float(u @ w2d @ v)
    if not sigma > 0:
        raise NumericError("spectral estimate must be positive")
    data = w.data / w.data.dtype.type(sigma)

    def bwd(out):
        def fn(g):
            g2d = g.reshape(w2d.shape)
            inner = float((g2d * w2d).sum())
            gw = g2d / sigma - (inner / sigma ** 2) * np.outer(u, v)
            _accum(w, gw.reshape(w.data.shape).astype(w.data.dtype))
        return fn

    return _make(data, "spectral_div", (w,), bwd)


# ---------------------------------------------------------------------------
# verification helpers


def backward(graph: Graph, loss: Tensor):
    graph.backward(loss)


def gradient_check(op_closure, params: Sequence[Tensor], epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op_closure`` maps the given parameter tensors to a scalar Tensor.  All
    arithmetic runs in float64 copies so the check isolates algorithmic
    mistakes from single-precision rounding.
    """
    params64 = [Tensor(p.data, requires_grad=True, dtype=np.float64) for p in params]
    with Graph() as g:
        loss = op_closure(params64)
    g.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params64]

    worst = 0.0
    for pi, p in enumerate(params64):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = op_closure(params64).item()
            flat[i] = orig - epsilon
            dn = op_closure(params64).item()
            flat[i] = orig
            numeric = (up - dn) / (2 * epsilon)
            a = analytic[pi].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
