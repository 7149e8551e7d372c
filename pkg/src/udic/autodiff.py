"""Minimal reverse-mode gradient engine over dense numpy tensors.

The op set is small and closed: everything the codec and the adaptation
losses need is either a primitive below or a composition of them. Each
primitive carries a hand-written backward rule; the test suite checks every
rule against central finite differences in float64.

Conventions:
  * tensor data is float32 by default; float64 graphs are supported and
    stay float64 end to end (the gradient checks rely on this),
  * full reductions (``op_sum``/``op_mean`` with ``axis=None``) accumulate
    and return float64 scalars regardless of input dtype,
  * gradients are stored in each tensor's own dtype and accumulate across
    backward calls (clear with ``grad = None``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class NonFiniteError(FloatingPointError):
    """Raised when an optimizer step sees NaN/inf gradients (divergence)."""


class _Node:
    """One tape entry: op tag, input tensors, and a closure computing input grads."""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def grad_or_zero(self) -> np.ndarray:
        """Gradient array; a leaf untouched by backward counts as zero."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the primitive set
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(data) -> Tensor:
    """A tensor that never receives gradient (detached from any tape)."""
    return Tensor(np.asarray(data), requires_grad=False)


def _make(data, op, inputs, backward) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad or t._node is not None for t in inputs):
        out.requires_grad = any(t.requires_grad for t in inputs) or any(
            t._node is not None for t in inputs
        )
        out._node = _Node(op, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), backward)


def squared_error(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch("squared_error", a.shape, b.shape)
    diff = a.data - b.data

    def backward(g):
        return 2.0 * g * diff, -2.0 * g * diff

    return _make(diff * diff, "squared_error", (a, b), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, "log", (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, "exp", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (a,), backward)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, "softplus", (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data >= 0
    out = np.where(mask, a.data, slope * a.data)

    def backward(g):
        return (g * np.where(mask, 1.0, slope).astype(g.dtype),)

    return _make(out, "leaky_relu", (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask.astype(g.dtype),)

    return _make(out, "clamp", (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def op_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(np.sum(a.data, dtype=np.float64))
    else:
        out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return _make(out, "sum", (a,), backward)


def op_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        out = np.asarray(np.mean(a.data, dtype=np.float64))
    else:
        n = a.shape[axis]
        out = np.mean(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is None:
            return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)
        return ((np.broadcast_to(np.expand_dims(g, axis), a.shape) / n).astype(a.dtype),)

    return _make(out, "mean", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, "reshape", (a,), backward)


def crop2d(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Slice the trailing two axes; backward zero-pads back to the input shape."""
    if top + height > a.shape[-2] or left + width > a.shape[-1]:
        raise ShapeMismatch("crop2d", a.shape, (height, width))
    out = a.data[..., top : top + height, left : left + width]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., top : top + height, left : left + width] = g
        return (full,)

    return _make(out, "crop2d", (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose2d", a.shape)
    out = a.data.T.copy()

    def backward(g):
        return (g.T,)

    return _make(out, "transpose2d", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), backward)


# ---------------------------------------------------------------------------
# convolutions (NCHW, square kernels, stride 1 or 2)


def _check_stride(op: str, stride: int):
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {stride}")


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeMismatch("conv2d", x.shape, (k, k))
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        (n, c, k, k, ho, wo),
        (sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add column windows back onto the image."""
    n, c, k, _, ho, wo = cols.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (ho - 1) * stride + 1 : stride,
                j : j + (wo - 1) * stride + 1 : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x (N,Cin,H,W) with w (Cout,Cin,k,k)."""
    _check_stride("conv2d", stride)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("conv2d", x.shape, w.shape)
    n, cin, h, width = x.shape
    cout, _, k, _ = w.shape
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    cols2 = cols.reshape(n, cin * k * k, ho * wo)
    wf = w.data.reshape(cout, cin * k * k)
    out = (wf[None] @ cols2).reshape(n, cout, ho, wo)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        grad_w = np.einsum("nol,nfl->of", g2, cols2, optimize=True).reshape(w.shape)
        gcols = (wf.T[None] @ g2).reshape(n, cin, k, k, ho, wo)
        grad_x = _col2im(gcols, h, width, stride, pad)
        return grad_x.astype(x.dtype), grad_w.astype(w.dtype)

    return _make(out, "conv2d", (x, w), backward)


def conv_transpose2d(
    x: Tensor, w: Tensor, stride: int = 1, pad: int = 0, out_pad: int = 0
) -> Tensor:
    """Transposed 2-D convolution, x (N,Cin,H,W) with w (Cin,Cout,k,k).

    Defined as the adjoint of ``conv2d`` mapping into the larger spatial size
    (``out_pad`` extends the bottom/right edge to resolve the stride-2 shape
    ambiguity).
    """
    _check_stride("conv_transpose2d", stride)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch("conv_transpose2d", x.shape, w.shape)
    if out_pad >= stride:
        raise ValueError("conv_transpose2d: out_pad must be < stride")
    n, cin, h, width = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k + out_pad
    wo = (width - 1) * stride - 2 * pad + k + out_pad
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch("conv_transpose2d", x.shape, w.shape)
    wf = w.data.reshape(cin, cout * k * k)
    x2 = x.data.reshape(n, cin, h * width)
    cols = (wf.T[None] @ x2).reshape(n, cout, k, k, h, width)
    # scatter into an output whose im2col grid has exactly h*width positions
    out = np.zeros((n, cout, ho + 2 * pad, wo + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + (h - 1) * stride + 1 : stride,
                j : j + (width - 1) * stride + 1 : stride] += cols[:, :, i, j]
    out = out[:, :, pad : pad + ho, pad : pad + wo]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        sn, sc, sh, sw = gp.strides
        gcols = np.lib.stride_tricks.as_strided(
            gp,
            (n, cout, k, k, h, width),
            (sn, sc, sh, sw, sh * stride, sw * stride),
            writeable=False,
        )
        gcols2 = np.ascontiguousarray(gcols).reshape(n, cout * k * k, h * width)
        grad_x = (wf[None] @ gcols2).reshape(n, cin, h, width)
        grad_w = np.einsum("ncl,nfl->cf", x2, gcols2, optimize=True).reshape(w.shape)
        return grad_x.astype(x.dtype), grad_w.astype(w.dtype)

    return _make(out, "conv_transpose2d", (x, w), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar attached to the tape. Leaves that do not
    require grad, and requires_grad leaves not connected to ``loss``, are
    left untouched (their gradient is zero by convention).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss._node is None:
        if not loss.requires_grad:
            raise ValueError("backward: loss is not connected to any tape")
        return  # a bare leaf: d(loss)/d(loss) contributes nothing further

    # iterative topological order over the tape
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t._node.inputs:
            stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        input_grads = t._node.backward(g)
        for inp, ig in zip(t._node.inputs, input_grads):
            if ig is None:
                continue
            if inp._node is None:
                # leaf: expose the gradient only if requested
                if inp.requires_grad:
                    ig = ig.astype(inp.dtype, copy=False)
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam moment buffers for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "AdamState":
        return cls(
            m=np.zeros_like(param.data),
            v=np.zeros_like(param.data),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(param: Tensor, grad: np.ndarray | None, state: AdamState, lr: float) -> None:
    """One in-place bias-corrected Adam update. ``grad=None`` counts as zero."""
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    if grad is None:
        grad = np.zeros_like(param.data)
    if grad.shape != param.data.shape:
        raise ShapeMismatch("adam_step", param.shape, grad.shape)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("adam_step: non-finite gradient (optimization diverged)")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    param.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.dtype)


@dataclass
class AdamOptimizer:
    """Adam over a list of leaf tensors, with per-tensor moment state."""

    params: list[Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        self.states = [
            AdamState.for_param(p, self.beta1, self.beta2, self.eps) for p in self.params
        ]

    def step(self, lr: float) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, p.grad, s, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
