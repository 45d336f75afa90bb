"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape nothing is recorded, which
is how evaluation runs.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = tensor_sum(hadamard(w, w))
    ...     backward(loss)
    >>> w.grad
    array([2., 4.])
"""

from __future__ import annotations

import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

# NaN/Inf guard on every op output; the test suite switches it on.
DEBUG_CHECKS = os.environ.get("NLMDA_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand extents do not conform."""


class Tensor:
    """A float64 array plus gradient slot and tape identity."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; tapes nest and the innermost one records.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, op: str, inputs, output: Tensor, backward_fn) -> None:
        output.node_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))


class no_tape:
    """Suspend recording, e.g. for finite-difference probes inside a tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = None
    out._tape = None
    out.requires_grad = False
    if DEBUG_CHECKS and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise RuntimeError("loss was not recorded on a tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for i in range(loss.node_id, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = tape.nodes[i]
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape and inp.node_id is not None:
                j = inp.node_id
                grads[j] = grads[j] + gi if j in grads else gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64)
            else:
                inp.grad = inp.grad + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    return _emit("scale", a.data * k, (a,), lambda g: (g * k,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"hadamard: {a.shape} vs {b.shape}") from e

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _emit("hadamard", out, (a, b), bw)


def tanh_op(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu_op(x: Tensor) -> Tensor:
    """GELU in its exact form x * Phi(x)."""
    cdf = ndtr(x.data)
    y = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", y, (x,), bw)


# ---------------------------------------------------------------- reductions, shape


def tensor_sum(x: Tensor) -> Tensor:
    return _emit("sum", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = x.data.reshape(tuple(shape))
    return _emit("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Softmax along ``axis`` with per-slice max subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (x,), bw)


def avg_pool(x: Tensor, window: tuple[int, int]) -> Tensor:
    """Non-overlapping mean pooling over the last two axes; partial windows dropped."""
    wh, ww = window
    B, D, H, W = x.shape
    if wh < 1 or ww < 1 or wh > H or ww > W:
        raise ShapeError(f"pool window {window} does not fit input {x.shape[2:]}")
    Ho, Wo = H // wh, W // ww
    crop = x.data[:, :, :Ho * wh, :Wo * ww]
    y = crop.reshape(B, D, Ho, wh, Wo, ww).mean(axis=(3, 5))

    def bw(g):
        gx = np.zeros(x.shape)
        spread = np.broadcast_to(g[:, :, :, None, :, None] / (wh * ww), (B, D, Ho, wh, Wo, ww))
        gx[:, :, :Ho * wh, :Wo * ww] = spread.reshape(B, D, Ho * wh, Wo * ww)
        return (gx,)

    return _emit("avg_pool", y, (x,), bw)


# ---------------------------------------------------------------- contractions


def contract_expand(x: Tensor, c: Tensor) -> Tensor:
    """out[b,h,ch,t] = sum_d x[b,d,ch,t] * c[h,d,ch]."""
    if x.ndim != 4 or c.ndim != 3:
        raise ShapeError(f"contract_expand expects x rank 4 and c rank 3, got {x.shape}, {c.shape}")
    if x.shape[2] != c.shape[2]:
        raise ShapeError(f"channel extent mismatch: x has C={x.shape[2]}, c has C={c.shape[2]}")
    if x.shape[1] != c.shape[1]:
        raise ShapeError(f"input depth mismatch: x has {x.shape[1]}, c expects {c.shape[1]}")
    xd, cd = x.data, c.data
    if xd.shape[1] == 1:
        y = xd[:, 0][:, None, :, :] * cd[None, :, 0, :, None]
    else:
        y = np.einsum("bdct,hdc->bhct", xd, cd)

    def bw(g):
        gx = None
        if x.requires_grad:
            gx = np.einsum("bhct,hdc->bdct", g, cd, optimize=True)
        if xd.shape[1] == 1:
            gc = np.einsum("bhct,bct->hc", g, xd[:, 0], optimize=True)[:, None, :]
        else:
            gc = np.einsum("bhct,bdct->hdc", g, xd, optimize=True)
        return gx, gc

    return _emit("contract_expand", y, (x, c), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[B,N] @ weight[M,N].T + bias[M]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.shape} does not conform to weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} for weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("linear", y, inputs, bw)


def _same_pads(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "valid") -> Tensor:
    """2-D cross-correlation (no kernel flip), stride 1.

    ``same`` pads with zeros, putting the odd extra pad on the high side.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    B, Din, H, W = x.shape
    Dout, Din_w, Kh, Kw = weight.shape
    if Din != Din_w:
        raise ShapeError(f"conv2d: input depth {Din} but kernel expects {Din_w}")
    if bias is not None and bias.shape != (Dout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {Dout} kernels")
    if padding == "valid":
        (ph0, ph1), (pw0, pw1) = (0, 0), (0, 0)
    elif padding == "same":
        (ph0, ph1), (pw0, pw1) = _same_pads(Kh), _same_pads(Kw)
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Hp, Wp = H + ph0 + ph1, W + pw0 + pw1
    if Kh > Hp or Kw > Wp:
        raise ShapeError(f"conv2d: kernel {(Kh, Kw)} larger than padded input {(Hp, Wp)}")
    Ho, Wo = Hp - Kh + 1, Wp - Kw + 1
    xp = x.data
    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    wd = weight.data
    win = sliding_window_view(xp, (Kh, Kw), axis=(2, 3))  # B, Din, Ho, Wo, Kh, Kw
    y = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # B, Ho, Wo, Dout
    if bias is not None:
        y += bias.data
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            cols = np.tensordot(g, wd, axes=([1], [0]))  # B, Ho, Wo, Din, Kh, Kw
            gxp = np.zeros((B, Din, Hp, Wp))
            for i in range(Kh):
                for j in range(Kw):
                    gxp[:, :, i:i + Ho, j:j + Wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph0:ph0 + H, pw0:pw0 + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv2d", y, inputs, bw)


def factored_conv(x: Tensor, s: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1xK conv2d of the depth-factored input ``s[b,d,c] * x[b,c,t]``.

    Equal to ``conv2d(hadamard(s[..., None], x[:, None]), weight, bias)`` but
    contracts the depth axis into the kernel first, so the [B,D,C,T] operand
    is never formed.
    """
    if x.ndim != 3 or s.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"factored_conv: x {x.shape}, s {s.shape}, weight {weight.shape}")
    B, C, T = x.shape
    Dout, D, Kh, K = weight.shape
    if s.shape != (B, D, C):
        raise ShapeError(f"factored_conv: s must be {(B, D, C)}, got {s.shape}")
    if Kh != 1:
        raise ShapeError("factored_conv needs a kernel of height 1")
    if K > T:
        raise ShapeError(f"factored_conv: kernel length {K} exceeds T={T}")
    if bias is not None and bias.shape != (Dout,):
        raise ShapeError(f"factored_conv: bias {bias.shape} for {Dout} kernels")
    To = T - K + 1
    w3 = weight.data[:, :, 0, :]  # O, D, K
    kern = np.einsum("odk,bdc->bcok", w3, s.data, optimize=True)
    win = sliding_window_view(x.data, K, axis=2)  # B, C, To, K
    y = np.matmul(kern, win.transpose(0, 1, 3, 2))  # B, C, O, To
    if bias is not None:
        y += bias.data[:, None]
    y = np.ascontiguousarray(y.transpose(0, 2, 1, 3))

    def bw(g):
        gt = g.transpose(0, 2, 1, 3)  # B, C, O, To
        gk = np.matmul(gt, win)  # B, C, O, K
        gs = np.einsum("bcok,odk->bdc", gk, w3, optimize=True)
        gw = np.einsum("bcok,bdc->odk", gk, s.data, optimize=True)[:, :, None, :]
        gx = None
        if x.requires_grad:
            taps = np.matmul(kern.transpose(0, 1, 3, 2), gt)  # B, C, K, To
            gx = np.zeros((B, C, T))
            for k in range(K):
                gx[:, :, k:k + To] += taps[:, :, k, :]
        grads = [gx, gs, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, s, weight) if bias is None else (x, s, weight, bias)
    return _emit("factored_conv", y, inputs, bw)


# ---------------------------------------------------------------- normalization, loss


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, depth: int) -> "RunningStats":
        return cls(np.zeros(depth), np.ones(depth))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, training: bool) -> Tensor:
    """Per-depth normalization over (B, H, W).

    Training mode normalizes with batch statistics and moves ``state`` toward
    them (the running variance uses the unbiased batch estimate). Eval mode
    only reads ``state``.
    """
    B, D = x.shape[0], x.shape[1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({D},)")
    bshape = (1, D, 1, 1)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if training:
        if B < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        n = x.size // D
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv
        state.mean = (1 - BN_MOMENTUM) * state.mean + BN_MOMENTUM * mu.reshape(D)
        state.var = (1 - BN_MOMENTUM) * state.var + BN_MOMENTUM * var.reshape(D) * n / (n - 1)

        def bw(g):
            dxhat = g * gd
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv / n * (n * dxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        inv = 1.0 / np.sqrt(state.var.reshape(bshape) + BN_EPS)
        xhat = (x.data - state.mean.reshape(bshape)) * inv

        def bw(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("batch_norm", xhat * gd + bd, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- checking


def gradcheck(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    ``f`` must be deterministic; it is re-evaluated twice per coordinate.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = f(params)
        backward(loss)
    worst = 0.0
    with no_tape():
        for p in params:
            p.data = np.ascontiguousarray(p.data)
            g_ad = np.zeros(p.shape) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = f(params).data.item()
                flat[k] = orig - h
                fm = f(params).data.item()
                flat[k] = orig
                g_fd = (fp - fm) / (2 * h)
                ga = g_ad.reshape(-1)[k]
                err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
                worst = max(worst, err)
    return worst
