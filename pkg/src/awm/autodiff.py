"""Reverse-mode differentiation over dense float64 numpy arrays.

Ops compute eagerly and, when a Tape is active, record themselves so
`backward` can replay the chain rule in reverse execution order. With no
active tape the same ops run as plain (checked) numpy, which is the fast
path used for planning rollouts.

Every op validates that its output is finite and raises NonFiniteError
naming the op otherwise. A tape is single-threaded; independent tapes may
run concurrently over shared read-only parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive ops; context manager activates recording."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
    if tape.consumed:
        raise AutodiffError("tape already consumed; re-run the forward pass")
    if not any(node.output is loss for node in tape.nodes):
        raise AutodiffError("loss is not a recorded output of this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward_fn(out_grad)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            tensor.grad += grad


def zero_grads(tensors) -> None:
    vals = tensors.values() if isinstance(tensors, dict) else tensors
    for t in vals:
        t.grad = None


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# ------------------------------------------------------------- nonlinearities

def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make("relu", out, (a,), lambda g: (g * (a.data > 0.0),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (a,), bw)


# ------------------------------------------------------------------ reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, a.data.shape).copy(),)

    return _make("mean", np.asarray(out), (a,), bw)


# --------------------------------------------------------------- shape moves

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    return _make("reshape", a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make("concat", out, ts, bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make("narrow", a.data[index].copy(), (a,), bw)


def split_half(a, axis: int = -1) -> tuple[Tensor, Tensor]:
    a = _as_tensor(a)
    n = a.data.shape[axis]
    if n % 2:
        raise AutodiffError(f"split_half needs an even axis length, got {n}")
    return narrow(a, axis, 0, n // 2), narrow(a, axis, n // 2, n // 2)


# -------------------------------------------------------------------- conv2d

def _conv_same(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    kh, kw, cin, cout = k.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw, cin), axis=(1, 2, 3))
    b, h, w = x.shape[0], x.shape[1], x.shape[2]
    cols = win.reshape(b * h * w, kh * kw * cin)
    return (cols @ k.reshape(kh * kw * cin, cout)).reshape(b, h, w, cout)


def conv2d(x, k) -> Tensor:
    """Stride-1 same-padding correlation; x (B,H,W,Cin), k (kh,kw,Cin,Cout)."""
    x, k = _as_tensor(x), _as_tensor(k)
    kh, kw, cin, cout = k.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise AutodiffError("conv2d requires odd kernel sizes for same padding")
    if x.data.ndim != 4 or x.data.shape[3] != cin:
        raise AutodiffError(f"conv2d input {x.data.shape} incompatible with kernel {k.data.shape}")
    out = _conv_same(x.data, k.data)

    def bw(g):
        b, h, w = x.data.shape[0], x.data.shape[1], x.data.shape[2]
        xp = np.pad(x.data, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw, cin), axis=(1, 2, 3))
        cols = win.reshape(b * h * w, kh * kw * cin)
        dk = (cols.T @ g.reshape(b * h * w, cout)).reshape(kh, kw, cin, cout)
        k_flip = k.data[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh,kw,Cout,Cin)
        dx = _conv_same(g, k_flip)
        return (dx, dk)

    return _make("conv2d", out, (x, k), bw)


# ------------------------------------------------------------------ sampling

def gaussian_sample(mean_t, log_std, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw: mean + exp(log_std) * eps, eps recorded."""
    mean_t, log_std = _as_tensor(mean_t), _as_tensor(log_std)
    eps = rng.standard_normal(mean_t.data.shape)
    scale = np.exp(log_std.data)
    out = mean_t.data + scale * eps
    return _make("gaussian_sample", out, (mean_t, log_std),
                 lambda g: (g, g * scale * eps))


def kl_diag_gaussians(mean1, log_std1, mean2, log_std2) -> Tensor:
    """Closed-form KL(N1 || N2) for diagonal Gaussians, summed over last axis."""
    m1, ls1 = _as_tensor(mean1), _as_tensor(log_std1)
    m2, ls2 = _as_tensor(mean2), _as_tensor(log_std2)
    v1 = np.exp(2.0 * ls1.data)
    v2 = np.exp(2.0 * ls2.data)
    diff = m1.data - m2.data
    per = ls2.data - ls1.data + (v1 + diff * diff) / (2.0 * v2) - 0.5
    out = per.sum(axis=-1)

    def bw(g):
        ge = np.expand_dims(g, -1)
        dm1 = ge * diff / v2
        dls1 = ge * (v1 / v2 - 1.0)
        dls2 = ge * (1.0 - (v1 + diff * diff) / v2)
        return (dm1, dls1, -dm1, dls2)

    return _make("kl_diag_gaussians", np.asarray(out), (m1, ls1, m2, ls2), bw)


# ---------------------------------------------------------------------- adam

def adam_init(params: dict[str, Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Tensor], dict]:
    """Bias-corrected Adam update, applied in place; returns (params, state)."""
    state["step"] += 1
    t = state["step"]
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise AutodiffError(f"adam_step gradient shape {g.shape} != param {p.data.shape} for '{name}'")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        _check_finite("adam_step", p.data)
    return params, state


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}
