"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every operation that receives at least one ``requires_grad`` input while a
:class:`Tape` is active appends a record ``(output, inputs, rule)`` to that
tape.  :meth:`Tape.backward` walks the records in reverse and accumulates
gradients into the leaf tensors.  Outside a tape, operations are plain
numpy computations (inference mode).

Tensors carry an optional leading batch axis; the model code uses
``(B, T, C)`` activations throughout.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kernels as K
from .errors import ContractViolation

DTYPE = np.float32

_tapes: list["Tape"] = []

Rule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the engine dtype (float64 is for test oracles only)."""
    global DTYPE
    saved, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = saved


_branch_logs: list[list[np.ndarray]] = []


@contextmanager
def record_branches() -> Iterator[list[np.ndarray]]:
    """Collect the discrete choices (kink sides, clamp masks, argmins) made inside the block."""
    log: list[np.ndarray] = []
    _branch_logs.append(log)
    try:
        yield log
    finally:
        _branch_logs.pop()


def note_branch(choice) -> None:
    if _branch_logs:
        _branch_logs[-1].append(np.array(choice, copy=True))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_produced")
    # make numpy defer to the reflected Tensor operators (ndarray @ Tensor etc.)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic ------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are recorded in execution order, which
    is a topological order by construction.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Rule]] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Rule) -> None:
        self.records.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._produced or not any(out is loss for out, _, _ in tape.records):
        raise ContractViolation("loss is not reachable from the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, rule in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, rule(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._produced:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=DTYPE)
            else:
                t.grad += gi


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.requires_grad = False
    out._produced = False
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        _tapes[-1].record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1),))


def square(a) -> Tensor:
    a = tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient is routed to ``a`` where it is strictly above ``lo``."""
    a = tensor(a)
    keep = ~(a.data <= lo)   # NaN passes through
    note_branch(keep)
    return _result(np.where(keep, a.data, DTYPE(lo)), (a,), lambda g: (g * keep,))


def clamp_max(a, hi: float) -> Tensor:
    a = tensor(a)
    keep = ~(a.data >= hi)
    note_branch(keep)
    return _result(np.where(keep, a.data, DTYPE(hi)), (a,), lambda g: (g * keep,))


# reductions and shape ----------------------------------------------------------
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    total = tsum(a, axis, keepdims)
    return total * (1.0 / (a.data.size // max(total.data.size, 1)))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index, unique: bool = False) -> Tensor:
    """a[index]; pass ``unique=True`` when an advanced index never repeats an element."""
    a = tensor(a)
    out = a.data[index]
    advanced = not unique and any(isinstance(i, (np.ndarray, list)) for i in
                                  (index if isinstance(index, tuple) else (index,)))

    def rule(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (a,), rule)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    return _result(np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.moveaxis(g, axis, 0)))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        if b.ndim == 2 and a.ndim >= 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(a.data @ b.data, (a, b), rule)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias over the last axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# model primitives ----------------------------------------------------------------
def conv1d_dilated(x, weight, bias, dilation: int) -> Tensor:
    """Zero-padded 'same' dilated convolution over the time axis.

    ``x`` is ``(T, C_in)`` or ``(B, T, C_in)``; ``weight`` is
    ``(K, C_in, C_out)`` with K odd; output has the same length T.
    """
    x, weight, bias = tensor(x), tensor(weight), tensor(bias)
    if weight.ndim != 3 or weight.shape[0] % 2 == 0:
        raise ContractViolation(f"conv weight must be (K odd, C_in, C_out), got {weight.shape}")
    if x.ndim not in (2, 3) or x.shape[-1] != weight.shape[1]:
        raise ContractViolation(f"conv input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[2],):
        raise ContractViolation(f"conv bias {bias.shape} does not match C_out={weight.shape[2]}")
    if int(dilation) < 1:
        raise ContractViolation(f"dilation must be >= 1, got {dilation}")
    d = int(dilation)
    K, c_in, c_out = weight.shape
    x3 = x.data if x.ndim == 3 else x.data[None]
    B, T, _ = x3.shape
    pad = (K - 1) // 2 * d
    xp = np.zeros((B, T + 2 * pad, c_in), dtype=DTYPE)
    xp[:, pad:pad + T] = x3
    out = np.matmul(xp[:, 0:T], weight.data[0])
    for k in range(1, K):
        out += xp[:, k * d:k * d + T] @ weight.data[k]
    out += bias.data

    def rule(g):
        g3 = g if g.ndim == 3 else g[None]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for k in range(K):
            gxp[:, k * d:k * d + T] += g3 @ weight.data[k].T
            for b in range(B):
                gw[k] += xp[b, k * d:k * d + T].T @ g3[b]
        gx = gxp[:, pad:pad + T]
        return gx.reshape(x.shape), gw, g3.sum(axis=(0, 1))

    return _result(out.reshape(x.shape[:-1] + (c_out,)), (x, weight, bias), rule)


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis independently at each position."""
    x, gain, shift = tensor(x), tensor(gain), tensor(shift)
    C = x.shape[-1]
    if gain.shape != (C,) or shift.shape != (C,):
        raise ContractViolation(f"layer_norm gain/shift must be ({C},)")
    xr = _rows(x.data)
    ones = np.ones(C, dtype=xr.dtype)  # identity PReLU
    out, mu, inv = K.prelu_ln_fwd(xr, ones, gain.data, shift.data, xr.dtype.type(eps))

    def rule(g):
        gx, _, ggain, gshift = K.prelu_ln_bwd(_rows(g), xr, mu, inv, ones, gain.data)
        return gx.reshape(x.shape), ggain, gshift

    return _result(out.reshape(x.shape), (x, gain, shift), rule)


def prelu(x, slope) -> Tensor:
    """Parametric ReLU with one learned slope per channel (last axis)."""
    x, slope = tensor(x), tensor(slope)
    if slope.shape != (x.shape[-1],):
        raise ContractViolation(f"prelu slope must be ({x.shape[-1]},), got {slope.shape}")
    xr = _rows(x.data)
    if _branch_logs:
        note_branch(xr < 0)
    out = K.prelu_fwd(xr, slope.data)

    def rule(g):
        gx, gs = K.prelu_bwd(_rows(g), xr, slope.data)
        return gx.reshape(x.shape), gs

    return _result(out.reshape(x.shape), (x, slope), rule)


def prelu_layer_norm(x, slope, gain, shift, eps: float = 1e-5) -> Tensor:
    """layer_norm(prelu(x, slope), gain, shift) in one fused pass."""
    x, slope, gain, shift = tensor(x), tensor(slope), tensor(gain), tensor(shift)
    C = x.shape[-1]
    if slope.shape != (C,) or gain.shape != (C,) or shift.shape != (C,):
        raise ContractViolation(f"prelu/layer_norm parameters must be ({C},)")
    xr = _rows(x.data)
    if _branch_logs:
        note_branch(xr < 0)
    out, mu, inv = K.prelu_ln_fwd(xr, slope.data, gain.data, shift.data, xr.dtype.type(eps))

    def rule(g):
        gx, gs, ggain, gshift = K.prelu_ln_bwd(_rows(g), xr, mu, inv, slope.data, gain.data)
        return gx.reshape(x.shape), gs, ggain, gshift

    return _result(out.reshape(x.shape), (x, slope, gain, shift), rule)


def l2_normalize(x, eps: float = 1e-8) -> Tensor:
    """Divide each last-axis vector by max(||v||, eps)."""
    x = tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    big = ~(norm <= eps)
    denom = np.where(big, norm, DTYPE(eps))
    out = x.data / denom

    def rule(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(big, g - out * proj, g) / denom,)

    return _result(out, (x,), rule)


def log_sum_exp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with max-shift; gradient is the softmax."""
    x = tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    res = out if keepdims else np.squeeze(out, axis=axis)

    def rule(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return _result(np.asarray(res), (x,), rule)
