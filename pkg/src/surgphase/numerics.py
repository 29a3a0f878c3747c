"""Dense float64 tensors with tape-based reverse-mode gradients.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and
at least one input requires a gradient, the op appends a record holding the
closure that maps the output gradient to input gradients; ``Tape.backward``
replays those records in reverse.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(x, x)
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

LN_EPS = 1e-6


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operation."""


class EmptySegmentError(ValueError):
    """A softmax row has no unmasked entry."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable ops executed while the tape is active."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError("backward without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        loss.grad = np.array(seed, dtype=np.float64).reshape(loss.shape)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(f"gradient shape {gi.shape} != input shape {inp.shape}")
                inp.grad = gi if inp.grad is None else inp.grad + gi


_TAPES: list[Tape] = []


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return np.asarray(g, order="C")


def _c(x) -> np.ndarray:
    # np.ascontiguousarray turns 0-d arrays into shape (1,)
    return np.asarray(x, order="C")


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


# ----------------------------------------------------------------------------
# elementwise and structural ops
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(_c(a.data.transpose(axes)), (a,),
                   lambda g: (_c(g.transpose(inv)),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)
    return _result(_c(a.data[index]), (a,), backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(_c(x) for x in np.split(g, cuts, axis=axis))
    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _result(_c(np.broadcast_to(a.data, shape)), (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def _bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a[..., m, k] @ b[k, n] or a[..., m, k] @ b[..., k, n] via the kernel."""
    if b.ndim == 2:
        lead = a.shape[:-1]
        out = _kernels.active.bmm(np.ascontiguousarray(a.reshape(1, -1, a.shape[-1])),
                                  np.ascontiguousarray(b[None]))
        return out.reshape(*lead, b.shape[-1])
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3 = np.ascontiguousarray(np.broadcast_to(a, lead + a.shape[-2:])).reshape(-1, *a.shape[-2:])
    b3 = np.ascontiguousarray(np.broadcast_to(b, lead + b.shape[-2:])).reshape(-1, *b.shape[-2:])
    return _kernels.active.bmm(a3, b3).reshape(*lead, a.shape[-2], b.shape[-1])


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_bmm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = _bmm(_rows(a.data).T, _rows(g))
            else:
                gb = _unbroadcast(_bmm(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _result(_bmm(a.data, b.data), (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """x[..., Din] @ w[Din, Dout] + b[Dout]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    y = matmul(x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
        y = add(y, b)
    return y


# ----------------------------------------------------------------------------
# normalisations and nonlinearities
# ----------------------------------------------------------------------------

def masked_softmax(scores, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0."""
    scores = as_tensor(scores)
    shape = scores.shape
    if len(shape) == 0 or shape[-1] == 0:
        raise DimensionError("masked_softmax needs a non-empty last axis")
    if mask is None:
        m = np.ones(shape, dtype=np.bool_)
    else:
        m = np.ascontiguousarray(np.broadcast_to(np.asarray(mask, dtype=np.bool_), shape))
    if not m.any(axis=-1).all():
        raise EmptySegmentError("every softmax row needs at least one unmasked entry")
    k = _kernels.active
    y = k.softmax_rows(_rows(scores.data), _rows(m)).reshape(shape)

    def backward(g):
        return (k.softmax_rows_backward(_rows(y), _rows(g)).reshape(shape),)
    return _result(y, (scores,), backward)


def softmax(scores) -> Tensor:
    return masked_softmax(scores, None)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty feature axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    k = _kernels.active
    y, xhat, rstd = k.layer_norm_rows(_rows(x.data), gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = k.layer_norm_rows_backward(_rows(g), xhat, rstd, gamma.data)
        return gx.reshape(x.shape), gg, gb
    return _result(y.reshape(x.shape), (x, gamma, beta), backward)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    k = _kernels.active
    return _result(k.gelu(x.data), (x,), lambda g: (k.gelu_backward(x.data, np.ascontiguousarray(g)),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the leading axis.

    A 1-D ``logits`` with an integer ``labels`` gives the single-sample loss.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if lab.shape != (n,):
        raise DimensionError(f"cross_entropy: {lab.shape[0]} labels for {n} rows")
    if (lab < 0).any() or (lab >= c).any():
        raise IndexError(f"label out of range for {c} classes")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    loss = float((lse - z[np.arange(n), lab]).sum() / n)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), lab] -= 1.0
        p *= float(g) / n
        return (p[0] if single else p,)
    return _result(np.array(loss), (logits,), backward)


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    rel_error: dict[str, np.ndarray]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((float(e.max()) for e in self.rel_error.values() if e.size), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> tuple[str, int, float]:
        name = max(self.rel_error, key=lambda k: self.rel_error[k].max() if self.rel_error[k].size else -1)
        i = int(np.argmax(self.rel_error[name]))
        return name, i, float(self.rel_error[name].flat[i])


def finite_diff_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
                      h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` receives a dict of Tensors and must return a scalar Tensor. The
    relative error per coordinate is |a - n| / max(|a|, |n|, floor).
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    with Tape() as tape:
        loss = f(leaves)
    tape.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def value(trial: dict[str, np.ndarray]) -> float:
        return f({k: Tensor(v) for k, v in trial.items()}).data.item()

    numeric, rel = {}, {}
    for name, arr in base.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value(base)
            flat[i] = orig - h
            fm = value(base)
            flat[i] = orig
            num.flat[i] = (fp - fm) / (2.0 * h)
        numeric[name] = num
        a = analytic[name]
        rel[name] = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
    return GradCheckReport(analytic, numeric, rel, tol)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


__all__ = [
    "Tensor", "Tape", "DimensionError", "EmptySegmentError", "GradCheckReport",
    "add", "sub", "mul", "scale", "reshape", "transpose", "getitem", "concat",
    "broadcast_to", "sum_", "mean", "matmul", "linear", "masked_softmax", "softmax",
    "layer_norm", "gelu", "cross_entropy", "finite_diff_check", "truncated_normal",
    "LN_EPS",
]
