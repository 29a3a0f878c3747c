"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. The active
backend is picked once at import time:

    SURGPHASE_DISABLE_NUMBA=1   force the numpy path
    (unset)                     numba if importable, numpy otherwise

All kernels work on C-contiguous float64 arrays laid out as rows; callers
in ``numerics`` do the reshaping.
"""
from __future__ import annotations

import math
import os
import types

import numpy as np
from scipy.special import erf as _erf

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ----------------------------------------------------------------------------
# numpy reference path
# ----------------------------------------------------------------------------

def _np_bmm(a, b):
    return np.matmul(a, b)


def _np_softmax_rows(x, mask):
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def _np_layer_norm_rows(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layer_norm_rows_backward(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    gx = (gxhat - gxhat.mean(axis=1, keepdims=True)
          - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    return gx, ggamma, gbeta


def _np_gelu(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2))


def _np_gelu_backward(x, gy):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return gy * (cdf + x * pdf)


def _np_relax_predictions(gt, pred, window):
    out = pred.copy()
    n = gt.shape[0]
    if window <= 0 or n < 2:
        return out
    bounds = np.flatnonzero(gt[1:] != gt[:-1]) + 1
    idx = np.arange(n)
    for b in bounds:
        lo = max(b - window, 0)
        hi = min(b + window, n)
        before = idx[lo:b]
        after = idx[b:hi]
        hit = before[pred[before] == gt[b]]
        out[hit] = gt[hit]
        hit = after[pred[after] == gt[b - 1]]
        out[hit] = gt[hit]
    return out


def _np_confusion_counts(gt, pred, num_classes):
    tp = np.bincount(gt[gt == pred], minlength=num_classes)
    fp = np.bincount(pred[gt != pred], minlength=num_classes)
    fn = np.bincount(gt[gt != pred], minlength=num_classes)
    return tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64)


numpy_backend = types.SimpleNamespace(
    name="numpy",
    bmm=_np_bmm,
    softmax_rows=_np_softmax_rows,
    softmax_rows_backward=_np_softmax_rows_backward,
    layer_norm_rows=_np_layer_norm_rows,
    layer_norm_rows_backward=_np_layer_norm_rows_backward,
    gelu=_np_gelu,
    gelu_backward=_np_gelu_backward,
    relax_predictions=_np_relax_predictions,
    confusion_counts=_np_confusion_counts,
)


# ----------------------------------------------------------------------------
# numba path
# ----------------------------------------------------------------------------

def _build_numba_backend():
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def bmm(a, b):
        # i-k-j order keeps each output a left-to-right sum over k
        nb, m, kk = a.shape
        n = b.shape[2]
        out = np.zeros((nb, m, n))
        for p in range(nb):
            for i in range(m):
                for k in range(kk):
                    aik = a[p, i, k]
                    for j in range(n):
                        out[p, i, j] += aik * b[p, k, j]
        return out

    @njit
    def softmax_rows(x, mask):
        r, n = x.shape
        out = np.zeros((r, n))
        for i in range(r):
            mx = -np.inf
            for j in range(n):
                if mask[i, j] and x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(n):
                if mask[i, j]:
                    e = math.exp(x[i, j] - mx)
                    out[i, j] = e
                    s += e
            for j in range(n):
                out[i, j] /= s
        return out

    @njit
    def softmax_rows_backward(y, gy):
        r, n = y.shape
        out = np.empty((r, n))
        for i in range(r):
            dot = 0.0
            for j in range(n):
                dot += gy[i, j] * y[i, j]
            for j in range(n):
                out[i, j] = y[i, j] * (gy[i, j] - dot)
        return out

    @njit
    def layer_norm_rows(x, gamma, beta, eps):
        r, d = x.shape
        y = np.empty((r, d))
        xhat = np.empty((r, d))
        rstd = np.empty(r)
        for i in range(r):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            rs = 1.0 / math.sqrt(var + eps)
            rstd[i] = rs
            for j in range(d):
                h = (x[i, j] - mu) * rs
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit
    def layer_norm_rows_backward(gy, xhat, rstd, gamma):
        r, d = gy.shape
        gx = np.empty((r, d))
        ggamma = np.zeros(d)
        gbeta = np.zeros(d)
        for i in range(r):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = gy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                ggamma[j] += gy[i, j] * xhat[i, j]
                gbeta[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                g = gy[i, j] * gamma[j]
                gx[i, j] = (g - m1 - xhat[i, j] * m2) * rstd[i]
        return gx, ggamma, gbeta

    @njit
    def gelu(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return out.reshape(x.shape)

    @njit
    def gelu_backward(x, gy):
        fx = x.ravel()
        fg = gy.ravel()
        out = np.empty_like(fx)
        for i in range(fx.size):
            v = fx[i]
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            out[i] = fg[i] * (cdf + v * pdf)
        return out.reshape(x.shape)

    @njit
    def relax_predictions(gt, pred, window):
        n = gt.shape[0]
        out = pred.copy()
        if window <= 0:
            return out
        for b in range(1, n):
            if gt[b] == gt[b - 1]:
                continue
            lo = max(b - window, 0)
            hi = min(b + window, n)
            for j in range(lo, b):
                if pred[j] == gt[b]:
                    out[j] = gt[j]
            for j in range(b, hi):
                if pred[j] == gt[b - 1]:
                    out[j] = gt[j]
        return out

    @njit
    def confusion_counts(gt, pred, num_classes):
        tp = np.zeros(num_classes, dtype=np.int64)
        fp = np.zeros(num_classes, dtype=np.int64)
        fn = np.zeros(num_classes, dtype=np.int64)
        for i in range(gt.shape[0]):
            if gt[i] == pred[i]:
                tp[gt[i]] += 1
            else:
                fp[pred[i]] += 1
                fn[gt[i]] += 1
        return tp, fp, fn

    return types.SimpleNamespace(
        name="numba",
        bmm=bmm,
        softmax_rows=softmax_rows,
        softmax_rows_backward=softmax_rows_backward,
        layer_norm_rows=layer_norm_rows,
        layer_norm_rows_backward=layer_norm_rows_backward,
        gelu=gelu,
        gelu_backward=gelu_backward,
        relax_predictions=relax_predictions,
        confusion_counts=confusion_counts,
    )


numba_backend = _build_numba_backend() if HAVE_NUMBA else None


def _env_disabled() -> bool:
    return os.environ.get("SURGPHASE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


active = numba_backend if (numba_backend is not None and not _env_disabled()) else numpy_backend


def get_backend(name: str) -> types.SimpleNamespace:
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        if numba_backend is None:
            raise RuntimeError("numba is not installed")
        return numba_backend
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name: str) -> None:
    """Switch the process-wide backend (tests and benchmarks only)."""
    global active
    active = get_backend(name)
