"""Multi-head scaled dot-product attention shared by the temporal and spatial layers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


@dataclass
class AttentionParams:
    """Square Q/K/V projections without bias, output projection with bias."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, std: float = 0.02) -> "AttentionParams":
        return cls(*(nx.truncated_normal(rng, (D, D), std) for _ in range(4)), np.zeros(D))

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in vars(self).items()}


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, D] -> [..., heads, N, D/heads]."""
    *lead, n, d = x.shape
    if d % heads:
        raise DimensionError(f"model dim {d} not divisible by {heads} heads")
    x = nx.reshape(x, (*lead, n, heads, d // heads))
    nl = len(lead)
    return nx.transpose(x, (*range(nl), nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, N, dh] -> [..., N, heads*dh]."""
    *lead, h, n, dh = x.shape
    nl = len(lead)
    x = nx.transpose(x, (*range(nl), nl + 1, nl, nl + 2))
    return nx.reshape(x, (*lead, n, h * dh))


def project_qkv(x: Tensor, p: dict[str, Tensor], heads: int) -> tuple[Tensor, Tensor, Tensor]:
    return tuple(split_heads(nx.matmul(x, p[w]), heads) for w in ("wq", "wk", "wv"))


def attend(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(dh)) v per head; returns (values, weights)."""
    scores = nx.scale(nx.matmul(q, nx.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    w = nx.masked_softmax(scores, mask)
    return nx.matmul(w, v), w


def output_projection(heads_out: Tensor, p: dict[str, Tensor]) -> Tensor:
    return nx.linear(merge_heads(heads_out), p["wo"], p["bo"])


def multihead_self_attention(x: Tensor, p: dict[str, Tensor], heads: int, mask=None) -> tuple[Tensor, Tensor]:
    """Self-attention over axis -2 of ``x``; leading axes are independent."""
    q, k, v = project_qkv(x, p, heads)
    out, w = attend(q, k, v, mask)
    return output_projection(out, p), w


def _swap_last(ndim: int) -> tuple[int, ...]:
    return (*range(ndim - 2), ndim - 1, ndim - 2)
