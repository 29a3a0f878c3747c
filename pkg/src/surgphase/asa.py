"""Aggregated spatial attention.

Every frame attends over its K patches plus its own copy of the incoming
CLS token. The T enhanced CLS copies are then merged into one CLS row,
either by plain averaging (MA) or by a softmax over their similarity to
the target frame's copy (TFA).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, multihead_self_attention
from .errors import ConfigError
from .numerics import DimensionError, Tensor
from .tokenizer import TokenGrid

SpatialAttentionParams = AttentionParams


class Aggregation(str, enum.Enum):
    MA = "MA"
    TFA = "TFA"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class ASAConfig:
    heads: int = 4
    D: int = 32
    aggregation: Aggregation = Aggregation.MA

    def __post_init__(self):
        agg = self.aggregation
        if not isinstance(agg, Aggregation):
            agg = str(agg).upper()
        try:
            object.__setattr__(self, "aggregation", Aggregation(agg))
        except ValueError:
            raise ConfigError(f"aggregation must be MA or TFA, got {self.aggregation!r}") from None
        if self.heads < 1 or self.D % self.heads:
            raise ConfigError(f"D={self.D} must be divisible by heads={self.heads}")


def aggregate_cls_tensor(cls_per_frame: Tensor, mode: Aggregation) -> Tensor:
    """[..., T, D] -> [..., D]; the target frame is the last one."""
    if Aggregation(mode) is Aggregation.MA:
        return nx.mean(cls_per_frame, axis=-2)
    T, D = cls_per_frame.shape[-2:]
    target = nx.getitem(cls_per_frame, (Ellipsis, slice(T - 1, T), slice(None)))      # [..., 1, D]
    scores = nx.scale(nx.sum_(nx.mul(cls_per_frame, target), axis=-1), 1.0 / math.sqrt(D))  # [..., T]
    w = nx.softmax(scores)
    return nx.sum_(nx.mul(cls_per_frame, nx.reshape(w, (*w.shape, 1))), axis=-2)


def tfa_weights(cls_per_frame: np.ndarray) -> np.ndarray:
    c = np.asarray(cls_per_frame, dtype=np.float64)
    s = c @ c[-1] / math.sqrt(c.shape[-1])
    e = np.exp(s - s.max())
    return e / e.sum()


def aggregate_cls(cls_per_frame: np.ndarray, mode: Aggregation | str = Aggregation.MA) -> np.ndarray:
    """Merge T x D per-frame CLS tokens into one D vector."""
    c = np.asarray(cls_per_frame, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise DimensionError("cls_per_frame must be T x D with T >= 1")
    return aggregate_cls_tensor(Tensor(c), Aggregation(mode)).data


def spatial_attention(cls: Tensor, patches: Tensor, p: dict[str, Tensor], cfg: ASAConfig,
                      return_frame_cls: bool = False):
    """cls [B, D], patches [B, T, K, D] -> (cls [B, D], patches [B, T, K, D])."""
    B, T, K, D = patches.shape
    if K == 0:
        raise DimensionError("spatial attention needs at least one patch per frame")
    rep = nx.broadcast_to(nx.reshape(cls, (B, 1, 1, D)), (B, T, 1, D))
    y, _ = multihead_self_attention(nx.concat([rep, patches], axis=2), p, cfg.heads)
    frame_cls = nx.reshape(nx.getitem(y, (slice(None), slice(None), 0, slice(None))), (B, T, D))
    out_patches = nx.getitem(y, (slice(None), slice(None), slice(1, None), slice(None)))
    agg = aggregate_cls_tensor(frame_cls, cfg.aggregation)
    if return_frame_cls:
        return agg, out_patches, frame_cls
    return agg, out_patches


def spatial_attend_frame(frame_tokens: np.ndarray, cls: np.ndarray, params: AttentionParams,
                         cfg: ASAConfig) -> tuple[np.ndarray, np.ndarray]:
    """Self-attention over [cls; K frame tokens]; returns (K x D tokens, 1 x D cls)."""
    frame_tokens = np.asarray(frame_tokens, dtype=np.float64)
    if frame_tokens.ndim != 2 or frame_tokens.shape[0] == 0:
        raise DimensionError("frame_tokens must be K x D with K >= 1")
    x = np.concatenate([np.reshape(cls, (1, -1)), frame_tokens])
    y, _ = multihead_self_attention(Tensor(x), params.tensors(), cfg.heads)
    return y.data[1:], y.data[:1]


def asa_forward(grid: TokenGrid, params: AttentionParams, cfg: ASAConfig) -> TokenGrid:
    """Inner ASA map: per-frame spatial attention, then CLS aggregation."""
    cls, patches = spatial_attention(Tensor(grid.cls[None]), Tensor(grid.patches[None]),
                                     params.tensors(), cfg)
    return TokenGrid.from_parts(cls.data[0], patches.data[0])
