"""Hierarchical temporal attention.

At each spatial position the T temporal tokens attend within m nested
windows that all end at the target frame (index T-1). The m window outputs
are merged smallest first: positions shared with the running result are
blended ``alpha * running + beta * current``, positions only the larger
window covers are taken from it unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, attend, output_projection, project_qkv
from .errors import AggregationError, ConfigError, SegmentError
from .numerics import Tensor
from .tokenizer import TokenGrid


def default_segment_lengths(T: int, m: int = 3) -> tuple[int, ...]:
    """(ceil(T/4), ceil(T/2), T) for m=3; in general ceil(T / 2**(m-1-s))."""
    lengths = tuple(math.ceil(T / 2 ** (m - 1 - s)) for s in range(m))
    # short clips can collapse neighbours (e.g. T=2 -> 1, 1, 2)
    return tuple(sorted(set(lengths)))


@dataclass(frozen=True)
class HTAConfig:
    segment_lengths: tuple[int, ...] = (2, 4, 8)
    alpha: float = 0.5
    beta: float = 0.5
    heads: int = 4
    D: int = 32

    def __post_init__(self):
        object.__setattr__(self, "segment_lengths", tuple(int(x) for x in self.segment_lengths))
        ls = self.segment_lengths
        if not ls:
            raise ConfigError("at least one temporal segment is required")
        if min(ls) < 1:
            raise ConfigError(f"segment lengths must be >= 1: {ls}")
        if any(b <= a for a, b in zip(ls, ls[1:])):
            raise ConfigError(f"segment lengths must be strictly increasing: {ls}")
        if self.heads < 1 or self.D % self.heads:
            raise ConfigError(f"D={self.D} must be divisible by heads={self.heads}")

    @property
    def m(self) -> int:
        return len(self.segment_lengths)

    @property
    def T(self) -> int:
        return self.segment_lengths[-1]

    @classmethod
    def for_frames(cls, T: int, m: int = 3, **kw) -> "HTAConfig":
        return cls(segment_lengths=default_segment_lengths(T, m), **kw)


@dataclass(frozen=True)
class SegmentSpec:
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start


def suffix_segments(cfg: HTAConfig, T: int) -> list[SegmentSpec]:
    if cfg.T != T:
        raise ConfigError(f"largest segment {cfg.T} must equal the clip length T={T}")
    return [SegmentSpec(T - n, T) for n in cfg.segment_lengths]


@dataclass
class AttentionTrace:
    """Collects the segment attention matrices produced during a forward pass."""

    records: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    layer: int = 0

    def add(self, segment_index: int, weights: np.ndarray) -> None:
        self.records.append((self.layer, segment_index, weights))


def _check_spec(spec: SegmentSpec, T: int) -> None:
    if spec.length < 1:
        raise SegmentError(f"empty temporal segment [{spec.start}, {spec.end})")
    if spec.start < 0 or spec.end > T:
        raise SegmentError(f"segment [{spec.start}, {spec.end}) outside [0, {T})")


def _segment_from_qkv(q, k, v, spec: SegmentSpec, p: dict[str, Tensor]):
    win = (Ellipsis, slice(spec.start, spec.end), slice(None))
    out, w = attend(nx.getitem(q, win), nx.getitem(k, win), nx.getitem(v, win))
    return output_projection(out, p), w


def segment_attend_tensor(tokens: Tensor, spec: SegmentSpec, p: dict[str, Tensor],
                          cfg: HTAConfig) -> Tensor:
    """Windowed attention on [..., T, D] tokens -> [..., T_s, D]."""
    _check_spec(spec, tokens.shape[-2])
    q, k, v = project_qkv(tokens, p, cfg.heads)
    return _segment_from_qkv(q, k, v, spec, p)[0]


def segment_attend(tokens_at_k: np.ndarray, spec: SegmentSpec, params: AttentionParams,
                   cfg: HTAConfig) -> np.ndarray:
    """Attention among the tokens of one window at one spatial position (T x D -> T_s x D)."""
    return segment_attend_tensor(Tensor(tokens_at_k), spec, params.tensors(), cfg).data


def pyramid_aggregate(outputs, cfg: HTAConfig, T: int | None = None):
    """Merge per-segment outputs [..., T_s, D] (ascending T_s) into [..., T, D].

    Accepts Tensors or plain arrays; returns the same kind.
    """
    raw = not isinstance(outputs[0], Tensor)
    outs = [Tensor(o) if raw else o for o in outputs]
    T = cfg.T if T is None else T
    lens = [o.shape[-2] for o in outs]
    if any(b <= a for a, b in zip(lens, lens[1:])):
        raise AggregationError(f"segment outputs must be ordered by increasing length: {lens}")
    if lens[-1] != T:
        raise AggregationError(f"largest segment covers {lens[-1]} positions, clip has {T}")
    running = outs[0]
    for cur in outs[1:]:
        n_new = cur.shape[-2] - running.shape[-2]
        head = nx.getitem(cur, (Ellipsis, slice(0, n_new), slice(None)))
        tail = nx.getitem(cur, (Ellipsis, slice(n_new, None), slice(None)))
        shared = nx.add(nx.scale(running, cfg.alpha), nx.scale(tail, cfg.beta))
        running = nx.concat([head, shared], axis=-2)
    return running.data if raw else running


def temporal_attention(x: Tensor, p: dict[str, Tensor], cfg: HTAConfig,
                       trace: AttentionTrace | None = None) -> Tensor:
    """HTA over the second-to-last axis of ``x`` [..., T, D]."""
    T = x.shape[-2]
    specs = suffix_segments(cfg, T)
    # Q/K/V are per-token maps, so projecting once and slicing per window is exact
    q, k, v = project_qkv(x, p, cfg.heads)
    outs = []
    for s, spec in enumerate(specs):
        out, w = _segment_from_qkv(q, k, v, spec, p)
        if trace is not None:
            trace.add(s, w.data)
        outs.append(out)
    return pyramid_aggregate(outs, cfg, T)


def hta_patches(patches: Tensor, p: dict[str, Tensor], cfg: HTAConfig,
                trace: AttentionTrace | None = None) -> Tensor:
    """[B, T, K, D] -> [B, T, K, D], each spatial position independently."""
    x = nx.transpose(patches, (0, 2, 1, 3))
    y = temporal_attention(x, p, cfg, trace)
    return nx.transpose(y, (0, 2, 1, 3))


def hta_forward(grid: TokenGrid, params: AttentionParams, cfg: HTAConfig) -> TokenGrid:
    """Inner HTA map on a (normalised) token grid; the CLS row is returned unchanged."""
    if grid.T < cfg.T:
        raise ConfigError(f"clip has T={grid.T} frames but the largest segment is {cfg.T}")
    y = hta_patches(Tensor(grid.patches[None]), params.tensors(), cfg)
    return TokenGrid.from_parts(grid.cls.copy(), y.data[0])
