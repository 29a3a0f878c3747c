"""Frame sampling, patch tokenisation and position embeddings.

Token grids are laid out CLS first, then frame-major: row ``1 + t*K + k``
holds spatial patch ``k`` of sampled frame ``t``. The target frame is
always the last sampled frame (``t = T - 1``).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import numerics as nx
from .errors import FormatError
from .numerics import DimensionError, Tensor


@dataclass(frozen=True)
class PatchConfig:
    T: int = 8
    R: int = 4
    H: int = 16
    W: int = 16
    C_in: int = 3
    P: int = 4
    D: int = 32

    def __post_init__(self):
        if self.T < 1 or self.R < 1:
            raise ValueError(f"T and R must be >= 1 (got T={self.T}, R={self.R})")
        if min(self.H, self.W, self.C_in, self.P, self.D) < 1:
            raise ValueError("H, W, C_in, P and D must be positive")
        if self.H % self.P or self.W % self.P:
            raise ValueError(f"patch size {self.P} must divide frame size {self.H}x{self.W}")

    @property
    def K(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def patch_dim(self) -> int:
        return self.C_in * self.P * self.P


@dataclass
class FrameVolume:
    frames: np.ndarray          # T x C x H x W
    source_indices: np.ndarray  # T absolute frame ids, ascending
    target_index: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        if self.frames.ndim != 4 or self.frames.shape[0] != self.source_indices.shape[0]:
            raise DimensionError("frames must be T x C x H x W with one source index per frame")
        if self.source_indices[-1] != self.target_index:
            raise ValueError("last source index must be the target frame")
        if np.any(np.diff(self.source_indices) < 0) or self.source_indices.max() > self.target_index:
            raise ValueError("source indices must be non-decreasing and never pass the target")


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (T*K + 1) x D, row 0 = CLS
    T: int
    K: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.T * self.K + 1:
            raise DimensionError(f"token grid needs {self.T * self.K + 1} rows, got {self.tokens.shape[0]}")

    @property
    def D(self) -> int:
        return self.tokens.shape[1]

    @property
    def cls(self) -> np.ndarray:
        return self.tokens[0]

    @property
    def patches(self) -> np.ndarray:
        """T x K x D view of the non-CLS tokens."""
        return self.tokens[1:].reshape(self.T, self.K, self.D)

    @classmethod
    def from_parts(cls, cls_row: np.ndarray, patches: np.ndarray) -> "TokenGrid":
        T, K, D = patches.shape
        return cls(np.concatenate([cls_row.reshape(1, D), patches.reshape(T * K, D)]), T, K)


@dataclass
class EmbeddingParams:
    patch_w: np.ndarray      # patch_dim x D
    patch_b: np.ndarray      # D
    cls_token: np.ndarray    # 1 x D
    pos_spatial: np.ndarray  # K x D
    pos_temporal: np.ndarray  # T_train x D
    pos_cls: np.ndarray      # 1 x D


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

def sample_window(video_length: int, target_index: int, cfg: PatchConfig) -> list[int]:
    """T frame ids spaced R apart and ending at the target; clamped at frame 0."""
    if not 0 <= target_index < video_length:
        raise IndexError(f"target frame {target_index} outside video of length {video_length}")
    return [max(target_index - cfg.R * (cfg.T - 1 - j), 0) for j in range(cfg.T)]


class FrameSource(Protocol):
    def __len__(self) -> int: ...

    def read(self, indices: list[int]) -> np.ndarray: ...


class ArrayFrameSource:
    """Frames held in memory as an N x C x H x W array."""

    def __init__(self, frames: np.ndarray):
        self.frames = np.asarray(frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def read(self, indices: list[int]) -> np.ndarray:
        return np.asarray(self.frames[np.asarray(indices, dtype=np.int64)], dtype=np.float64)


def build_volume(source: FrameSource, target_index: int, cfg: PatchConfig) -> FrameVolume:
    idx = sample_window(len(source), target_index, cfg)
    return FrameVolume(source.read(idx), np.asarray(idx), target_index)


# ----------------------------------------------------------------------------
# patches
# ----------------------------------------------------------------------------

def _check_frames(frames: np.ndarray, cfg: PatchConfig) -> None:
    if frames.shape[-3:] != (cfg.C_in, cfg.H, cfg.W):
        raise DimensionError(f"frame shape {frames.shape[-3:]} does not match "
                             f"config {(cfg.C_in, cfg.H, cfg.W)}")


def patchify_frames(frames: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """[..., C, H, W] -> [..., K, C*P*P], patches raster-ordered, channel-major inside."""
    _check_frames(frames, cfg)
    lead = frames.shape[:-3]
    P, gh, gw = cfg.P, cfg.H // cfg.P, cfg.W // cfg.P
    x = frames.reshape(*lead, cfg.C_in, gh, P, gw, P)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, cfg.patch_dim))


def unpatchify_frames(patches: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    lead = patches.shape[:-2]
    P, gh, gw = cfg.P, cfg.H // cfg.P, cfg.W // cfg.P
    n = len(lead)
    x = patches.reshape(*lead, gh, gw, cfg.C_in, P, P)
    x = x.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return np.ascontiguousarray(x.reshape(*lead, cfg.C_in, cfg.H, cfg.W))


def patchify(vol: FrameVolume, cfg: PatchConfig) -> np.ndarray:
    """T x K x (C*P*P) patch vectors of one frame volume."""
    return patchify_frames(vol.frames, cfg)


# ----------------------------------------------------------------------------
# embedding
# ----------------------------------------------------------------------------

def init_embedding(cfg: PatchConfig, rng: np.random.Generator, std: float = 0.02) -> EmbeddingParams:
    D = cfg.D
    return EmbeddingParams(
        patch_w=nx.truncated_normal(rng, (cfg.patch_dim, D), std),
        patch_b=np.zeros(D),
        cls_token=np.zeros((1, D)),
        pos_spatial=nx.truncated_normal(rng, (cfg.K, D), std),
        pos_temporal=nx.truncated_normal(rng, (cfg.T, D), std),
        pos_cls=nx.truncated_normal(rng, (1, D), std),
    )


def embed_batch(frames: np.ndarray, p: dict[str, Tensor], cfg: PatchConfig) -> tuple[Tensor, Tensor]:
    """Embed frames [B, T, C, H, W] into (cls [B, D], patches [B, T, K, D]).

    ``p`` maps the EmbeddingParams field names to Tensors.
    """
    if p["pos_temporal"].shape[0] != frames.shape[1]:
        raise DimensionError(f"temporal position table has {p['pos_temporal'].shape[0]} rows "
                             f"but the volume has {frames.shape[1]} frames; resize it first")
    B, T = frames.shape[:2]
    patches = patchify_frames(frames, cfg)
    x = nx.linear(patches, p["patch_w"], p["patch_b"])
    x = nx.add(x, nx.reshape(p["pos_spatial"], (1, 1, cfg.K, cfg.D)))
    x = nx.add(x, nx.reshape(p["pos_temporal"], (1, T, 1, cfg.D)))
    cls = nx.broadcast_to(nx.add(p["cls_token"], p["pos_cls"]), (B, cfg.D))
    return cls, x


def embed(vol: FrameVolume, params: EmbeddingParams, cfg: PatchConfig) -> TokenGrid:
    p = {k: Tensor(v) for k, v in vars(params).items()}
    cls, patches = embed_batch(vol.frames[None], p, cfg)
    return TokenGrid.from_parts(cls.data[0], patches.data[0])


def resize_temporal_positions(pos_temporal: np.ndarray, T_test: int) -> np.ndarray:
    """Linearly resample a T_train x D table to T_test rows, end points aligned."""
    pos_temporal = np.asarray(pos_temporal, dtype=np.float64)
    T_train = pos_temporal.shape[0]
    if T_test < 1:
        raise ValueError(f"T_test must be >= 1, got {T_test}")
    if T_train < 2:
        raise ValueError("need at least two temporal positions to interpolate")
    if T_test == T_train:
        return pos_temporal.copy()
    src = np.arange(T_train, dtype=np.float64)
    dst = np.linspace(0.0, T_train - 1.0, T_test) if T_test > 1 else np.array([T_train - 1.0])
    return np.stack([np.interp(dst, src, pos_temporal[:, c]) for c in range(pos_temporal.shape[1])], axis=1)


# ----------------------------------------------------------------------------
# FVOL1 files
# ----------------------------------------------------------------------------

_FVOL_HEADER = struct.Struct("<5I")


def save_fvol(path: str | Path, vol: FrameVolume) -> None:
    T, C, H, W = vol.frames.shape
    with open(path, "wb") as fh:
        fh.write(_FVOL_HEADER.pack(T, C, H, W, vol.target_index & 0xFFFFFFFF))
        fh.write(vol.source_indices.astype("<u8").tobytes())
        fh.write(vol.frames.astype("<f4").tobytes())


def load_fvol(path: str | Path) -> FrameVolume:
    raw = Path(path).read_bytes()
    if len(raw) < _FVOL_HEADER.size:
        raise FormatError(f"{path}: truncated FVOL1 header")
    T, C, H, W, target_low = _FVOL_HEADER.unpack_from(raw, 0)
    off = _FVOL_HEADER.size
    n_frames = T * C * H * W
    if len(raw) != off + 8 * T + 4 * n_frames:
        raise FormatError(f"{path}: payload size does not match header {T}x{C}x{H}x{W}")
    idx = np.frombuffer(raw, dtype="<u8", count=T, offset=off).astype(np.int64)
    frames = np.frombuffer(raw, dtype="<f4", count=n_frames, offset=off + 8 * T).reshape(T, C, H, W)
    if T == 0 or (int(idx[-1]) & 0xFFFFFFFF) != target_low:
        raise FormatError(f"{path}: target index does not match the last source index")
    try:
        return FrameVolume(frames.astype(np.float64), idx, int(idx[-1]))
    except ValueError as err:
        raise FormatError(f"{path}: {err}") from err
