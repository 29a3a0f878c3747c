"""Transformer blocks, the phase classifier and SGFW1 weight files.

Each block applies three pre-norm residual sub-layers::

    X_t  = X    + HTA(LN1(X))      (patch tokens only; CLS passes through)
    X_st = X_t  + ASA(LN2(X_t))
    X'   = X_st + MLP(LN3(X_st))

Parameters live in a flat ``dict[str, np.ndarray]`` with dotted names
(``embed.*``, ``blocks.<i>.*``, ``norm.*``, ``head.*``).
"""
from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import numerics as nx
from .asa import Aggregation, ASAConfig, spatial_attention
from .errors import ConfigError, FormatError
from .hta import AttentionTrace, HTAConfig, default_segment_lengths, hta_patches
from .numerics import DimensionError, Tensor
from .tokenizer import FrameVolume, PatchConfig, TokenGrid, embed_batch, resize_temporal_positions

ModelParams = dict  # name -> np.ndarray, insertion-ordered


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    D: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    num_phases: int = 7
    T: int = 16
    R: int = 4
    H: int = 32
    W: int = 32
    C_in: int = 3
    P: int = 8
    m: int = 3
    segment_lengths: tuple[int, ...] | None = None
    alpha: float = 0.5
    beta: float = 0.5
    aggregation: Aggregation = Aggregation.MA

    def __post_init__(self):
        if self.segment_lengths is None:
            object.__setattr__(self, "segment_lengths", default_segment_lengths(self.T, self.m))
        else:
            object.__setattr__(self, "segment_lengths", tuple(int(x) for x in self.segment_lengths))
        object.__setattr__(self, "m", len(self.segment_lengths))
        if self.L < 0 or self.mlp_ratio < 1 or self.num_phases < 1:
            raise ConfigError("L >= 0, mlp_ratio >= 1 and num_phases >= 1 are required")
        if self.segment_lengths[-1] != self.T:
            raise ConfigError(f"largest segment length {self.segment_lengths[-1]} must equal T={self.T}")
        try:
            # building the sub-configs runs their validation
            asa = self.asa
            _ = (self.patch, self.hta)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        object.__setattr__(self, "aggregation", asa.aggregation)

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.T, self.R, self.H, self.W, self.C_in, self.P, self.D)

    @property
    def hta(self) -> HTAConfig:
        return HTAConfig(self.segment_lengths, self.alpha, self.beta, self.heads, self.D)

    @property
    def asa(self) -> ASAConfig:
        return ASAConfig(self.heads, self.D, self.aggregation)

    @property
    def K(self) -> int:
        return self.patch.K

    def replace(self, **changes) -> "ModelConfig":
        if "T" in changes and "segment_lengths" not in changes:
            changes["segment_lengths"] = default_segment_lengths(changes["T"], changes.get("m", self.m))
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "segment_lengths":
                kw[f.name] = tuple(int(x) for x in str(v).split(",") if x.strip())
            elif f.name in ("alpha", "beta"):
                kw[f.name] = float(v)
            elif f.name == "aggregation":
                kw[f.name] = v
            else:
                kw[f.name] = int(v)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**kw)


@dataclass
class PhasePrediction:
    logits: np.ndarray
    phase: int
    target_index: int


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, hid = cfg.D, cfg.D * cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "embed.patch_w": (cfg.patch.patch_dim, D),
        "embed.patch_b": (D,),
        "embed.cls_token": (1, D),
        "embed.pos_spatial": (cfg.K, D),
        "embed.pos_temporal": (cfg.T, D),
        "embed.pos_cls": (1, D),
    }
    for i in range(cfg.L):
        b = f"blocks.{i}."
        for ln in ("ln1", "ln2", "ln3"):
            shapes[b + ln + ".gamma"] = (D,)
            shapes[b + ln + ".beta"] = (D,)
        for att in ("hta", "asa"):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"{b}{att}.{w}"] = (D, D)
            shapes[f"{b}{att}.bo"] = (D,)
        shapes[b + "mlp.w1"] = (D, hid)
        shapes[b + "mlp.b1"] = (hid,)
        shapes[b + "mlp.w2"] = (hid, D)
        shapes[b + "mlp.b2"] = (D,)
    shapes["norm.gamma"] = (D,)
    shapes["norm.beta"] = (D,)
    shapes["head.w"] = (D, cfg.num_phases)
    shapes["head.b"] = (cfg.num_phases,)
    return shapes


_ZERO_INIT = {"beta", "cls_token", "patch_b", "bo", "b1", "b2", "b"}


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    """Truncated-normal projections and position tables; zero biases and CLS; unit LN gains."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            params[name] = np.ones(shape)
        elif leaf in _ZERO_INIT:
            params[name] = np.zeros(shape)
        else:
            params[name] = nx.truncated_normal(rng, shape, std)
    return params


def param_depth(name: str, L: int) -> int:
    """Layer-decay depth: embedding 0, block i -> i+1, final norm and head L+1."""
    if name.startswith("embed."):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return L + 1


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    if list(params) != list(expected):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise FormatError(f"parameter names do not match config (missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise FormatError(f"{name}: shape {params[name].shape} != expected {shape}")


def _sub(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ----------------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------------

def _mlp(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return nx.linear(nx.gelu(nx.linear(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def _ln(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return nx.layer_norm(x, p[name + ".gamma"], p[name + ".beta"])


def block_forward_batch(cls: Tensor, patches: Tensor, bp: dict[str, Tensor], cfg: ModelConfig,
                        trace: AttentionTrace | None = None) -> tuple[Tensor, Tensor]:
    """One block on cls [B, D] and patches [B, T, K, D]."""
    patches = nx.add(patches, hta_patches(_ln(patches, bp, "ln1"), _sub(bp, "hta."), cfg.hta, trace))

    c_out, p_out = spatial_attention(_ln(cls, bp, "ln2"), _ln(patches, bp, "ln2"), _sub(bp, "asa."), cfg.asa)
    cls, patches = nx.add(cls, c_out), nx.add(patches, p_out)

    mp = _sub(bp, "mlp.")
    cls = nx.add(cls, _mlp(_ln(cls, bp, "ln3"), mp))
    patches = nx.add(patches, _mlp(_ln(patches, bp, "ln3"), mp))
    return cls, patches


def forward_batch(frames: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig,
                  trace: AttentionTrace | None = None) -> Tensor:
    """frames [B, T, C, H, W] -> logits [B, num_phases]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 5 or frames.shape[1] != cfg.T:
        raise DimensionError(f"expected frames [B, {cfg.T}, C, H, W], got {frames.shape}")
    cls, patches = embed_batch(frames, _sub(params, "embed."), cfg.patch)
    for i in range(cfg.L):
        if trace is not None:
            trace.layer = i
        cls, patches = block_forward_batch(cls, patches, _sub(params, f"blocks.{i}."), cfg, trace)
    cls = nx.layer_norm(cls, params["norm.gamma"], params["norm.beta"])
    return nx.linear(cls, params["head.w"], params["head.b"])


def as_tensors(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def predict_logits(frames: np.ndarray, params: ModelParams, cfg: ModelConfig,
                   batch_size: int = 64) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    pt = as_tensors(params)
    chunks = [forward_batch(frames[i:i + batch_size], pt, cfg).data
              for i in range(0, frames.shape[0], batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros((0, cfg.num_phases))


def block_forward(grid: TokenGrid, block_params: dict[str, np.ndarray], cfg: ModelConfig) -> TokenGrid:
    """Apply one block to a single token grid. ``block_params`` uses block-local names."""
    if grid.D != cfg.D or grid.K != cfg.K:
        raise DimensionError(f"grid is {grid.T}x{grid.K}x{grid.D}, config expects K={cfg.K}, D={cfg.D}")
    bp = {k: Tensor(v) for k, v in block_params.items()}
    c, p = block_forward_batch(Tensor(grid.cls[None]), Tensor(grid.patches[None]), bp, cfg)
    return TokenGrid.from_parts(c.data[0], p.data[0])


def forward(vol: FrameVolume, params: ModelParams, cfg: ModelConfig) -> PhasePrediction:
    logits = forward_batch(vol.frames[None], as_tensors(params), cfg).data[0]
    return PhasePrediction(logits, int(np.argmax(logits)), int(vol.target_index))


def adapt_temporal(params: ModelParams, cfg: ModelConfig, T_new: int) -> tuple[ModelParams, ModelConfig]:
    """Params and config for clips of T_new frames (temporal positions resized)."""
    out = dict(params)
    out["embed.pos_temporal"] = resize_temporal_positions(params["embed.pos_temporal"], T_new)
    return out, cfg.replace(T=T_new)


@dataclass
class PhaseModel:
    """Config plus parameters; the unit the trainer and evaluator pass around."""

    cfg: ModelConfig
    params: ModelParams

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "PhaseModel":
        return cls(cfg, init_params(cfg, seed))

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        return predict_logits(frames, self.params, self.cfg)


# ----------------------------------------------------------------------------
# SGFW1 weight files
# ----------------------------------------------------------------------------

_MAGIC = b"SGFW1"


def config_to_text(d: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


def dump_params(params: ModelParams, cfg: ModelConfig) -> bytes:
    check_params(params, cfg)
    buf = io.BytesIO()
    header = config_to_text(cfg.to_dict()).encode()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_params(path: str | Path, params: ModelParams, cfg: ModelConfig) -> None:
    Path(path).write_bytes(dump_params(params, cfg))


def _take(raw: bytes, off: int, n: int, path) -> tuple[bytes, int]:
    if off + n > len(raw):
        raise FormatError(f"{path}: truncated weight file")
    return raw[off:off + n], off + n


def _u32(raw: bytes, off: int, path) -> tuple[int, int]:
    b, off = _take(raw, off, 4, path)
    return struct.unpack("<I", b)[0], off


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelParams]:
    raw = Path(path).read_bytes()
    if raw[:5] != _MAGIC:
        raise FormatError(f"{path}: not an SGFW1 weight file")
    off = 5
    hlen, off = _u32(raw, off, path)
    text, off = _take(raw, off, hlen, path)
    try:
        cfg = ModelConfig.from_dict(parse_config_text(text.decode()))
    except (ValueError, UnicodeDecodeError) as err:
        raise FormatError(f"{path}: bad config header: {err}") from err
    count, off = _u32(raw, off, path)
    params: ModelParams = {}
    for _ in range(count):
        nlen, off = _u32(raw, off, path)
        name, off = _take(raw, off, nlen, path)
        ndim, off = _u32(raw, off, path)
        dims, off = _take(raw, off, 4 * ndim, path)
        shape = struct.unpack(f"<{ndim}I", dims)
        payload, off = _take(raw, off, 8 * int(np.prod(shape)), path)
        params[name.decode()] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes after parameter records")
    check_params(params, cfg)
    return cfg, params


def load_params(path: str | Path, cfg: ModelConfig | None = None) -> ModelParams:
    """Read an SGFW1 file; with ``cfg`` given, the stored config must match it."""
    stored, params = load_checkpoint(path)
    if cfg is not None and stored != cfg:
        diff = [k for k, v in cfg.to_dict().items() if stored.to_dict().get(k) != v]
        raise FormatError(f"{path}: weight file config differs from expected in {diff}")
    return params


def prediction_csv_rows(preds: Iterable[PhasePrediction]) -> list[str]:
    rows = []
    for p in preds:
        rows.append(",".join([str(p.target_index), str(p.phase)] + [repr(float(x)) for x in p.logits]))
    return rows


def prediction_csv_header(num_phases: int) -> str:
    return ",".join(["target_index", "phase"] + [f"logit_{i}" for i in range(num_phases)])
