"""AdamW with layer-wise learning-rate decay, a synthetic phase-video generator
and the training loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import TrainingError
from .model import PhaseModel, as_tensors, forward_batch, param_depth
from .tokenizer import ArrayFrameSource, FrameVolume, PatchConfig, build_volume


@dataclass
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    layer_decay: float = 0.75
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str) -> bool:
    """Weight decay applies to projection matrices only."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in {"patch_w", "wq", "wk", "wv", "wo", "w1", "w2", "w"}


def layer_lrs(depths: dict[str, int], cfg: OptimConfig) -> dict[str, float]:
    top = max(depths.values())
    return {k: cfg.lr * cfg.layer_decay ** (top - d) for k, d in depths.items()}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               cfg: OptimConfig, depths: dict[str, int]) -> None:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    lrs = layer_lrs(depths, cfg)
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        lr = lrs[name]
        if cfg.weight_decay and decays(name):
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------

@dataclass
class SyntheticDatasetSpec:
    num_videos: int = 4
    frames_per_video: int = 210
    num_phases: int = 7
    noise_std: float = 0.1
    seed: int = 0
    windows_per_video: int = 50


def phase_patterns(num_phases: int, C: int, seed: int) -> np.ndarray:
    """Per-phase, per-channel intensity levels [num_phases, C].

    The channel-average of phase p is exactly p / max(num_phases - 1, 1); a
    zero-mean channel tint makes the patterns differ in more than one number.
    """
    rng = np.random.default_rng([seed, 7])
    base = np.arange(num_phases) / max(num_phases - 1, 1)
    tint = rng.uniform(-0.25, 0.25, size=(num_phases, C))
    tint -= tint.mean(axis=1, keepdims=True)
    return base[:, None] + tint


def synthesize_videos(spec: SyntheticDatasetSpec, patch: PatchConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """Whole videos as (frames [N, C, H, W], labels [N]); phases run 0..P-1 in order."""
    if spec.frames_per_video < spec.num_phases:
        raise ValueError("each video needs at least one frame per phase")
    rng = np.random.default_rng(spec.seed)
    levels = phase_patterns(spec.num_phases, patch.C_in, spec.seed)
    videos = []
    for _ in range(spec.num_videos):
        n, k = spec.frames_per_video, spec.num_phases
        # random contiguous spans, each at least one frame long
        cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False)) if k > 1 else np.array([], int)
        labels = np.repeat(np.arange(k), np.diff(np.concatenate([[0], cuts, [n]])))
        frames = np.broadcast_to(levels[labels][:, :, None, None], (n, patch.C_in, patch.H, patch.W)).copy()
        if spec.noise_std > 0:
            frames += rng.normal(0.0, spec.noise_std, size=frames.shape)
        videos.append((frames, labels.astype(np.int64)))
    return videos


def window_targets(n_frames: int, count: int | None) -> np.ndarray:
    if count is None or count >= n_frames:
        return np.arange(n_frames)
    return np.unique(np.linspace(0, n_frames - 1, count).round().astype(np.int64))


def windows_from_videos(videos, patch: PatchConfig, windows_per_video: int | None) -> list[tuple[FrameVolume, int]]:
    out = []
    for frames, labels in videos:
        src = ArrayFrameSource(frames)
        for t in window_targets(len(labels), windows_per_video):
            out.append((build_volume(src, int(t), patch), int(labels[t])))
    return out


def generate_synthetic(spec: SyntheticDatasetSpec, patch: PatchConfig) -> list[tuple[FrameVolume, int]]:
    """Sliding windows over synthetic videos, labelled with the target frame's phase."""
    return windows_from_videos(synthesize_videos(spec, patch), patch, spec.windows_per_video)


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def _stack(data: Sequence[tuple[FrameVolume, int]]) -> tuple[np.ndarray, np.ndarray]:
    frames = np.stack([v.frames for v, _ in data])
    labels = np.asarray([y for _, y in data], dtype=np.int64)
    return frames, labels


def train_step(model: PhaseModel, frames: np.ndarray, labels: np.ndarray, state: AdamState,
               cfg: OptimConfig, depths: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """One AdamW step on a batch; returns per-sample losses and logits before the update."""
    leaves = as_tensors(model.params, requires_grad=True)
    with nx.Tape() as tape:
        logits = forward_batch(frames, leaves, model.cfg)
        loss = nx.cross_entropy(logits, labels)
    if not math.isfinite(float(loss.data)):
        raise TrainingError("loss diverged (non-finite)")
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    adamw_step(model.params, grads, state, cfg, depths)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(len(labels)), labels], z


def train(model: PhaseModel, data: Sequence[tuple[FrameVolume, int]], cfg: OptimConfig,
          log_path: str | Path | None = None,
          on_epoch_end: Callable[[EpochStats], bool] | None = None) -> list[EpochStats]:
    """Minimise cross-entropy over ``data``; updates ``model.params`` in place.

    Per-epoch loss and accuracy are measured on the training pass itself
    (each sample scored just before the step that uses it). Training stops
    early when ``on_epoch_end`` returns True.
    """
    if not data:
        raise ValueError("training data is empty")
    frames, labels = _stack(data)
    n = len(labels)
    depths = {k: param_depth(k, model.cfg.L) for k in model.params}
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    report: list[EpochStats] = []
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = np.zeros(n)
            correct = np.zeros(n, dtype=bool)
            for i in range(0, n, cfg.batch_size):
                idx = order[i:i + cfg.batch_size]
                l, z = train_step(model, frames[idx], labels[idx], state, cfg, depths)
                losses[idx] = l
                correct[idx] = z.argmax(axis=1) == labels[idx]
            stats = EpochStats(epoch, float(losses.sum() / n), float(correct.mean()))
            report.append(stats)
            if log:
                log.write(json.dumps(asdict(stats)) + "\n")
            if on_epoch_end is not None and on_epoch_end(stats):
                break
    finally:
        if log:
            log.close()
    return report


def accuracy(model: PhaseModel, data: Sequence[tuple[FrameVolume, int]]) -> float:
    frames, labels = _stack(data)
    return float((model(frames).argmax(axis=1) == labels).mean())
