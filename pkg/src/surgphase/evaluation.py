"""Surgical phase metrics: video accuracy and phase-level precision, recall,
Jaccard and F1, with optional boundary relaxation.

Relaxed mode: a frame within ``10 * fps`` frames of a ground-truth phase
transition whose prediction equals the ground-truth phase on the other
side of that transition counts as correct. For a transition whose new
phase starts at frame ``b`` the window is ``[b - w, b + w)``; frames before
``b`` may predict the phase after it, frames from ``b`` on may predict the
phase before it. A frame inside several windows accepts any of them.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import InputError
from .model import PhaseModel, PhasePrediction
from .tokenizer import FrameSource, PatchConfig, sample_window

RELAX_SECONDS = 10.0
METRICS = ("precision", "recall", "jaccard", "f1")


@dataclass
class PhaseSequence:
    labels: np.ndarray
    fps: float = 1.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size == 0:
            raise InputError("phase sequence must be a non-empty 1-D label array")
        if (self.labels < 0).any():
            raise InputError("phase labels must be non-negative")
        if not self.fps > 0:
            raise InputError(f"fps must be positive, got {self.fps}")

    def __len__(self) -> int:
        return self.labels.size


@dataclass
class MetricReport:
    mode: str
    video_accuracy: float
    phases: list[int]                          # phase ids present in gt or pred
    per_phase: dict[str, dict[int, float]]     # metric -> phase -> value
    macro: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "video_accuracy": self.video_accuracy,
            "macro": dict(self.macro),
            "per_phase": {m: {str(k): v for k, v in d.items()} for m, d in self.per_phase.items()},
        }


@dataclass
class Confusion:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


def relax_window_frames(fps: float, seconds: float = RELAX_SECONDS) -> int:
    return int(math.floor(seconds * fps + 1e-9))


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, PhaseSequence) else np.asarray(x, dtype=np.int64)


def confusion(gt, pred, num_classes: int | None = None) -> Confusion:
    g, p = _labels(gt), _labels(pred)
    if g.shape != p.shape:
        raise InputError(f"ground truth has {g.size} frames, prediction has {p.size}")
    if (p < 0).any():
        raise InputError("predicted labels must be non-negative")
    n = int(max(g.max(initial=0), p.max(initial=0))) + 1
    n = max(n, num_classes or 0)
    tp, fp, fn = _kernels.active.confusion_counts(np.ascontiguousarray(g), np.ascontiguousarray(p), n)
    return Confusion(tp, fp, fn)


def relax_predictions(gt: PhaseSequence, pred) -> np.ndarray:
    """Prediction labels with boundary-tolerated frames replaced by the ground truth."""
    p = np.ascontiguousarray(_labels(pred))
    return _kernels.active.relax_predictions(np.ascontiguousarray(gt.labels), p,
                                             relax_window_frames(gt.fps))


def _ratio(a: int, b: int) -> float:
    return a / b if b > 0 else 0.0


def metrics(gt: PhaseSequence, pred, mode: str = "unrelaxed") -> MetricReport:
    if mode not in ("relaxed", "unrelaxed"):
        raise ValueError(f"mode must be 'relaxed' or 'unrelaxed', got {mode!r}")
    p = _labels(pred)
    if p.shape != gt.labels.shape:
        raise InputError(f"ground truth has {gt.labels.size} frames, prediction has {p.size}")
    if mode == "relaxed":
        p = relax_predictions(gt, p)
    c = confusion(gt.labels, p)
    present = [k for k in range(c.tp.size) if c.tp[k] + c.fp[k] + c.fn[k] > 0]
    per = {m: {} for m in METRICS}
    for k in present:
        tp, fp, fn = int(c.tp[k]), int(c.fp[k]), int(c.fn[k])
        prec, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        per["precision"][k] = prec
        per["recall"][k] = rec
        per["jaccard"][k] = _ratio(tp, tp + fp + fn)
        per["f1"][k] = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    macro = {m: float(np.mean([per[m][k] for k in present])) for m in METRICS}
    acc = float(np.mean(gt.labels == p))
    return MetricReport(mode, acc, present, per, macro)


def summarize(reports: Sequence[MetricReport]) -> dict[str, dict[str, float]]:
    """Mean and sample std across videos of accuracy and the macro metrics."""
    keys = ("video_accuracy",) + METRICS
    out = {}
    for key in keys:
        vals = np.array([r.video_accuracy if key == "video_accuracy" else r.macro[key] for r in reports])
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[key] = {"mean": float(vals.mean()), "std": std}
    return out


def format_summary(summary: dict[str, dict[str, float]]) -> str:
    return "  ".join(f"{k}={100 * v['mean']:.1f} ± {100 * v['std']:.1f}" for k, v in summary.items())


# ----------------------------------------------------------------------------
# streaming evaluation
# ----------------------------------------------------------------------------

@dataclass
class VideoEvaluation:
    unrelaxed: MetricReport
    relaxed: MetricReport
    predictions: list[PhasePrediction]


def predict_video(model: Callable[[np.ndarray], np.ndarray], source: FrameSource, patch: PatchConfig,
                  batch_size: int = 32) -> list[PhasePrediction]:
    """One causal prediction per frame; frame t only ever reads frames <= t."""
    n = len(source)
    preds: list[PhasePrediction] = []
    for start in range(0, n, batch_size):
        targets = range(start, min(start + batch_size, n))
        vols = np.stack([source.read(sample_window(n, t, patch)) for t in targets])
        logits = np.asarray(model(vols))
        for t, z in zip(targets, logits):
            preds.append(PhasePrediction(z, int(np.argmax(z)), t))
    return preds


def evaluate_video(model, source: FrameSource, gt: PhaseSequence,
                   patch: PatchConfig | None = None, batch_size: int = 32) -> VideoEvaluation:
    """Predict every frame of a video causally, then score in both modes."""
    if patch is None:
        if not isinstance(model, PhaseModel):
            raise ValueError("patch config required for a bare callable model")
        patch = model.cfg.patch
    if len(source) != len(gt):
        raise InputError(f"video has {len(source)} frames but {len(gt)} annotations")
    preds = predict_video(model, source, patch, batch_size)
    labels = np.array([p.phase for p in preds])
    return VideoEvaluation(metrics(gt, labels, "unrelaxed"), metrics(gt, labels, "relaxed"), preds)


# ----------------------------------------------------------------------------
# CSV files
# ----------------------------------------------------------------------------

def write_annotations(path: str | Path, labels: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "phase_id"])
        w.writerows((i, int(y)) for i, y in enumerate(labels))


def _read_indexed(path: str | Path, index_col: str, value_col: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or index_col not in rows[0] or value_col not in rows[0]:
        raise InputError(f"{path}: expected columns {index_col},{value_col}")
    try:
        idx = np.array([int(r[index_col]) for r in rows], dtype=np.int64)
        val = np.array([int(r[value_col]) for r in rows], dtype=np.int64)
    except (TypeError, ValueError) as err:
        raise InputError(f"{path}: {err}") from err
    return idx, val


def read_annotations(path: str | Path, fps: float = 1.0) -> PhaseSequence:
    idx, val = _read_indexed(path, "frame_index", "phase_id")
    if not np.array_equal(np.sort(idx), np.arange(idx.size)):
        raise InputError(f"{path}: frame indices must cover 0..{idx.size - 1} exactly once")
    out = np.empty_like(val)
    out[idx] = val
    return PhaseSequence(out, fps)


def read_predictions(path: str | Path, length: int) -> np.ndarray:
    """Predicted phase per frame from a prediction CSV covering frames 0..length-1."""
    idx, val = _read_indexed(path, "target_index", "phase")
    if not np.array_equal(np.sort(idx), np.arange(length)):
        raise InputError(f"{path}: predictions must cover frames 0..{length - 1} exactly once")
    out = np.empty(length, dtype=np.int64)
    out[idx] = val
    return out
