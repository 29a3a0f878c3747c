"""Command-line entry point: ``surgphase {train,predict,evaluate,inspect-attention,gen-synthetic}``.

Errors print one line ``error[<kind>]: <message>`` on stderr and exit with
a per-kind status code (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AggregationError, ConfigError, FormatError, InputError, SegmentError, TrainingError
from .evaluation import (
    evaluate_video, metrics, predict_video, read_annotations, read_predictions,
    summarize, write_annotations,
)
from .hta import AttentionTrace
from .model import (
    ModelConfig, PhaseModel, PhasePrediction, adapt_temporal, as_tensors, forward_batch, load_checkpoint,
    parse_config_text, prediction_csv_header, prediction_csv_rows, save_params,
)
from .numerics import DimensionError
from .tokenizer import ArrayFrameSource, FrameVolume, build_volume, load_fvol, save_fvol
from .trainer import (
    OptimConfig, SyntheticDatasetSpec, synthesize_videos, train, windows_from_videos,
)

log = logging.getLogger("surgphase")

EXIT_CODES = {"config": 2, "format": 3, "training": 4, "input": 5}

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_OPTIM_KEYS = {f.name for f in dataclasses.fields(OptimConfig)}
_DATA_KEYS = {"num_videos", "frames_per_video", "noise_std", "windows_per_video", "data_seed"}
_RUN_KEYS = {"data_dir", "out", "report", "threads", "window_stride"}
KNOWN_KEYS = _MODEL_KEYS | _OPTIM_KEYS | _DATA_KEYS | _RUN_KEYS


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    data_dir: str | None = None
    out: str = "weights.sgfw"
    report: str | None = None
    threads: int = 1
    window_stride: int = 0

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunConfig":
        unknown = set(kv) - KNOWN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            model = ModelConfig.from_dict({k: v for k, v in kv.items() if k in _MODEL_KEYS})
            optim_kw = {}
            for f in dataclasses.fields(OptimConfig):
                if f.name in kv:
                    optim_kw[f.name] = int(kv[f.name]) if f.type in (int, "int") else float(kv[f.name])
            optim = OptimConfig(**optim_kw)
            data = SyntheticDatasetSpec(
                num_videos=int(kv.get("num_videos", 4)),
                frames_per_video=int(kv.get("frames_per_video", 210)),
                num_phases=model.num_phases,
                noise_std=float(kv.get("noise_std", 0.1)),
                seed=int(kv.get("data_seed", 0)),
                windows_per_video=int(kv.get("windows_per_video", 50)),
            )
            run = cls(model, optim, data, kv.get("data_dir") or None, kv.get("out", "weights.sgfw"),
                      kv.get("report") or None, int(kv.get("threads", 1)), int(kv.get("window_stride", 0)))
        except ConfigError:
            raise
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        run.validate()
        return run

    def validate(self) -> None:
        o, d = self.optim, self.data
        if o.lr < 0 or o.epochs < 0 or o.batch_size < 1 or not 0 < o.layer_decay <= 1:
            raise ConfigError("need lr >= 0, epochs >= 0, batch_size >= 1, 0 < layer_decay <= 1")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if d.num_videos < 1 or d.frames_per_video < d.num_phases or d.noise_std < 0:
            raise ConfigError("need num_videos >= 1, frames_per_video >= num_phases, noise_std >= 0")
        if self.threads < 1 or self.window_stride < 0:
            raise ConfigError("threads must be >= 1 and window_stride >= 0")


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    kv: dict[str, str] = {}
    if path:
        kv.update(parse_config_text(_read_text(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    return RunConfig.from_mapping(kv)


def _read_text(path: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p.read_text()


def _require(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {path}")
    return p


@contextlib.contextmanager
def _thread_limit(n: int):
    # the numba kernels are serial; only BLAS/OpenMP pools need capping
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ----------------------------------------------------------------------------
# data helpers
# ----------------------------------------------------------------------------

def _load_video(path: Path) -> np.ndarray:
    return load_fvol(path).frames


def _video_pairs(data_dir: str) -> list[tuple[Path, Path]]:
    root = Path(data_dir)
    pairs = [(v, v.with_suffix(".csv")) for v in sorted(root.glob("video_*.fvol"))]
    if not pairs:
        raise InputError(f"{data_dir}: no video_*.fvol files")
    for v, a in pairs:
        if not a.is_file():
            raise InputError(f"{v}: missing annotation file {a.name}")
    return pairs


def _training_data(run: RunConfig):
    patch = run.model.patch
    if run.data_dir is None:
        videos = synthesize_videos(run.data, patch)
    else:
        videos = []
        for v, a in _video_pairs(run.data_dir):
            frames = _load_video(v)
            labels = read_annotations(a).labels
            if len(labels) != len(frames):
                raise InputError(f"{v}: {len(frames)} frames but {len(labels)} annotations")
            if labels.max() >= run.model.num_phases:
                raise InputError(f"{a}: phase id {labels.max()} >= num_phases={run.model.num_phases}")
            videos.append((frames, labels))
    return windows_from_videos(videos, patch, run.data.windows_per_video)


def _model_for_T(weights: str, T: int | None) -> PhaseModel:
    cfg, params = load_checkpoint(_require(weights))
    if T is not None and T != cfg.T:
        params, cfg = adapt_temporal(params, cfg, T)
    return PhaseModel(cfg, params)


def _write_predictions(path: str | None, preds, num_phases: int) -> None:
    text = "\n".join([prediction_csv_header(num_phases), *prediction_csv_rows(preds)]) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, indent=1) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set + _flag_overrides(args))
    data = _training_data(run)
    model = PhaseModel.init(run.model, run.optim.seed)
    log.info("training on %d windows for %d epochs", len(data), run.optim.epochs)
    with _thread_limit(run.threads):
        report = train(model, data, run.optim, run.report)
    save_params(run.out, model.params, model.cfg)
    if report:
        log.info("final epoch: loss=%.4f accuracy=%.3f", report[-1].loss, report[-1].accuracy)
    return 0


def _flag_overrides(args) -> list[str]:
    out = []
    for key in ("lr", "epochs", "seed", "aggregation", "out", "report", "threads", "data_dir"):
        v = getattr(args, key, None)
        if v is not None:
            out.append(f"{key}={v}")
    return out


def cmd_predict(args) -> int:
    model = _model_for_T(args.weights, args.T)
    preds = []
    with _thread_limit(args.threads):
        for f in args.fvol:
            vol = load_fvol(_require(f))
            if args.stream:
                preds.extend(predict_video(model, ArrayFrameSource(vol.frames), model.cfg.patch))
                continue
            m = model
            if vol.frames.shape[0] != m.cfg.T:
                params, cfg = adapt_temporal(model.params, model.cfg, vol.frames.shape[0])
                m = PhaseModel(cfg, params)
            z = m(vol.frames[None])[0]
            preds.append(_prediction(z, vol))
    _write_predictions(args.output, preds, model.cfg.num_phases)
    return 0


def _prediction(z: np.ndarray, vol: FrameVolume) -> PhasePrediction:
    return PhasePrediction(z, int(np.argmax(z)), int(vol.target_index))


def cmd_evaluate(args) -> int:
    if bool(args.predictions) == bool(args.weights):
        raise ConfigError("give either --predictions or --weights with --video")
    sources = args.predictions or args.video
    if not sources or len(sources) != len(args.annotations):
        raise ConfigError("need one --annotations file per prediction file / video")
    model = _model_for_T(args.weights, args.T) if args.weights else None
    videos = []
    all_preds = []
    with _thread_limit(args.threads):
        for src, ann in zip(sources, args.annotations):
            gt = read_annotations(_require(ann), args.fps)
            if model is None:
                pred = read_predictions(_require(src), len(gt))
                ev = {"unrelaxed": metrics(gt, pred, "unrelaxed"), "relaxed": metrics(gt, pred, "relaxed")}
            else:
                frames = _load_video(_require(src))
                res = evaluate_video(model, ArrayFrameSource(frames), gt)
                all_preds.extend(res.predictions)
                ev = {"unrelaxed": res.unrelaxed, "relaxed": res.relaxed}
            videos.append((src, ev))
    out = {
        "videos": [{"source": str(s), **{m: r.to_dict() for m, r in ev.items()}} for s, ev in videos],
        "summary": {m: summarize([ev[m] for _, ev in videos]) for m in ("unrelaxed", "relaxed")},
    }
    _write_json(args.output, out)
    if args.predictions_out and model is not None:
        _write_predictions(args.predictions_out, all_preds, model.cfg.num_phases)
    return 0


def cmd_inspect_attention(args) -> int:
    cfg, params = load_checkpoint(_require(args.weights))
    vol = load_fvol(_require(args.fvol))
    if vol.frames.shape[0] != cfg.T:
        params, cfg = adapt_temporal(params, cfg, vol.frames.shape[0])
    if not 0 <= args.layer < cfg.L:
        raise ConfigError(f"layer {args.layer} outside 0..{cfg.L - 1}")
    if args.position is not None and not 0 <= args.position < cfg.K:
        raise ConfigError(f"spatial position {args.position} outside 0..{cfg.K - 1}")
    trace = AttentionTrace()
    forward_batch(vol.frames[None], as_tensors(params), cfg, trace)
    positions = range(cfg.K) if args.position is None else [args.position]
    records = []
    for layer, seg, w in trace.records:
        if layer != args.layer:
            continue
        for k in positions:
            for h in range(w.shape[2]):
                records.append({"layer": layer, "segment_index": seg, "spatial_position": k, "head": h,
                                "matrix": w[0, k, h].tolist()})
    _write_json(args.output, records)
    return 0


def cmd_gen_synthetic(args) -> int:
    run = load_run_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    patch = run.model.patch
    stride = args.window_stride if args.window_stride is not None else run.window_stride
    for i, (frames, labels) in enumerate(synthesize_videos(run.data, patch)):
        name = f"video_{i:03d}"
        n = len(labels)
        save_fvol(out / f"{name}.fvol", FrameVolume(frames, np.arange(n), n - 1))
        write_annotations(out / f"{name}.csv", labels)
        if stride > 0:
            wdir = out / name
            wdir.mkdir(exist_ok=True)
            src = ArrayFrameSource(frames)
            for t in range(0, n, stride):
                save_fvol(wdir / f"t{t:06d}.fvol", build_volume(src, t, patch))
    return 0


# ----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors become the same one-line ``error[config]`` message."""

    def error(self, message):
        print(f"error[config]: {self.prog}: {' '.join(message.split())}", file=sys.stderr)
        sys.exit(EXIT_CODES["config"])


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="surgphase", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value config file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("train", help="train on synthetic or generated videos")
    common(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--aggregation", choices=["MA", "TFA"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out", help="weight file (SGFW1)")
    p.add_argument("--report", help="training report, JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict phases for FVOL1 windows or whole videos")
    common(p, config=False)
    p.add_argument("--weights", required=True)
    p.add_argument("--stream", action="store_true", help="treat each file as a whole video")
    p.add_argument("--T", type=int, help="test-time clip length (positions resized)")
    p.add_argument("-o", "--output")
    p.add_argument("fvol", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against annotations")
    common(p, config=False)
    p.add_argument("--predictions", nargs="+")
    p.add_argument("--weights")
    p.add_argument("--video", nargs="+")
    p.add_argument("--annotations", nargs="+", required=True)
    p.add_argument("--fps", type=float, default=1.0)
    p.add_argument("--T", type=int)
    p.add_argument("--predictions-out", dest="predictions_out")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-attention", help="dump temporal segment attention matrices")
    p.add_argument("--weights", required=True)
    p.add_argument("--fvol", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--position", type=int)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("gen-synthetic", help="write synthetic videos, annotations and windows")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--window-stride", dest="window_stride", type=int)
    p.set_defaults(func=cmd_gen_synthetic)
    return ap


def _kind(err: BaseException) -> str:
    if isinstance(err, ConfigError):
        return "config"
    if isinstance(err, FormatError):
        return "format"
    if isinstance(err, TrainingError):
        return "training"
    return "input"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("predict", "evaluate") and args.threads is None:
        args.threads = 1
    try:
        return args.func(args)
    except (ConfigError, FormatError, TrainingError, InputError, SegmentError, AggregationError,
            DimensionError, IndexError, OSError, ValueError) as err:
        kind = _kind(err)
        msg = " ".join(str(err).split())
        print(f"error[{kind}]: {msg}", file=sys.stderr)
        return EXIT_CODES[kind]


if __name__ == "__main__":
    sys.exit(main())
