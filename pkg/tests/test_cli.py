import json
import subprocess
import sys

import numpy as np
import pytest

from surgphase.cli import EXIT_CODES, load_run_config, main
from surgphase.errors import ConfigError
from surgphase.model import load_checkpoint

CONFIG = """\
# tiny closed-loop setup
L=1
D=16
heads=2
mlp_ratio=2
T=4
R=2
H=8
W=8
P=4
C_in=3
num_phases=3
num_videos=2
frames_per_video=30
noise_std=0
windows_per_video=30
data_seed=2
lr=0.005
epochs=60
batch_size=8
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(CONFIG)
    assert main(["gen-synthetic", "--config", str(d / "run.cfg"), "--out", str(d / "data"),
                 "--window-stride", "7"]) == 0
    assert main(["train", "--config", str(d / "run.cfg"), "--data-dir", str(d / "data"),
                 "--out", str(d / "w.sgfw"), "--report", str(d / "r.jsonl")]) == 0
    return d


def _videos(d):
    return [str(d / "data" / f"video_{i:03d}.fvol") for i in range(2)], \
           [str(d / "data" / f"video_{i:03d}.csv") for i in range(2)]


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="colour"):
        load_run_config(None, ["colour=red"])


def test_run_config_conflict():
    with pytest.raises(ConfigError):
        load_run_config(None, ["T=8", "segment_lengths=4,16"])
    with pytest.raises(ConfigError):
        load_run_config(None, ["lr=-1"])


def test_gen_synthetic_layout(workdir):
    names = sorted(p.name for p in (workdir / "data").iterdir())
    assert names == ["video_000", "video_000.csv", "video_000.fvol", "video_001", "video_001.csv", "video_001.fvol"]
    assert sorted(p.name for p in (workdir / "data" / "video_000").iterdir()) == \
        [f"t{t:06d}.fvol" for t in range(0, 30, 7)]


def test_closed_loop_predict_then_evaluate(workdir, capsys):
    videos, anns = _videos(workdir)
    preds = [str(workdir / f"p{i}.csv") for i in range(2)]
    for v, p in zip(videos, preds):
        assert main(["predict", "--weights", str(workdir / "w.sgfw"), "--stream", v, "-o", p]) == 0
    out = workdir / "eval.json"
    assert main(["evaluate", "--predictions", *preds, "--annotations", *anns, "-o", str(out)]) == 0
    rep = json.loads(out.read_text())
    for mode in ("unrelaxed", "relaxed"):
        for key, stats in rep["summary"][mode].items():
            assert stats["mean"] == 1.0, (mode, key)


def test_evaluate_from_weights_matches_predictions(workdir):
    videos, anns = _videos(workdir)
    out, pout = workdir / "eval_w.json", workdir / "pw.csv"
    assert main(["evaluate", "--weights", str(workdir / "w.sgfw"), "--video", *videos,
                 "--annotations", *anns, "-o", str(out), "--predictions-out", str(pout)]) == 0
    assert json.loads(out.read_text())["summary"]["unrelaxed"]["video_accuracy"]["mean"] == 1.0
    lines = pout.read_text().splitlines()
    assert lines[0] == "target_index,phase,logit_0,logit_1,logit_2"
    assert len(lines) == 61


def test_predict_windows(workdir):
    wins = sorted((workdir / "data" / "video_000").glob("*.fvol"))
    out = workdir / "wp.csv"
    assert main(["predict", "--weights", str(workdir / "w.sgfw"), *map(str, wins), "-o", str(out)]) == 0
    rows = out.read_text().splitlines()[1:]
    assert [int(r.split(",")[0]) for r in rows] == list(range(0, 30, 7))


def test_zero_lr_keeps_initial_weights(workdir):
    a, b = workdir / "lr0.sgfw", workdir / "ep0.sgfw"
    cfg = str(workdir / "run.cfg")
    assert main(["train", "--config", cfg, "--lr", "0", "--epochs", "3", "--out", str(a)]) == 0
    assert main(["train", "--config", cfg, "--epochs", "0", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_inspect_attention_rows_sum_to_one(workdir):
    out = workdir / "attn.json"
    win = workdir / "data" / "video_001" / "t000021.fvol"
    assert main(["inspect-attention", "--weights", str(workdir / "w.sgfw"), "--fvol", str(win),
                 "-o", str(out)]) == 0
    recs = json.loads(out.read_text())
    cfg, _ = load_checkpoint(workdir / "w.sgfw")
    assert len(recs) == cfg.m * cfg.K * cfg.heads
    for r in recs:
        m = np.array(r["matrix"])
        assert m.shape == (cfg.segment_lengths[r["segment_index"]],) * 2
        assert np.abs(m.sum(axis=1) - 1).max() <= 1e-12
    assert main(["inspect-attention", "--weights", str(workdir / "w.sgfw"), "--fvol", str(win),
                 "--position", "2", "-o", str(out)]) == 0
    assert {r["spatial_position"] for r in json.loads(out.read_text())} == {2}


def test_same_seed_byte_identical(workdir):
    cfg = str(workdir / "run.cfg")
    outs = []
    for tag in "ab":
        d = workdir / f"det_{tag}"
        assert main(["gen-synthetic", "--config", cfg, "--out", str(d)]) == 0
        assert main(["train", "--config", cfg, "--epochs", "2", "--data-dir", str(d), "--out", str(d / "w.sgfw"),
                     "--report", str(d / "r.jsonl")]) == 0
        assert main(["predict", "--weights", str(d / "w.sgfw"), "--stream", str(d / "video_000.fvol"),
                     "-o", str(d / "p.csv")]) == 0
        outs.append({p.name: p.read_bytes() for p in d.iterdir()})
    assert outs[0] == outs[1]


def _run(*args):
    return subprocess.run([sys.executable, "-m", "surgphase.cli", *args], capture_output=True, text=True)


@pytest.mark.parametrize("args,kind", [
    (["predict", "--weights", "/nonexistent.sgfw", "x.fvol"], "input"),
    (["train", "--set", "T=8", "--set", "segment_lengths=4,16"], "config"),
    (["train", "--set", "wat=1"], "config"),
    (["predict"], "config"),
])
def test_error_lines(args, kind):
    r = _run(*args)
    assert r.returncode == EXIT_CODES[kind]
    lines = r.stderr.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error[{kind}]: ")


def test_format_error(tmp_path, capsys):
    bad = tmp_path / "bad.sgfw"
    bad.write_bytes(b"NOPE!" + b"\0" * 20)
    fv = tmp_path / "x.fvol"
    fv.write_bytes(b"\1\0\0\0")
    assert main(["predict", "--weights", str(bad), str(fv)]) == EXIT_CODES["format"]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error[format]:")


def test_training_error(tmp_path, capsys):
    (tmp_path / "run.cfg").write_text(CONFIG)
    code = main(["train", "--config", str(tmp_path / "run.cfg"), "--lr", "1e300", "--epochs", "3",
                 "--out", str(tmp_path / "w.sgfw")])
    assert code == EXIT_CODES["training"]
    assert capsys.readouterr().err.startswith("error[training]:")
