import numpy as np
import pytest

from surgphase import numerics as nx
from surgphase.errors import ConfigError, FormatError
from surgphase.model import (
    ModelConfig, PhaseModel, adapt_temporal, block_forward, count_params, dump_params, forward,
    forward_batch, init_params, load_checkpoint, load_params, param_depth, param_shapes,
    prediction_csv_header, prediction_csv_rows, save_params,
)
from surgphase.numerics import DimensionError
from surgphase.tokenizer import FrameVolume, TokenGrid

from oracles import block_oracle

SMALL = dict(L=1, D=8, heads=2, mlp_ratio=2, T=4, R=2, H=8, W=8, C_in=2, P=4, num_phases=5)


def _random_params(cfg, rng, scale=0.3):
    return {k: rng.standard_normal(s) * scale for k, s in param_shapes(cfg).items()}


def _block(params, i=0):
    pre = f"blocks.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _vol(rng, cfg):
    return FrameVolume(rng.standard_normal((cfg.T, cfg.C_in, cfg.H, cfg.W)), np.arange(cfg.T), cfg.T - 1)


def test_defaults():
    cfg = ModelConfig()
    assert (cfg.L, cfg.D, cfg.heads, cfg.mlp_ratio, cfg.num_phases) == (4, 64, 4, 4, 7)
    assert cfg.segment_lengths == (4, 8, 16)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(T=8, segment_lengths=(4, 16))
    with pytest.raises(ConfigError):
        ModelConfig(D=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(H=30, P=8)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": "1"})


def test_config_dict_round_trip():
    cfg = ModelConfig(**SMALL, aggregation="TFA", alpha=0.25, beta=0.75)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_param_count_is_function_of_config():
    cfg = ModelConfig(**SMALL)
    assert count_params(cfg) == sum(v.size for v in init_params(cfg, seed=3).values())
    D, K, T = 8, 4, 4
    embed = 2 * 16 * D + D + D + K * D + T * D + D
    block = 3 * 2 * D + 2 * (4 * D * D + D) + (D * 2 * D + 2 * D + 2 * D * D + D)
    assert count_params(cfg) == embed + block + 2 * D + D * 5 + 5


def test_depths():
    assert param_depth("embed.patch_w", 3) == 0
    assert param_depth("blocks.0.hta.wq", 3) == 1
    assert param_depth("blocks.2.mlp.w1", 3) == 3
    assert param_depth("head.w", 3) == 4
    assert param_depth("norm.gamma", 3) == 4


# ---------------------------------------------------------------- blocks

def test_zero_output_projections_give_identity(rng):
    cfg = ModelConfig(**SMALL)
    p = _block(_random_params(cfg, rng))
    for k in ("hta.wo", "hta.bo", "asa.wo", "asa.bo", "mlp.w2", "mlp.b2"):
        p[k] = np.zeros_like(p[k])
    g = TokenGrid(rng.standard_normal((cfg.T * cfg.K + 1, cfg.D)), cfg.T, cfg.K)
    np.testing.assert_array_equal(block_forward(g, p, cfg).tokens, g.tokens)


@pytest.mark.parametrize("T", [8, 12, 16])
def test_block_preserves_shape(rng, T):
    cfg = ModelConfig(L=1, D=8, heads=2, T=T, H=8, W=8, P=4)
    g = TokenGrid(rng.standard_normal((T * 4 + 1, 8)), T, 4)
    assert block_forward(g, _block(init_params(cfg)), cfg).tokens.shape == g.tokens.shape


def test_block_shape_mismatch(rng):
    cfg = ModelConfig(**SMALL)
    g = TokenGrid(rng.standard_normal((cfg.T * cfg.K + 1, 6)), cfg.T, cfg.K)
    with pytest.raises(DimensionError):
        block_forward(g, _block(init_params(cfg)), cfg)


@pytest.mark.parametrize("mode", ["MA", "TFA"])
def test_block_matches_composed_oracle(rng, mode):
    cfg = ModelConfig(L=1, D=4, heads=2, mlp_ratio=2, T=2, H=4, W=4, P=4, C_in=1, aggregation=mode)
    assert cfg.K == 1
    p = _block(_random_params(cfg, rng, 0.5))
    g = TokenGrid(rng.standard_normal((3, 4)), 2, 1)
    out = block_forward(g, p, cfg)
    c, pt = block_oracle(g.cls, g.patches, p, 2, cfg.segment_lengths, 0.5, 0.5, mode)
    assert np.abs(out.cls - c).max() < 1e-9
    assert np.abs(out.patches - pt).max() < 1e-9


# ---------------------------------------------------------------- forward

def test_zero_head_predicts_phase_zero(rng):
    cfg = ModelConfig(**{**SMALL, "num_phases": 7})
    p = _random_params(cfg, rng)
    p["head.w"][:] = 0
    p["head.b"][:] = 0
    pred = forward(_vol(rng, cfg), p, cfg)
    assert np.all(pred.logits == 0) and pred.phase == 0 and pred.target_index == cfg.T - 1


def test_forward_deterministic(rng):
    cfg = ModelConfig(**SMALL)
    p = _random_params(cfg, rng)
    v = _vol(rng, cfg)
    assert np.array_equal(forward(v, p, cfg).logits, forward(v, p, cfg).logits)


def test_batched_equals_single(rng):
    cfg = ModelConfig(**SMALL)
    m = PhaseModel(cfg, _random_params(cfg, rng))
    frames = rng.standard_normal((3, cfg.T, cfg.C_in, cfg.H, cfg.W))
    batch = m(frames)
    for i in range(3):
        np.testing.assert_allclose(m(frames[i:i + 1])[0], batch[i], atol=1e-12)


def test_logits_finite_fuzz():
    rng = np.random.default_rng(7)
    cfg = ModelConfig(**{**SMALL, "L": 2})
    for _ in range(100):
        p = _random_params(cfg, rng, scale=float(rng.uniform(0.01, 2.0)))
        v = FrameVolume(rng.standard_normal((cfg.T, cfg.C_in, cfg.H, cfg.W)) * rng.uniform(0.1, 100),
                        np.arange(cfg.T), cfg.T - 1)
        assert np.all(np.isfinite(forward(v, p, cfg).logits))


def test_wrong_frame_count(rng):
    cfg = ModelConfig(**SMALL)
    with pytest.raises(DimensionError):
        forward_batch(np.zeros((1, 3, 2, 8, 8)), {}, cfg)


@pytest.mark.parametrize("T", [8, 12, 16])
def test_table_configurations_forward(T):
    cfg = ModelConfig(L=1, D=16, heads=4, T=T, R=4, H=16, W=16, P=8)
    m = PhaseModel.init(cfg)
    z = m(np.random.default_rng(T).standard_normal((2, T, 3, 16, 16)))
    assert z.shape == (2, 7) and np.all(np.isfinite(z))


def test_temporal_resize_inference():
    cfg = ModelConfig(L=1, D=16, heads=4, T=16, H=16, W=16, P=8)
    p = init_params(cfg, seed=1)
    frames = np.random.default_rng(0).standard_normal((1, 16, 3, 16, 16))
    same_p, same_cfg = adapt_temporal(p, cfg, 16)
    assert same_cfg == cfg
    np.testing.assert_array_equal(PhaseModel(same_cfg, same_p)(frames), PhaseModel(cfg, p)(frames))
    p24, cfg24 = adapt_temporal(p, cfg, 24)
    assert cfg24.segment_lengths == (6, 12, 24)
    z = PhaseModel(cfg24, p24)(np.random.default_rng(1).standard_normal((1, 24, 3, 16, 16)))
    assert z.shape == (1, 7) and np.all(np.isfinite(z))


# ---------------------------------------------------------------- gradients

GROUPS = ["embed.", "blocks.0.ln1", "blocks.0.hta", "blocks.0.ln2", "blocks.0.asa", "blocks.0.ln3",
          "blocks.0.mlp", "norm.", "head."]


@pytest.mark.parametrize("mode", ["MA", "TFA"])
def test_end_to_end_gradient(backend, mode):
    rng = np.random.default_rng(11)
    cfg = ModelConfig(L=1, D=8, heads=2, mlp_ratio=2, T=4, R=1, H=4, W=4, P=2, C_in=1, num_phases=3,
                      aggregation=mode)
    assert cfg.K == 4
    params = _random_params(cfg, rng, 0.4)
    frames = rng.standard_normal((2, 4, 1, 4, 4))
    labels = np.array([2, 0])

    def f(p):
        return nx.cross_entropy(forward_batch(frames, p, cfg), labels)

    r = nx.finite_diff_check(f, params, h=1e-5)
    for g in GROUPS:
        worst = max(float(v.max()) for k, v in r.rel_error.items() if k.startswith(g))
        assert worst < 1e-4, (g, worst)


# ---------------------------------------------------------------- SGFW1

def test_save_load_round_trip(tmp_path, rng):
    cfg = ModelConfig(**SMALL)
    p = _random_params(cfg, rng)
    a, b = tmp_path / "a.sgfw", tmp_path / "b.sgfw"
    save_params(a, p, cfg)
    cfg2, p2 = load_checkpoint(a)
    assert cfg2 == cfg
    save_params(b, p2, cfg2)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:5] == b"SGFW1"
    v = _vol(rng, cfg)
    assert np.array_equal(forward(v, p, cfg).logits, forward(v, load_params(a, cfg), cfg).logits)


def test_load_wrong_D(tmp_path):
    cfg = ModelConfig(**SMALL)
    path = tmp_path / "a.sgfw"
    save_params(path, init_params(cfg), cfg)
    with pytest.raises(FormatError):
        load_params(path, cfg.replace(D=16))


def test_load_corrupt(tmp_path):
    cfg = ModelConfig(**SMALL)
    raw = dump_params(init_params(cfg), cfg)
    path = tmp_path / "a.sgfw"
    for bad in (b"XXXXX" + raw[5:], raw[:-3], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            load_params(path)


def test_prediction_csv():
    from surgphase.model import PhasePrediction
    rows = prediction_csv_rows([PhasePrediction(np.array([0.5, -1.0]), 0, 12)])
    assert prediction_csv_header(2) == "target_index,phase,logit_0,logit_1"
    assert rows[0].split(",")[:2] == ["12", "0"]
    assert [float(x) for x in rows[0].split(",")[2:]] == [0.5, -1.0]
