import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitsforecast import control
from sitsforecast.config import RunConfig
from sitsforecast.core import ops
from sitsforecast.core.params import SEMANTIC_TEMPORAL, STRUCTURAL, ParamStore
from sitsforecast.errors import ConfigurationError, DimensionError


def level_store(C=2, Cc=4, d_cond=3, fusion=5, heads=2, ffn=False, seed=0):
    lc = control.ControlLevelConfig(level=0, channels=C, control_channels=Cc, height=3, width=3,
                                    d_cond=d_cond, fusion_dim=fusion, heads=heads, temporal_ffn=ffn)
    store = ParamStore()
    control.init_control_level(store, np.random.default_rng(seed), lc)
    return store, lc


def zero_semantic(store):
    for n in store.names(SEMANTIC_TEMPORAL):
        store.set_value(n, np.zeros_like(store[n]))


def test_partitions():
    store, _ = level_store()
    assert set(store.names(STRUCTURAL)) == {f"ecm.l0.ctrl.{k}" for k in ("w1", "b1", "w2", "b2")}
    assert all(n.startswith(("ecm.l0.sem", "ecm.l0.gate", "ecm.l0.temp")) for n in store.names(SEMANTIC_TEMPORAL))


def test_init_contracts():
    store, _ = level_store()
    assert not store["ecm.l0.ctrl.w2"].any()
    assert not store["ecm.l0.gate.w"].any() and not store["ecm.l0.gate.b"].any()
    assert store["ecm.l0.temp.alpha_raw"].tolist() == [-2.0]
    with pytest.raises(ConfigurationError):
        level_store(Cc=3, heads=2)


# -- structural path -----------------------------------------------------------------

def test_structural_zero_input_zero_output():
    store, _ = level_store()
    out = control.structural_path(np.zeros((1, 2, 2, 3, 3)), store, 0)
    assert out.shape == (1, 4, 2, 3, 3) and not out.value.any()


def test_structural_delta_kernels_reproduce_input():
    store = ParamStore()
    delta = np.zeros((1, 1, 3, 3, 3))
    delta[0, 0, 1, 1, 1] = 1.0
    for k, v in (("w1", delta), ("b1", np.zeros(1)), ("w2", delta), ("b2", np.zeros(1))):
        store.add(f"ecm.l0.ctrl.{k}", v, STRUCTURAL)
    x = np.random.default_rng(1).normal(size=(2, 1, 3, 4, 4))
    silu = x / (1 + np.exp(-x))
    assert np.allclose(control.structural_path(x, store, 0).value, silu, atol=1e-15)


def test_structural_shape_error():
    store, _ = level_store()
    with pytest.raises(DimensionError):
        control.structural_path(np.zeros((1, 3, 2, 3, 3)), store, 0)


# -- semantic path ---------------------------------------------------------------------

def test_semantic_zero_weights():
    store, _ = level_store()
    zero_semantic(store)
    out = control.semantic_project(np.ones((2, 3)), store, 0)
    assert out.shape == (2, 4) and not out.value.any()


def test_semantic_hand_computed():
    store = ParamStore()
    store.add("ecm.l0.sem.w1", np.eye(2), SEMANTIC_TEMPORAL)
    store.add("ecm.l0.sem.b1", np.zeros(2), SEMANTIC_TEMPORAL)
    store.add("ecm.l0.sem.w2", np.array([[1.0], [2.0]]), SEMANTIC_TEMPORAL)
    store.add("ecm.l0.sem.b2", np.array([0.5]), SEMANTIC_TEMPORAL)
    m = np.array([1.0, -1.0])
    silu = m / (1 + np.exp(-m))
    assert control.semantic_project(m, store, 0).value[0] == pytest.approx(silu[0] + 2 * silu[1] + 0.5, abs=1e-15)


def test_semantic_dim_error():
    store, _ = level_store()
    with pytest.raises(ConfigurationError):
        control.semantic_project(np.ones(4), store, 0)


def test_tile_spatial():
    s = control.tile_spatial(np.array([[1.0, 2.0]]), 1, 2, 2).value
    assert s.shape == (1, 2, 1, 2, 2)
    assert (s[0, 0] == 1).all() and (s[0, 1] == 2).all()
    sp = np.random.default_rng(2).normal(size=(3, 4))
    t = control.tile_spatial(sp, 2, 3, 5).value
    assert np.ptp(t, axis=(2, 3, 4)).max() == 0.0
    assert t.sum() == pytest.approx(2 * 3 * 5 * sp.sum(), abs=1e-12)


# -- gate ------------------------------------------------------------------------

def _gate_case(bias):
    store, _ = level_store()
    store.set_value("ecm.l0.gate.b", np.full(4, bias))
    h = np.full((1, 4, 1, 2, 2), 2.0)
    sp = np.full((1, 4), 4.0)
    s = control.tile_spatial(sp, 1, 2, 2)
    return control.gated_fuse(h, sp, s, store, 0)


def test_gate_limits_and_midpoint():
    g, f = _gate_case(-50.0)
    assert np.allclose(f.value, 2.0, atol=1e-9)
    g, f = _gate_case(50.0)
    assert np.allclose(f.value, 4.0, atol=1e-9)
    g, f = _gate_case(0.0)
    assert (g.value == 0.5).all() and (f.value == 3.0).all()


def test_gate_shape_error():
    store, _ = level_store()
    with pytest.raises(DimensionError):
        control.gated_fuse(np.zeros((1, 4, 1, 2, 2)), np.zeros((1, 4)), np.zeros((1, 4, 1, 2, 3)), store, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_fusion_is_between_inputs(seed):
    rng = np.random.default_rng(seed)
    store, _ = level_store(seed=seed % 7)
    store.set_value("ecm.l0.gate.w", rng.normal(0, 3, (4, 4)))
    store.set_value("ecm.l0.gate.b", rng.normal(0, 3, 4))
    h = rng.normal(size=(2, 4, 2, 3, 3))
    sp = rng.normal(size=(2, 4))
    s = control.tile_spatial(sp, 2, 3, 3)
    g, f = control.gated_fuse(h, sp, s, store, 0)
    lo, hi = np.minimum(h, s.value), np.maximum(h, s.value)
    assert ((g.value > 0) & (g.value < 1)).all()
    assert (f.value >= lo - 1e-12).all() and (f.value <= hi + 1e-12).all()


# -- temporal refinement -------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(*(st.integers(1, 4) for _ in range(5)))
def test_psi_roundtrip(B, C, T, H, W):
    x = np.random.default_rng(B * 1000 + C * 100 + T * 10 + H + W).normal(size=(B, C, T, H, W))
    p = control.psi(x)
    assert p.shape == (B * H * W, T, C)
    assert np.array_equal(control.psi_inv(p, x.shape).value, x)


def test_psi_puts_time_on_sequence_axis():
    x = np.arange(2 * 3 * 4 * 1 * 1, dtype=float).reshape(2, 3, 4, 1, 1)
    p = control.psi(x).value
    assert np.array_equal(p[1, :, 2], x[1, 2, :, 0, 0])


def test_refine_alpha_limit_is_identity():
    store, _ = level_store()
    store.set_value("ecm.l0.temp.alpha_raw", np.array([-50.0]))
    f = np.random.default_rng(3).normal(size=(1, 4, 3, 2, 2))
    assert np.allclose(control.temporal_refine(f, store, 0, 2).value, f, atol=1e-9)


def test_refine_single_step_zero_attention_is_identity():
    store, _ = level_store()
    for k in ("wq", "wk", "wv", "wo"):
        store.set_value(f"ecm.l0.temp.{k}", np.zeros((4, 4)))
    store.set_value("ecm.l0.temp.alpha_raw", np.array([1.3]))
    f = np.random.default_rng(4).normal(size=(2, 4, 1, 3, 3))
    assert np.array_equal(control.temporal_refine(f, store, 0, 2).value, f)


def test_mixing_weight_inside_unit_interval():
    store, _ = level_store()
    for a in (-30.0, -2.0, 0.0, 30.0):
        store.set_value("ecm.l0.temp.alpha_raw", np.array([a]))
        w = float(control.mixing_weight(store, 0).value[0])
        assert 0.0 < w < 1.0 or (a == 30.0 and w <= 1.0)


def test_refine_dropout_needs_rng():
    store, _ = level_store()
    f = np.random.default_rng(5).normal(size=(1, 4, 3, 2, 2))
    base = control.temporal_refine(f, store, 0, 2).value
    assert np.array_equal(control.temporal_refine(f, store, 0, 2, dropout=0.5).value, base)
    dropped = control.temporal_refine(f, store, 0, 2, dropout=0.5, rng=np.random.default_rng(0)).value
    assert not np.array_equal(dropped, base)


# -- aggregation and injection -------------------------------------------------------------

def test_inject_examples():
    skip = np.random.default_rng(6).normal(size=(1, 2, 3, 3))
    assert np.array_equal(control.aggregate_and_inject(np.zeros((1, 2, 4, 3, 3)), skip).value, skip)
    z1 = np.random.default_rng(7).normal(size=(1, 2, 1, 3, 3))
    assert np.array_equal(control.aggregate_time(z1).value, z1[:, :, 0])
    z = np.concatenate([np.zeros((1, 2, 1, 3, 3)), np.full((1, 2, 1, 3, 3), 2.0)], axis=2)
    assert np.array_equal(control.aggregate_and_inject(z, skip).value, skip + 1.0)
    with pytest.raises(DimensionError):
        control.aggregate_and_inject(np.zeros((1, 3, 2, 3, 3)), skip)


# -- full level --------------------------------------------------------------------------

def test_zero_semantic_state_fixture():
    store, _ = level_store()
    zero_semantic(store)
    store.set_value("ecm.l0.ctrl.w2", np.random.default_rng(8).normal(0, 0.3, (4, 4, 3, 3, 3)))
    h_enc = np.random.default_rng(9).normal(size=(2, 2, 3, 3, 3))
    m = np.random.default_rng(10).normal(size=(2, 3))
    z, st_ = control.control_level(h_enc, m, store, 0, heads=2, keep_state=True)
    assert st_.h_ctrl.any()
    assert not st_.s_proj.any() and not st_.s.any()
    assert np.abs(st_.g - 0.5).max() <= 1e-12
    assert np.abs(st_.f - 0.5 * st_.h_ctrl).max() <= 1e-12
    assert np.abs(st_.z - st_.f).max() <= 1e-12
    assert np.array_equal(st_.z_agg, st_.z.mean(axis=2))


def test_structural_mode_is_h_ctrl():
    store, _ = level_store()
    store.set_value("ecm.l0.ctrl.w2", np.random.default_rng(11).normal(0, 0.3, (4, 4, 3, 3, 3)))
    h_enc = np.random.default_rng(12).normal(size=(1, 2, 2, 3, 3))
    z, st_ = control.control_level(h_enc, None, store, 0, 2, mode="structural", keep_state=True)
    assert np.array_equal(z.value, st_.h_ctrl) and st_.g is None
    with pytest.raises(ConfigurationError):
        control.control_level(h_enc, None, store, 0, 2, mode="text")


def test_temporal_ffn_option_adds_parameters():
    store, _ = level_store(ffn=True)
    assert "ecm.l0.temp.ffn_w1" in store
    h_enc = np.random.default_rng(13).normal(size=(1, 2, 2, 3, 3))
    z = control.control_level(h_enc, np.ones((1, 3)), store, 0, 2)
    assert z.shape == (1, 4, 2, 3, 3)


def test_level_configs_follow_run_config():
    cfgs = control.level_configs(RunConfig())
    assert [(c.channels, c.height) for c in cfgs] == [(16, 16), (32, 8)]
    assert all(c.d_cond == 64 and c.alpha_init == -2.0 for c in cfgs)
