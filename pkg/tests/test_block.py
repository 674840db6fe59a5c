"""Residual block: token orders, padding invariance, ablations, gradients."""

from __future__ import annotations

import numpy as np
import pytest

import gapscan.block as bk
import gapscan.fusion as fu
import gapscan.scan as sc
import gapscan.tensor as tc
from gapscan.errors import ConfigurationError, DimensionError

GRAD_TOL = 1e-7


def make_block(d=2, n=2, t=3, rng=None, **kw):
    cfg = bk.BlockConfig(d=d, n=n, max_visits=t, **kw)
    rng = rng or np.random.default_rng(0)
    return cfg, bk.init_block_params(cfg, rng)


def random_volume(rng, b=2, d=2, t=3, h=2, w=2, n_valid=None):
    v = rng.standard_normal((b, d, t, h, w))
    mask = np.zeros((b, t), dtype=bool)
    gaps = np.zeros((b, t))
    for i in range(b):
        k = n_valid if n_valid is not None else int(rng.integers(1, t + 1))
        mask[i, t - k:] = True
        if k > 1:
            gaps[i, t - k + 1:] = rng.choice([12.0, 18.0, 24.0, 30.0, 36.0],
                                             size=k - 1)
        v[i, :, :t - k] = 0.0
    return v, gaps, mask


# ---------------------------------------------------------------------------
# token layout
# ---------------------------------------------------------------------------

def test_visit_major_layout_places_gap_once_per_visit():
    gaps = np.array([[0.0, 18.0, 24.0]])
    mask = np.array([[True, True, True]])
    dt, valid = bk.token_layout(gaps, mask, 2, 2, "visit_major")
    assert dt.shape == (1, 12)
    # gap sits at each visit's first token, zeros elsewhere
    expect = np.zeros(12)
    expect[4] = 18.0
    expect[8] = 24.0
    assert np.array_equal(dt[0], expect)
    assert valid.all()


def test_position_major_layout_repeats_gap_every_token():
    gaps = np.array([[0.0, 18.0, 24.0]])
    mask = np.array([[False, True, True]])
    dt, valid = bk.token_layout(gaps, mask, 2, 1, "position_major")
    assert np.array_equal(dt[0], np.array([0.0, 18.0, 24.0] * 2))
    assert np.array_equal(valid[0], np.array([False, True, True] * 2))


def test_flatten_unflatten_roundtrip_both_orders():
    rng = np.random.default_rng(3)
    v = rng.standard_normal((2, 3, 4, 2, 5))
    for order in bk.SCAN_ORDERS:
        flat = bk.flatten_volume(tc.as_tensor(v), order)
        back = bk.unflatten_tokens(flat, (4, 2, 5), order)
        assert np.array_equal(back.data, v)


def test_visit_major_flatten_index_formula():
    # token (t, h, w) lands at (t*H + h)*W + w
    t_, h_, w_, d = 3, 2, 2, 1
    v = np.arange(t_ * h_ * w_, dtype=float).reshape(1, d, t_, h_, w_)
    flat = bk.flatten_volume(tc.as_tensor(v), "visit_major")
    for t in range(t_):
        for h in range(h_):
            for w in range(w_):
                idx = (t * h_ + h) * w_ + w
                assert flat.data[0, idx, 0] == v[0, 0, t, h, w]


def test_position_major_flatten_index_formula():
    # token (h, w, t) lands at (h*W + w)*T + t
    t_, h_, w_, d = 3, 2, 2, 1
    v = np.arange(t_ * h_ * w_, dtype=float).reshape(1, d, t_, h_, w_)
    flat = bk.flatten_volume(tc.as_tensor(v), "position_major")
    for t in range(t_):
        for h in range(h_):
            for w in range(w_):
                idx = (h * w_ + w) * t_ + t
                assert flat.data[0, idx, 0] == v[0, 0, t, h, w]


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def straight_line_block(v, gaps, mask, params, cfg, *, time_aware=True,
                        identity_fusion=False, order="visit_major"):
    """Same computation as block_forward, written as one explicit pipeline
    with no shared code path for masking or layout decisions."""
    B, d, T, H, W = v.shape
    vis = mask[:, None, :, None, None].astype(float)
    v0 = v * vis
    vt = tc.as_tensor(v0)
    vn = tc.rmsnorm(vt, tc.as_tensor(params.norm_gain), axis=1)
    u = bk.flatten_volume(vn, order)
    dt, valid = bk.token_layout(gaps, mask, H, W, order)
    dh, b_in, c_out = sc.project_params(u, params.scan)
    delta = tc.softplus(dh)
    dta = sc.time_aware_step(delta, dt, params.scan) if time_aware else delta
    states = sc.scan_core(dta, b_in, u, sc.poles(params.scan), valid)
    y = sc.scan_readout(states, c_out, valid)
    h_vol = bk.unflatten_tokens(y, (T, H, W), order)
    if not identity_fusion:
        h_vol = fu.fuse(h_vol, params.fusion)
    out = h_vol.data + vn.data * params.scan.skip.reshape(1, d, 1, 1, 1)
    return v0 + out * vis


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(11)
    for order in bk.SCAN_ORDERS:
        for identity in (False, True):
            cfg, params = make_block(rng=np.random.default_rng(5))
            v, gaps, mask = random_volume(rng)
            got = bk.block_forward(v, gaps, mask, params, cfg,
                                   identity_fusion=identity, scan_order=order)
            ref = straight_line_block(v, gaps, mask, params, cfg,
                                      identity_fusion=identity, order=order)
            assert np.allclose(got.data, ref, atol=1e-12, rtol=0)


def test_zero_input_gives_zero_output():
    cfg, params = make_block()
    v = np.zeros((1, 2, 3, 2, 2))
    gaps = np.array([[0.0, 12.0, 24.0]])
    mask = np.ones((1, 3), dtype=bool)
    z = bk.block_forward(v, gaps, mask, params, cfg)
    assert np.array_equal(z.data, v)


def test_single_visit_record_works():
    rng = np.random.default_rng(7)
    cfg, params = make_block(t=1)
    v = rng.standard_normal((1, 2, 1, 2, 2))
    z = bk.block_forward(v, np.zeros((1, 1)), np.ones((1, 1), dtype=bool),
                         params, cfg)
    assert z.shape == v.shape
    assert np.isfinite(z.data).all()


def test_left_padding_is_bitwise_invariant():
    rng = np.random.default_rng(13)
    cfg, params = make_block(t=6, rng=np.random.default_rng(2))
    core = rng.standard_normal((1, 2, 2, 2, 2))
    gaps2 = np.array([[0.0, 18.0]])
    mask2 = np.ones((1, 2), dtype=bool)
    base = bk.block_forward(core, gaps2, mask2, params, cfg)
    for pad in (1, 3, 4):
        t = 2 + pad
        v = np.zeros((1, 2, t, 2, 2))
        v[:, :, pad:] = core
        gaps = np.zeros((1, t))
        gaps[:, pad:] = gaps2
        mask = np.zeros((1, t), dtype=bool)
        mask[:, pad:] = True
        z = bk.block_forward(v, gaps, mask, params, cfg)
        assert np.array_equal(z.data[:, :, pad:], base.data)
        assert np.array_equal(z.data[:, :, :pad], np.zeros((1, 2, pad, 2, 2)))


def test_padded_slots_forced_to_zero_even_if_input_nonzero():
    rng = np.random.default_rng(17)
    cfg, params = make_block()
    v, gaps, mask = random_volume(rng, n_valid=2)
    v[:, :, 0] = 99.0                      # garbage in the padded slot
    z = bk.block_forward(v, gaps, mask, params, cfg)
    assert np.array_equal(z.data[:, :, 0], np.zeros_like(z.data[:, :, 0]))


def test_gap_changes_output_only_when_time_aware():
    rng = np.random.default_rng(19)
    cfg, params = make_block(rng=np.random.default_rng(4))
    v, _, mask = random_volume(rng, b=1, n_valid=3)
    g1 = np.array([[0.0, 12.0, 12.0]])
    g2 = np.array([[0.0, 36.0, 12.0]])
    za = bk.block_forward(v, g1, mask, params, cfg)
    zb = bk.block_forward(v, g2, mask, params, cfg)
    assert np.abs(za.data - zb.data).max() > 1e-9
    na = bk.block_forward(v, g1, mask, params, cfg, time_aware=False)
    nb = bk.block_forward(v, g2, mask, params, cfg, time_aware=False)
    assert np.array_equal(na.data, nb.data)


def test_scan_orders_disagree():
    rng = np.random.default_rng(23)
    cfg, params = make_block(rng=np.random.default_rng(6))
    v, gaps, mask = random_volume(rng, b=1, n_valid=3)
    zr = bk.block_forward(v, gaps, mask, params, cfg, scan_order="visit_major")
    zi = bk.block_forward(v, gaps, mask, params, cfg,
                          scan_order="position_major")
    assert np.abs(zr.data - zi.data).max() > 1e-9


def test_state_space_fusion_variant_runs_and_differs():
    rng = np.random.default_rng(29)
    cfg, params = make_block(rng=np.random.default_rng(8),
                             fuse_in_state_space=True)
    cfg_plain = bk.BlockConfig(d=2, n=2, max_visits=3)
    v, gaps, mask = random_volume(rng, b=1, n_valid=3)
    zs = bk.block_forward(v, gaps, mask, params, cfg)
    zp = bk.block_forward(v, gaps, mask, params, cfg_plain)
    assert zs.shape == v.shape
    assert np.abs(zs.data - zp.data).max() > 1e-12


def test_gate_branch_runs_and_matters():
    rng = np.random.default_rng(31)
    cfg, params = make_block(rng=np.random.default_rng(9), gate=True)
    v, gaps, mask = random_volume(rng, b=1, n_valid=3)
    z = bk.block_forward(v, gaps, mask, params, cfg)
    ungated = bk.BlockConfig(d=2, n=2, max_visits=3)
    z0 = bk.block_forward(v, gaps, mask, params, ungated)
    assert np.abs(z.data - z0.data).max() > 1e-9


def test_shape_validation():
    cfg, params = make_block()
    with pytest.raises(DimensionError):
        bk.block_forward(np.zeros((2, 2, 3, 2)), np.zeros((2, 3)),
                         np.ones((2, 3), dtype=bool), params, cfg)
    with pytest.raises(DimensionError):
        bk.block_forward(np.zeros((1, 3, 3, 2, 2)), np.zeros((1, 3)),
                         np.ones((1, 3), dtype=bool), params, cfg)
    with pytest.raises(DimensionError):
        bk.block_forward(np.zeros((1, 2, 3, 2, 2)), np.zeros((1, 2)),
                         np.ones((1, 3), dtype=bool), params, cfg)
    with pytest.raises(ConfigurationError):
        bk.BlockConfig(d=2, n=2, max_visits=3, scan_order="zigzag")


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def block_param_dict(params):
    return {
        "gain": params.norm_gain,
        "w_proj": params.scan.w_proj,
        "b_proj": params.scan.b_proj,
        "a_log": params.scan.a_log,
        "skip": params.scan.skip,
        "gamma": params.scan.gamma_logit,
        "f0": params.fusion.filters[0],
        "f1": params.fusion.filters[1],
        "alpha": params.fusion.alpha,
    }


def rebuild(pd, cfg):
    scan_p = sc.ScanParams(w_proj=pd["w_proj"], b_proj=pd["b_proj"],
                           a_log=pd["a_log"], skip=pd["skip"],
                           gamma_logit=pd["gamma"])
    fus_p = fu.FusionParams(filters=[pd["f0"], pd["f1"]], alpha=pd["alpha"])
    return bk.BlockParams(norm_gain=pd["gain"], scan=scan_p, fusion=fus_p)


@pytest.mark.parametrize("order", bk.SCAN_ORDERS)
def test_gradcheck_all_block_params(order):
    rng = np.random.default_rng(37)
    cfg, params = make_block(rng=np.random.default_rng(10))
    v, gaps, mask = random_volume(rng, b=2)
    probe = rng.standard_normal(v.shape)

    def fn(pd):
        z = bk.block_forward(v, gaps, mask, rebuild(pd, cfg), cfg,
                             scan_order=order)
        return tc.sum_all(tc.mul(z, probe))

    errs = tc.grad_check(fn, block_param_dict(params))
    for name, e in errs.items():
        assert e < GRAD_TOL, f"{name}: {e}"


def test_gradcheck_state_space_fusion_path():
    rng = np.random.default_rng(41)
    cfg, params = make_block(rng=np.random.default_rng(12),
                             fuse_in_state_space=True)
    v, gaps, mask = random_volume(rng, b=1)
    probe = rng.standard_normal(v.shape)

    def fn(pd):
        z = bk.block_forward(v, gaps, mask, rebuild(pd, cfg), cfg)
        return tc.sum_all(tc.mul(z, probe))

    errs = tc.grad_check(fn, block_param_dict(params))
    for name, e in errs.items():
        assert e < GRAD_TOL, f"{name}: {e}"
