"""Recurrent layer oracles: seq recurrence vs chunked path, causality,
forgetting, streaming splits, decay bounds."""

import numpy as np
import pytest

from ralab import numcore as nc
from ralab.attention_recurrent import (
    Mamba2Params, Mamba2State, RwkvParams, RwkvState,
    mamba2_forward_chunked, mamba2_forward_seq,
    rwkv_forward_chunked, rwkv_forward_seq,
)

LAYERS = {
    "rwkv": (RwkvParams, RwkvState, rwkv_forward_seq, rwkv_forward_chunked),
    "mamba2": (Mamba2Params, Mamba2State, mamba2_forward_seq, mamba2_forward_chunked),
}


def make_layer(kind, seed=0, d_model=16, n_heads=2, dtype=np.float64):
    rng = np.random.default_rng(seed)
    cls = LAYERS[kind][0]
    return cls.init(rng, d_model, n_heads, dtype=dtype)


def rand_x(seed, b, t, d, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return nc.constant(rng.normal(size=(b, t, d)).astype(dtype))


def test_rwkv_single_frame_matches_closed_form():
    p = make_layer("rwkv", seed=1)
    x = rand_x(2, 1, 1, 16)
    out, state = rwkv_forward_seq(p, x)
    # with zero state, y_1 = ((u*k_1) . r_1) v_1; recompute by hand
    mu = {n: np.clip(getattr(p, "mu_" + n).data, 0, 1) for n in "rkvwg"}
    xt = x.data[0, 0]
    sh = {n: (1 - mu[n]) * xt for n in "rkvwg"}  # x_{-1} = 0
    r = sh["r"] @ p.w_r.data
    k = sh["k"] @ p.w_k.data
    v = sh["v"] @ p.w_v.data
    h, hd = p.n_heads, p.head_dim
    y = np.zeros(16)
    for hh in range(h):
        sl = slice(hh * hd, (hh + 1) * hd)
        u = p.bonus.data[sl]
        y[sl] = ((u * k[sl]) @ r[sl]) * v[sl]
    # push through the shared epilogue manually
    yh = y.reshape(h, hd)
    m, vv = yh.mean(-1, keepdims=True), yh.var(-1, keepdims=True)
    norm = (yh - m) / np.sqrt(vv + 1e-5)
    norm = norm * p.gn_scale.data.reshape(h, hd) + p.gn_shift.data.reshape(h, hd)
    sg = sh["g"] @ p.w_g.data
    gate = sg / (1 + np.exp(-sg))
    expected = (norm.reshape(-1) * gate) @ p.w_o.data
    np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-9, atol=1e-12)


def test_mamba_single_frame_matches_closed_form():
    p = make_layer("mamba2", seed=3)
    x = rand_x(4, 1, 1, 16)
    out, state = mamba2_forward_seq(p, x)
    d, n, h, hd = 16, p.state_dim, p.n_heads, p.head_dim
    proj = x.data[0, 0] @ p.w_in.data + p.b_in.data
    z, u, dpre = proj[:d], proj[d:d + d + 2 * n], proj[d + d + 2 * n:]
    cu = u * p.conv_w.data[:, -1] + p.conv_b.data  # only the current tap at t=0
    cu = cu / (1 + np.exp(-cu)) * 1.0 * cu ** 0 * (1.0) if False else cu * (1 / (1 + np.exp(-cu)))
    xi, bv, cv = cu[:d], cu[d:d + n], cu[d + n:]
    dt = np.log1p(np.exp(dpre))
    y = np.zeros(d)
    for hh in range(h):
        sl = slice(hh * hd, (hh + 1) * hd)
        xv = dt[hh] * xi[sl]
        y[sl] = (cv @ bv) * xv + p.d_skip.data[hh] * xi[sl]
    rms = y / np.sqrt((y ** 2).mean() + 1e-5) * p.rms_scale.data
    expected = (rms * (z / (1 + np.exp(-z)))) @ p.w_o.data
    np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-7, atol=1e-10)


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
def test_chunk_one_bit_identical_to_seq(kind):
    _, _, fseq, fchunk = LAYERS[kind]
    p = make_layer(kind, seed=5)
    x = rand_x(6, 2, 9, 16)
    out_s, st_s = fseq(p, x)
    out_c, st_c = fchunk(p, x, chunk=1)
    assert np.array_equal(out_s.data, out_c.data)
    first = st_s.s if kind == "rwkv" else st_s.h
    second = st_c.s if kind == "rwkv" else st_c.h
    assert np.array_equal(first.data, second.data)


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
@pytest.mark.parametrize("chunk_of_t", [2, 7, 16, "t", "t+5"])
def test_chunked_matches_seq(kind, chunk_of_t):
    _, _, fseq, fchunk = LAYERS[kind]
    p = make_layer(kind, seed=7)
    t = 50
    chunk = {"t": t, "t+5": t + 5}.get(chunk_of_t, chunk_of_t)
    x = rand_x(8, 2, t, 16)
    out_s, st_s = fseq(p, x)
    out_c, st_c = fchunk(p, x, chunk=chunk)
    np.testing.assert_allclose(out_c.data, out_s.data, atol=1e-10)
    a = (st_s.s if kind == "rwkv" else st_s.h).data
    b = (st_c.s if kind == "rwkv" else st_c.h).data
    np.testing.assert_allclose(b, a, atol=1e-10)


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
def test_chunked_matches_seq_f32(kind):
    _, _, fseq, fchunk = LAYERS[kind]
    p = make_layer(kind, seed=9, dtype=np.float32)
    x = rand_x(10, 1, 100, 16, dtype=np.float32)
    out_s, _ = fseq(p, x)
    out_c, _ = fchunk(p, x, chunk=16)
    assert np.max(np.abs(out_c.data - out_s.data)) < 1e-5


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
def test_split_consistency(kind):
    """Carrying state across a split equals one whole-sequence pass."""
    cls, state_cls, fseq, _ = LAYERS[kind]
    p = make_layer(kind, seed=11)
    t, t1 = 24, 10
    x = rand_x(12, 2, t, 16)
    whole, st_whole = fseq(p, x)
    first, st_mid = fseq(p, x[:, :t1])
    second, st_end = fseq(p, x[:, t1:], st_mid)
    joined = np.concatenate([first.data, second.data], axis=1)
    np.testing.assert_allclose(joined, whole.data, atol=1e-10)
    a = (st_whole.s if kind == "rwkv" else st_whole.h).data
    b = (st_end.s if kind == "rwkv" else st_end.h).data
    np.testing.assert_allclose(b, a, atol=1e-10)


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
@pytest.mark.parametrize("path", ["seq", "chunked"])
def test_causality_exact(kind, path):
    _, _, fseq, fchunk = LAYERS[kind]
    f = fseq if path == "seq" else (lambda p, x: fchunk(p, x, chunk=5))
    p = make_layer(kind, seed=13)
    x = rand_x(14, 1, 12, 16)
    base, _ = f(p, x)
    bumped = x.data.copy()
    bumped[0, 8] += 3.0  # future frame for i < 8
    pert, _ = f(p, nc.constant(bumped))
    np.testing.assert_array_equal(base.data[:, :8], pert.data[:, :8])
    assert not np.allclose(base.data[:, 8:], pert.data[:, 8:])


def test_rwkv_full_forgetting():
    """With decay forced to 0 (huge pre-activation) and token shift off,
    output t sees only frames t-1 and t."""
    p = make_layer("rwkv", seed=15)
    p.w_base.data[:] = 25.0      # w = exp(-exp(25)) == 0 exactly
    p.b_w.data[:] = 0.0
    for n in "rkvwg":
        getattr(p, "mu_" + n).data[:] = 0.0
    x = rand_x(16, 1, 10, 16)
    base, _ = rwkv_forward_seq(p, x)
    bumped = x.data.copy()
    bumped[0, 4] += 2.0
    pert, _ = rwkv_forward_seq(p, nc.constant(bumped))
    np.testing.assert_array_equal(base.data[0, 6:], pert.data[0, 6:])
    assert not np.allclose(base.data[0, 5], pert.data[0, 5])  # t-1 dependency


def test_mamba_full_forgetting():
    """a_log forced huge => state resets every frame; only the width-4 conv
    window remains."""
    p = make_layer("mamba2", seed=17)
    p.a_log.data[:] = 25.0       # a = exp(-dt * exp(25)) == 0 for dt > 0
    x = rand_x(18, 1, 12, 16)
    base, _ = mamba2_forward_seq(p, x)
    bumped = x.data.copy()
    bumped[0, 3] += 2.0
    pert, _ = mamba2_forward_seq(p, nc.constant(bumped))
    np.testing.assert_array_equal(base.data[0, 7:], pert.data[0, 7:])
    assert not np.allclose(base.data[0, 6], pert.data[0, 6])   # conv reaches t-3


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
def test_decay_bounds_and_stability(kind):
    """Realized decays stay in (0,1); a long random run stays finite."""
    _, _, _, fchunk = LAYERS[kind]
    p = make_layer(kind, seed=19, dtype=np.float32)
    x = rand_x(20, 1, 10_000, 16, dtype=np.float32)
    with nc.no_grad():
        out, st = fchunk(p, x, chunk=64)
    assert np.isfinite(out.data).all()
    assert np.isfinite((st.s if kind == "rwkv" else st.h).data).all()


def test_rwkv_decay_values_in_unit_interval():
    p = make_layer("rwkv", seed=21)
    x = rand_x(22, 1, 30, 16)
    from ralab.attention_recurrent import _rwkv_prologue
    _, _, _, lw, _, _, _, _ = _rwkv_prologue(p, x, RwkvState.zeros(p, 1, np.float64))
    w = np.exp(lw.data)
    assert (w > 0).all() and (w < 1).all()


def test_non_finite_input_rejected():
    p = make_layer("rwkv", seed=23)
    x = np.zeros((1, 4, 16))
    x[0, 2, 3] = np.nan
    with pytest.raises(nc.DomainError):
        rwkv_forward_seq(p, nc.constant(x))


@pytest.mark.parametrize("kind", ["rwkv", "mamba2"])
@pytest.mark.parametrize("path", ["seq", "chunked"])
def test_gradcheck_small(kind, path):
    """Finite differences through the full layer at toy size."""
    cls, _, fseq, fchunk = LAYERS[kind]
    p = make_layer(kind, seed=25, d_model=8, n_heads=2)
    f = fseq if path == "seq" else (lambda pp, xx: fchunk(pp, xx, chunk=3))
    x = rand_x(26, 1, 5, 8)
    readout = nc.constant(np.random.default_rng(27).normal(size=(1, 5, 8)))
    params = p.named_params()

    def build():
        nc.zero_grad(params.values())
        out, _ = f(p, x)
        return nc.reduce_sum(nc.mul(out, readout))

    loss = build()
    nc.backward(loss)
    names = ["w_r", "w_base", "a_w", "bonus", "mu_k"] if kind == "rwkv" else \
            ["w_in", "conv_w", "a_log", "d_skip", "rms_scale"]
    analytic = {n: params[n].grad.copy() for n in names}
    for name in names:
        numeric = nc.finite_diff_grad(build, params[name])
        err = nc.relative_grad_error(analytic[name], numeric)
        assert err < 1e-4, f"{kind}/{path}/{name}: rel err {err}"
