"""Recurrent attention layers: RWKV-style time mixing and a Mamba-2-style
state-space block.

Both layers expose two forward paths with identical semantics:

* ``*_forward_seq``: the frame-by-frame recurrence, used as the oracle.
* ``*_forward_chunked``: a within-chunk parallel formulation that
  materializes the decay-weighted attention matrix for each chunk and
  carries a matrix state across chunks.

The two paths share the projection prologue and output epilogue, and the
chunk path degenerates to the exact sequential arithmetic at chunk size 1.
All cumulative decays live in log space; the chunk math only ever
exponentiates differences that are <= 0 inside the valid (causal) region,
so nothing overflows no matter how strong the decay or how long the chunk.

RWKV recurrence, per head, vectors in R^head_dim:

    shifted_c = (1 - mu_c) * x_t + mu_c * x_{t-1}        c in {r,k,v,w,g}
    r,k,v    = W_r s_r, W_k s_k, W_v s_v
    gate     = silu(W_g s_g)
    d_t      = w_base + tanh(s_w A_w) B_w
    w_t      = exp(-exp(d_t))                            in (0,1)
    y_t      = S_{t-1}^T r_t + ((u * k_t) . r_t) v_t
    S_t      = diag(w_t) S_{t-1} + k_t v_t^T
    out_t    = W_o(gate * GroupNorm_head(y))

Mamba-2 block, per head, scalar decay per head:

    (z, x', B, C, dt_pre) = x W_in + b_in
    x', B, C = silu(causal_conv4(x', B, C))
    dt   = softplus(dt_pre) > 0
    a_t  = exp(-dt * exp(a_log))                         in (0,1)
    H_t  = a_t H_{t-1} + B_t (dt x'_t)^T
    y_t  = H_t^T C_t + D * x'_t
    out  = W_o(RMSNorm(y) * silu(z))
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .attention_mha import linear_seq, merge_heads, split_heads
from .numcore import Node

_MASK_FILL = -1e30
_GN_EPS = 1e-5


def _check_finite(name: str, x: Node) -> None:
    if not np.isfinite(x.data).all():
        raise nc.DomainError(f"{name}: input contains non-finite values")


# ---------------------------------------------------------------------------
# RWKV time mixing
# ---------------------------------------------------------------------------

@dataclass
class RwkvParams:
    d_model: int
    n_heads: int
    mu_r: Node
    mu_k: Node
    mu_v: Node
    mu_w: Node
    mu_g: Node
    w_r: Node
    w_k: Node
    w_v: Node
    w_g: Node
    w_o: Node
    w_base: Node     # [d_model], pre-activation decay
    a_w: Node        # [d_model, lora_rank]
    b_w: Node        # [lora_rank, d_model]
    bonus: Node      # [d_model], current-frame bonus u
    gn_scale: Node
    gn_shift: Node

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def lora_rank(self) -> int:
        return self.a_w.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int,
             lora_rank: int = 8, dtype=nc.DEFAULT_DTYPE) -> "RwkvParams":
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        s = 1.0 / np.sqrt(d_model)

        def w():
            return nc.parameter(rng.normal(size=(d_model, d_model)) * s, dtype=dtype)

        def mu():
            return nc.parameter(rng.uniform(0.2, 0.8, size=d_model), dtype=dtype)

        # pre-activation decays spread over several time scales:
        # exp(-exp(-6)) ~ 0.9975 (slow) down to exp(-exp(0.5)) ~ 0.19 (fast)
        base = rng.permutation(np.linspace(-6.0, 0.5, d_model))
        return cls(
            d_model, n_heads,
            mu(), mu(), mu(), mu(), mu(),
            w(), w(), w(), w(), w(),
            nc.parameter(base, dtype=dtype),
            nc.parameter(rng.normal(size=(d_model, lora_rank)) * 0.1, dtype=dtype),
            nc.parameter(np.zeros((lora_rank, d_model)), dtype=dtype),
            nc.parameter(rng.normal(size=d_model) * 0.3, dtype=dtype),
            nc.parameter(np.ones(d_model), dtype=dtype),
            nc.parameter(np.zeros(d_model), dtype=dtype),
        )

    def named_params(self, prefix: str = "") -> dict[str, Node]:
        names = ["mu_r", "mu_k", "mu_v", "mu_w", "mu_g", "w_r", "w_k", "w_v",
                 "w_g", "w_o", "w_base", "a_w", "b_w", "bonus", "gn_scale", "gn_shift"]
        return {prefix + n: getattr(self, n) for n in names}


@dataclass
class RwkvState:
    s: Node       # [b, n_heads, head_dim, head_dim], kept at float64
    tail: Node    # [b, 1, d_model], previous raw frame for the token shift

    @classmethod
    def zeros(cls, p: RwkvParams, batch: int, dtype=None) -> "RwkvState":
        dt = dtype or p.w_r.dtype
        hd = p.head_dim
        return cls(nc.constant(np.zeros((batch, p.n_heads, hd, hd), dtype=np.float64)),
                   nc.constant(np.zeros((batch, 1, p.d_model), dtype=dt)))


def _token_shift(x: Node, tail: Node, mu: Node) -> Node:
    """x_t + mu * (x_{t-1} - x_t) with the segment tail as x_{-1}."""
    t, d = x.shape[1], x.shape[2]
    prev = nc.concat([tail, x[:, :t - 1]], axis=1) if t > 1 else tail
    m = nc.reshape(nc.clip(mu, 0.0, 1.0), (1, 1, d))
    return nc.add(x, nc.bmul(m, nc.sub(prev, x)))


def _rwkv_prologue(p: RwkvParams, x: Node, s0: RwkvState):
    _check_finite("rwkv_forward", x)
    b, t, d = x.shape
    if d != p.d_model:
        raise nc.ShapeMismatchError(f"rwkv_forward: input dim {d} != d_model {p.d_model}")
    h = p.n_heads
    r = split_heads(linear_seq(_token_shift(x, s0.tail, p.mu_r), p.w_r), h)
    k = split_heads(linear_seq(_token_shift(x, s0.tail, p.mu_k), p.w_k), h)
    v = split_heads(linear_seq(_token_shift(x, s0.tail, p.mu_v), p.w_v), h)
    gate = nc.silu(linear_seq(_token_shift(x, s0.tail, p.mu_g), p.w_g))
    sw = _token_shift(x, s0.tail, p.mu_w)
    dec = nc.badd(nc.reshape(p.w_base, (1, 1, d)),
                  linear_seq(nc.tanh(linear_seq(sw, p.a_w)), p.b_w))
    lw = nc.neg(nc.exp(dec))          # log decay, always < 0
    lw = split_heads(lw, h)           # [b, h, t, hd]
    # decay products and the matrix state accumulate at float64 so the
    # chunked and sequential paths agree to well under 1e-5 in fp32 mode
    lw64 = nc.cast(lw, np.float64)
    u = nc.reshape(p.bonus, (1, h, 1, p.head_dim))
    new_tail = x[:, t - 1:t]
    return r, k, v, lw, lw64, gate, u, new_tail


def _rwkv_epilogue(p: RwkvParams, y: Node, gate: Node) -> Node:
    h, hd = y.shape[1], y.shape[3]
    mean = nc.reduce_mean(y, axis=3, keepdims=True)
    cent = nc.badd(y, nc.neg(mean))
    var = nc.reduce_mean(nc.square(cent), axis=3, keepdims=True)
    norm = nc.bmul(cent, nc.recip(nc.sqrt(nc.add_scalar(var, _GN_EPS))))
    norm = nc.badd(nc.bmul(norm, nc.reshape(p.gn_scale, (1, h, 1, hd))),
                   nc.reshape(p.gn_shift, (1, h, 1, hd)))
    return linear_seq(nc.mul(merge_heads(norm), gate), p.w_o)


def _bonus_readout(r: Node, k: Node, v: Node, u: Node) -> Node:
    """((u * k) . r) v, batched over leading axes."""
    h, hd = u.shape[1], u.shape[-1]
    u = nc.reshape(u, (1, h) + (1,) * (len(k.shape) - 3) + (hd,))
    dot = nc.reduce_sum(nc.mul(nc.bmul(u, k), r), axis=-1, keepdims=True)
    return nc.bmul(dot, v)


def rwkv_forward_seq(p: RwkvParams, x: Node, s0: RwkvState | None = None,
                     chunk: int | None = None) -> tuple[Node, RwkvState]:
    """Frame-by-frame recurrence; the oracle the chunked path is held to."""
    b, t, _ = x.shape
    if s0 is None:
        s0 = RwkvState.zeros(p, b, x.dtype)
    r, k, v, lw, lw64, gate, u, new_tail = _rwkv_prologue(p, x, s0)
    h, hd = p.n_heads, p.head_dim
    f64 = np.float64

    s = s0.s
    ys = []
    for i in range(t):
        ri = r[:, :, i:i + 1]                       # [b, h, 1, hd]
        ki = k[:, :, i:i + 1]
        vi = v[:, :, i:i + 1]
        wi = nc.exp(lw64[:, :, i:i + 1])            # [b, h, 1, hd] float64
        y = nc.add(nc.matmul(ri, nc.cast(s, x.dtype)),
                   _bonus_readout(ri, ki, vi, u))
        ys.append(y)
        s = nc.add(nc.bmul(nc.reshape(wi, (b, h, hd, 1)), s),
                   nc.matmul(nc.cast(nc.swap_last2(ki), f64), nc.cast(vi, f64)))
    out = nc.concat(ys, axis=2) if t > 1 else ys[0]
    return _rwkv_epilogue(p, out, gate), RwkvState(s, new_tail)


def _rwkv_decay_scores(r: Node, k: Node, lw: Node) -> Node:
    """Strictly-causal intra-chunk scores with per-channel decay products.

    Inputs are [b, h, nchunks, c, hd]; output A is [b, h, nchunks, c, c] with
    A[t, s] = sum_i r[t,i] k[s,i] exp(Lprev[t,i] - L[s,i]) for s < t, else 0,
    where L is the inclusive cumulative log decay inside the chunk.  The
    [c, c, hd] exponential tensor is never kept on the tape; the backward
    pass recomputes it.
    """
    c = r.shape[-2]
    dt = r.data.dtype
    fill = np.where(np.tril(np.ones((c, c), dtype=dt), -1) > 0,
                    dt.type(0), dt.type(_MASK_FILL))[..., None]

    # cumulative decays and their differences at float64: the spans can be
    # hundreds of frames, where fp32 accumulation alone costs ~1e-5
    big_l = np.cumsum(lw.data.astype(np.float64), axis=-2)
    lprev = big_l - lw.data
    e = (lprev[..., :, None, :] - big_l[..., None, :, :]).astype(dt)
    e += fill                       # push masked entries to exp() == 0
    np.exp(e, out=e)
    t1 = e * k.data[..., None, :, :]
    a = np.matmul(t1, r.data[..., :, None])[..., 0]

    def bwd(g):
        m = g[..., :, :, None] * e  # closure keeps e; cheaper than recompute
        dr = (m * k.data[..., None, :, :]).sum(axis=-2)
        dk = (m * r.data[..., :, None, :]).sum(axis=-3)
        m *= r.data[..., :, None, :]
        m *= k.data[..., None, :, :]
        dlprev = m.sum(axis=-2)
        dlbig = -m.sum(axis=-3)
        rev_incl = np.flip(np.cumsum(np.flip(dlbig, axis=-2), axis=-2), axis=-2)
        rev_excl_src = np.flip(np.cumsum(np.flip(dlprev, axis=-2), axis=-2), axis=-2)
        dlw = (rev_excl_src - dlprev) + rev_incl
        return dr, dk, dlw.astype(lw.dtype, copy=False)

    return nc.custom_op(np.ascontiguousarray(a), (r, k, lw), bwd)


def rwkv_forward_chunked(p: RwkvParams, x: Node, s0: RwkvState | None = None,
                         chunk: int = 16) -> tuple[Node, RwkvState]:
    """Chunked evaluation: within-chunk decay-product attention plus an
    inter-chunk state recurrence.  Matches rwkv_forward_seq."""
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    b, t, _ = x.shape
    if s0 is None:
        s0 = RwkvState.zeros(p, b, x.dtype)
    r, k, v, lw, lw64, gate, u, new_tail = _rwkv_prologue(p, x, s0)
    h, hd = p.n_heads, p.head_dim
    f64 = np.float64

    nch = -(-t // chunk)
    tp = nch * chunk
    if tp > t:
        # zero log-decay on padding keeps the carried state untouched
        r = nc.pad_axis(r, 2, 0, tp - t)
        k = nc.pad_axis(k, 2, 0, tp - t)
        v = nc.pad_axis(v, 2, 0, tp - t)
        lw = nc.pad_axis(lw, 2, 0, tp - t)
        lw64 = nc.pad_axis(lw64, 2, 0, tp - t)

    shp = (b, h, nch, chunk, hd)
    rc = nc.reshape(r, shp)
    kc = nc.reshape(k, shp)
    vc = nc.reshape(v, shp)
    lwc = nc.reshape(lw, shp)
    lwc64 = nc.reshape(lw64, shp)

    big_l = nc.cumsum(lwc64, axis=3)
    lprev = nc.sub(big_l, lwc64)
    last = big_l[:, :, :, chunk - 1:chunk]                      # [b,h,nc,1,hd]
    q = nc.mul(rc, nc.cast(nc.exp(lprev), x.dtype))
    kd = nc.mul(kc, nc.cast(nc.exp(nc.badd(last, nc.neg(big_l))), x.dtype))
    kv = nc.matmul(nc.cast(nc.swap_last2(kd), f64), nc.cast(vc, f64))
    dec = nc.exp(nc.reshape(last, (b, h, nch, hd)))             # float64

    s = s0.s
    states = []
    for i in range(nch):
        states.append(s)
        s = nc.add(nc.bmul(nc.reshape(dec[:, :, i], (b, h, hd, 1)), s), kv[:, :, i])
    sstack = nc.stack(states, axis=2)                           # [b,h,nc,hd,hd]

    y_inter = nc.matmul(q, nc.cast(sstack, x.dtype))
    a = _rwkv_decay_scores(rc, kc, lwc)
    y_intra = nc.add(nc.matmul(a, vc), _bonus_readout(rc, kc, vc, u))
    y = nc.add(y_inter, y_intra)
    y = nc.reshape(y, (b, h, tp, hd))
    if tp > t:
        y = y[:, :, :t]
    return _rwkv_epilogue(p, y, gate), RwkvState(s, new_tail)


# ---------------------------------------------------------------------------
# Mamba-2 block
# ---------------------------------------------------------------------------

_CONV_WIDTH = 4


@dataclass
class Mamba2Params:
    d_model: int
    n_heads: int
    state_dim: int
    w_in: Node       # [d, 2d + 2N + n_heads]
    b_in: Node
    conv_w: Node     # [d + 2N, 4] depthwise taps, oldest first
    conv_b: Node
    a_log: Node      # [n_heads]
    d_skip: Node     # [n_heads]
    w_o: Node
    rms_scale: Node  # [d]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def conv_channels(self) -> int:
        return self.d_model + 2 * self.state_dim

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int,
             state_dim: int = 16, dtype=nc.DEFAULT_DTYPE) -> "Mamba2Params":
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        proj_out = 2 * d_model + 2 * state_dim + n_heads
        s = 1.0 / np.sqrt(d_model)
        b_in = np.zeros(proj_out)
        # bias the step-size pre-activation so softplus lands in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=n_heads))
        b_in[2 * d_model + 2 * state_dim:] = np.log(np.expm1(dt))
        ch = d_model + 2 * state_dim
        return cls(
            d_model, n_heads, state_dim,
            nc.parameter(rng.normal(size=(d_model, proj_out)) * s, dtype=dtype),
            nc.parameter(b_in, dtype=dtype),
            nc.parameter(rng.normal(size=(ch, _CONV_WIDTH)) * 0.25, dtype=dtype),
            nc.parameter(np.zeros(ch), dtype=dtype),
            nc.parameter(np.log(rng.uniform(1.0, 16.0, size=n_heads)), dtype=dtype),
            nc.parameter(np.ones(n_heads), dtype=dtype),
            nc.parameter(rng.normal(size=(d_model, d_model)) * s, dtype=dtype),
            nc.parameter(np.ones(d_model), dtype=dtype),
        )

    def named_params(self, prefix: str = "") -> dict[str, Node]:
        names = ["w_in", "b_in", "conv_w", "conv_b", "a_log", "d_skip", "w_o", "rms_scale"]
        return {prefix + n: getattr(self, n) for n in names}


@dataclass
class Mamba2State:
    h: Node          # [b, n_heads, state_dim, head_dim]
    conv_tail: Node  # [b, conv_width - 1, d + 2N], pre-conv inputs

    @classmethod
    def zeros(cls, p: Mamba2Params, batch: int, dtype=None) -> "Mamba2State":
        dt = dtype or p.w_in.dtype
        return cls(
            nc.constant(np.zeros((batch, p.n_heads, p.state_dim, p.head_dim),
                                 dtype=np.float64)),
            nc.constant(np.zeros((batch, _CONV_WIDTH - 1, p.conv_channels), dtype=dt)))


def _causal_conv4(u: Node, tail: Node, w: Node, bias: Node) -> Node:
    """Depthwise causal convolution of width 4 over [b, t, ch]."""
    b, t, ch = u.shape
    up = nc.concat([tail, u], axis=1)
    acc = None
    for tap in range(_CONV_WIDTH):
        term = nc.bmul(nc.reshape(w[:, tap], (1, 1, ch)), up[:, tap:tap + t])
        acc = term if acc is None else nc.add(acc, term)
    return nc.badd(acc, nc.reshape(bias, (1, 1, ch)))


def _mamba_prologue(p: Mamba2Params, x: Node, s0: Mamba2State):
    _check_finite("mamba2_forward", x)
    b, t, d = x.shape
    if d != p.d_model:
        raise nc.ShapeMismatchError(f"mamba2_forward: input dim {d} != d_model {p.d_model}")
    h, hd, n = p.n_heads, p.head_dim, p.state_dim

    proj = linear_seq(x, p.w_in, p.b_in)
    z = proj[:, :, :d]
    u = proj[:, :, d:d + p.conv_channels]
    dpre = proj[:, :, d + p.conv_channels:]

    new_tail = u[:, t - _CONV_WIDTH + 1:] if t >= _CONV_WIDTH - 1 else \
        nc.concat([s0.conv_tail[:, t:], u], axis=1)
    cu = nc.silu(_causal_conv4(u, s0.conv_tail, p.conv_w, p.conv_b))
    xi = split_heads(cu[:, :, :d], h)                       # [b, h, t, hd]
    bmat = nc.reshape(cu[:, :, d:d + n], (b, 1, t, n))      # shared across heads
    cmat = nc.reshape(cu[:, :, d + n:], (b, 1, t, n))

    delta = nc.softplus(dpre)                               # [b, t, h]
    delta = nc.transpose(nc.reshape(delta, (b, t, h, 1)), (0, 2, 1, 3))
    la = nc.bmul(delta, nc.reshape(nc.neg(nc.exp(p.a_log)), (1, h, 1, 1)))
    la64 = nc.cast(la, np.float64)   # decay/state pipeline runs at float64
    xv = nc.bmul(delta, xi)                                 # dt-weighted values
    dsk = nc.reshape(p.d_skip, (1, h, 1, 1))
    y_skip = nc.bmul(dsk, xi)
    return z, xi, bmat, cmat, la64, xv, y_skip, new_tail


def _mamba_epilogue(p: Mamba2Params, y: Node, z: Node) -> Node:
    ym = merge_heads(y)
    ms = nc.reduce_mean(nc.square(ym), axis=2, keepdims=True)
    norm = nc.bmul(ym, nc.recip(nc.sqrt(nc.add_scalar(ms, _GN_EPS))))
    norm = nc.bmul(norm, nc.reshape(p.rms_scale, (1, 1, p.d_model)))
    return linear_seq(nc.mul(norm, nc.silu(z)), p.w_o)


def mamba2_forward_seq(p: Mamba2Params, x: Node, s0: Mamba2State | None = None,
                       chunk: int | None = None) -> tuple[Node, Mamba2State]:
    b, t, _ = x.shape
    if s0 is None:
        s0 = Mamba2State.zeros(p, b, x.dtype)
    z, xi, bmat, cmat, la64, xv, y_skip, new_tail = _mamba_prologue(p, x, s0)
    h, hd, n = p.n_heads, p.head_dim, p.state_dim
    f64 = np.float64

    hs = s0.h
    ys = []
    for i in range(t):
        ci = nc.broadcast_to(cmat[:, :, i:i + 1], (b, h, 1, n))      # [b,h,1,N]
        bi = nc.broadcast_to(bmat[:, :, i:i + 1], (b, h, 1, n))
        ai = nc.exp(la64[:, :, i:i + 1])                             # [b,h,1,1] f64
        y1 = nc.bmul(nc.cast(ai, x.dtype), nc.matmul(ci, nc.cast(hs, x.dtype)))
        cb = nc.matmul(ci, nc.swap_last2(bi))                        # [b,h,1,1]
        y2 = nc.bmul(cb, xv[:, :, i:i + 1])
        ys.append(nc.add(nc.add(y1, y2), y_skip[:, :, i:i + 1]))
        hs = nc.add(nc.bmul(ai, hs),
                    nc.matmul(nc.cast(nc.swap_last2(bi), f64),
                              nc.cast(xv[:, :, i:i + 1], f64)))
    y = nc.concat(ys, axis=2) if t > 1 else ys[0]
    return _mamba_epilogue(p, y, z), Mamba2State(hs, new_tail)


def mamba2_forward_chunked(p: Mamba2Params, x: Node, s0: Mamba2State | None = None,
                           chunk: int = 16) -> tuple[Node, Mamba2State]:
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    b, t, _ = x.shape
    if s0 is None:
        s0 = Mamba2State.zeros(p, b, x.dtype)
    z, xi, bmat, cmat, la64, xv, y_skip, new_tail = _mamba_prologue(p, x, s0)
    h, hd, n = p.n_heads, p.head_dim, p.state_dim
    f64 = np.float64

    ncH = -(-t // chunk)
    tp = ncH * chunk
    if tp > t:
        xv = nc.pad_axis(xv, 2, 0, tp - t)
        la64 = nc.pad_axis(la64, 2, 0, tp - t)
        bmat = nc.pad_axis(bmat, 2, 0, tp - t)
        cmat = nc.pad_axis(cmat, 2, 0, tp - t)

    xvc = nc.reshape(xv, (b, h, ncH, chunk, hd))
    lac = nc.reshape(la64, (b, h, ncH, chunk, 1))
    bc = nc.reshape(bmat, (b, 1, ncH, chunk, n))
    cc = nc.reshape(cmat, (b, 1, ncH, chunk, n))

    big_l = nc.cumsum(lac, axis=3)                            # inclusive, f64
    last = big_l[:, :, :, chunk - 1:chunk]

    # intra-chunk: A[t,s] = exp(L_t - L_s) * (C_t . B_s) for s <= t; the
    # differences are formed at float64, then exponentiate at input precision
    cb = nc.matmul(cc, nc.swap_last2(bc))                     # [b,1,nc,c,c]
    diff = nc.cast(nc.badd(big_l, nc.neg(nc.swap_last2(big_l))), x.dtype)
    mask = np.where(np.tril(np.ones((chunk, chunk), dtype=bool)), 0.0, _MASK_FILL)
    diff = nc.badd(diff, nc.constant(mask.astype(x.dtype)))
    a = nc.bmul(nc.exp(diff), cb)
    y_intra = nc.matmul(a, xvc)

    # inter-chunk state recurrence at float64
    rem = nc.cast(nc.exp(nc.badd(last, nc.neg(big_l))), x.dtype)
    bd = nc.bmul(bc, rem)
    kv = nc.matmul(nc.cast(nc.swap_last2(bd), f64), nc.cast(xvc, f64))
    dec = nc.exp(nc.reshape(last, (b, h, ncH, 1)))            # f64

    hs = s0.h
    states = []
    for i in range(ncH):
        states.append(hs)
        hs = nc.add(nc.bmul(nc.reshape(dec[:, :, i], (b, h, 1, 1)), hs), kv[:, :, i])
    hstack = nc.stack(states, axis=2)                         # [b,h,nc,N,hd]

    y_inter = nc.bmul(nc.cast(nc.exp(big_l), x.dtype),
                      nc.matmul(nc.broadcast_to(cc, (b, h, ncH, chunk, n)),
                                nc.cast(hstack, x.dtype)))

    y = nc.add(y_inter, y_intra)
    y = nc.reshape(y, (b, h, tp, hd))
    if tp > t:
        y = y[:, :, :t]
    y = nc.add(y, y_skip)
    return _mamba_epilogue(p, y, z), Mamba2State(hs, new_tail)
