"""Full-context multi-head attention and limited-context attention with
global tokens.

Both layers share projections, the clipped relative-position bias table and
the softmax; the limited-context layer evaluates the banded score matrix in
key blocks of size max(left, right) so its cost stays O(t * (window +
n_global)) instead of O(t^2).

Position information is a learned additive bias per head, indexed by the
signed query/key offset clipped to [-clip, +clip].  Clipping is what lets
the layer run on sequences longer than anything seen in training.  Global
tokens are virtual frames prepended in front of position 0 with learned
embeddings; their outputs are dropped so the [batch, time, dim] contract is
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Node

_MASK_FILL = -1e30
_QUERY_BLOCK = 512  # cap on rows of the materialized score matrix


@dataclass
class MhaParams:
    d_model: int
    n_heads: int
    w_q: Node
    w_k: Node
    w_v: Node
    w_o: Node
    rel_bias: Node  # [n_heads, 2*rel_clip + 1]
    rel_clip: int

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_heads: int,
             rel_clip: int = 64, dtype=nc.DEFAULT_DTYPE) -> "MhaParams":
        if d_model % n_heads != 0:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        s = 1.0 / np.sqrt(d_model)

        def w():
            return nc.parameter(rng.normal(size=(d_model, d_model)) * s, dtype=dtype)

        bias = nc.parameter(rng.normal(size=(n_heads, 2 * rel_clip + 1)) * 0.02, dtype=dtype)
        return cls(d_model, n_heads, w(), w(), w(), w(), bias, rel_clip)

    def named_params(self, prefix: str = "") -> dict[str, Node]:
        return {
            prefix + "w_q": self.w_q, prefix + "w_k": self.w_k,
            prefix + "w_v": self.w_v, prefix + "w_o": self.w_o,
            prefix + "rel_bias": self.rel_bias,
        }


@dataclass
class LcaConfig:
    left_window: int
    right_window: int
    n_global: int
    global_embed: Node | None  # [n_global, d_model]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, left_window: int,
             right_window: int, n_global: int, dtype=nc.DEFAULT_DTYPE) -> "LcaConfig":
        emb = None
        if n_global > 0:
            emb = nc.parameter(rng.normal(size=(n_global, d_model)) * 0.5, dtype=dtype)
        return cls(left_window, right_window, n_global, emb)

    def named_params(self, prefix: str = "") -> dict[str, Node]:
        return {} if self.global_embed is None else {prefix + "global_embed": self.global_embed}


def linear_seq(x: Node, w: Node, bias: Node | None = None) -> Node:
    """[b, t, d_in] @ [d_in, d_out] -> [b, t, d_out]."""
    b, t, d = x.shape
    out = nc.matmul(nc.reshape(x, (b * t, d)), w)
    if bias is not None:
        out = nc.badd(out, nc.reshape(bias, (1, bias.shape[0])))
    return nc.reshape(out, (b, t, w.shape[1]))


def split_heads(x: Node, n_heads: int) -> Node:
    b, t, d = x.shape
    return nc.transpose(nc.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Node) -> Node:
    b, h, t, hd = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))


def _clip_offsets(offsets: np.ndarray, clip: int) -> np.ndarray:
    return np.clip(offsets, -clip, clip) + clip


def _key_mask(lengths, b: int, t: int) -> np.ndarray | None:
    """[b, t] boolean validity from per-sequence lengths."""
    if lengths is None:
        return None
    lengths = np.asarray(lengths)
    return np.arange(t)[None, :] < lengths[:, None]


def mha_forward(p: MhaParams, x: Node, lengths=None, causal: bool = False,
                return_weights: bool = False):
    """Scaled dot-product attention with additive relative bias.

    x: [b, t, d_model]; returns the same shape.  ``causal`` masks keys after
    the query frame.  Large inputs are processed in query blocks to bound the
    size of the materialized score matrix (same math, exact softmax).
    """
    b, t, d = x.shape
    if d != p.d_model:
        raise nc.ShapeMismatchError(f"mha_forward: input dim {d} != d_model {p.d_model}")
    h, hd = p.n_heads, p.head_dim
    q = split_heads(linear_seq(x, p.w_q), h)
    k = split_heads(linear_seq(x, p.w_k), h)
    v = split_heads(linear_seq(x, p.w_v), h)
    q = nc.scale(q, 1.0 / np.sqrt(hd))
    kt = nc.swap_last2(k)

    kmask = _key_mask(lengths, b, t)
    outs = []
    weights = [] if return_weights else None
    block = t if return_weights else min(t, _QUERY_BLOCK)
    for q0 in range(0, t, block):
        q1 = min(q0 + block, t)
        scores = nc.matmul(q[:, :, q0:q1], kt)  # [b, h, qb, t]
        offs = np.arange(t)[None, :] - np.arange(q0, q1)[:, None]
        bias = nc.index_select(p.rel_bias, _clip_offsets(offs, p.rel_clip))  # [h, qb, t]
        scores = nc.badd(scores, nc.reshape(bias, (1, h, q1 - q0, t)))
        add_mask = np.zeros((b, 1, q1 - q0, t), dtype=x.dtype)
        if causal:
            add_mask += np.where(offs > 0, _MASK_FILL, 0.0)[None, None]
        if kmask is not None:
            add_mask += np.where(kmask, 0.0, _MASK_FILL)[:, None, None, :]
        if add_mask.any():
            scores = nc.badd(scores, nc.constant(add_mask))
        attn = nc.softmax_lastdim(scores)
        if return_weights:
            weights.append(attn.data)
        outs.append(nc.matmul(attn, v))
    out = outs[0] if len(outs) == 1 else nc.concat(outs, axis=2)
    out = linear_seq(merge_heads(out), p.w_o)
    if return_weights:
        return out, np.concatenate(weights, axis=2)
    return out


def lca_gt_forward(p: MhaParams, c: LcaConfig, x: Node, lengths=None,
                   return_weights: bool = False):
    """Sliding-window attention plus global tokens.

    Frame i attends to frames [i - left_window, i + right_window] and to all
    global tokens.  Score blocks cover three key blocks around each query
    block, so compute is linear in t for fixed window.  Global-token rows
    are dropped from the output (their values reach the frames only through
    the frame->global attention edges).
    """
    b, t, d = x.shape
    if d != p.d_model:
        raise nc.ShapeMismatchError(f"lca_gt_forward: input dim {d} != d_model {p.d_model}")
    h, hd = p.n_heads, p.head_dim
    wl, wr, g = c.left_window, c.right_window, c.n_global

    q = split_heads(linear_seq(x, p.w_q), h)
    k = split_heads(linear_seq(x, p.w_k), h)
    v = split_heads(linear_seq(x, p.w_v), h)
    q = nc.scale(q, 1.0 / np.sqrt(hd))

    bs = max(wl, wr, 1)  # key/query block size
    nb = -(-t // bs)
    tp = nb * bs
    if tp > t:
        q = nc.pad_axis(q, 2, 0, tp - t)
        k = nc.pad_axis(k, 2, 0, tp - t)
        v = nc.pad_axis(v, 2, 0, tp - t)

    qb = nc.reshape(q, (b, h, nb, bs, hd))
    kp = nc.pad_axis(k, 2, bs, bs)
    vp = nc.pad_axis(v, 2, bs, bs)

    def three_blocks(z):
        parts = [nc.reshape(z[:, :, s * bs:s * bs + tp], (b, h, nb, bs, hd)) for s in range(3)]
        return nc.concat(parts, axis=3)  # [b, h, nb, 3*bs, hd]

    k3 = three_blocks(kp)
    v3 = three_blocks(vp)

    scores = nc.matmul(qb, nc.swap_last2(k3))  # [b, h, nb, bs, 3*bs]
    # offsets are identical for every block: key r sits at (r - bs) relative
    # to the block start, query qq at qq
    offs = (np.arange(3 * bs)[None, :] - bs) - np.arange(bs)[:, None]
    bias = nc.index_select(p.rel_bias, _clip_offsets(offs, p.rel_clip))
    scores = nc.badd(scores, nc.reshape(bias, (1, h, 1, bs, 3 * bs)))

    window_ok = (offs >= -wl) & (offs <= wr)  # [bs, 3*bs]
    key_pos = (np.arange(nb) * bs)[:, None] + (np.arange(3 * bs)[None, :] - bs)  # [nb, 3*bs]
    valid_len = np.full(b, t) if lengths is None else np.asarray(lengths)
    key_ok = (key_pos[None] >= 0) & (key_pos[None] < valid_len[:, None, None])  # [b, nb, 3*bs]
    add_mask = np.where(window_ok[None, None, None] & key_ok[:, None, :, None, :],
                        0.0, _MASK_FILL).astype(x.dtype)
    scores = nc.badd(scores, nc.constant(add_mask))

    if g > 0:
        ge = nc.reshape(c.global_embed, (1, g, d))
        gk = split_heads(nc.reshape(nc.matmul(c.global_embed, p.w_k), (1, g, d)), h)  # [1,h,g,hd]
        gv = split_heads(nc.reshape(nc.matmul(c.global_embed, p.w_v), (1, g, d)), h)
        del ge
        gkt = nc.broadcast_to(nc.reshape(nc.swap_last2(gk), (1, h, 1, hd, g)), (b, h, nb, hd, g))
        gscores = nc.matmul(qb, gkt)  # [b, h, nb, bs, g]
        # globals are virtual frames at positions -n_global .. -1
        qpos = (np.arange(nb) * bs)[:, None] + np.arange(bs)[None, :]  # [nb, bs]
        goffs = (np.arange(g)[None, None, :] - g) - qpos[:, :, None]  # [nb, bs, g]
        gbias = nc.index_select(p.rel_bias, _clip_offsets(goffs, p.rel_clip))  # [h, nb, bs, g]
        gscores = nc.badd(gscores, nc.reshape(gbias, (1, h, nb, bs, g)))
        scores = nc.concat([scores, gscores], axis=4)

    attn = nc.softmax_lastdim(scores)
    out = nc.matmul(attn[:, :, :, :, :3 * bs], v3) if g > 0 else nc.matmul(attn, v3)
    if g > 0:
        gvb = nc.broadcast_to(nc.reshape(gv, (1, h, 1, g, hd)), (b, h, nb, g, hd))
        out = nc.add(out, nc.matmul(attn[:, :, :, :, 3 * bs:], gvb))

    out = nc.reshape(out, (b, h, tp, hd))[:, :, :t]
    out = linear_seq(merge_heads(out), p.w_o)
    if return_weights:
        dense = np.zeros((b, h, t, t + g), dtype=attn.data.dtype)
        w = attn.data
        for i in range(nb):
            rows = np.arange(i * bs, min((i + 1) * bs, t))
            cols = np.arange(i * bs - bs, i * bs + 2 * bs)
            ok = (cols >= 0) & (cols < t)
            dense[:, :, rows[:, None], cols[None, ok]] = \
                w[:, :, i, :len(rows), :3 * bs][:, :, :, ok]
            if g > 0:
                dense[:, :, rows, t:] = w[:, :, i, :len(rows), 3 * bs:]
        return out, dense
    return out


def attention_flops(kind: str, t: int, cfg) -> float:
    """Analytic multiply-accumulate count of the score/value computation.

    ``cfg`` is a mapping or object exposing the dims the kind needs:
    d_model and n_heads always; window/n_global for lca; lora_rank for
    rwkv; state_dim for mamba2.
    """
    def get(name, default=None):
        if isinstance(cfg, dict):
            return cfg.get(name, default)
        return getattr(cfg, name, default)

    d = get("d_model")
    h = get("n_heads")
    hd = d // h
    if kind == "mha":
        return 4 * t * d * d + 2 * t * t * d
    if kind == "lca":
        window = min(t, get("left_window") + get("right_window") + 1)
        g = get("n_global", 0)
        return 4 * t * d * d + 2 * t * (window + g) * d + 2 * g * (t + g) * d
    if kind == "rwkv":
        r = get("lora_rank", 8)
        return 5 * t * d * d + 2 * t * d * r + 3 * t * d * hd
    if kind == "mamba2":
        n = get("state_dim", 16)
        return t * d * (2 * d + 2 * n + h) + 4 * t * (d + 2 * n) + 3 * t * d * n + t * d * d
    raise ValueError(f"unknown attention kind: {kind}")
