"""Conformer-style encoder with a pluggable attention sublayer and a CTC head.

Block layout (pre-norm, residual around every sublayer):

    x += 0.5 * ff1(LN(x))
    x += attention(LN(x))          # MHA | LCA+GT | directional RWKV/Mamba-2
    x += conv_module(LN(x))        # pointwise-GLU > depthwise > LN > swish > pointwise
    x += 0.5 * ff2(LN(x))
    x = LN(x)

All non-attention parameters have identical shapes regardless of the
attention kind, so swapping the attention sublayer never changes the rest
of the parameter budget.  The front-end subsamples by 4 with two stride-2
depthwise-separable convolutions.  Padded positions are re-zeroed after
every block so batched and individual encoding agree.

The CTC head projects to vocab+1 log-probabilities with blank at index 0;
dataset labels 0..V-1 map to classes 1..V.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .attention_mha import LcaConfig, MhaParams, lca_gt_forward, linear_seq, mha_forward
from .direction import DirectionalLayer, DirectionMode, LayerSchedule, ScheduleError, bidir_forward
from .numcore import Node

ATTENTION_KINDS = ("mha", "lca_gt", "rwkv", "mamba2")

# full-scale reference geometry (kept for configs; tests run desk scale)
FULL_SCALE = dict(n_layers=12, d_model=512, n_heads=8, d_ff=2048,
                  left_window=128, right_window=128, n_global=1)


class CtcError(ValueError):
    """Infeasible input/label length combination for CTC."""


@dataclass
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    conv_kernel: int = 7
    attention_kind: str = "rwkv"
    bidirectional: bool = False
    subsample_factor: int = 4
    vocab_size: int = 32
    d_in: int = 16
    causal_conv: bool = False
    rel_clip: int = 64
    left_window: int = 16
    right_window: int = 16
    n_global: int = 1
    state_dim: int = 16
    lora_rank: int = 8
    ra_chunk: int = 16

    def __post_init__(self):
        if self.attention_kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention_kind!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.subsample_factor != 4:
            raise ValueError("front-end implements subsample factor 4")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _lin(rng, d_in, d_out, dtype):
    return nc.parameter(rng.normal(size=(d_in, d_out)) * (1.0 / np.sqrt(d_in)), dtype=dtype)


def _zeros(d, dtype):
    return nc.parameter(np.zeros(d), dtype=dtype)


@dataclass
class LayerNormParams:
    scale: Node
    bias: Node

    @classmethod
    def init(cls, d, dtype):
        return cls(nc.parameter(np.ones(d), dtype=dtype), _zeros(d, dtype))

    def named_params(self, prefix):
        return {prefix + "scale": self.scale, prefix + "bias": self.bias}


def layer_norm(x: Node, p: LayerNormParams, eps: float = 1e-5) -> Node:
    d = x.shape[-1]
    mean = nc.reduce_mean(x, axis=-1, keepdims=True)
    cent = nc.badd(x, nc.neg(mean))
    var = nc.reduce_mean(nc.square(cent), axis=-1, keepdims=True)
    norm = nc.bmul(cent, nc.recip(nc.sqrt(nc.add_scalar(var, eps))))
    shape = (1,) * (len(x.shape) - 1) + (d,)
    return nc.badd(nc.bmul(norm, nc.reshape(p.scale, shape)),
                   nc.reshape(p.bias, shape))


@dataclass
class FeedForward:
    w1: Node
    b1: Node
    w2: Node
    b2: Node

    @classmethod
    def init(cls, rng, d, d_ff, dtype):
        return cls(_lin(rng, d, d_ff, dtype), _zeros(d_ff, dtype),
                   _lin(rng, d_ff, d, dtype), _zeros(d, dtype))

    def __call__(self, x: Node) -> Node:
        return linear_seq(nc.silu(linear_seq(x, self.w1, self.b1)), self.w2, self.b2)

    def named_params(self, prefix):
        return {prefix + n: getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


def depthwise_conv(x: Node, w: Node, bias: Node | None, stride: int = 1,
                   causal: bool = False) -> Node:
    """Depthwise conv over [b, t, ch]; kernel taps w[ch, k], oldest first.

    Symmetric mode zero-pads both sides (odd kernels center exactly);
    causal mode pads only the past.  Output length is ceil(t / stride).
    """
    b, t, ch = x.shape
    k = w.shape[1]
    out_t = -(-t // stride)
    if causal:
        pad_l, pad_r = k - 1, max(0, stride * (out_t - 1) + 1 - t)
    else:
        pad_l = (k - 1) // 2
        pad_r = max(0, stride * (out_t - 1) + k - 1 - pad_l - (t - 1))
    xp = nc.pad_axis(x, 1, pad_l, pad_r)
    acc = None
    for tap in range(k):
        sl = xp[:, tap:tap + stride * out_t:stride] if stride > 1 else xp[:, tap:tap + out_t]
        term = nc.bmul(nc.reshape(w[:, tap], (1, 1, ch)), sl)
        acc = term if acc is None else nc.add(acc, term)
    if bias is not None:
        acc = nc.badd(acc, nc.reshape(bias, (1, 1, ch)))
    return acc


@dataclass
class ConvModule:
    pw1: Node      # [d, 2d] for the GLU
    b1: Node
    dw: Node       # [d, kernel]
    b_dw: Node
    ln: LayerNormParams
    pw2: Node
    b2: Node
    causal: bool

    @classmethod
    def init(cls, rng, d, kernel, causal, dtype):
        return cls(_lin(rng, d, 2 * d, dtype), _zeros(2 * d, dtype),
                   nc.parameter(rng.normal(size=(d, kernel)) * (1.0 / np.sqrt(kernel)), dtype=dtype),
                   _zeros(d, dtype), LayerNormParams.init(d, dtype),
                   _lin(rng, d, d, dtype), _zeros(d, dtype), causal)

    def __call__(self, x: Node) -> Node:
        d = x.shape[-1]
        gates = linear_seq(x, self.pw1, self.b1)
        h = nc.mul(gates[:, :, :d], nc.sigmoid(gates[:, :, d:]))
        h = depthwise_conv(h, self.dw, self.b_dw, causal=self.causal)
        h = nc.silu(layer_norm(h, self.ln))
        return linear_seq(h, self.pw2, self.b2)

    def named_params(self, prefix):
        out = {prefix + n: getattr(self, n) for n in ("pw1", "b1", "dw", "b_dw", "pw2", "b2")}
        out.update(self.ln.named_params(prefix + "ln."))
        return out


@dataclass
class Subsampler:
    """Two stride-2 depthwise-separable conv stages: d_in -> d_model, t -> ceil(t/4)."""
    dw1: Node
    pw1: Node
    b1: Node
    dw2: Node
    pw2: Node
    b2: Node

    @classmethod
    def init(cls, rng, d_in, d_model, dtype):
        return cls(
            nc.parameter(rng.normal(size=(d_in, 3)) * 0.5, dtype=dtype),
            _lin(rng, d_in, d_model, dtype), _zeros(d_model, dtype),
            nc.parameter(rng.normal(size=(d_model, 3)) * 0.5, dtype=dtype),
            _lin(rng, d_model, d_model, dtype), _zeros(d_model, dtype))

    def __call__(self, x: Node, lengths=None) -> Node:
        h = depthwise_conv(x, self.dw1, None, stride=2)
        h = nc.silu(linear_seq(h, self.pw1, self.b1))
        if lengths is not None:
            # zero half-rate padding so the second conv sees true zeros
            # beyond each row's valid region, exactly as in a solo pass
            mid = _length_mask(-(-np.asarray(lengths) // 2), h.shape[0], h.shape[1],
                               h.data.dtype)
            h = nc.bmul(h, nc.constant(mid))
        h = depthwise_conv(h, self.dw2, None, stride=2)
        return nc.silu(linear_seq(h, self.pw2, self.b2))

    def named_params(self, prefix):
        return {prefix + n: getattr(self, n)
                for n in ("dw1", "pw1", "b1", "dw2", "pw2", "b2")}


def subsampled_length(t: int | np.ndarray) -> int | np.ndarray:
    return -(-np.asarray(t) // 4) if isinstance(t, np.ndarray) else -(-t // 4)


@dataclass
class ConformerBlock:
    ln_ff1: LayerNormParams
    ff1: FeedForward
    ln_attn: LayerNormParams
    attn: object            # MhaParams | (MhaParams, LcaConfig) | DirectionalLayer
    ln_conv: LayerNormParams
    conv: ConvModule
    ln_ff2: LayerNormParams
    ff2: FeedForward
    ln_out: LayerNormParams
    kind: str
    ra_chunk: int

    @classmethod
    def init(cls, rng, cfg: EncoderConfig, dtype):
        kind = cfg.attention_kind
        if kind == "mha":
            attn = MhaParams.init(rng, cfg.d_model, cfg.n_heads, cfg.rel_clip, dtype)
        elif kind == "lca_gt":
            attn = (MhaParams.init(rng, cfg.d_model, cfg.n_heads, cfg.rel_clip, dtype),
                    LcaConfig.init(rng, cfg.d_model, cfg.left_window, cfg.right_window,
                                   cfg.n_global, dtype))
        else:
            kwargs = {"lora_rank": cfg.lora_rank} if kind == "rwkv" else \
                     {"state_dim": cfg.state_dim}
            attn = DirectionalLayer.init(rng, kind, cfg.d_model, cfg.n_heads,
                                         bidirectional=cfg.bidirectional, dtype=dtype, **kwargs)
        d = cfg.d_model
        return cls(
            LayerNormParams.init(d, dtype), FeedForward.init(rng, d, cfg.d_ff, dtype),
            LayerNormParams.init(d, dtype), attn,
            LayerNormParams.init(d, dtype),
            ConvModule.init(rng, d, cfg.conv_kernel, cfg.causal_conv, dtype),
            LayerNormParams.init(d, dtype), FeedForward.init(rng, d, cfg.d_ff, dtype),
            LayerNormParams.init(d, dtype), kind, cfg.ra_chunk)

    def _attention(self, xn: Node, lengths, mode: DirectionMode | None) -> Node:
        if self.kind == "mha":
            return mha_forward(self.attn, xn, lengths=lengths)
        if self.kind == "lca_gt":
            p, c = self.attn
            return lca_gt_forward(p, c, xn, lengths=lengths)
        if mode is None:
            mode = DirectionMode.BI if self.attn.bidirectional else DirectionMode.L2R
        return bidir_forward(self.attn, xn, mode, lengths=lengths, chunk=self.ra_chunk)

    def __call__(self, x: Node, lengths, mode: DirectionMode | None = None,
                 mask: Node | None = None) -> Node:
        x = nc.add(x, nc.scale(self.ff1(layer_norm(x, self.ln_ff1)), 0.5))
        x = nc.add(x, self._attention(layer_norm(x, self.ln_attn), lengths, mode))
        h = layer_norm(x, self.ln_conv)
        if mask is not None:
            # the depthwise conv must read exact zeros past each row's length
            h = nc.bmul(h, mask)
        x = nc.add(x, self.conv(h))
        x = nc.add(x, nc.scale(self.ff2(layer_norm(x, self.ln_ff2)), 0.5))
        return layer_norm(x, self.ln_out)

    def named_params(self, prefix):
        out = {}
        out.update(self.ln_ff1.named_params(prefix + "ln_ff1."))
        out.update(self.ff1.named_params(prefix + "ff1."))
        out.update(self.ln_attn.named_params(prefix + "ln_attn."))
        if self.kind == "lca_gt":
            out.update(self.attn[0].named_params(prefix + "attn."))
            out.update(self.attn[1].named_params(prefix + "attn.gt_"))
        else:
            out.update(self.attn.named_params(prefix + "attn."))
        out.update(self.ln_conv.named_params(prefix + "ln_conv."))
        out.update(self.conv.named_params(prefix + "conv."))
        out.update(self.ln_ff2.named_params(prefix + "ln_ff2."))
        out.update(self.ff2.named_params(prefix + "ff2."))
        out.update(self.ln_out.named_params(prefix + "ln_out."))
        return out


def _length_mask(lengths, b, t, dtype) -> np.ndarray:
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    return valid[:, :, None].astype(dtype)


class EncoderModel:
    """Subsampler -> n ConformerBlocks -> CTC projection."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=nc.DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = dtype
        self.frontend = Subsampler.init(rng, cfg.d_in, cfg.d_model, dtype)
        self.blocks = [ConformerBlock.init(rng, cfg, dtype) for _ in range(cfg.n_layers)]
        self.ctc_w = _lin(rng, cfg.d_model, cfg.vocab_size + 1, dtype)
        self.ctc_b = _zeros(cfg.vocab_size + 1, dtype)

    def named_parameters(self) -> dict[str, Node]:
        out = self.frontend.named_params("frontend.")
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_params(f"blocks.{i}."))
        out["ctc.w"] = self.ctc_w
        out["ctc.b"] = self.ctc_b
        return out

    @staticmethod
    def is_attention_param(name: str) -> bool:
        return ".attn." in name

    def forward(self, features, lengths=None, schedule: LayerSchedule | None = None):
        """features [b, t, d_in] -> (hidden [b, ceil(t/4), d_model], out_lengths)."""
        x = features if isinstance(features, Node) else nc.constant(features, dtype=self.dtype)
        b, t, d_in = x.shape
        if d_in != self.cfg.d_in:
            raise nc.ShapeMismatchError(f"encoder: feature dim {d_in} != {self.cfg.d_in}")
        if t < self.cfg.subsample_factor:
            raise nc.ShapeMismatchError(
                f"encoder: {t} frames shorter than subsample factor {self.cfg.subsample_factor}")
        if schedule is not None and len(schedule) != len(self.blocks):
            raise ScheduleError(
                f"schedule length {len(schedule)} != {len(self.blocks)} layers")
        in_lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
        out_lengths = subsampled_length(in_lengths)

        x = self.frontend(x, in_lengths)
        tp = x.shape[1]
        mask = nc.constant(_length_mask(out_lengths, b, tp, np.dtype(self.dtype)))
        x = nc.bmul(x, mask)
        for i, blk in enumerate(self.blocks):
            mode = schedule.modes[i] if schedule is not None else None
            x = blk(x, out_lengths, mode, mask)
            x = nc.bmul(x, mask)
        return x, out_lengths

    def ctc_logits(self, hidden: Node) -> Node:
        return log_softmax_logits(linear_seq(hidden, self.ctc_w, self.ctc_b))

    def logits(self, features, lengths=None, schedule=None):
        hidden, out_lengths = self.forward(features, lengths, schedule)
        return self.ctc_logits(hidden), out_lengths

    def param_count(self, attention: bool | None = None) -> int:
        total = 0
        for name, p in self.named_parameters().items():
            if attention is None or self.is_attention_param(name) == attention:
                total += p.data.size
        return total


def log_softmax_logits(raw: Node) -> Node:
    return nc.log_softmax_lastdim(raw)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def ctc_greedy_decode(logprobs, lengths=None) -> list[list[int]]:
    """Per frame argmax, collapse repeats, strip blanks (class 0 -> blank)."""
    data = logprobs.data if isinstance(logprobs, Node) else np.asarray(logprobs)
    b, t, _ = data.shape
    lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
    out = []
    for i in range(b):
        path = data[i, :lengths[i]].argmax(axis=-1)
        labels = []
        prev = 0
        for c in path:
            if c != 0 and c != prev:
                labels.append(int(c) - 1)
            prev = c
        out.append(labels)
    return out


def _extended_targets(labels: list[int]) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(labels, dtype=np.int64) + 1
    return ext


def ctc_required_frames(labels: list[int]) -> int:
    reps = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + reps


def ctc_loss(logprobs: Node, labels: list[list[int]], input_lengths,
             label_lengths=None) -> Node:
    """Negative log marginal probability over all valid CTC alignments.

    ``logprobs`` are normalized log-probabilities [b, t, vocab+1] with blank
    at 0; dataset labels shift up by one.  Forward algorithm in log space;
    the backward pass uses the alpha-beta posterior.  Returns the summed
    loss over the batch as a scalar node.
    """
    data = logprobs.data
    b, t, nv = data.shape
    input_lengths = np.asarray(input_lengths)
    if label_lengths is not None:
        labels = [list(l[:n]) for l, n in zip(labels, np.asarray(label_lengths))]
    alphas, betas, exts = [], [], []
    total = 0.0
    for i in range(b):
        ti = int(input_lengths[i])
        lab = list(labels[i])
        if any(c < 0 or c >= nv - 1 for c in lab):
            raise CtcError(f"label id outside vocabulary of size {nv - 1}")
        need = ctc_required_frames(lab)
        if ti < need or ti < 1:
            raise CtcError(
                f"sequence {i}: {ti} frames cannot fit {len(lab)} labels "
                f"(needs >= {need})")
        ext = _extended_targets(lab)
        s = len(ext)
        lp = data[i, :ti].astype(np.float64)
        with np.errstate(invalid="ignore"):  # -inf plus -inf is expected here
            alpha = np.full((ti, s), -np.inf)
            alpha[0, 0] = lp[0, 0]
            if s > 1:
                alpha[0, 1] = lp[0, ext[1]]
            skip_ok = np.zeros(s, dtype=bool)
            skip_ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
            for tt in range(1, ti):
                prev = alpha[tt - 1]
                merged = prev.copy()
                merged[1:] = np.logaddexp(merged[1:], prev[:-1])
                merged[skip_ok] = np.logaddexp(merged[skip_ok], prev[:-2][skip_ok[2:]])
                alpha[tt] = merged + lp[tt, ext]
            logz = np.logaddexp(alpha[ti - 1, s - 1],
                                alpha[ti - 1, s - 2] if s > 1 else -np.inf)
            total += -logz
            alphas.append(alpha)
            exts.append(ext)

            beta = np.full((ti, s), -np.inf)
            beta[ti - 1, s - 1] = 0.0
            if s > 1:
                beta[ti - 1, s - 2] = 0.0
            for tt in range(ti - 2, -1, -1):
                nxt = beta[tt + 1] + lp[tt + 1, ext]
                merged = nxt.copy()
                merged[:-1] = np.logaddexp(merged[:-1], nxt[1:])
                can = skip_ok[2:]
                merged[:-2][can] = np.logaddexp(merged[:-2][can], nxt[2:][can])
                beta[tt] = merged
            betas.append(beta)

    def bwd(g):
        grad = np.zeros_like(data)
        for i in range(b):
            ti = int(input_lengths[i])
            ext = exts[i]
            alpha, beta = alphas[i], betas[i]
            logz = np.logaddexp(alpha[ti - 1, -1],
                                alpha[ti - 1, -2] if len(ext) > 1 else -np.inf)
            post = np.exp(alpha + beta - logz)  # [ti, s]
            gi = np.zeros((ti, nv))
            np.add.at(gi.T, ext, post.T)
            grad[i, :ti] = -gi
        return (grad * g.reshape(()),)

    return nc.custom_op(np.asarray(total, dtype=data.dtype), (logprobs,), bwd)
