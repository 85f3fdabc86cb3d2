"""Training loop: Adam with inverse-sqrt warmup, dynamic frame batching,
Direction Dropout integration, attention-only fine-tuning, and gradient
verification entry points.

The learning rate follows lr_peak * min(step / warmup, sqrt(warmup / step))
with steps counted from 1, so it peaks exactly at the warmup step.  Batches
pack length-sorted utterances until the padded frame budget is exceeded;
batch order reshuffles every epoch from the run seed, so a fixed
(seed, config, data) triple reproduces the final checkpoint bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt_io
from . import numcore as nc
from .direction import DirDropPolicy, LayerSchedule, dirdrop_sample
from .encoder import EncoderConfig, EncoderModel, ctc_loss
from .synthdata import Utterance


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_peak: float = 3e-3
    warmup_steps: int = 200
    max_steps: int = 1000
    batch_frames: int = 4096
    dirdrop: DirDropPolicy = field(default_factory=lambda: DirDropPolicy("off", 0.0))
    freeze_non_attention: bool = False
    seed: int = 0
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_path: str | None = None

    # full-scale reference values: lr 5e-4, 50k warmup, 20k-frame batches


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    if step < 1:
        raise ValueError("steps count from 1")
    return cfg.lr_peak * min(step / cfg.warmup_steps,
                             float(np.sqrt(cfg.warmup_steps / step)))


class Adam:
    def __init__(self, params: dict[str, nc.Node], cfg: TrainConfig,
                 trainable: set[str] | None = None):
        self.params = params
        self.cfg = cfg
        self.trainable = set(params) if trainable is None else trainable
        self.m = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self.v = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self.t = 0

    def clip_grads(self) -> float:
        sq = 0.0
        for n in self.trainable:
            g = self.params[n].grad
            if g is not None:
                sq += float((g.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq))
        if self.cfg.grad_clip and norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
            for n in self.trainable:
                if self.params[n].grad is not None:
                    self.params[n].grad *= scale
        return norm

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for n in self.trainable:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            self.m[n] = b1 * self.m[n] + (1 - b1) * g
            self.v[n] = b2 * self.v[n] + (1 - b2) * g * g
            upd = (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + eps)
            p.data -= (lr * upd).astype(p.data.dtype)


def pad_batch(utts: list[Utterance], d_in: int, dtype=np.float32):
    b = len(utts)
    tmax = max(u.duration_frames for u in utts)
    feats = np.zeros((b, tmax, d_in), dtype=dtype)
    lengths = np.zeros(b, dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, :u.duration_frames] = u.features
        lengths[i] = u.duration_frames
    return feats, lengths, [list(u.labels) for u in utts]


def make_batches(data: list[Utterance], batch_frames: int) -> list[list[Utterance]]:
    """Length-sorted greedy packing under a padded frame budget."""
    order = sorted(range(len(data)), key=lambda i: data[i].duration_frames)
    batches, cur = [], []
    for i in order:
        cand = cur + [data[i]]
        if cur and len(cand) * cand[-1].duration_frames > batch_frames:
            batches.append(cur)
            cur = [data[i]]
        else:
            cur = cand
    if cur:
        batches.append(cur)
    return batches


def _batch_loss(model: EncoderModel, batch: list[Utterance],
                schedule: LayerSchedule | None):
    feats, lengths, labels = pad_batch(batch, model.cfg.d_in,
                                       np.dtype(model.dtype))
    logprobs, out_lens = model.logits(feats, lengths, schedule)
    loss_sum = ctc_loss(logprobs, labels, out_lens)
    n_labels = sum(len(l) for l in labels)
    return nc.scale(loss_sum, 1.0 / max(n_labels, 1))


def train(model: EncoderModel, data: list[Utterance], cfg: TrainConfig,
          ckpt_path: str | None = None) -> ckpt_io.Checkpoint:
    """Run the optimization loop; returns (and optionally writes) the final
    checkpoint.  Metrics go to cfg.log_path as CSV (step, lr, loss, wall_ms)."""
    params = model.named_parameters()
    trainable = None
    if cfg.freeze_non_attention:
        trainable = {n for n in params if model.is_attention_param(n)}
    opt = Adam(params, cfg, trainable)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 0xD])
    batches = make_batches(data, cfg.batch_frames)
    metrics = []
    log_f = open(cfg.log_path, "a") if cfg.log_path else None
    if log_f and log_f.tell() == 0:
        log_f.write("step,lr,loss,wall_ms\n")

    step = 0
    try:
        while step < cfg.max_steps:
            for bi in rng.permutation(len(batches)):
                step += 1
                if step > cfg.max_steps:
                    break
                t0 = time.perf_counter()
                schedule = None
                if cfg.dirdrop.variant != "off":
                    schedule = dirdrop_sample(cfg.dirdrop, model.cfg.n_layers, drop_rng)
                nc.zero_grad(params.values())
                loss = _batch_loss(model, batches[bi], schedule)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingDivergedError(f"non-finite loss at step {step}")
                nc.backward(loss)
                opt.clip_grads()
                lr = lr_schedule(step, cfg)
                opt.step(lr)
                wall_ms = (time.perf_counter() - t0) * 1e3
                metrics.append((step, lr, loss_val, wall_ms))
                if log_f:
                    log_f.write(f"{step},{lr:.8g},{loss_val:.8g},{wall_ms:.3f}\n")
    finally:
        if log_f:
            log_f.close()

    ckpt = ckpt_io.Checkpoint(
        params={n: p.data.copy() for n, p in params.items()},
        config=model.cfg.to_dict(),
        step=step,
        rng_state=rng.bit_generator.state,
    )
    ckpt.metrics = metrics
    if ckpt_path:
        ckpt_io.save(ckpt_path, ckpt)
    return ckpt


def finetune_attention_only(model: EncoderModel, data: list[Utterance],
                            cfg: TrainConfig, ckpt_path: str | None = None):
    """Long-form fine-tuning stage: only attention sublayers move."""
    return train(model, data, replace(cfg, freeze_non_attention=True), ckpt_path)


def eval_loss(model: EncoderModel, data: list[Utterance],
              batch_frames: int = 4096) -> float:
    """Mean per-label CTC loss over a dataset, no parameter updates."""
    total, n_labels = 0.0, 0
    with nc.no_grad():
        for batch in make_batches(data, batch_frames):
            feats, lengths, labels = pad_batch(batch, model.cfg.d_in,
                                               np.dtype(model.dtype))
            logprobs, out_lens = model.logits(feats, lengths)
            total += ctc_loss(logprobs, labels, out_lens).item()
            n_labels += sum(len(l) for l in labels)
    return total / max(n_labels, 1)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def gradcheck(fragment: str = "all", tolerance: float = 1e-4,
              seed: int = 0) -> dict[str, dict[str, float]]:
    """Finite-difference check of every parameter group of each layer type.

    Runs small float64 fragments (t <= 8, width <= 16) and reports the max
    relative error per parameter.  Fragments: mha, lca_gt, rwkv, mamba2,
    bidir, block, ctc.
    """
    from .attention_mha import LcaConfig, MhaParams, lca_gt_forward, mha_forward
    from .attention_recurrent import (
        Mamba2Params, RwkvParams, mamba2_forward_chunked, rwkv_forward_chunked)
    from .direction import DirectionMode, DirectionalLayer, bidir_forward

    rng = np.random.default_rng(seed)
    x8 = nc.constant(rng.normal(size=(1, 6, 8)))
    readout = nc.constant(rng.normal(size=(1, 6, 8)))

    def seq_read(out):
        return nc.reduce_sum(nc.mul(out, readout))

    fragments = {}

    mha_p = MhaParams.init(rng, 8, 2, rel_clip=4, dtype=np.float64)
    fragments["mha"] = (mha_p.named_params(),
                        lambda: seq_read(mha_forward(mha_p, x8, causal=True)))

    lca_p = MhaParams.init(rng, 8, 2, rel_clip=4, dtype=np.float64)
    lca_c = LcaConfig.init(rng, 8, 2, 2, 1, dtype=np.float64)
    fragments["lca_gt"] = ({**lca_p.named_params(), **lca_c.named_params("gt_")},
                           lambda: seq_read(lca_gt_forward(lca_p, lca_c, x8)))

    rw = RwkvParams.init(rng, 8, 2, dtype=np.float64)
    fragments["rwkv"] = (rw.named_params(),
                         lambda: seq_read(rwkv_forward_chunked(rw, x8, chunk=4)[0]))

    mb = Mamba2Params.init(rng, 8, 2, state_dim=4, dtype=np.float64)
    fragments["mamba2"] = (mb.named_params(),
                           lambda: seq_read(mamba2_forward_chunked(mb, x8, chunk=4)[0]))

    bd = DirectionalLayer.init(rng, "rwkv", 8, 2, bidirectional=True, dtype=np.float64)
    fragments["bidir"] = (bd.named_params(),
                          lambda: seq_read(bidir_forward(bd, x8, DirectionMode.BI, chunk=3)))

    block_model = EncoderModel(
        EncoderConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, vocab_size=3,
                      d_in=8, attention_kind="rwkv", bidirectional=True, ra_chunk=3),
        np.random.default_rng(seed + 1), dtype=np.float64)
    bx = rng.normal(size=(1, 8, 8))

    # keep loss magnitudes ~0.1 so central-difference cancellation noise
    # (eps * |loss| / 2h) stays below the 1e-8 relative-error floor even for
    # parameters whose true gradient is exactly zero
    def block_loss():
        lp, lens = block_model.logits(bx)
        return nc.scale(ctc_loss(lp, [[0, 1]], lens), 0.05)

    fragments["block"] = (block_model.named_parameters(), block_loss)

    ctc_raw = nc.parameter(rng.normal(size=(1, 5, 4)), name="logits", dtype=np.float64)
    fragments["ctc"] = ({"logits": ctc_raw},
                        lambda: nc.scale(ctc_loss(nc.log_softmax_lastdim(ctc_raw),
                                                  [[1, 0]], [5]), 0.05))

    wanted = fragments if fragment == "all" else {fragment: fragments[fragment]}
    report: dict[str, dict[str, float]] = {}
    for name, (params, build_fn) in wanted.items():
        def build():
            nc.zero_grad(params.values())
            return build_fn()

        loss = build()
        nc.backward(loss)
        analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                    for n, p in params.items()}
        errs = {}
        for pname, p in params.items():
            numeric = nc.finite_diff_grad(build, p)
            errs[pname] = nc.relative_grad_error(analytic[pname], numeric)
        report[name] = errs
    return report


def gradcheck_max(report: dict[str, dict[str, float]]) -> float:
    return max(max(errs.values()) for errs in report.values())
