"""Throughput harness and complexity-exponent estimation.

Throughput follows a fixed protocol: a long input is pre-materialized in
memory and split into fixed-size chunks; the encode function gets
warmup_queries untimed passes, then `repeats` timed full passes.  Reported
MPS is minutes of audio per wall second at 100 frames per second, with the
spread across repeats kept (min / median / max).  Out-of-memory cells are
recorded as failed rather than raised.

Checkpoint save/load wraps the RACPKT01 container; loading rebuilds the
encoder from the config echo and validates every tensor shape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from . import numcore as nc
from .checkpoint import (BadMagicError, Checkpoint, CheckpointError,
                         TensorShapeError, TruncatedPayloadError)
from .encoder import EncoderConfig, EncoderModel

FRAMES_PER_SECOND = 100


@dataclass
class BenchConfig:
    chunk_sizes: list[int] = field(default_factory=lambda: [2000, 9000, 20000, 40000])
    batch_size: int = 4
    warmup_queries: int = 2
    repeats: int = 3
    total_frames: int = 40_000
    frames_per_second: int = FRAMES_PER_SECOND


@dataclass
class BenchCell:
    chunk_size: int
    wall_seconds: float | None
    audio_minutes: float
    mps: float | None
    mps_min: float | None = None
    mps_max: float | None = None
    failed: bool = False
    error: str = ""


@dataclass
class BenchReport:
    cells: list[BenchCell]
    exponent: float | None = None
    exponent_stderr: float | None = None

    def cell(self, chunk_size: int) -> BenchCell:
        for c in self.cells:
            if c.chunk_size == chunk_size:
                return c
        raise KeyError(chunk_size)


def audio_minutes(total_frames: int, fps: int = FRAMES_PER_SECOND) -> float:
    return total_frames / (fps * 60.0)


def chunk_spans(total_frames: int, chunk_size: int) -> list[tuple[int, int]]:
    """Non-overlapping [start, end) chunk spans; final chunk is the remainder."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [(s, min(s + chunk_size, total_frames))
            for s in range(0, total_frames, chunk_size)]


def _one_pass(encode_fn, features: np.ndarray, chunk_size: int, batch_size: int):
    spans = chunk_spans(len(features), chunk_size)
    d = features.shape[1]
    for i in range(0, len(spans), batch_size):
        group = spans[i:i + batch_size]
        tmax = max(e - s for s, e in group)
        batch = np.zeros((len(group), tmax, d), dtype=features.dtype)
        lengths = np.zeros(len(group), dtype=np.int64)
        for j, (s, e) in enumerate(group):
            batch[j, :e - s] = features[s:e]
            lengths[j] = e - s
        encode_fn(batch, lengths)


def bench_throughput(encode_fn, features: np.ndarray, cfg: BenchConfig) -> BenchReport:
    """Time full passes over ``features`` for each chunk size.

    ``encode_fn(batch, lengths)`` is the unit under test (typically the
    encoder forward only); data movement/pre-materialization stays outside
    the timed region.
    """
    minutes = audio_minutes(len(features), cfg.frames_per_second)
    cells = []
    for chunk in cfg.chunk_sizes:
        try:
            for _ in range(cfg.warmup_queries):
                _one_pass(encode_fn, features, chunk, cfg.batch_size)
            times = []
            for _ in range(cfg.repeats):
                t0 = time.perf_counter()
                _one_pass(encode_fn, features, chunk, cfg.batch_size)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            cells.append(BenchCell(
                chunk, med, minutes, minutes / med,
                mps_min=minutes / max(times), mps_max=minutes / min(times)))
        except MemoryError as e:
            cells.append(BenchCell(chunk, None, minutes, None, failed=True,
                                   error=f"out of memory: {e}"))
    report = BenchReport(cells)
    ok = [(c.chunk_size, c.wall_seconds / max(1, -(-len(features) // c.chunk_size)))
          for c in cells if not c.failed]
    try:
        report.exponent, report.exponent_stderr = fit_complexity_exponent(ok)
    except ValueError:
        pass
    return report


def fit_complexity_exponent(timings) -> tuple[float, float]:
    """Least-squares slope of log(seconds) against log(length).

    Needs at least 3 distinct lengths spanning a factor of 4.  Returns
    (slope, standard error of the slope).
    """
    pts = [(float(l), float(s)) for l, s in timings]
    lengths = sorted({l for l, _ in pts})
    if len(lengths) < 3:
        raise ValueError("need at least 3 distinct lengths")
    if max(lengths) / min(lengths) < 4:
        raise ValueError("lengths must span at least a factor of 4")
    x = np.log([l for l, _ in pts])
    y = np.log([s for _, s in pts])
    xc = x - x.mean()
    slope = float((xc * (y - y.mean())).sum() / (xc ** 2).sum())
    resid = y - (y.mean() + slope * xc)
    dof = max(len(x) - 2, 1)
    stderr = float(np.sqrt((resid ** 2).sum() / dof / (xc ** 2).sum()))
    return slope, stderr


def encoder_encode_fn(model: EncoderModel, schedule=None):
    """Encoder-only unit under test: forward pass, no CTC head, no grads."""
    def run(batch, lengths):
        with nc.no_grad():
            model.forward(batch, lengths, schedule)
    return run


def time_attention_forward(kind: str, lengths: list[int], d_model: int = 64,
                           n_heads: int = 4, batch: int = 1, seed: int = 0,
                           repeats: int = 3, ra_chunk: int = 16,
                           left_window: int = 128, right_window: int = 128,
                           n_global: int = 1) -> list[tuple[int, float]]:
    """Median wall time of a single attention-layer forward per length.

    This is the layer-level probe behind the complexity-exponent check;
    the recurrent kinds run their chunked path.
    """
    from .attention_mha import LcaConfig, MhaParams, lca_gt_forward, mha_forward
    from .attention_recurrent import (Mamba2Params, RwkvParams,
                                      mamba2_forward_chunked, rwkv_forward_chunked)
    from .direction import DirectionMode, DirectionalLayer, bidir_forward

    rng = np.random.default_rng(seed)
    dtype = np.float32
    if kind in ("mha", "lca_gt"):
        p = MhaParams.init(rng, d_model, n_heads, dtype=dtype)
        c = LcaConfig.init(rng, d_model, left_window, right_window, n_global, dtype=dtype)
        if kind == "mha":
            fwd = lambda x: mha_forward(p, x)
        else:
            fwd = lambda x: lca_gt_forward(p, c, x)
    elif kind in ("rwkv", "mamba2"):
        p = (RwkvParams if kind == "rwkv" else Mamba2Params).init(
            rng, d_model, n_heads, dtype=dtype)
        f = rwkv_forward_chunked if kind == "rwkv" else mamba2_forward_chunked
        fwd = lambda x: f(p, x, chunk=ra_chunk)[0]
    elif kind == "bi_rwkv":
        layer = DirectionalLayer.init(rng, "rwkv", d_model, n_heads,
                                      bidirectional=True, dtype=dtype)
        fwd = lambda x: bidir_forward(layer, x, DirectionMode.BI, chunk=ra_chunk)
    else:
        raise ValueError(f"unknown kind {kind!r}")

    out = []
    for t in lengths:
        x = nc.constant(rng.normal(size=(batch, t, d_model)).astype(dtype))
        with nc.no_grad():
            fwd(x)  # warm caches and allocator
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fwd(x)
                times.append(time.perf_counter() - t0)
        out.append((t, float(np.median(times))))
    return out


# ---------------------------------------------------------------------------
# checkpoint surface
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, model: EncoderModel, step: int = 0,
                    rng_state: dict | None = None) -> None:
    ckpt = Checkpoint(
        params={n: p.data.copy() for n, p in model.named_parameters().items()},
        config=model.cfg.to_dict(), step=step, rng_state=rng_state)
    ckpt_io.save(path, ckpt)


def model_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> EncoderModel:
    cfg_fields = set(EncoderConfig.__dataclass_fields__)
    cfg = EncoderConfig(**{k: v for k, v in ckpt.config.items() if k in cfg_fields})
    dtype = np.float32
    for arr in ckpt.params.values():
        dtype = arr.dtype
        break
    model = EncoderModel(cfg, np.random.default_rng(seed), dtype=dtype)
    params = model.named_parameters()
    if set(params) != set(ckpt.params):
        missing = set(params) ^ set(ckpt.params)
        raise TensorShapeError(f"checkpoint parameter set mismatch: {sorted(missing)[:4]}")
    for name, p in params.items():
        arr = ckpt.params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise TensorShapeError(
                f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    return model


def load_checkpoint(path: str) -> EncoderModel:
    return model_from_checkpoint(ckpt_io.load(path))
