"""Bidirectional combination of recurrent layers, Direction Dropout, and
per-layer direction schedules.

A bidirectional layer owns two independently initialized parameter sets.
Right-to-left runs the backward set on the time-reversed input and reverses
the result; bidirectional averages both directions with weight 0.5 each.
When a schedule (or Direction Dropout) keeps only one direction, the
surviving output is used at weight 1.0, so single-direction inference of a
DirDrop-trained model sees the same scaling as training.

Time reversal respects per-sequence lengths: only the valid prefix of each
padded row is flipped, so padding never leaks into the recurrence head.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .attention_recurrent import (
    Mamba2Params, RwkvParams, mamba2_forward_chunked, mamba2_forward_seq,
    rwkv_forward_chunked, rwkv_forward_seq,
)
from .numcore import Node


class DirectionMode(enum.Enum):
    L2R = "l2r"
    R2L = "r2l"
    BI = "bi"


class ScheduleError(ValueError):
    """Schedule incompatible with the model (length or directionality)."""


def reverse_time(x: Node, lengths=None) -> Node:
    """Flip the time axis; with lengths, flip only each row's valid prefix."""
    b, t = x.shape[0], x.shape[1]
    if lengths is None:
        return nc.flip(x, axis=1)
    lengths = np.asarray(lengths)
    pos = np.arange(t)[None, :].repeat(b, axis=0)
    valid = pos < lengths[:, None]
    idx = np.where(valid, lengths[:, None] - 1 - pos, pos)
    return nc.take_time(x, idx)


@dataclass
class DirectionalLayer:
    kind: str                                   # "rwkv" | "mamba2"
    fwd: RwkvParams | Mamba2Params
    bwd: RwkvParams | Mamba2Params | None = None

    @property
    def bidirectional(self) -> bool:
        return self.bwd is not None

    @classmethod
    def init(cls, rng: np.random.Generator, kind: str, d_model: int, n_heads: int,
             bidirectional: bool = True, dtype=nc.DEFAULT_DTYPE, **kwargs) -> "DirectionalLayer":
        pcls = {"rwkv": RwkvParams, "mamba2": Mamba2Params}[kind]
        fwd = pcls.init(rng, d_model, n_heads, dtype=dtype, **kwargs)
        bwd = pcls.init(rng, d_model, n_heads, dtype=dtype, **kwargs) if bidirectional else None
        return cls(kind, fwd, bwd)

    def named_params(self, prefix: str = "") -> dict[str, Node]:
        out = self.fwd.named_params(prefix + "fwd.")
        if self.bwd is not None:
            out.update(self.bwd.named_params(prefix + "bwd."))
        return out


_FORWARD_FNS = {
    ("rwkv", "seq"): rwkv_forward_seq,
    ("rwkv", "chunked"): rwkv_forward_chunked,
    ("mamba2", "seq"): mamba2_forward_seq,
    ("mamba2", "chunked"): mamba2_forward_chunked,
}


def bidir_forward(layer: DirectionalLayer, x: Node, mode: DirectionMode,
                  lengths=None, chunk: int = 16, path: str = "chunked") -> Node:
    """Run one directional layer in the requested mode."""
    if mode in (DirectionMode.R2L, DirectionMode.BI) and layer.bwd is None:
        raise ScheduleError(f"mode {mode.value} requested on a unidirectional layer")
    f = _FORWARD_FNS[(layer.kind, path)]

    def run(params, inp):
        out, _ = f(params, inp, None, chunk=chunk)
        return out

    if mode is DirectionMode.L2R:
        return run(layer.fwd, x)
    rev = reverse_time(run(layer.bwd, reverse_time(x, lengths)), lengths)
    if mode is DirectionMode.R2L:
        return rev
    return nc.scale(nc.add(run(layer.fwd, x), rev), 0.5)


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSchedule:
    modes: tuple[DirectionMode, ...]

    def __len__(self) -> int:
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    def n_bidirectional(self) -> int:
        return sum(1 for m in self.modes if m is DirectionMode.BI)

    @classmethod
    def all_l2r(cls, n: int) -> "LayerSchedule":
        return cls((DirectionMode.L2R,) * n)

    @classmethod
    def all_r2l(cls, n: int) -> "LayerSchedule":
        return cls((DirectionMode.R2L,) * n)

    @classmethod
    def all_bi(cls, n: int) -> "LayerSchedule":
        return cls((DirectionMode.BI,) * n)

    @classmethod
    def alternating(cls, n: int) -> "LayerSchedule":
        return cls(tuple(DirectionMode.L2R if i % 2 == 0 else DirectionMode.R2L
                         for i in range(n)))

    @classmethod
    def first_bi(cls, k: int, n: int, base: "LayerSchedule | None" = None) -> "LayerSchedule":
        base = base or cls.all_l2r(n)
        return cls(tuple(DirectionMode.BI if i < k else m for i, m in enumerate(base.modes)))

    @classmethod
    def last_bi(cls, k: int, n: int, base: "LayerSchedule | None" = None) -> "LayerSchedule":
        base = base or cls.all_l2r(n)
        return cls(tuple(DirectionMode.BI if i >= n - k else m for i, m in enumerate(base.modes)))

    @classmethod
    def parse(cls, text: str, n: int) -> "LayerSchedule":
        """Parse CLI/config syntax: l2r, r2l, bi, alt, first_bi:K, last_bi:K,
        with an optional @alt base, e.g. last_bi:3@alt."""
        spec, _, base_name = text.strip().partition("@")
        if base_name not in ("", "l2r", "alt"):
            raise ScheduleError(f"unknown schedule base {base_name!r}")
        base = cls.alternating(n) if base_name == "alt" else cls.all_l2r(n)
        simple = {"l2r": cls.all_l2r, "r2l": cls.all_r2l, "bi": cls.all_bi,
                  "alt": cls.alternating}
        if spec in simple:
            if base_name:
                raise ScheduleError(f"schedule {spec!r} does not take a base")
            return simple[spec](n)
        head, _, num = spec.partition(":")
        if head in ("first_bi", "last_bi") and num.isdigit():
            k = int(num)
            if k > n:
                raise ScheduleError(f"{spec}: k={k} exceeds {n} layers")
            return (cls.first_bi if head == "first_bi" else cls.last_bi)(k, n, base)
        raise ScheduleError(f"unrecognized schedule {text!r}")


@dataclass(frozen=True)
class DirDropPolicy:
    variant: str       # "off" | "r2l" | "both"
    p: float = 0.2

    def __post_init__(self):
        if self.variant not in ("off", "r2l", "both"):
            raise ValueError(f"unknown DirDrop variant {self.variant!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"drop probability {self.p} outside [0, 1]")


def dirdrop_sample(policy: DirDropPolicy, n_layers: int,
                   rng: np.random.Generator) -> LayerSchedule:
    """Per layer: keep both directions with prob 1-p, otherwise drop one.

    Variant r2l always drops the right-to-left direction; variant both drops
    a uniformly random one.  The survivor runs at weight 1.0.
    """
    if policy.variant == "off":
        raise ValueError("dirdrop_sample called with variant 'off'")
    modes = []
    for _ in range(n_layers):
        if rng.random() >= policy.p:
            modes.append(DirectionMode.BI)
        elif policy.variant == "r2l":
            modes.append(DirectionMode.L2R)
        else:
            modes.append(DirectionMode.L2R if rng.random() < 0.5 else DirectionMode.R2L)
    return LayerSchedule(tuple(modes))


def scheduled_forward(blocks, x: Node, schedule: LayerSchedule, lengths=None) -> Node:
    """Run a stack of blocks, each taking (x, lengths, mode)."""
    if len(schedule) != len(blocks):
        raise ScheduleError(
            f"schedule has {len(schedule)} entries for {len(blocks)} blocks")
    for block, mode in zip(blocks, schedule.modes):
        x = block(x, lengths, mode)
    return x
