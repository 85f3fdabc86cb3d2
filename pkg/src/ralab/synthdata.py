"""Synthetic sequence task standing in for speech.

Each utterance is a token stream rendered to frames (frames_per_token per
token, embedding plus i.i.d. noise).  Labels mix two difficulties:

* local rule: the label of an ordinary position is a fixed random table
  lookup on (previous token, current token), learnable from a couple of
  frames of context;
* retrieval: K planted (KEY_k, VALUE) pairs and K QUERY_k markers; the
  label at QUERY_k is the VALUE planted next to KEY_k, far away in the
  stream.  Half the pairs put the key before the query (answerable from
  the past), half after it (answerable only from the future), so both
  recurrence directions carry irreplaceable information.

The generator guarantees CTC feasibility under a 4x-subsampled encoder with
one output frame per token: adjacent labels never repeat, and the first /
last labels of every utterance live in disjoint halves of the label space
so concatenation can never create a junction repeat.

Everything is deterministic given (TaskSpec, rng seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class GenerationError(ValueError):
    """Token budget too small for the requested plants."""


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 32
    feature_dim: int = 16
    frames_per_token: int = 4
    key_value_pairs: int = 4
    noise_std: float = 0.0
    seed: int = 0
    bidir_plants: bool = True    # half the pairs answerable only from the future

    def __post_init__(self):
        if self.vocab_size < 8 or self.vocab_size % 2:
            raise ValueError("vocab_size must be an even number >= 8")

    @property
    def n_symbols(self) -> int:
        # ordinary symbols, then KEY_k markers, then QUERY_k markers
        return self.vocab_size + 2 * self.key_value_pairs

    def key_id(self, k: int) -> int:
        return self.vocab_size + k

    def query_id(self, k: int) -> int:
        return self.vocab_size + self.key_value_pairs + k

    def embedding(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xE])
        return rng.normal(size=(self.n_symbols, self.feature_dim)).astype(np.float32)

    def rule(self) -> np.ndarray:
        """Label table [prev_symbol + BOS, current_symbol] -> [0, vocab)."""
        rng = np.random.default_rng([self.seed, 0x12])
        return rng.integers(0, self.vocab_size, size=(self.n_symbols + 1, self.n_symbols))

    @property
    def bos(self) -> int:
        return self.n_symbols  # virtual previous token at position 0


@dataclass
class Utterance:
    features: np.ndarray          # [t, feature_dim] float32
    labels: list[int]
    duration_frames: int
    tokens: np.ndarray | None = None
    plants: list[tuple] = field(default_factory=list)  # (k, key_pos, value, query_pos)


def _place_units(rng, lo: int, hi: int, sizes: list[int]) -> list[int]:
    """Random starts for units of the given sizes in [lo, hi), each unit
    separated by at least one free slot."""
    order = rng.permutation(len(sizes))
    need = sum(sizes) + max(0, len(sizes) - 1)
    slack = (hi - lo) - need
    if slack < 0:
        raise GenerationError("n_tokens too small for the requested plants")
    gaps = np.sort(rng.integers(0, slack + 1, size=len(sizes)))
    gaps = np.diff(np.concatenate([[0], gaps]))
    starts = []
    pos = lo
    for which, extra in zip(order, gaps):
        pos += int(extra)
        starts.append((int(which), pos))
        pos += sizes[which] + 1
    return [p for _, p in sorted(starts, key=lambda wp: wp[0])]


def gen_utterance(spec: TaskSpec, n_tokens: int, rng: np.random.Generator) -> Utterance:
    """One token stream with planted retrieval pairs, rendered to frames."""
    k_pairs = spec.key_value_pairs
    if n_tokens < 2 * k_pairs + 2:
        raise GenerationError(f"n_tokens={n_tokens} too small for {k_pairs} plants")
    v = spec.vocab_size
    rule = spec.rule()

    for _attempt in range(64):
        tokens, labels, plants = _try_layout(spec, n_tokens, rng, rule, v, k_pairs)
        if tokens is not None:
            break
    else:
        raise GenerationError("could not satisfy label constraints; "
                              "increase vocab_size or n_tokens")

    emb = spec.embedding()
    feats = emb[tokens].repeat(spec.frames_per_token, axis=0)
    if spec.noise_std > 0:
        feats = feats + rng.normal(scale=spec.noise_std,
                                   size=feats.shape).astype(np.float32)
    return Utterance(feats.astype(np.float32), labels,
                     n_tokens * spec.frames_per_token, tokens, plants)


def _try_layout(spec, n_tokens, rng, rule, v, k_pairs):
    """One attempt at planting and filling; None tokens on dead end."""
    half = n_tokens // 2
    n_bwd = k_pairs // 2 if spec.bidir_plants else 0
    n_fwd = k_pairs - n_bwd

    # early region holds forward keys + backward queries; late region the
    # rest.  A dead zone around the midpoint keeps every query at least
    # 2*margin tokens from its key, beyond any convolutional lookahead, so
    # retrieval genuinely needs the recurrent state
    early_sizes = [2] * n_fwd + [1] * n_bwd
    late_sizes = [1] * n_fwd + [2] * n_bwd
    need = max(sum(early_sizes) + len(early_sizes) - 1,
               sum(late_sizes) + len(late_sizes) - 1)
    margin = max(0, min(16, (n_tokens - 28) // 4, half - 1 - need,
                        n_tokens - 1 - half - need))
    early = _place_units(rng, 1, half - margin, early_sizes)
    late = _place_units(rng, half + margin, n_tokens - 1, late_sizes)

    values = rng.integers(0, v, size=k_pairs)
    forced: dict[int, int] = {}
    query_label: dict[int, int] = {}
    plants = []
    for k in range(n_fwd):
        key_pos, query_pos = early[k], late[k]
        forced[key_pos] = spec.key_id(k)
        forced[key_pos + 1] = int(values[k])
        forced[query_pos] = spec.query_id(k)
        query_label[query_pos] = int(values[k])
        plants.append((k, key_pos, int(values[k]), query_pos))
    for j in range(n_bwd):
        k = n_fwd + j
        query_pos, key_pos = early[n_fwd + j], late[n_fwd + j]
        forced[key_pos] = spec.key_id(k)
        forced[key_pos + 1] = int(values[k])
        forced[query_pos] = spec.query_id(k)
        query_label[query_pos] = int(values[k])
        plants.append((k, key_pos, int(values[k]), query_pos))

    def label_at(pos, tok, prev_tok):
        if pos in query_label:
            return query_label[pos]
        return int(rule[prev_tok, tok])

    tokens = np.empty(n_tokens, dtype=np.int64)
    labels = [0] * n_tokens
    prev_tok = spec.bos
    prev_label = -1
    for pos in range(n_tokens):
        if pos in forced:
            tokens[pos] = forced[pos]
            lab = label_at(pos, forced[pos], prev_tok)
            if lab == prev_label:
                return None, None, None  # planted collision; redraw layout
        else:
            lab = None
            for _try in range(64):
                tok = int(rng.integers(0, v))
                cand = label_at(pos, tok, prev_tok)
                if cand == prev_label:
                    continue
                if pos == 0 and cand >= v // 2:
                    continue
                if pos == n_tokens - 1 and cand < v // 2:
                    continue
                nxt = forced.get(pos + 1)
                if nxt is not None and label_at(pos + 1, nxt, tok) == cand:
                    continue
                tokens[pos] = tok
                lab = cand
                break
            if lab is None:
                return None, None, None
        labels[pos] = lab
        prev_label = lab
        prev_tok = int(tokens[pos])
    return tokens, labels, plants


def oracle_labels(spec: TaskSpec, utt: Utterance) -> list[int]:
    """Generator-aware decoder: recover tokens by nearest embedding, apply
    the local rule, and resolve each query from its nearest matching key."""
    emb = spec.embedding()
    frames = utt.features.reshape(-1, spec.frames_per_token, spec.feature_dim)
    mean = frames.mean(axis=1)
    d2 = ((mean[:, None, :] - emb[None]) ** 2).sum(-1)
    tokens = d2.argmin(axis=1)
    rule = spec.rule()
    out = []
    prev = spec.bos
    for pos, tok in enumerate(tokens):
        if tok >= spec.query_id(0):
            k = tok - spec.query_id(0)
            keys = np.flatnonzero(tokens == spec.key_id(k))
            nearest = keys[np.abs(keys - pos).argmin()]
            out.append(int(tokens[nearest + 1]))
        else:
            out.append(int(rule[prev, tok]))
        prev = tok
    return out


def concat_utterances(us: list[Utterance], target_frames: int) -> Utterance:
    """Concatenate in order until the duration reaches target_frames."""
    if not us:
        raise ValueError("concat_utterances: empty utterance list")
    feats, labels, plants = [], [], []
    total = 0
    base_tokens = []
    for u in us:
        feats.append(u.features)
        labels.extend(u.labels)
        if u.tokens is not None:
            offset = sum(len(t) for t in base_tokens)
            plants.extend((k, kp + offset, val, qp + offset)
                          for k, kp, val, qp in u.plants)
            base_tokens.append(u.tokens)
        total += u.duration_frames
        if total >= target_frames:
            break
    tokens = np.concatenate(base_tokens) if base_tokens else None
    return Utterance(np.concatenate(feats, axis=0), labels, total, tokens, plants)


# desk-scale regime geometry in tokens; ratios mirror full-scale mean
# durations of roughly 4.4s / 11.4s / 78.6s
SF_TOKENS = (32, 96)
LF_TARGET_TOKENS = (100, 166)
LFXL_TARGET_TOKENS = (1044, 1176)


def make_splits(spec: TaskSpec, regime: str, n: int,
                salt: int = 1) -> list[Utterance]:
    """Generate n utterances of the requested length regime (SF | LF | LFXL)."""
    regime = regime.upper()
    codes = {"SF": 1, "LF": 2, "LFXL": 3}
    if regime not in codes:
        raise ValueError(f"unknown regime {regime!r}")
    rng = np.random.default_rng([spec.seed, codes[regime], salt])
    out = []
    for _ in range(n):
        if regime == "SF":
            out.append(gen_utterance(spec, int(rng.integers(*SF_TOKENS, endpoint=True)), rng))
            continue
        lo, hi = LF_TARGET_TOKENS if regime == "LF" else LFXL_TARGET_TOKENS
        target = int(rng.integers(lo, hi, endpoint=True)) * spec.frames_per_token
        members = []
        total = 0
        while total < target:
            u = gen_utterance(spec, int(rng.integers(*SF_TOKENS, endpoint=True)), rng)
            members.append(u)
            total += u.duration_frames
        out.append(concat_utterances(members, target))
    return out


# ---------------------------------------------------------------------------
# dataset files: length-prefixed binary records plus an offset manifest
# ---------------------------------------------------------------------------

def write_dataset(path: str, utterances: list[Utterance]) -> None:
    """Records: u32 frame count, u32 label count, f32 features, i32 labels.
    The manifest lists one record byte offset per line."""
    offsets = []
    with open(path, "wb") as f:
        for u in utterances:
            offsets.append(f.tell())
            t, d = u.features.shape
            f.write(np.asarray([t, len(u.labels)], dtype="<u4").tobytes())
            f.write(u.features.astype("<f4").tobytes())
            f.write(np.asarray(u.labels, dtype="<i4").tobytes())
        end = f.tell()
    with open(path + ".manifest", "w") as f:
        for off in offsets:
            f.write(f"{off}\n")
        f.write(f"{end}\n")


def read_dataset(path: str) -> list[Utterance]:
    with open(path + ".manifest") as f:
        offsets = [int(line) for line in f if line.strip()]
    out = []
    with open(path, "rb") as f:
        raw = f.read()
    for start, end in zip(offsets[:-1], offsets[1:]):
        t, n_labels = np.frombuffer(raw, "<u4", count=2, offset=start)
        payload = (end - start - 8) // 4 - int(n_labels)
        if payload % int(t):
            raise ValueError(f"corrupt record at offset {start}")
        d = payload // int(t)
        feats = np.frombuffer(raw, "<f4", count=int(t) * d,
                              offset=start + 8).reshape(int(t), d)
        labels = np.frombuffer(raw, "<i4", count=int(n_labels),
                               offset=start + 8 + 4 * int(t) * d)
        out.append(Utterance(feats.copy(), [int(x) for x in labels], int(t)))
    return out
