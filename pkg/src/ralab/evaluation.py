"""Label error rate, chunked long-form decoding, and the experiment matrices.

Scoring is plain Levenshtein with unit costs; ties during backtrace prefer
substitution over insertion over deletion.  Long-form decoding splits each
utterance into fixed non-overlapping chunks, decodes every chunk with a
fresh recurrent state (each chunk is its own context window), joins the
outputs in order, and scores against the full reference.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .bench import chunk_spans
from .direction import LayerSchedule
from .encoder import EncoderModel, ctc_greedy_decode
from .synthdata import Utterance


@dataclass
class ErrorReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            return 0.0 if (self.substitutions + self.insertions + self.deletions) == 0 \
                else float("inf")
        return (self.substitutions + self.insertions + self.deletions) / self.ref_len

    def add(self, other: "ErrorReport") -> "ErrorReport":
        return ErrorReport(self.substitutions + other.substitutions,
                           self.insertions + other.insertions,
                           self.deletions + other.deletions,
                           self.ref_len + other.ref_len)


def edit_distance_align(ref: list, hyp: list) -> ErrorReport:
    """Minimal-cost alignment; on equal cost prefer sub, then ins, then del."""
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        sub_row = dist[i - 1, :-1] + (np.asarray(hyp) != ref[i - 1])
        for j in range(1, m + 1):
            dist[i, j] = min(sub_row[j - 1], dist[i, j - 1] + 1, dist[i - 1, j] + 1)
    s = i_ = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            i_ += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return ErrorReport(int(s), int(i_), int(d), n)


@dataclass
class DecodeJob:
    model: EncoderModel
    dataset: list[Utterance]
    chunk_size: int
    batch_size: int = 4
    schedule: LayerSchedule | None = None


def decode_features(model: EncoderModel, features: np.ndarray, chunk_size: int,
                    batch_size: int = 4, schedule=None) -> list[list[int]]:
    """Greedy-decode fixed chunks of one utterance; no state crosses chunks."""
    if chunk_size < model.cfg.subsample_factor:
        raise ValueError(
            f"chunk_size {chunk_size} below subsample factor {model.cfg.subsample_factor}")
    spans = chunk_spans(len(features), chunk_size)
    outputs: list[list[int]] = [None] * len(spans)
    d = features.shape[1]
    with nc.no_grad():
        for i in range(0, len(spans), batch_size):
            group = spans[i:i + batch_size]
            tmax = max(e - s for s, e in group)
            batch = np.zeros((len(group), tmax, d), dtype=np.float32)
            lengths = np.zeros(len(group), dtype=np.int64)
            for j, (s, e) in enumerate(group):
                batch[j, :e - s] = features[s:e]
                lengths[j] = e - s
            logprobs, out_lens = model.logits(batch, lengths, schedule)
            for j, labels in enumerate(ctc_greedy_decode(logprobs, out_lens)):
                outputs[i + j] = labels
    return outputs


def longform_decode(job: DecodeJob) -> tuple[ErrorReport, list[list[list[int]]]]:
    """Chunked decode of every utterance; returns the pooled error report and
    the per-utterance, per-chunk label outputs."""
    total = ErrorReport()
    all_chunks = []
    for utt in job.dataset:
        chunks = decode_features(job.model, utt.features, job.chunk_size,
                                 job.batch_size, job.schedule)
        all_chunks.append(chunks)
        hyp = [lab for chunk in chunks for lab in chunk]
        total = total.add(edit_distance_align(list(utt.labels), hyp))
    return total, all_chunks


def length_generalization_matrix(models: dict[str, EncoderModel],
                                 dataset: list[Utterance],
                                 chunk_sizes: list[int],
                                 batch_size: int = 4) -> dict[tuple[str, int], ErrorReport]:
    """Decode-error table over (model, chunk size)."""
    table = {}
    for name, model in models.items():
        for chunk in chunk_sizes:
            report, _ = longform_decode(DecodeJob(model, dataset, chunk, batch_size))
            table[(name, chunk)] = report
    return table


def direction_matrix(model: EncoderModel, dataset: list[Utterance],
                     schedules: dict[str, LayerSchedule],
                     chunk_size: int | None = None,
                     batch_size: int = 4) -> dict[str, ErrorReport]:
    """Decode-error table over schedules for one trained model."""
    if chunk_size is None:
        chunk_size = max(u.duration_frames for u in dataset)
    table = {}
    for name, schedule in schedules.items():
        report, _ = longform_decode(
            DecodeJob(model, dataset, chunk_size, batch_size, schedule))
        table[name] = report
    return table


def write_report_csv(path: str, rows: list[dict]) -> None:
    """CSV with the fixed report schema; None cells come out as '-'."""
    cols = ["model", "policy", "schedule", "chunk_size", "S", "I", "D",
            "ref_len", "wer"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({c: ("-" if row.get(c) is None else row.get(c, "")) for c in cols})


def report_row(report: ErrorReport, model: str = "", policy: str = "",
               schedule: str = "", chunk_size: int | None = None) -> dict:
    return {"model": model, "policy": policy, "schedule": schedule,
            "chunk_size": chunk_size, "S": report.substitutions,
            "I": report.insertions, "D": report.deletions,
            "ref_len": report.ref_len, "wer": round(report.wer, 6)}
