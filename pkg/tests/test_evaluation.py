"""Edit distance vs recursive oracle, chunked decoding semantics."""

import functools
import itertools

import numpy as np
import pytest

from ralab.bench import chunk_spans
from ralab.encoder import EncoderConfig, EncoderModel
from ralab.evaluation import (
    DecodeJob, ErrorReport, decode_features, edit_distance_align,
    longform_decode, report_row, write_report_csv,
)
from ralab.synthdata import TaskSpec, make_splits


def test_identical_sequences():
    r = edit_distance_align(list("abc"), list("abc"))
    assert (r.substitutions, r.insertions, r.deletions, r.wer) == (0, 0, 0, 0.0)


def test_single_substitution():
    r = edit_distance_align(list("abc"), list("axc"))
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)
    assert r.wer == pytest.approx(1 / 3)


def test_empty_hypothesis():
    r = edit_distance_align(list("ab"), [])
    assert (r.substitutions, r.insertions, r.deletions) == (0, 0, 2)
    assert r.wer == 1.0


def test_empty_reference_counts_insertions():
    r = edit_distance_align([], list("xy"))
    assert r.insertions == 2
    assert r.wer == float("inf")


def test_tie_prefers_substitution():
    # "ab" -> "ba": cost 2 via two substitutions or ins+del; prefer subs
    r = edit_distance_align(list("ab"), list("ba"))
    assert (r.substitutions, r.insertions, r.deletions) == (2, 0, 0)


def test_wer_may_exceed_one():
    r = edit_distance_align(list("a"), list("xyz"))
    assert r.wer > 1.0


@functools.lru_cache(maxsize=None)
def _oracle_distance(ref: tuple, hyp: tuple) -> int:
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(
        _oracle_distance(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
        _oracle_distance(ref, hyp[1:]) + 1,
        _oracle_distance(ref[1:], hyp) + 1,
    )


def test_matches_recursive_oracle_exhaustively_short():
    """All pairs over a 3-symbol alphabet with |ref| + |hyp| <= 7."""
    alphabet = (0, 1, 2)
    strings = [()]
    for n in range(1, 7):
        strings.extend(itertools.product(alphabet, repeat=n))
    for ref in strings:
        for hyp in strings:
            if len(ref) + len(hyp) > 7 or len(ref) > 6 or len(hyp) > 6:
                continue
            got = edit_distance_align(list(ref), list(hyp))
            assert got.substitutions + got.insertions + got.deletions == \
                _oracle_distance(ref, hyp), (ref, hyp)


def test_matches_recursive_oracle_random_long():
    rng = np.random.default_rng(5)
    for _ in range(500):
        ref = tuple(rng.integers(0, 3, size=rng.integers(0, 7)))
        hyp = tuple(rng.integers(0, 3, size=rng.integers(0, 7)))
        got = edit_distance_align(list(ref), list(hyp))
        assert got.substitutions + got.insertions + got.deletions == \
            _oracle_distance(ref, hyp)


# ---------------------------------------------------------------------------
# chunked decoding
# ---------------------------------------------------------------------------

SPEC = TaskSpec(vocab_size=16, feature_dim=8, key_value_pairs=2, seed=21)


def small_model():
    cfg = EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=16,
                        d_in=8, attention_kind="rwkv", bidirectional=True,
                        ra_chunk=8, conv_kernel=3)
    return EncoderModel(cfg, np.random.default_rng(31), dtype=np.float32)


def test_chunk_count_for_long_file():
    # 9857 seconds at 100 fps decoded with 40k-frame chunks
    assert len(chunk_spans(985_700, 40_000)) == 25


def test_single_chunk_equals_whole_sequence():
    model = small_model()
    data = make_splits(SPEC, "SF", 3)
    for utt in data:
        whole = decode_features(model, utt.features, chunk_size=utt.duration_frames)
        chunked = decode_features(model, utt.features,
                                  chunk_size=utt.duration_frames + 50)
        assert whole == chunked and len(whole) == 1


def test_chunk_too_small_rejected():
    model = small_model()
    utt = make_splits(SPEC, "SF", 1)[0]
    with pytest.raises(ValueError):
        decode_features(model, utt.features, chunk_size=2)


def test_chunk_outputs_independent_of_grouping():
    """Decoding chunk-by-chunk or in large batches gives identical outputs,
    and decoding chunks in a different order changes nothing."""
    model = small_model()
    utt = make_splits(SPEC, "LF", 1)[0]
    a = decode_features(model, utt.features, 64, batch_size=1)
    b = decode_features(model, utt.features, 64, batch_size=8)
    assert a == b
    spans = chunk_spans(utt.duration_frames, 64)
    shuffled = [decode_features(model, utt.features[s:e], 64)[0]
                for s, e in reversed(spans)]
    assert list(reversed(shuffled)) == a


def test_longform_decode_report_and_determinism():
    model = small_model()
    data = make_splits(SPEC, "LF", 2)
    job = DecodeJob(model, data, chunk_size=96, batch_size=4)
    r1, chunks1 = longform_decode(job)
    r2, chunks2 = longform_decode(job)
    assert chunks1 == chunks2
    assert r1.ref_len == sum(len(u.labels) for u in data)
    assert (r1.substitutions, r1.insertions, r1.deletions) == \
        (r2.substitutions, r2.insertions, r2.deletions)


def test_report_csv_roundtrip(tmp_path):
    rows = [report_row(ErrorReport(1, 2, 3, 10), model="m", policy="bi",
                       schedule="alt", chunk_size=100),
            {"model": "m2", "policy": "", "schedule": "l2r", "chunk_size": None,
             "S": None, "I": None, "D": None, "ref_len": None, "wer": None}]
    path = tmp_path / "report.csv"
    write_report_csv(str(path), rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "model,policy,schedule,chunk_size,S,I,D,ref_len,wer"
    assert lines[1].startswith("m,bi,alt,100,1,2,3,10,")
    assert lines[2] == "m2,,l2r,-,-,-,-,-,-"
