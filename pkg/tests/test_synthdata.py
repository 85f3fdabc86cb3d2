"""Generator invariants: determinism, retrieval structure, feasibility,
regime statistics, dataset round trips."""

import numpy as np
import pytest

from ralab.encoder import ctc_required_frames
from ralab.synthdata import (
    GenerationError, TaskSpec, concat_utterances, gen_utterance, make_splits,
    oracle_labels, read_dataset, write_dataset,
)

SPEC = TaskSpec(vocab_size=32, feature_dim=16, frames_per_token=4,
                key_value_pairs=4, noise_std=0.0, seed=7)


def test_determinism():
    a = gen_utterance(SPEC, 64, np.random.default_rng(1))
    b = gen_utterance(SPEC, 64, np.random.default_rng(1))
    np.testing.assert_array_equal(a.features, b.features)
    assert a.labels == b.labels


def test_duration_and_label_counts():
    u = gen_utterance(SPEC, 50, np.random.default_rng(2))
    assert u.duration_frames == 50 * 4
    assert u.features.shape == (200, 16)
    assert len(u.labels) == 50


def test_too_small_rejected():
    with pytest.raises(GenerationError):
        gen_utterance(SPEC, 9, np.random.default_rng(3))


def test_query_labels_match_planted_values():
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        u = gen_utterance(SPEC, int(rng.integers(32, 97)), rng)
        assert len(u.plants) == SPEC.key_value_pairs
        for k, key_pos, value, query_pos in u.plants:
            assert u.tokens[key_pos] == SPEC.key_id(k)
            assert u.tokens[key_pos + 1] == value
            assert u.tokens[query_pos] == SPEC.query_id(k)
            assert u.labels[query_pos] == value


def test_local_rule_holds_off_queries():
    rng = np.random.default_rng(5)
    rule = SPEC.rule()
    for _ in range(200):
        u = gen_utterance(SPEC, 64, rng)
        queries = {qp for _, _, _, qp in u.plants}
        prev = SPEC.bos
        for pos, tok in enumerate(u.tokens):
            if pos not in queries:
                assert u.labels[pos] == rule[prev, tok]
            prev = tok


def test_plants_split_between_directions():
    u = gen_utterance(SPEC, 80, np.random.default_rng(6))
    fwd = sum(1 for _, kp, _, qp in u.plants if kp < qp)
    bwd = sum(1 for _, kp, _, qp in u.plants if kp > qp)
    assert fwd == 2 and bwd == 2


def test_ctc_feasible_with_one_frame_per_token():
    """No adjacent label repeats, even across concatenation joints."""
    rng = np.random.default_rng(7)
    for _ in range(300):
        u = gen_utterance(SPEC, int(rng.integers(32, 97)), rng)
        assert ctc_required_frames(u.labels) == len(u.labels)
    parts = [gen_utterance(SPEC, 40, rng) for _ in range(6)]
    cat = concat_utterances(parts, 10 ** 9)
    assert ctc_required_frames(cat.labels) == len(cat.labels)


def test_oracle_decoder_is_perfect_on_noise_free_data():
    rng = np.random.default_rng(8)
    for _ in range(50):
        u = gen_utterance(SPEC, 64, rng)
        assert oracle_labels(SPEC, u) == u.labels


def test_concat_semantics():
    rng = np.random.default_rng(9)
    us = [gen_utterance(SPEC, 25, rng) for _ in range(2)]
    assert all(u.duration_frames == 100 for u in us)
    cat = concat_utterances(us, 150)
    assert cat.duration_frames == 200
    assert cat.labels == us[0].labels + us[1].labels
    first_only = concat_utterances(us, 0)
    assert first_only.duration_frames == 100
    total = concat_utterances(us, 10 ** 9)
    assert len(total.labels) == sum(len(u.labels) for u in us)


def test_empty_concat_rejected():
    with pytest.raises(ValueError):
        concat_utterances([], 10)


def test_regime_statistics():
    sf = make_splits(SPEC, "SF", 300)
    lf = make_splits(SPEC, "LF", 120)
    lfxl = make_splits(SPEC, "LFXL", 12)
    mean_sf = np.mean([len(u.labels) for u in sf])
    mean_lf = np.mean([len(u.labels) for u in lf])
    mean_lfxl = np.mean([len(u.labels) for u in lfxl])
    assert 58 <= mean_sf <= 70
    assert 2.3 <= mean_lf / mean_sf <= 2.9
    assert 15.9 <= mean_lfxl / mean_sf <= 19.9


def test_splits_reproducible():
    a = make_splits(SPEC, "LF", 5)
    b = make_splits(SPEC, "LF", 5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.features, y.features)
        assert x.labels == y.labels


def test_dataset_round_trip(tmp_path):
    us = make_splits(SPEC, "SF", 7)
    path = str(tmp_path / "data.bin")
    write_dataset(path, us)
    back = read_dataset(path)
    assert len(back) == 7
    for orig, loaded in zip(us, back):
        np.testing.assert_allclose(loaded.features, orig.features, atol=0)
        assert loaded.labels == orig.labels
        assert loaded.duration_frames == orig.duration_frames
