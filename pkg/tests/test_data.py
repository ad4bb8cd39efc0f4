import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftcal.data import (DatasetFormatError, DatasetSplits, Segment, SplitMix64,
                           SyntheticShiftSpec, generate_synthetic, label_stats, load_dataset,
                           load_splits, save_dataset, save_splits, shuffle_subjects,
                           split_by_subject, stack, true_mean, true_noise_sd)


def corpus(n_subjects, per=3, length=16):
    return [Segment(f"p{i:03d}", np.full(length, float(i)), float(j))
            for i in range(n_subjects) for j in range(per)]


class TestSegment:
    def test_valid(self):
        s = Segment(7, [0.0] * 16, 3)
        assert s.subject_id == "7" and s.signal.dtype == np.float64

    @pytest.mark.parametrize("signal,target", [([0.0] * 15, 0.0), ([[0.0] * 16], 0.0),
                                               ([0.0] * 15 + [np.nan], 0.0),
                                               ([0.0] * 16, np.inf)])
    def test_invalid(self, signal, target):
        with pytest.raises(ValueError):
            Segment("a", signal, target)


class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        segs = corpus(3, per=1)
        path = tmp_path / "c.jsonl"
        save_dataset(segs, path)
        back = load_dataset(path)
        assert len(back) == 3
        for a, b in zip(segs, back):
            assert (a.subject_id, a.target) == (b.subject_id, b.target)
            np.testing.assert_array_equal(a.signal, b.signal)

    def test_floats_exact(self, tmp_path):
        sig = np.random.default_rng(0).normal(size=20)
        save_dataset([Segment("a", sig, math.pi)], tmp_path / "c.jsonl")
        back = load_dataset(tmp_path / "c.jsonl")[0]
        assert back.signal.tobytes() == sig.tobytes() and back.target == math.pi

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert load_dataset(tmp_path / "e.jsonl") == []

    def test_nan_sample_is_rejected(self, tmp_path):
        good = json.dumps({"subject_id": "a", "target": 1.0, "signal": [0.0] * 16})
        bad = '{"subject_id": "b", "target": 1.0, "signal": [NaN' + ", 0.0" * 15 + "]}"
        (tmp_path / "c.jsonl").write_text(good + "\n" + bad + "\n")
        with pytest.raises(DatasetFormatError) as info:
            load_dataset(tmp_path / "c.jsonl")
        assert info.value.lineno == 2

    @pytest.mark.parametrize("line", ["not json", '{"subject_id": "a", "target": 1}',
                                      '{"subject_id": "a", "target": 1, "signal": [1, 2]}'])
    def test_malformed(self, tmp_path, line):
        (tmp_path / "c.jsonl").write_text(line + "\n")
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path / "c.jsonl")


class TestSplitMix64:
    def test_reference_vectors(self):
        rng = SplitMix64(1234567)
        assert [rng.next_u64() for _ in range(5)] == [
            6457827717110365317, 3203168211198807973, 9817491932198370423,
            4593380528125082431, 16408922859458223821]

    def test_below_range(self):
        rng = SplitMix64(0)
        draws = [rng.below(7) for _ in range(7000)]
        assert set(draws) == set(range(7))
        assert max(np.bincount(draws)) < 1150

    def test_shuffle_is_permutation(self):
        ids = [f"x{i}" for i in range(30)]
        out = shuffle_subjects(ids[::-1] + ids[:5], 4)
        assert sorted(out) == sorted(ids)
        assert out == shuffle_subjects(ids, 4)
        assert out != shuffle_subjects(ids, 5)


class TestSplits:
    def test_exact_fractions(self):
        splits = split_by_subject(corpus(100), (0.7, 0.1, 0.1, 0.1), seed=0)
        segs = corpus(100)
        counts = [len({segs[i].subject_id for i in idx}) for _, idx in splits.items()]
        assert counts == [70, 10, 10, 10]

    def test_deterministic(self):
        a = split_by_subject(corpus(50), seed=3)
        assert a == split_by_subject(corpus(50), seed=3)
        assert a != split_by_subject(corpus(50), seed=4)

    def test_minimum_one_subject(self):
        splits = split_by_subject(corpus(5), seed=0)
        assert [len(idx) // 3 for _, idx in splits.items()] == [2, 1, 1, 1]

    @pytest.mark.parametrize("fractions", [(0.7, 0.1, 0.1), (0.7, 0.1, 0.1, 0.2),
                                           (1.0, 0.0, 0.0, 0.0)])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ValueError):
            split_by_subject(corpus(20), fractions)

    def test_too_few_subjects(self):
        with pytest.raises(ValueError):
            split_by_subject(corpus(3))

    def test_manifest_round_trip(self, tmp_path):
        splits = split_by_subject(corpus(20), seed=1)
        save_splits(splits, "c.jsonl", tmp_path / "s.json")
        assert load_splits(tmp_path / "s.json") == splits
        assert DatasetSplits.from_manifest(splits.to_manifest("x")) == splits


@settings(max_examples=40, deadline=None)
@given(n_subjects=st.integers(4, 60), per=st.integers(1, 4), seed=st.integers(0, 2**32),
       interleave=st.booleans())
def test_splits_are_subject_disjoint_partitions(n_subjects, per, seed, interleave):
    segs = corpus(n_subjects, per)
    if interleave:
        segs = sorted(segs, key=lambda s: (s.target, s.subject_id))
    splits = split_by_subject(segs, seed=seed)
    all_idx = sorted(i for _, idx in splits.items() for i in idx)
    assert all_idx == list(range(len(segs)))
    owners = {}
    for name, idx in splits.items():
        for i in idx:
            assert owners.setdefault(segs[i].subject_id, name) == name


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticShiftSpec(n_subjects=5, segments_per_subject=4, seed=2)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        assert [s.target for s in a] == [s.target for s in b]
        assert all(np.array_equal(x.signal, y.signal) for x, y in zip(a, b))
        assert len({s.subject_id for s in a}) == 5 and len(a) == 20

    def test_mean_shift(self):
        base = dict(n_subjects=400, segments_per_subject=30, seed=5)
        y0 = np.array([s.target for s in generate_synthetic(SyntheticShiftSpec(**base))])
        y1 = np.array([s.target for s in generate_synthetic(
            SyntheticShiftSpec(target_mean_shift=0.75, **base))])
        # same seed: the shift is applied to identical draws
        se = np.sqrt(y0.var() / len(y0) + y1.var() / len(y1))
        assert abs((y1.mean() - y0.mean()) - 0.75) < 3 * se
        np.testing.assert_allclose(y1 - y0, 0.75, atol=1e-12)

    def test_mean_shift_independent_draws(self):
        y0 = np.array([s.target for s in generate_synthetic(
            SyntheticShiftSpec(n_subjects=500, segments_per_subject=20, seed=1))])
        y1 = np.array([s.target for s in generate_synthetic(
            SyntheticShiftSpec(n_subjects=500, segments_per_subject=20, seed=2,
                               target_mean_shift=0.5))])
        # subject clustering inflates the SE; use per-subject means
        m0 = y0.reshape(500, 20).mean(axis=1)
        m1 = y1.reshape(500, 20).mean(axis=1)
        se = np.sqrt(m0.var(ddof=1) / 500 + m1.var(ddof=1) / 500)
        assert abs((m1.mean() - m0.mean()) - 0.5) < 3 * se

    def test_homoscedastic_residual_sd(self):
        spec = SyntheticShiftSpec(n_subjects=500, segments_per_subject=20,
                                  noise_profile="homoscedastic(0.3)", seed=3)
        segs = generate_synthetic(spec)
        x, y = stack(segs)
        resid = y - true_mean(x, spec)
        assert abs(resid.std() / 0.3 - 1) < 0.05
        np.testing.assert_array_equal(true_noise_sd(x, spec), 0.3)

    def test_heteroscedastic_noise_varies(self):
        spec = SyntheticShiftSpec(n_subjects=200, segments_per_subject=20, seed=4)
        x, y = stack(generate_synthetic(spec))
        sd = true_noise_sd(x, spec)
        assert 0.2 < sd.min() and sd.max() < 0.8 and sd.max() / sd.min() > 2
        z = (y - true_mean(x, spec)) / sd
        assert abs(z.std() - 1) < 0.03 and abs(z.mean()) < 0.03

    def test_label_stats_match_spec(self):
        spec = SyntheticShiftSpec(n_subjects=600, segments_per_subject=40, seed=6,
                                  target_mean_shift=115.47, target_scale=18.91)
        mean, sd, n = label_stats(generate_synthetic(spec))
        assert n == 24_000
        assert abs(mean / 115.47 - 1) < 0.01
        assert abs(sd / 18.91 - 1) < 0.01

    @pytest.mark.parametrize("kw", [dict(target_scale=0), dict(n_subjects=0),
                                    dict(signal_len=8), dict(noise_profile="weird"),
                                    dict(noise_profile="homoscedastic(2.0)")])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SyntheticShiftSpec(**kw)


class TestLabelStats:
    def test_constant(self):
        assert label_stats([Segment("a", [0.0] * 16, 1)] * 3) == (1.0, 0.0, 3)

    def test_two_point(self):
        segs = [Segment("a", [0.0] * 16, 0), Segment("b", [0.0] * 16, 2)]
        assert label_stats(segs) == (1.0, 1.0, 2)

    def test_empty(self):
        with pytest.raises(ValueError):
            label_stats([])


def test_stack_rejects_mixed_lengths():
    with pytest.raises(ValueError):
        stack([Segment("a", [0.0] * 16, 0), Segment("a", [0.0] * 17, 0)])
