import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import line_volume, one_voxel, random_labels, random_probs
from oracles import brute_brier, brute_nll, oracle_ece
from segcal import calibration as cal
from segcal.volume import GridMeta, LabelVolume, ProbabilityVolume, VoxelMask

DATA = Path(__file__).parent / "data"


def calibrated_samples(rng, n, gamma=1.0):
    conf = rng.uniform(0.5, 1.0, size=n)
    correct = rng.random(n) < conf
    return conf ** gamma, correct


class TestNLL:
    def test_certain_prediction(self):
        assert cal.nll(*one_voxel([0.0, 1.0], 1)) == 0.0

    def test_half(self):
        assert cal.nll(*one_voxel([0.5, 0.5], 1)) == pytest.approx(math.log(2), abs=1e-12)

    def test_four_voxels(self):
        # -mean(ln p) over float32-stored (0.9, 0.8, 0.6, 0.99), from a 30-digit oracle
        p, y = line_volume([0.9, 0.8, 0.6, 0.99])
        assert cal.nll(p, y) == pytest.approx(0.212345, abs=1e-6)

    def test_zero_probability_is_clamped(self):
        assert cal.nll(*one_voxel([1.0, 0.0], 1)) == pytest.approx(-math.log(cal.EPS_LOG))

    def test_unnormalized_renormalized(self):
        meta = GridMeta((1, 1, 1), (1, 1, 1))
        p = ProbabilityVolume(meta, 2, [0.2, 0.6], normalized=False)
        y = LabelVolume(meta, 2, [1])
        assert cal.nll(p, y) == pytest.approx(-math.log(0.75), rel=1e-6)
        assert cal.nll(p, y, renorm=False) == pytest.approx(-math.log(0.6), rel=1e-6)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        for i in range(100):
            p = random_probs(rng, (4, 3, 2), 2 + i % 3)
            if i % 2:
                p = ProbabilityVolume(p.meta, p.classes, p.probs * 0.7, normalized=False)
            y = random_labels(rng, (4, 3, 2), p.classes)
            assert cal.nll(p, y) == pytest.approx(brute_nll(p, y), abs=1e-12)

    def test_empty_region(self, rng):
        p = random_probs(rng, (2, 2, 1), 2)
        y = random_labels(rng, (2, 2, 1), 2)
        with pytest.raises(cal.EmptyRegionError):
            cal.nll(p, y, VoxelMask(p.meta, np.zeros(4, bool)))

    def test_meta_mismatch(self, rng):
        p = random_probs(rng, (2, 2, 1), 2)
        y = random_labels(rng, (2, 2, 1), 2, spacing=(2, 1, 1))
        with pytest.raises(ValueError):
            cal.nll(p, y)


class TestBrier:
    def test_perfect(self):
        assert cal.brier(*one_voxel([0.0, 1.0], 1)) == 0.0

    def test_uniform_two_class(self):
        assert cal.brier(*one_voxel([0.5, 0.5], 0)) == 0.25

    def test_matches_double_loop(self, rng):
        p = random_probs(rng, (6, 6, 1), 3)
        y = random_labels(rng, (6, 6, 1), 3)
        assert cal.brier(p, y) == pytest.approx(brute_brier(p, y), abs=1e-12)

    def test_uses_raw_channels(self):
        meta = GridMeta((1, 1, 1), (1, 1, 1))
        p = ProbabilityVolume(meta, 2, [1.0, 1.0], normalized=False)
        assert cal.brier(p, LabelVolume(meta, 2, [0])) == 0.5


class TestReliability:
    def test_all_confident_and_correct(self):
        p, y = line_volume([1.0] * 5)
        assert cal.reliability(p, y).ece == 0.0

    @pytest.mark.parametrize("num_bins", [1, 3, 10, 15])
    def test_single_occupied_bin(self, num_bins):
        conf = np.full(10, 0.9)
        correct = np.array([True] * 7 + [False] * 3)
        rep = cal.reliability_from_samples(conf, correct, num_bins)
        assert rep.ece == pytest.approx(0.2, abs=1e-12)

    def test_matches_sort_and_bin_oracle(self):
        rng = np.random.default_rng(5)
        conf = rng.uniform(0.3, 1.0, size=10_000)
        conf[:50] = np.round(conf[:50], 1)  # land some samples exactly on edges
        correct = rng.random(10_000) < conf ** 1.5
        rep = cal.reliability_from_samples(conf, correct, 10)
        ece, counts = oracle_ece(conf, correct, 10)
        assert rep.ece == pytest.approx(ece, abs=1e-12)
        assert [b.count for b in rep.bins] == counts

    def test_bins_are_right_closed(self):
        rep = cal.reliability_from_samples([0.5, 0.50000001], [True, True], 2)
        assert [b.count for b in rep.bins] == [1, 1]

    def test_report_invariants(self, rng):
        p = random_probs(rng, (5, 5, 2), 3)
        y = random_labels(rng, (5, 5, 2), 3)
        rep = cal.reliability(p, y, num_bins=7)
        assert sum(b.count for b in rep.bins) == rep.total == 50
        recomputed = sum(b.count / rep.total * abs(b.accuracy - b.mean_confidence)
                         for b in rep.bins if b.count)
        assert rep.ece == pytest.approx(recomputed, abs=1e-12)

    def test_one_bin_is_global_gap(self, rng):
        conf, correct = calibrated_samples(rng, 1000, gamma=2)
        rep = cal.reliability_from_samples(conf, correct, 1)
        assert rep.ece == pytest.approx(abs(correct.mean() - conf.mean()), abs=1e-12)

    def test_calibrated_sampler_large_n(self):
        conf, correct = calibrated_samples(np.random.default_rng(0), 10**6)
        assert cal.reliability_from_samples(conf, correct, 10).ece < 0.01

    def test_confidence_skew_increases_ece(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(0.5, 1.0, size=10**5)
        correct = rng.random(10**5) < base
        e1 = cal.reliability_from_samples(base, correct).ece
        e2 = cal.reliability_from_samples(base ** 2, correct).ece
        assert e2 > e1

    def test_bad_bins(self, rng):
        with pytest.raises(ValueError):
            cal.reliability_from_samples([0.5], [True], 0)

    def test_merge_reports_equals_pooled(self, rng):
        c1, k1 = calibrated_samples(rng, 500, 1.3)
        c2, k2 = calibrated_samples(rng, 300, 0.8)
        merged = cal.merge_reports([cal.reliability_from_samples(c1, k1),
                                    cal.reliability_from_samples(c2, k2)])
        pooled = cal.reliability_from_samples(np.concatenate([c1, c2]), np.concatenate([k1, k2]))
        assert merged.ece == pytest.approx(pooled.ece, abs=1e-12)


class TestECEPercent:
    @pytest.mark.parametrize("ece,pct", [(0.0, 0.0), (0.0371, 3.71), (0.2, 20.0)])
    def test_scale(self, ece, pct):
        assert cal.ece_percent(cal.ReliabilityReport((), 1, ece)) == pytest.approx(pct, abs=1e-12)


class TestRenderCSV:
    def _report(self, counts):
        bins = tuple(cal.ReliabilityBin(m / 2, (m + 1) / 2, c, 0.5 if c else None, 0.75 if c else None)
                     for m, c in enumerate(counts))
        return cal.ReliabilityReport(bins, sum(counts), 0.25)

    def test_min_count_zero_emits_occupied(self):
        text = cal.render_reliability_csv(self._report([0, 3]), 0)
        assert text.splitlines() == ["bin_lo,bin_hi,count,accuracy,mean_confidence",
                                     "0.5,1,3,0.5,0.75"]

    def test_strict_threshold(self):
        text = cal.render_reliability_csv(self._report([1000, 1001]), 1000)
        lines = text.splitlines()
        assert len(lines) == 2 and lines[1].split(",")[2] == "1001"

    def test_header_always_present(self):
        assert cal.render_reliability_csv(self._report([5, 5]), 10) == \
            "bin_lo,bin_hi,count,accuracy,mean_confidence\n"

    def test_golden(self):
        rng = np.random.default_rng(2024)
        conf, correct = calibrated_samples(rng, 5000, gamma=1.7)
        text = cal.render_reliability_csv(cal.reliability_from_samples(conf, correct, 10), 100)
        assert text == (DATA / "reliability_golden.csv").read_text()


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p = random_probs(rng, (6, 1, 1), 3)
        y = random_labels(rng, (6, 1, 1), 3)
        perm = rng.permutation(6)
        pp = ProbabilityVolume(p.meta, 3, p.probs.reshape(6, 3)[perm])
        yp = LabelVolume(y.meta, 3, y.labels.reshape(6)[perm])
        assert cal.nll(pp, yp) == pytest.approx(cal.nll(p, y), abs=1e-12)
        assert cal.brier(pp, yp) == pytest.approx(cal.brier(p, y), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_disjoint_region_additivity(self, seed):
        rng = np.random.default_rng(seed)
        p = random_probs(rng, (4, 4, 1), 2)
        y = random_labels(rng, (4, 4, 1), 2)
        split = rng.random(16) < 0.5
        split[0], split[1] = True, False
        a, b = VoxelMask(p.meta, split), VoxelMask(p.meta, ~split)
        na, nb = a.count, b.count
        for fn in (cal.nll, cal.brier):
            combined = (na * fn(p, y, a) + nb * fn(p, y, b)) / 16
            assert fn(p, y) == pytest.approx(combined, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 5))
    def test_brier_range(self, seed, k):
        rng = np.random.default_rng(seed)
        raw = rng.random((3, 3, 1, k))
        raw[rng.random((3, 3, 1)) < 0.5] = 0
        raw[..., 0] += 1e-9
        p = ProbabilityVolume(GridMeta((1, 3, 3), (1, 1, 1)), k, raw / raw.sum(-1, keepdims=True))
        y = random_labels(rng, (1, 3, 3), k)
        assert 0.0 <= cal.brier(p, y) <= 2.0
