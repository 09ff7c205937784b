import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lfposterior import metrics as M
from lfposterior.posterior import DEFAULT_GRID, BinGrid, DiracMap, DiscreteMap, LaplaceMap


def onehot(k, K=108, n=1):
    p = np.zeros((K, n))
    p[k] = 1.0
    return p


class TestPointErrors:
    def test_mse(self):
        assert M.mse([1.0, 2.0, 3.0], [1.0, 0.0, 4.0]) == pytest.approx(5.0 / 3.0)

    def test_badpix_boundary_is_strict(self):
        assert M.badpix([0.07], [0.0]) == 0.0
        assert M.badpix([0.0700001], [0.0]) == 1.0
        assert M.badpix([0.07, -0.08, 0.0, 0.5], [0.0, 0.0, 0.0, 0.0]) == 0.5

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            M.mse([1.0, 2.0], [1.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            M.badpix([], [])


class TestKLD:
    def test_identical_is_zero(self, rng):
        p = rng.dirichlet(np.ones(108), size=20).T
        assert np.all(M.kld_per_pixel(p, p) == pytest.approx(0.0, abs=1e-12))

    def test_onehot_vs_uniform(self):
        val = M.kld_per_pixel(onehot(17), np.full((108, 1), 1 / 108))
        assert abs(val[0] - math.log(108)) < 1e-6

    def test_two_bin_gt_vs_uniform(self):
        p = np.zeros((108, 1))
        p[[10, 80]] = 0.5
        val = M.kld_per_pixel(p, np.full((108, 1), 1 / 108))
        assert val[0] == pytest.approx(math.log(54), abs=1e-9)

    def test_zero_prediction_is_clamped(self):
        val = M.kld_per_pixel(onehot(3, K=4), onehot(0, K=4))
        assert val[0] == pytest.approx(-math.log(M.KLD_EPS))

    def test_aggregation_splits_classes(self):
        gt = np.concatenate([onehot(0), onehot(5)], axis=1)
        q = np.full((108, 2), 1 / 108)
        res = M.kld(gt, q, np.array([False, True]))
        assert res.unimodal == pytest.approx(math.log(108) / 108)
        assert res.multimodal == pytest.approx(math.log(108) / 108)
        assert res.overall == pytest.approx(math.log(108) / 108)

    def test_per_pixel_normalization(self):
        gt = onehot(7, n=3)
        q = np.full((108, 3), 1 / 108)
        mask = np.zeros(3, bool)
        assert M.kld(gt, q, mask, per_pixel=True).overall == pytest.approx(math.log(108))

    def test_empty_class_is_none(self):
        uni, multi, overall = M.kld(onehot(0), onehot(0), np.array([False]))
        assert multi is None and uni == 0.0 and overall == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(ValueError, match="grid"):
            M.kld(onehot(0), onehot(0), [False], DEFAULT_GRID, BinGrid(-3.0, 3.0, 108))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 30), st.integers(0, 2**32 - 1))
    def test_non_negative(self, K, seed):
        r = np.random.default_rng(seed)
        p = r.dirichlet(np.ones(K), size=5).T
        q = r.dirichlet(np.ones(K), size=5).T
        assert np.all(M.kld_per_pixel(p, q) >= -1e-12)


class TestSparsification:
    errors = np.array([0.0, 0.1, 0.2, 0.05])

    def test_hand_case_oracle_order(self):
        curve = M.sparsification([0.1, 0.4, 0.3, 0.2], self.errors, S=4)
        np.testing.assert_allclose(curve.metric, [1.0, 2 / 3, 0.0, 0.0])
        np.testing.assert_allclose(curve.oracle, [1.0, 2 / 3, 0.0, 0.0])
        assert M.ause(curve) == 0.0

    def test_hand_case_bad_order(self):
        curve = M.sparsification([0.4, 0.1, 0.2, 0.3], self.errors, S=4)
        np.testing.assert_allclose(curve.metric, [1.0, 4 / 3, 2.0, 2.0])
        np.testing.assert_allclose(curve.sparsification_error, [0.0, 2 / 3, 2.0, 2.0])
        assert M.ause(curve) == pytest.approx(17 / 12)

    def test_mse_metric(self):
        curve = M.sparsification([3.0, 2.0, 1.0], [3.0, 2.0, 1.0], S=3, metric="mse")
        np.testing.assert_allclose(curve.metric * 14 / 3, [14 / 3, 2.5, 1.0])

    def test_ties_remove_lower_index_first(self):
        curve = M.sparsification([1.0, 1.0], [0.0, 1.0], S=2)
        # pixel 0 (error 0) is dropped first, leaving the bad pixel
        np.testing.assert_allclose(curve.metric, [1.0, 2.0])

    def test_fractions(self):
        curve = M.sparsification(np.arange(10.0), np.arange(10.0), S=5)
        np.testing.assert_allclose(curve.fractions, [0.0, 0.2, 0.4, 0.6, 0.8])

    def test_all_correct_is_unscaled(self):
        curve = M.sparsification([0.3, 0.1], [0.0, 0.0], S=2)
        np.testing.assert_array_equal(curve.metric, [0.0, 0.0])

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            M.sparsification([1.0], [1.0], metric="epe")

    def test_brute_force_extremes(self):
        errors = np.array([0.3, 0.05, 0.9, 0.6, 0.1])
        scores = {}
        for perm in itertools.permutations(range(5)):
            u = np.empty(5)
            u[list(perm)] = np.arange(5, 0, -1)  # perm[0] is removed first
            scores[perm] = M.ause(M.sparsification(u, errors, S=5, metric="mse"))
        best = tuple(np.argsort(-errors))
        worst = tuple(np.argsort(errors))
        assert scores[best] == pytest.approx(0.0, abs=1e-12)
        assert max(scores, key=scores.get) == worst
        assert min(scores.values()) >= -1e-12

    def test_csv(self):
        text = M.sparsification([0.1, 0.4, 0.3, 0.2], self.errors, S=4).to_csv()
        lines = text.splitlines()
        assert lines[0] == M.CURVE_HEADER
        assert len(lines) == 5
        assert lines[2] == "0.25,0.666666667,0.666666667,0"

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 2)),
        st.integers(1, 20),
        st.sampled_from(["badpix", "mse"]),
        st.integers(0, 2**32 - 1),
    )
    def test_error_non_negative(self, errors, S, metric, seed):
        u = np.random.default_rng(seed).uniform(size=errors.size)
        curve = M.sparsification(u, errors, S=S, metric=metric)
        assert np.all(curve.sparsification_error >= -1e-9)
        assert curve.metric[0] == pytest.approx(curve.oracle[0])

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 2), unique=True), st.integers(1, 20))
    def test_error_ordering_gives_zero_area(self, errors, S):
        assert M.ause(M.sparsification(errors * 3 + 1, errors, S=S, metric="mse")) == pytest.approx(0.0, abs=1e-12)


class TestAuSE:
    def test_triangle(self):
        s = np.linspace(0, 1, 11)
        curve = M.SparsificationCurve(s, 1 - s, np.zeros_like(s))
        assert M.ause(curve) == pytest.approx(0.5)

    def test_last_value_held(self):
        curve = M.SparsificationCurve(np.array([0.0, 0.5]), np.array([1.0, 1.0]), np.zeros(2))
        assert M.ause(curve) == pytest.approx(1.0)

    def test_single_sample(self):
        curve = M.SparsificationCurve(np.array([0.0]), np.array([0.3]), np.array([0.1]))
        assert M.ause(curve) == pytest.approx(0.2)


class TestEvaluate:
    @pytest.fixture
    def records(self, small_dataset):
        return small_dataset.records

    def interior_pixels(self, records):
        total = 0
        for r in records:
            m = r.lightfield.valid_margin
            h, w = r.ground_truth.shape
            total += (h - 2 * m) * (w - 2 * m)
        return total

    def test_ground_truth_replay_is_perfect(self, records):
        rep = M.evaluate(M.ground_truth_replay, records)
        assert rep.kld_overall == pytest.approx(0.0, abs=1e-12)
        assert rep.kld_unimodal == pytest.approx(0.0, abs=1e-12)
        assert rep.kld_multimodal in (None, pytest.approx(0.0, abs=1e-12))
        assert rep.n_pixels == self.interior_pixels(records)

    def test_dirac_has_no_ause(self, records):
        rep = M.evaluate(lambda r: DiracMap(r.ground_truth.closest(), r.lightfield.valid_margin), records)
        assert rep.ause is None
        assert rep.mse == 0.0 and rep.badpix == 0.0

    def test_constant_uncertainty_has_no_ause(self, records):
        def source(r):
            h, w = r.ground_truth.shape
            return LaplaceMap(np.zeros((h, w)), np.full((h, w), 0.2), r.lightfield.valid_margin)

        rep = M.evaluate(source, records)
        assert rep.ause is None
        assert rep.kld_overall > 0

    def test_counts(self, records):
        rep = M.evaluate(M.ground_truth_replay, records)
        expected = 0
        for r in records:
            m = r.lightfield.valid_margin
            expected += int(r.ground_truth.multimodal_mask(0.3)[m:-m or None, m:-m or None].sum())
        assert rep.n_multimodal == expected
        assert rep.n_unimodal == rep.n_pixels - expected
        assert rep.time_sec >= 0

    def test_larger_posterior_margin_shrinks_interior(self, records):
        def source(r):
            p = M.ground_truth_replay(r)
            return DiscreteMap(p.grid, p.probs, p.valid_margin + 2)

        full = M.evaluate(M.ground_truth_replay, records)
        small = M.evaluate(source, records)
        assert small.n_pixels < full.n_pixels

    def test_report_json_keys(self, records):
        rep = M.evaluate(M.ground_truth_replay, records)
        d = json.loads(rep.to_json())
        assert tuple(d) == M.REPORT_KEYS
        assert len(rep.summary_lines()) == len(M.REPORT_KEYS)

    def test_grid_mismatch(self, records):
        with pytest.raises(ValueError, match="grid"):
            M.evaluate(M.ground_truth_replay, records, grid=BinGrid(-3.0, 3.0, 100))

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            M.evaluate(M.ground_truth_replay, [])
