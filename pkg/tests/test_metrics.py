import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import ndtri
from scipy.stats import spearmanr

from densreg import numerics as nx
from densreg.density import make_flow
from densreg.errors import DataError
from densreg.metrics import (
    DEFAULT_THRESHOLDS,
    ForecastSet,
    MetricsReport,
    calibration_from_pit,
    calibration_score,
    evaluate,
    feature_distance,
    nll_metric,
    reliability_curve,
    reliability_from_pit,
    rmse,
    sharpness,
    write_summary,
)
from densreg.regressor import PredictiveGaussian, gaussian_from_head

unit_floats = st.floats(0, 1, allow_nan=False)


def forecasts_with_pit(pit) -> ForecastSet:
    """Standard-normal forecasts whose realizations have the given PIT values."""
    y = ndtri(np.asarray(pit, dtype=float))
    return ForecastSet(PredictiveGaussian(np.zeros(len(pit)), np.ones(len(pit))), y)


class TestCalibration:
    def test_stratified_pit_is_perfect(self):
        assert calibration_from_pit([0.125, 0.375, 0.625, 0.875], [0.25, 0.5, 0.75]) == 0.0

    def test_two_point_example(self):
        assert calibration_from_pit([0.25, 0.75], [0.25, 0.5, 0.75]) == pytest.approx(0.125, abs=1e-15)

    def test_all_pit_one(self):
        assert calibration_from_pit(np.ones(10), [0.5]) == 0.25

    def test_through_forecast_set(self):
        fs = forecasts_with_pit([0.125, 0.375, 0.625, 0.875])
        assert calibration_score(fs, [0.25, 0.5, 0.75]) == pytest.approx(0.0, abs=1e-15)

    def test_default_thresholds(self):
        assert len(DEFAULT_THRESHOLDS) == 20
        assert DEFAULT_THRESHOLDS[0] == 1 / 21 and DEFAULT_THRESHOLDS[-1] == 20 / 21

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 60), elements=unit_floats))
    def test_matches_brute_force(self, pit):
        p = np.array(DEFAULT_THRESHOLDS)
        brute = sum((pj - sum(1 for v in pit if v <= pj) / len(pit)) ** 2 for pj in p)
        assert calibration_from_pit(pit) == pytest.approx(brute, abs=1e-12)

    @pytest.mark.parametrize("bad", [[], [0.5, 0.2], [-0.1, 0.5], [0.5, 1.2]])
    def test_threshold_validation(self, bad):
        with pytest.raises(ValueError):
            calibration_from_pit([0.5], bad)

    def test_empty_pit(self):
        with pytest.raises(DataError):
            reliability_from_pit([])


class TestReliability:
    def test_stratified_fractions_equal_thresholds(self):
        fs = forecasts_with_pit([0.125, 0.375, 0.625, 0.875])
        curve = reliability_curve(fs, [0.25, 0.5, 0.75])
        assert [f for _, f in curve] == pytest.approx([0.25, 0.5, 0.75], abs=1e-15)

    def test_all_pit_zero(self):
        np.testing.assert_array_equal(reliability_from_pit(np.zeros(7)), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 60), elements=unit_floats))
    def test_fractions_non_decreasing(self, pit):
        assert np.all(np.diff(reliability_from_pit(pit)) >= 0)


class TestSharpnessAndErrors:
    def test_constant_variance(self):
        fs = ForecastSet(PredictiveGaussian(np.zeros(4), np.ones(4)), np.zeros(4))
        assert sharpness(fs) == 1.0

    def test_two_variances(self):
        fs = ForecastSet(PredictiveGaussian(np.zeros(2), [1.0, 4.0]), np.zeros(2))
        assert sharpness(fs) == pytest.approx(math.sqrt(2.5), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(0.01, 10)), st.floats(0.1, 10))
    def test_homogeneity(self, var, c):
        a = ForecastSet(PredictiveGaussian(np.zeros(5), var), np.zeros(5))
        b = ForecastSet(PredictiveGaussian(np.zeros(5), var * c * c), np.zeros(5))
        assert sharpness(b) == pytest.approx(c * sharpness(a), rel=1e-12)

    def test_perfect_means(self):
        fs = ForecastSet(PredictiveGaussian([1.0, 2.0], [1.0, 1.0]), [1.0, 2.0])
        assert rmse(fs) == 0.0
        assert nll_metric(fs) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_rmse_hand_example(self):
        fs = ForecastSet(PredictiveGaussian([0.0, 0.0], [1.0, 9.0]), [3.0, -4.0])
        assert rmse(fs) == pytest.approx(math.sqrt(12.5), abs=1e-15)

    def test_rmse_ignores_variance(self):
        a = ForecastSet(PredictiveGaussian([0.0, 1.0], [1.0, 1.0]), [2.0, 2.0])
        b = ForecastSet(PredictiveGaussian([0.0, 1.0], [0.1, 50.0]), [2.0, 2.0])
        assert rmse(a) == rmse(b)

    def test_forecast_set_validation(self):
        with pytest.raises(DataError):
            ForecastSet(PredictiveGaussian([0.0], [1.0]), [1.0, 2.0])


class TestFeatureDistance:
    def test_coincident_point(self):
        assert feature_distance([1.0, 2.0], [[1.0, 2.0]]) == 0.0

    def test_mean_of_two(self):
        assert feature_distance([1.0], [[0.0], [2.0]]) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 2), elements=st.floats(-10, 10)), arrays(np.float64, 2, elements=st.floats(-10, 10)))
    def test_translation_invariance(self, ref, shift):
        z = np.array([[0.5, -1.0], [3.0, 2.0]])
        np.testing.assert_allclose(feature_distance(z + shift, ref + shift), feature_distance(z, ref), rtol=1e-9, atol=1e-9)

    def test_l1(self):
        assert feature_distance([1.0, 1.0], [[0.0, 0.0]], metric="l1") == 2.0

    def test_empty_reference(self):
        with pytest.raises(DataError):
            feature_distance([0.0], np.empty((0, 1)))


class TestReports:
    def test_evaluate_and_round_trip(self, tmp_path):
        r = nx.make_rng(0)
        fs = ForecastSet(PredictiveGaussian(r.normal(size=40), r.uniform(0.5, 2, 40)), r.normal(size=40))
        rep = evaluate(fs, "iid")
        assert rep.n == 40 and len(rep.reliability) == 20
        rep.write(tmp_path / "m.json", {"seed": 0})
        back = MetricsReport.read(tmp_path / "m.json")
        assert back == rep

    def test_split_label(self):
        fs = ForecastSet(PredictiveGaussian([0.0], [1.0]), [0.0])
        with pytest.raises(ValueError):
            evaluate(fs, "test")

    def test_summary_table(self, tmp_path):
        rows = [{"method": "a", "seed": 0, "split": "iid", "nll": 1.5, "rmse": 0.25, "cal": 0.1, "sharp": 2.0, "params": 10}]
        write_summary(rows, tmp_path / "s.csv", extra_columns=("params",))
        with (tmp_path / "s.csv").open() as fh:
            got = list(csv.DictReader(fh))
        assert got[0]["nll"] == "1.5" and got[0]["params"] == "10"


class TestDistanceAwareness:
    def test_variance_strictly_decreasing_in_log_p(self, fast_model, toy_small):
        z = fast_model.features(toy_small.ood_test.X[:5])
        s, m = fast_model.head(z)
        # above about log_p = 25 the output variance sits on its 1e-12 floor
        grid = np.linspace(-30, 20, 41)
        var = np.array([gaussian_from_head(s.data, m.data, np.full((5, 1), lp)).var for lp in grid])
        assert np.all(np.diff(var, axis=0) < 0)

    def test_gaussian_base_decreasing_in_distance(self):
        base = make_flow(3, "gaussian")
        z = nx.make_rng(4).normal(size=(200, 3)) * 3
        order = np.argsort(np.linalg.norm(z, axis=1))
        assert np.all(np.diff(base.log_prob(z[order])) < 0)

    @pytest.mark.parametrize("which", ["fast_model", "fast_kde_model"])
    def test_variance_rises_along_feature_rays(self, which, request, toy_small):
        model = request.getfixturevalue(which)
        Z = model.features(toy_small.train.X)
        center = Z.mean(axis=0)
        radii = np.linspace(0, 5 * np.abs(Z - center).max(), 20)
        r = nx.make_rng(0, 9)
        for _ in range(10):
            u = r.normal(size=Z.shape[1])
            pts = center + radii[:, None] * (u / np.linalg.norm(u))
            s, m = model.head(pts)
            var = gaussian_from_head(s.data, m.data, model.modulation(pts)).var
            assert spearmanr(radii, var)[0] >= 0.9
