import numpy as np
import pytest

from selquant.field import (CorrelationSpec, FactorizationError, FieldModel,
                            SensorLayout, build_prior_cov, load_layout,
                            place_sensors, sample_realization,
                            sample_realizations, save_layout)


class TestPlaceSensors:
    def test_support_inside_disk(self):
        layout = place_sensors(1, 50.0, rng_seed=7)
        assert layout.distances_to_cn()[0] <= 50.0

    def test_deterministic_per_seed(self):
        a = place_sensors(30, 50.0, rng_seed=123)
        b = place_sensors(30, 50.0, rng_seed=123)
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_mean_distance_matches_uniform_disk(self):
        # E[distance] = 2R/3 for a uniform disk
        layout = place_sensors(10_000, 50.0, rng_seed=5)
        mean_d = layout.distances_to_cn().mean()
        assert abs(mean_d - 100.0 / 3.0) / (100.0 / 3.0) < 0.02

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            place_sensors(0, 50.0, rng_seed=1)
        with pytest.raises(ValueError):
            place_sensors(5, 0.0, rng_seed=1)


class TestPriorCovariance:
    def test_zero_varphi_gives_diagonal(self):
        layout = place_sensors(6, 50.0, rng_seed=2)
        cov = build_prior_cov(layout, CorrelationSpec(np.full(6, 10.0), 0.0))
        np.testing.assert_array_equal(cov, np.diag(np.full(6, 100.0)))

    def test_identical_positions_fully_correlated(self):
        layout = SensorLayout(positions=np.zeros((2, 2)), cn_position=np.zeros(2))
        cov = build_prior_cov(layout, CorrelationSpec(np.full(2, 10.0), 0.5))
        np.testing.assert_array_equal(cov, np.full((2, 2), 100.0))

    def test_closed_form_entry(self):
        layout = SensorLayout(positions=np.array([[0.0, 0.0], [2.0, 0.0]]),
                              cn_position=np.zeros(2))
        cov = build_prior_cov(layout, CorrelationSpec(np.full(2, 10.0), 0.9))
        assert cov[0, 1] == pytest.approx(100.0 * 0.9**2, rel=1e-14)

    def test_bitwise_symmetry(self):
        layout = place_sensors(40, 50.0, rng_seed=3)
        cov = build_prior_cov(layout, CorrelationSpec(np.full(40, 10.0), 0.93))
        assert np.array_equal(cov, cov.T)

    def test_monotone_in_varphi(self):
        layout = place_sensors(10, 50.0, rng_seed=4)
        spec_lo = CorrelationSpec(np.full(10, 10.0), 0.3)
        spec_hi = CorrelationSpec(np.full(10, 10.0), 0.8)
        lo = build_prior_cov(layout, spec_lo)
        hi = build_prior_cov(layout, spec_hi)
        off = ~np.eye(10, dtype=bool)
        assert np.all(lo[off] <= hi[off] + 1e-15)

    def test_dimension_mismatch(self):
        layout = place_sensors(4, 50.0, rng_seed=2)
        with pytest.raises(ValueError):
            build_prior_cov(layout, CorrelationSpec(np.full(5, 10.0), 0.5))


class TestSampling:
    def test_degenerate_covariances_return_mean(self):
        model = FieldModel(mean=np.array([1.0, -2.0]), prior_cov=np.zeros((2, 2)),
                           noise_cov=np.zeros((2, 2)))
        theta, x = sample_realization(model, rng_seed=11)
        np.testing.assert_array_equal(theta, model.mean)
        np.testing.assert_array_equal(x, model.mean)

    def test_deterministic_per_seed(self):
        model = _toy_model()
        a = sample_realization(model, rng_seed=9)
        b = sample_realization(model, rng_seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_moments_match_monte_carlo(self):
        model = _toy_model()
        n = 100_000
        theta, x = sample_realizations(model, n, rng_seed=17)
        # mean within 3 standard errors per coordinate
        se_mean = np.sqrt(np.diag(model.prior_cov) / n)
        assert np.all(np.abs(theta.mean(axis=0) - model.mean) < 3 * se_mean)
        # covariance entries within 3 standard errors
        c = model.prior_cov
        emp = np.cov(theta.T, bias=True)
        se_cov = np.sqrt((np.outer(np.diag(c), np.diag(c)) + c**2) / n)
        assert np.all(np.abs(emp - c) < 3 * se_cov)

    def test_indefinite_matrix_reported(self):
        model = _toy_model()
        bad = model.prior_cov.copy()
        bad[0, 0] = -5.0
        with pytest.raises(ValueError):
            FieldModel(mean=model.mean, prior_cov=bad, noise_cov=model.noise_cov)


def _toy_model() -> FieldModel:
    layout = place_sensors(3, 50.0, rng_seed=21)
    prior = build_prior_cov(layout, CorrelationSpec(np.array([10.0, 8.0, 12.0]), 0.9))
    return FieldModel(mean=np.array([1.0, 2.0, 3.0]), prior_cov=prior,
                      noise_cov=np.diag([4.0, 9.0, 1.0]))


def test_layout_roundtrip(tmp_path):
    layout = place_sensors(7, 50.0, rng_seed=31)
    path = tmp_path / "layout.txt"
    save_layout(layout, path)
    back = load_layout(path)
    np.testing.assert_array_equal(back.positions, layout.positions)
    np.testing.assert_array_equal(back.cn_position, layout.cn_position)
