import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trialemu import synthetic
from trialemu.linprop import (
    RankDeficientError,
    SeparationError,
    PropensityScores,
    blocking_ate,
    blocking_fits,
    clip_scores,
    dr_ipw_ate,
    fit_ols,
    fit_propensity,
    ipw_weight,
    normalized_mean_difference,
    ols_ate,
    overlap_histogram,
    predict_blocking,
)


def random_problem(rng, n=50, d=5, tau=0.0):
    X = rng.standard_normal((n, d))
    t = rng.integers(0, 2, size=n).astype(float)
    beta = rng.standard_normal(d)
    y = 1.5 + tau * t + X @ beta + 0.3 * rng.standard_normal(n)
    return X, t, y


def normal_equations(X, t, y, weights=None):
    A = np.column_stack([np.ones(len(y)), t, X])
    if weights is None:
        weights = np.ones(len(y))
    W = np.diag(weights)
    return np.linalg.solve(A.T @ W @ A, A.T @ W @ y)


class TestOls:
    def test_matches_normal_equations(self):
        rng = np.random.default_rng(0)
        X, t, y = random_problem(rng)
        fit = fit_ols(X, t, y)
        assert np.allclose(fit.coefficients, normal_equations(X, t, y), atol=1e-8)

    def test_zero_effect_recovered_exactly(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((40, 3))
        t = rng.integers(0, 2, size=40).astype(float)
        y = 2.0 + X @ np.array([1.0, -2.0, 0.5])    # no noise, no effect
        assert fit_ols(X, t, y).treatment_coef == pytest.approx(0.0, abs=1e-10)

    def test_known_effect_recovered_exactly(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((40, 3))
        t = rng.integers(0, 2, size=40).astype(float)
        y = 2.0 + 15.31 * t + X @ np.array([1.0, -2.0, 0.5])
        fit = fit_ols(X, t, y)
        assert fit.treatment_coef == pytest.approx(15.31, abs=1e-10)
        assert ols_ate(fit).value == fit.treatment_coef

    def test_equal_weights_match_unweighted(self):
        rng = np.random.default_rng(3)
        X, t, y = random_problem(rng, n=20, d=3)
        a = fit_ols(X, t, y)
        b = fit_ols(X, t, y, weights=np.full(20, 2.5))
        assert a.treatment_coef == pytest.approx(b.treatment_coef, abs=1e-10)

    def test_collinear_design_rejected(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((30, 3))
        X[:, 2] = 2 * X[:, 0]
        t = rng.integers(0, 2, size=30).astype(float)
        with pytest.raises(RankDeficientError):
            fit_ols(X, t, X[:, 0])

    def test_too_few_rows_rejected(self):
        with pytest.raises(ValueError):
            fit_ols(np.zeros((4, 3)), np.zeros(4), np.zeros(4))

    def test_linear_dgp_recovery(self):
        table = synthetic.generate(synthetic.DgpSpec(n=2000, d=10, seed=11))
        fit = fit_ols(table.x, table.t, table.y)
        assert abs(fit.treatment_coef - 10.0) <= 0.5


class TestPropensity:
    def test_fair_coin_scores_near_half(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((2000, 5))
        t = rng.integers(0, 2, size=2000)
        model = fit_propensity(X, t)
        assert np.all(np.abs(model.predict(X) - 0.5) < 0.05)

    def test_separable_data_raises(self):
        X = np.linspace(-1, 1, 40).reshape(-1, 1)
        t = (X[:, 0] > 0).astype(int)
        with pytest.raises(SeparationError):
            fit_propensity(X, t)

    def test_confounder_subset_mode(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((500, 4))
        e = 1 / (1 + np.exp(-X[:, 1]))
        t = (rng.uniform(size=500) < e).astype(int)
        model = fit_propensity(X, t, mode="confounder_subset", subset=[1])
        scores = model.predict(X)
        assert np.corrcoef(scores, e)[0, 1] > 0.9

    def test_interactions_mode_widens_design(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((300, 3))
        t = rng.integers(0, 2, size=300)
        model = fit_propensity(X, t, mode="all_with_interactions")
        assert len(model.coefficients) == 1 + 3 + 3


class TestClipAndWeights:
    def test_clip_below_floor(self):
        out = clip_scores(np.array([0.05, 0.5, 0.95]))
        assert out.values.tolist() == [0.1, 0.5, 0.95]
        assert out.clipped_count == 1

    def test_ceiling_opt_in(self):
        out = clip_scores(np.array([0.05, 0.97]), ceiling=0.9)
        assert out.values.tolist() == [0.1, 0.9]
        assert out.clipped_count == 2

    def test_degenerate_scores_rejected(self):
        with pytest.raises(ValueError):
            clip_scores(np.array([0.0, 0.5]))

    def test_ipw_example(self):
        assert ipw_weight(0.1, 0) == pytest.approx(1 / 0.9)
        assert ipw_weight(0.1, 1) == pytest.approx(10.0)

    @given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
    def test_ipw_identity(self, e):
        # w(e,1)*e + w(e,0)*(1-e) == 2 for every propensity
        assert ipw_weight(e, 1) * e + ipw_weight(e, 0) * (1 - e) == pytest.approx(2.0)


class TestDrIpwAndBlocking:
    def test_constant_half_scores_reduce_to_ols(self):
        rng = np.random.default_rng(8)
        X, t, y = random_problem(rng, n=100, d=4, tau=3.0)
        scores = PropensityScores(np.full(100, 0.5), 0.1, 0)
        assert dr_ipw_ate(X, t, y, scores).value == pytest.approx(
            fit_ols(X, t, y).treatment_coef, abs=1e-10)

    def test_one_block_reduces_to_ols(self):
        rng = np.random.default_rng(9)
        X, t, y = random_problem(rng, n=100, d=4, tau=3.0)
        scores = PropensityScores(rng.uniform(0.2, 0.8, size=100), 0.1, 0)
        assert blocking_ate(X, t, y, scores, n_blocks=1).value == pytest.approx(
            fit_ols(X, t, y).treatment_coef, abs=1e-10)

    def test_dgp_recovery(self):
        table = synthetic.generate(synthetic.DgpSpec(n=2000, d=10, seed=12))
        model = fit_propensity(table.x, table.t)
        scores = clip_scores(model.predict(table.x))
        assert abs(dr_ipw_ate(table.x, table.t, table.y, scores).value - 10) <= 0.5
        assert abs(blocking_ate(table.x, table.t, table.y, scores).value - 10) <= 0.5

    def test_single_arm_blocks_merged(self):
        rng = np.random.default_rng(10)
        n = 120
        X = rng.standard_normal((n, 2))
        scores = np.sort(rng.uniform(0.11, 0.9, size=n))
        t = np.zeros(n, dtype=int)
        t[n // 2:] = rng.integers(0, 2, size=n - n // 2)   # low blocks all-control
        t[-1] = 1
        y = 1.0 + 2.0 * t + X @ np.array([1.0, -1.0]) + 0.1 * rng.standard_normal(n)
        est = blocking_ate(X, t, y, PropensityScores(scores, 0.1, 0), n_blocks=5)
        assert np.isfinite(est.value)

    def test_predict_blocking_routes_by_score(self):
        rng = np.random.default_rng(13)
        X, t, y = random_problem(rng, n=200, d=2, tau=2.0)
        scores = PropensityScores(rng.uniform(0.15, 0.85, size=200), 0.1, 0)
        fits, bounds = blocking_fits(X, t, y, scores, n_blocks=3)
        pred = predict_blocking(fits, bounds, X[:5], t[:5], scores.values[:5])
        assert pred.shape == (5,) and np.all(np.isfinite(pred))


class TestDiagnostics:
    def test_identical_arms_zero_nmd(self):
        X = np.vstack([np.eye(3), np.eye(3)])
        t = np.array([0, 0, 0, 1, 1, 1])
        assert np.allclose(normalized_mean_difference(X, t), 0.0)

    def test_reported_imbalance_fixture(self):
        # arm summaries 79.0 (sd 14.8) vs 71.0 (sd 12.5) give ~0.584
        a = 14.8 / np.sqrt(2)
        b = 12.5 / np.sqrt(2)
        X = np.array([[79 - a], [79 + a], [71 - b], [71 + b]])
        t = np.array([1, 1, 0, 0])
        nmd = normalized_mean_difference(X, t)[0]
        assert nmd == pytest.approx(0.584, abs=1e-3)

    def test_constant_scores_single_bin(self):
        edges, treated, control = overlap_histogram(np.full(50, 0.5),
                                                    np.tile([0, 1], 25))
        assert (treated > 0).sum() == 1 and (control > 0).sum() == 1

    def test_uniform_scores_roughly_flat(self):
        rng = np.random.default_rng(14)
        s = rng.uniform(size=10000)
        t = rng.integers(0, 2, size=10000)
        _, treated, control = overlap_histogram(s, t, bins=10)
        total = treated + control
        assert total.min() > 800 and total.max() < 1200
