import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trialemu import evaluation, synthetic
from trialemu.cohort import split
from trialemu.evaluation import (
    AgreementReport,
    BootstrapPlan,
    ModelResult,
    agreement,
    bootstrap_indices,
    fit_and_evaluate,
    percentile_ci,
    rmse_factual,
    run_protocol,
    unadjusted_effect,
)


def quantile_oracle(samples, q):
    """Sort-and-linearly-interpolate quantile, independent of numpy."""
    s = sorted(samples)
    pos = q * (len(s) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    frac = pos - lo
    return s[lo] * (1 - frac) + s[hi] * frac


def result_from(samples):
    s = np.sort(np.asarray(samples, dtype=float))
    return ModelResult(method="x", ate_samples=s, rmse_samples=s.copy())


class TestBootstrapIndices:
    def test_resample_size(self):
        plan = BootstrapPlan(seed=0)
        assert len(bootstrap_indices(plan, 100, 0)) == 95
        assert len(bootstrap_indices(plan, 101, 0)) == 96   # ceil(95.95)

    def test_single_row(self):
        plan = BootstrapPlan(frac=1.0, seed=0)
        assert bootstrap_indices(plan, 1, 0).tolist() == [0]

    def test_reproducible_per_replicate(self):
        plan = BootstrapPlan(seed=42)
        a = bootstrap_indices(plan, 50, 3)
        b = bootstrap_indices(plan, 50, 3)
        c = bootstrap_indices(plan, 50, 4)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_bounds(self):
        idx = bootstrap_indices(BootstrapPlan(seed=1), 30, 0)
        assert idx.min() >= 0 and idx.max() < 30


class TestRmse:
    def test_perfect_predictions(self):
        assert rmse_factual([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_constant_offset(self):
        assert rmse_factual([4.0, 5.0], [1.0, 2.0]) == pytest.approx(3.0)

    def test_hand_fixture(self):
        # errors 3, 0, 4 -> sqrt(25/3)
        assert rmse_factual([4.0, 2.0, 7.0], [1.0, 2.0, 3.0]) == pytest.approx(
            np.sqrt(25 / 3))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse_factual([1.0], [1.0, 2.0])


class TestPercentileCi:
    def test_constant_samples(self):
        assert percentile_ci([3.0] * 10) == (3.0, 3.0)

    def test_single_sample_degenerates(self):
        assert percentile_ci([7.0]) == (7.0, 7.0)

    def test_matches_independent_interpolation(self):
        rng = np.random.default_rng(0)
        samples = rng.normal(size=100).tolist()
        lo, hi = percentile_ci(samples, level=0.95)
        assert lo == pytest.approx(quantile_oracle(samples, 0.025), abs=1e-12)
        assert hi == pytest.approx(quantile_oracle(samples, 0.975), abs=1e-12)

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_nested_levels(self, samples):
        lo90, hi90 = percentile_ci(samples, level=0.90)
        lo95, hi95 = percentile_ci(samples, level=0.95)
        assert lo95 <= lo90 and hi90 <= hi95


class TestUnadjusted:
    def test_identical_arm_means(self):
        t = np.array([0, 1, 0, 1] * 10)
        y = np.where(t == 1, 5.0, 5.0)
        point, _ = unadjusted_effect(t, y)
        assert point == 0.0

    def test_single_arm_rejected(self):
        with pytest.raises(ValueError):
            unadjusted_effect(np.ones(10), np.ones(10))


class TestAgreement:
    def report_with(self, cis, means=None):
        results = {}
        for i, (lo, hi) in enumerate(cis):
            m = means[i] if means else (lo + hi) / 2
            # two-point sample hits the requested CI ends exactly
            results[f"m{i}"] = result_from([lo, m, m, hi])
        return AgreementReport(results=results, unadjusted=0.0,
                               unadjusted_ci=(0.0, 0.0))

    def test_all_positive_flag_true(self):
        flags = agreement(self.report_with([(2, 5), (2, 5)]))
        assert flags["all_cis_above_zero"]

    def test_negative_lower_end_flag_false(self):
        flags = agreement(self.report_with([(2, 5), (-1, 3)]))
        assert not flags["all_cis_above_zero"]

    def test_reported_means_max_gap(self):
        means = [14.54, 15.31, 15.59, 17.70, 18.14, 20.11]
        results = {f"m{i}": result_from([m] * 4) for i, m in enumerate(means)}
        rep = AgreementReport(results=results, unadjusted=0.0,
                              unadjusted_ci=(0.0, 0.0))
        assert agreement(rep)["max_pairwise_gap"] == pytest.approx(5.57)

    def test_reference_overlap(self):
        rep = self.report_with([(4, 10), (30, 40)])
        flags = agreement(rep)["overlaps_reference_ci"]   # reference (3, 27)
        assert flags["m0"] and not flags["m1"]

    def test_failed_models_excluded(self):
        rep = self.report_with([(2, 5), (-9, -5)])
        rep.results["m1"].failed = True
        assert agreement(rep)["all_cis_above_zero"]


@pytest.fixture(scope="module")
def dataset():
    table = synthetic.generate(synthetic.DgpSpec(n=400, d=4, seed=21))
    sp = split(table.n, seed=21)
    return table, sp


class TestProtocol:

    def test_fixed_test_set(self, dataset, monkeypatch):
        table, sp = dataset
        seen = []

        def spy(tag, Xtr, ttr, ytr, Xva, tva, yva, Xte, tte, yte, seed=0, config=None):
            seen.append(yte.tobytes())
            return 1.0, 1.0

        monkeypatch.setattr(evaluation, "fit_and_evaluate", spy)
        run_protocol(table.x, table.t, table.y, sp, ["lr"],
                     BootstrapPlan(n_replicates=5, seed=0))
        assert len(set(seen)) == 1

    def test_resamples_vary_but_test_never_does(self, dataset, monkeypatch):
        table, sp = dataset
        train_draws = []

        def spy(tag, Xtr, ttr, ytr, *rest, seed=0, config=None):
            train_draws.append(ytr.tobytes())
            return 1.0, 1.0

        monkeypatch.setattr(evaluation, "fit_and_evaluate", spy)
        run_protocol(table.x, table.t, table.y, sp, ["lr"],
                     BootstrapPlan(n_replicates=5, seed=0))
        assert len(set(train_draws)) == 5

    def test_mean_is_arithmetic_mean_of_replicates(self, dataset):
        table, sp = dataset
        rep = run_protocol(table.x, table.t, table.y, sp, ["lr"],
                           BootstrapPlan(n_replicates=10, seed=3))
        r = rep.results["lr"]
        assert r.ate_mean == pytest.approx(float(np.mean(r.ate_samples)))
        assert len(r.ate_samples) == 10 and r.failures == 0

    def test_determinism(self, dataset):
        table, sp = dataset
        kw = dict(models=["lr", "dripw"], plan=BootstrapPlan(n_replicates=8, seed=5))
        a = run_protocol(table.x, table.t, table.y, sp, **kw)
        b = run_protocol(table.x, table.t, table.y, sp, **kw)
        for tag in a.results:
            assert np.array_equal(a.results[tag].ate_samples, b.results[tag].ate_samples)

    def test_failure_budget(self, dataset, monkeypatch):
        table, sp = dataset
        calls = {"n": 0}

        def flaky(tag, *args, seed=0, config=None):
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                raise ValueError("boom")
            return 1.0, 1.0

        monkeypatch.setattr(evaluation, "fit_and_evaluate", flaky)
        rep = run_protocol(table.x, table.t, table.y, sp, ["lr"],
                           BootstrapPlan(n_replicates=10, seed=0))
        assert rep.results["lr"].failed and rep.results["lr"].failures == 5

    def test_unknown_tag_rejected(self, dataset):
        table, sp = dataset
        with pytest.raises(ValueError, match="unknown model tag"):
            run_protocol(table.x, table.t, table.y, sp, ["mystery"],
                         BootstrapPlan(n_replicates=2, seed=0))

    def test_fit_and_evaluate_unknown_tag(self):
        with pytest.raises(ValueError):
            fit_and_evaluate("mystery", *([np.zeros(2)] * 9))
