import io
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from trialemu.cohort import (
    CohortParams,
    CovariateEntry,
    Observation,
    apply_impute,
    apply_inclusion,
    build_observations,
    default_covariate_spec,
    extract_covariates,
    extract_outcome,
    fit_impute,
    impute_matrix,
    inclusion_verdict,
    load_matrix_csv,
    split,
    validate_spec,
    write_cohort_csv,
)
from trialemu.ingest import Event, Measurement, Session, parse_events, sessions_from_events

from conftest import timeline_rows, events_csv

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
SPEC = default_covariate_spec()
IDX = {c.name: i for i, c in enumerate(SPEC)}


def h(hours):
    return T0 + timedelta(hours=hours)


def meas(hours, var, val, minutes=0):
    return Event("p1", h(hours) + timedelta(minutes=minutes), Measurement(var, float(val)))


def session(start=0, end=24, position="supine"):
    return Session("p1", h(start), h(end), position)


def obs_with(pf, fio2, peep, t=0, duration=24):
    """Observation whose baseline hits the inclusion-relevant covariates."""
    events = [meas(-1, "pao2", pf * fio2 / 100.0), meas(-1, "fio2", fio2),
              meas(-1, "peep", peep), meas(-1, "pf_ratio", pf)]
    sess = session(0, duration, "prone" if t else "supine")
    x, mask = extract_covariates(sess, events, SPEC)
    return Observation(session=sess, x=x, mask=mask, t=t, y_early=1.0, y_late=1.0)


class TestCovariateSpec:
    def test_panel_size(self):
        assert len(SPEC) == 28

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            validate_spec(SPEC + [CovariateEntry("age", "numeric")])


class TestExtraction:
    def test_lookback_takes_last_value(self):
        events = [meas(-6, "sofa", 7), meas(-2, "sofa", 9)]
        x, mask = extract_covariates(session(), events, SPEC)
        assert x[IDX["sofa"]] == 9 and not mask[IDX["sofa"]]

    def test_value_outside_lookback_ignored(self):
        events = [meas(-9, "sofa", 7)]
        x, mask = extract_covariates(session(), events, SPEC)
        assert mask[IDX["sofa"]]

    def test_fallback_after_start(self):
        # no PaO2 in the lookback window; one 20 minutes after start
        events = [meas(0, "pao2", 64, minutes=20)]
        x, mask = extract_covariates(session(), events, SPEC)
        assert x[IDX["pao2"]] == 64

    def test_fallback_beyond_window_ignored(self):
        events = [meas(0, "pao2", 64, minutes=45)]
        x, mask = extract_covariates(session(), events, SPEC)
        assert mask[IDX["pao2"]]

    def test_pf_ratio_derived_when_not_measured(self):
        events = [meas(-1, "pao2", 60), meas(-1, "fio2", 80)]
        x, _ = extract_covariates(session(), events, SPEC)
        assert x[IDX["pf_ratio"]] == pytest.approx(75.0)

    def test_pf_ratio_prefers_direct_measurement(self):
        events = [meas(-1, "pao2", 60), meas(-1, "fio2", 80),
                  meas(-1, "pf_ratio", 70)]
        x, _ = extract_covariates(session(), events, SPEC)
        assert x[IDX["pf_ratio"]] == 70

    def test_morbid_obesity_derived_from_bmi(self):
        x, _ = extract_covariates(session(), [meas(-1, "bmi", 36)], SPEC)
        assert x[IDX["morbid_obesity"]] == 1
        x, _ = extract_covariates(session(), [meas(-1, "bmi", 35)], SPEC)
        assert x[IDX["morbid_obesity"]] == 0

    def test_covariates_precede_outcomes(self, timeline_text):
        # temporal separation: baseline sources < session start <= outcomes
        res = parse_events(timeline_text)
        sessions = sessions_from_events(res)
        params = CohortParams()
        fallback = timedelta(minutes=params.fallback_minutes)
        for obs in build_observations(sessions, res.by_patient(), SPEC, params):
            lo = obs.session.start + timedelta(hours=params.early_window[0])
            assert obs.session.start + fallback <= lo


class TestOutcomes:
    def test_late_none_for_short_session(self):
        events = [meas(5, "pf_ratio", 120)]
        assert extract_outcome(session(0, 10), events, "late") is None

    def test_early_none_without_measurement(self):
        events = [meas(1, "pf_ratio", 120)]
        assert extract_outcome(session(0, 20), events, "early") is None

    def test_last_value_in_window(self):
        events = [meas(3, "pf_ratio", 110), meas(7, "pf_ratio", 130),
                  meas(9, "pf_ratio", 140)]
        assert extract_outcome(session(0, 20), events, "early") == 130

    def test_window_truncated_at_session_end(self):
        events = [meas(3, "pf_ratio", 110), meas(5, "pf_ratio", 130)]
        assert extract_outcome(session(0, 4), events, "early") == 110


class TestInclusion:
    def test_pf_150_excluded_strict(self):
        ok, reason = inclusion_verdict(obs_with(150, 60, 5), SPEC, CohortParams())
        assert not ok and "pf_ratio" in reason

    def test_boundary_149_60_5_included(self):
        ok, _ = inclusion_verdict(obs_with(149, 60, 5), SPEC, CohortParams())
        assert ok

    def test_fio2_below_60_excluded(self):
        ok, _ = inclusion_verdict(obs_with(149, 59, 5), SPEC, CohortParams())
        assert not ok

    def test_peep_below_5_excluded(self):
        ok, _ = inclusion_verdict(obs_with(149, 60, 4.5), SPEC, CohortParams())
        assert not ok

    def test_prone_97h_excluded(self):
        ok, reason = inclusion_verdict(obs_with(149, 60, 5, t=1, duration=97),
                                       SPEC, CohortParams())
        assert not ok and "too long" in reason

    def test_supine_97h_allowed(self):
        ok, _ = inclusion_verdict(obs_with(149, 60, 5, t=0, duration=97),
                                  SPEC, CohortParams())
        assert ok

    def test_funnel_counts(self):
        observations = [obs_with(149, 60, 5), obs_with(150, 60, 5),
                        obs_with(149, 59, 5)]
        cohort, funnel = apply_inclusion(observations, SPEC)
        assert funnel["sessions"] == 3 and funnel["included"] == 1
        assert len(cohort.observations) == 1

    def test_monotone_filter(self):
        observations = [obs_with(149, 60, 5), obs_with(150, 60, 5)]
        solo, _ = apply_inclusion(observations[:1], SPEC)
        both, _ = apply_inclusion(observations, SPEC)
        assert len(solo.observations) == len(both.observations) == 1
        assert np.allclose(solo.observations[0].x, both.observations[0].x,
                           equal_nan=True)


class TestImputation:
    # a two-covariate spec keeps the fixtures small
    SPEC2 = [CovariateEntry("sofa", "numeric"),
             CovariateEntry("copd", "binary", timing="static")]
    I2 = {"sofa": 0, "copd": 1}

    def make_obs(self, sofa, copd=None):
        events = []
        if sofa is not None:
            events.append(meas(-1, "sofa", sofa))
        if copd is not None:
            events.append(meas(-1, "copd", copd))
        sess = session()
        x, mask = extract_covariates(sess, events, self.SPEC2)
        return Observation(session=sess, x=x, mask=mask, t=0, y_early=1.0, y_late=None)

    def test_train_only_means_leakage(self):
        # train mean 6, pooled train+test mean would be 8
        train = [self.make_obs(4), self.make_obs(8), self.make_obs(None)]
        test = [self.make_obs(12), self.make_obs(12), self.make_obs(None)]
        stats = fit_impute(train, self.SPEC2)
        assert stats.means[self.I2["sofa"]] == pytest.approx(6.0)
        filled = apply_impute(train + test, stats)
        assert filled[2].x[self.I2["sofa"]] == pytest.approx(6.0)
        assert filled[5].x[self.I2["sofa"]] == pytest.approx(6.0)

    def test_missing_binary_flag_imputed_false(self):
        train = [self.make_obs(4, copd=1), self.make_obs(5, copd=1)]
        stats = fit_impute(train, self.SPEC2)
        filled = apply_impute([self.make_obs(6)], stats)
        assert filled[0].x[self.I2["copd"]] == 0.0

    def test_idempotent(self):
        train = [self.make_obs(4), self.make_obs(8)]
        stats = fit_impute(train, self.SPEC2)
        once = apply_impute([self.make_obs(None)], stats)
        twice = apply_impute(once, stats)
        assert np.array_equal(once[0].x, twice[0].x)

    def test_all_missing_column_raises(self):
        with pytest.raises(ValueError, match="sofa"):
            fit_impute([self.make_obs(None)], self.SPEC2)

    def test_matrix_imputation_train_only(self):
        X = np.array([[1.0, 0.0], [3.0, 1.0], [np.nan, np.nan], [9.0, 1.0]])
        out = impute_matrix(X, np.array([0, 1]))
        assert out[2, 0] == pytest.approx(2.0)   # train mean, not pooled
        assert out[2, 1] == 0.0                  # binary column fills 0


class TestSplit:
    def test_partition(self):
        sp = split(100, seed=3)
        parts = np.concatenate([sp.train, sp.validation, sp.test])
        assert sorted(parts.tolist()) == list(range(100))

    def test_fractions(self):
        sp = split(100, seed=3, test_frac=0.2, val_frac_of_train=0.3)
        assert len(sp.test) == 20 and len(sp.validation) == 24 and len(sp.train) == 56

    def test_deterministic_and_seed_sensitive(self):
        a, b, c = split(100, seed=1), split(100, seed=1), split(100, seed=2)
        assert np.array_equal(a.train, b.train)
        assert not np.array_equal(a.train, c.train)

    def test_too_small(self):
        with pytest.raises(ValueError):
            split(5, seed=0)


class TestCsvRoundTrip:
    def test_matrix_round_trip(self, timeline_text):
        res = parse_events(timeline_text)
        sessions = sessions_from_events(res)
        observations = build_observations(sessions, res.by_patient(), SPEC)
        cohort, _ = apply_inclusion(observations, SPEC)
        buf = io.StringIO()
        write_cohort_csv(cohort, buf)
        buf.seek(0)
        names, X, t, y = load_matrix_csv(buf, outcome="early")
        X0, t0, y0, rows = cohort.matrix("early")
        assert names == cohort.names
        assert np.allclose(X, X0, equal_nan=True)
        assert np.array_equal(t, t0) and np.allclose(y, y0)

    def test_missing_outcome_rows_dropped(self):
        text = ("a,b,treatment,y_early,y_late\n"
                "1.0,2.0,1,5.0,\n"
                "3.0,,0,,\n")
        names, X, t, y = load_matrix_csv(io.StringIO(text), outcome="early")
        assert len(y) == 1 and names == ["a", "b"]
