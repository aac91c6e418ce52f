"""Cohort assembly: covariates, outcome windows, inclusion, imputation, splits.

Covariates are always sourced from before a session starts and outcomes
from after it starts, so the finished cohort has a clean temporal
separation between adjustment variables and outcomes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import timedelta

import numpy as np

from .ingest import Event, Measurement, MedicationRecord, Session, _format_ts

MISSING = float("nan")


@dataclass(frozen=True)
class CovariateEntry:
    name: str
    kind: str                 # numeric | binary
    units: str = ""
    source: str = ""          # event variable name; defaults to `name`
    timing: str = "lookback"  # lookback | static | medication
    derived_from: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "binary"):
            raise ValueError(f"covariate kind must be numeric or binary, got {self.kind!r}")

    @property
    def variable(self) -> str:
        return self.source or self.name


def default_covariate_spec() -> list[CovariateEntry]:
    """The 28-covariate baseline panel (demographics, comorbidities,
    medications, ventilator and blood-gas values)."""
    e = CovariateEntry
    return [
        e("age", "numeric", "yr", timing="static"),
        e("male_sex", "binary", timing="static"),
        e("bmi", "numeric", timing="static"),
        e("sofa", "numeric"),
        e("diabetes", "binary", timing="static"),
        e("renal_failure", "binary", timing="static"),
        e("hepatic_disease", "binary", timing="static"),
        e("coronary_artery_disease", "binary", timing="static"),
        e("cancer", "binary", timing="static"),
        e("copd", "binary", timing="static"),
        e("immunodeficiency", "binary", timing="static"),
        e("morbid_obesity", "binary", timing="static", derived_from=("bmi",)),
        e("vasopressors", "binary", timing="medication"),
        e("neuromuscular_blockers", "binary", timing="medication"),
        e("renal_replacement_therapy", "binary", timing="medication"),
        e("glucocorticoids", "binary", timing="medication"),
        e("tidal_volume", "numeric", "ml"),
        e("tidal_volume_per_kg_pbw", "numeric", "ml/kg", derived_from=("tidal_volume", "pbw")),
        e("respiratory_rate", "numeric", "1/min"),
        e("peep", "numeric", "cm H2O"),
        e("fio2", "numeric", "%"),
        e("plateau_pressure", "numeric", "cm H2O"),
        e("driving_pressure", "numeric", "cm H2O"),
        e("pao2", "numeric", "mm Hg"),
        e("pf_ratio", "numeric", "mm Hg", derived_from=("pao2", "fio2")),
        e("paco2", "numeric", "mm Hg"),
        e("arterial_ph", "numeric"),
        e("lung_compliance_static", "numeric", "ml/cm H2O"),
    ]


def validate_spec(spec: list[CovariateEntry]) -> None:
    names = [c.name for c in spec]
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ValueError(f"duplicate covariate names: {dupes}")


@dataclass(frozen=True)
class CohortParams:
    lookback_hours: float = 8.0
    fallback_minutes: float = 30.0
    early_window: tuple[float, float] = (2.0, 8.0)
    late_window: tuple[float, float] = (12.0, 24.0)
    max_prone_hours: float = 96.0
    pf_threshold: float = 150.0
    fio2_threshold: float = 60.0
    peep_threshold: float = 5.0
    morbid_obesity_bmi: float = 35.0


@dataclass(frozen=True)
class Observation:
    session: Session
    x: np.ndarray            # covariate vector, NaN where missing
    mask: np.ndarray         # True where missing
    t: int
    y_early: float | None
    y_late: float | None

    @property
    def patient_id(self) -> str:
        return self.session.patient_id


@dataclass(frozen=True)
class ImputationStats:
    means: np.ndarray        # per-covariate train means (0 for binary)


@dataclass
class Cohort:
    observations: list[Observation]
    spec: list[CovariateEntry]
    params: CohortParams = field(default_factory=CohortParams)
    imputation: ImputationStats | None = None

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.spec]

    def matrix(self, outcome: str = "early"):
        """Dense (X, t, y) arrays for observations with the given outcome."""
        key = {"early": "y_early", "late": "y_late"}[outcome]
        rows = [o for o in self.observations if getattr(o, key) is not None]
        X = np.array([o.x for o in rows]) if rows else np.empty((0, len(self.spec)))
        t = np.array([o.t for o in rows], dtype=int)
        y = np.array([getattr(o, key) for o in rows], dtype=float)
        return X, t, y, rows


@dataclass(frozen=True)
class SplitIndex:
    train: np.ndarray
    validation: np.ndarray   # carved from train
    test: np.ndarray
    seed: int


def _last_value_in(events, variable, lo, hi):
    """Last measurement of `variable` with lo <= ts < hi."""
    best = None
    for ev in events:
        if isinstance(ev.payload, Measurement) and ev.payload.variable == variable:
            if lo <= ev.timestamp < hi:
                if best is None or ev.timestamp >= best[0]:
                    best = (ev.timestamp, ev.payload.value)
    return None if best is None else best[1]


def _first_value_in(events, variable, lo, hi):
    """First measurement of `variable` with lo <= ts <= hi."""
    best = None
    for ev in events:
        if isinstance(ev.payload, Measurement) and ev.payload.variable == variable:
            if lo <= ev.timestamp <= hi:
                if best is None or ev.timestamp < best[0]:
                    best = (ev.timestamp, ev.payload.value)
    return None if best is None else best[1]


def _any_flag_in(events, variable, lo, hi):
    for ev in events:
        if not (lo <= ev.timestamp <= hi):
            continue
        p = ev.payload
        if isinstance(p, MedicationRecord) and p.name == variable and p.administered:
            return True
        if isinstance(p, Measurement) and p.variable == variable and p.value != 0:
            return True
    return False


def _numeric_baseline(events, variable, session, params: CohortParams):
    lookback = timedelta(hours=params.lookback_hours)
    fallback = timedelta(minutes=params.fallback_minutes)
    val = _last_value_in(events, variable, session.start - lookback, session.start)
    if val is None:
        val = _first_value_in(events, variable, session.start, session.start + fallback)
    return val


def extract_covariates(session: Session, events: list[Event],
                       spec: list[CovariateEntry],
                       params: CohortParams = CohortParams()):
    """Baseline covariate vector and missingness mask for one session.

    Numeric values use the last measurement in the lookback window with a
    short post-start fallback; medication flags look over the same window;
    static flags consider the whole pre-session history.
    """
    validate_spec(spec)
    ancient = session.start - timedelta(days=365 * 200)
    lookback = timedelta(hours=params.lookback_hours)
    raw: dict[str, float | None] = {}
    for entry in spec:
        if entry.derived_from:
            continue
        if entry.timing == "lookback":
            raw[entry.name] = _numeric_baseline(events, entry.variable, session, params)
        elif entry.timing == "static":
            if entry.kind == "binary":
                raw[entry.name] = float(_any_flag_in(events, entry.variable, ancient, session.start))
            else:
                raw[entry.name] = _last_value_in(events, entry.variable, ancient, session.start)
        elif entry.timing == "medication":
            raw[entry.name] = float(
                _any_flag_in(events, entry.variable, session.start - lookback, session.start)
            )
        else:
            raise ValueError(f"unknown timing {entry.timing!r} for covariate {entry.name}")

    _fill_derived(raw, events, session, spec, params)

    x = np.full(len(spec), MISSING)
    mask = np.ones(len(spec), dtype=bool)
    for i, entry in enumerate(spec):
        val = raw.get(entry.name)
        if val is not None:
            x[i] = float(val)
            mask[i] = False
    return x, mask


def _fill_derived(raw, events, session, spec, params):
    names = {c.name for c in spec}
    for entry in spec:
        if not entry.derived_from:
            continue
        inputs = []
        for dep in entry.derived_from:
            v = raw.get(dep)
            if v is None and dep not in names:
                v = _numeric_baseline(events, dep, session, params)
            inputs.append(v)
        if entry.name == "morbid_obesity":
            bmi = inputs[0]
            raw[entry.name] = None if bmi is None else float(bmi > params.morbid_obesity_bmi)
        elif entry.name == "tidal_volume_per_kg_pbw":
            tv, pbw = inputs
            raw[entry.name] = None if (tv is None or pbw in (None, 0)) else tv / pbw
        elif entry.name == "pf_ratio":
            # Prefer a directly measured P/F; derive from PaO2/FiO2 otherwise.
            measured = _numeric_baseline(events, entry.variable, session, params)
            if measured is not None:
                raw[entry.name] = measured
            else:
                pao2, fio2 = inputs
                raw[entry.name] = None if (pao2 is None or not fio2) else pao2 / (fio2 / 100.0)
        else:
            raise ValueError(f"no derivation rule for covariate {entry.name}")


def extract_outcome(session: Session, events: list[Event], window: str,
                    params: CohortParams = CohortParams()) -> float | None:
    """Last P/F measurement in the early or late post-start window,
    truncated at the session end."""
    lo_h, hi_h = {"early": params.early_window, "late": params.late_window}[window]
    lo = session.start + timedelta(hours=lo_h)
    hi = min(session.start + timedelta(hours=hi_h), session.end)
    if hi <= lo:
        return None
    return _last_value_in(events, "pf_ratio", lo, hi)


def build_observations(sessions, events_by_patient, spec=None,
                       params: CohortParams = CohortParams()) -> list[Observation]:
    spec = spec if spec is not None else default_covariate_spec()
    out = []
    for sess in sessions:
        events = events_by_patient.get(sess.patient_id, [])
        x, mask = extract_covariates(sess, events, spec, params)
        out.append(
            Observation(
                session=sess,
                x=x,
                mask=mask,
                t=1 if sess.position == "prone" else 0,
                y_early=extract_outcome(sess, events, "early", params),
                y_late=extract_outcome(sess, events, "late", params),
            )
        )
    return out


def inclusion_verdict(obs: Observation, spec, params: CohortParams):
    """(included, reason) for one observation, pre-imputation."""
    idx = {c.name: i for i, c in enumerate(spec)}
    for needed in ("pao2", "fio2", "peep"):
        if obs.mask[idx[needed]]:
            return False, f"missing baseline {needed}"
    if obs.mask[idx["pf_ratio"]]:
        return False, "missing baseline pf_ratio"
    if not obs.x[idx["pf_ratio"]] < params.pf_threshold:
        return False, "pf_ratio >= threshold"
    if not obs.x[idx["fio2"]] >= params.fio2_threshold:
        return False, "fio2 below threshold"
    if not obs.x[idx["peep"]] >= params.peep_threshold:
        return False, "peep below threshold"
    if obs.t == 1 and obs.session.duration > timedelta(hours=params.max_prone_hours):
        return False, "prone session too long"
    return True, "included"


def apply_inclusion(observations, spec=None, params: CohortParams = CohortParams()):
    """Filter to trial-eligible observations; returns (Cohort, funnel dict)."""
    spec = spec if spec is not None else default_covariate_spec()
    kept = []
    funnel: dict[str, int] = {"sessions": len(observations)}
    for obs in observations:
        ok, reason = inclusion_verdict(obs, spec, params)
        if ok:
            kept.append(obs)
        else:
            funnel[reason] = funnel.get(reason, 0) + 1
    funnel["included"] = len(kept)
    return Cohort(observations=kept, spec=spec, params=params), funnel


def fit_impute(train_observations, spec) -> ImputationStats:
    """Per-covariate means from training rows only (binary columns use 0)."""
    if not train_observations:
        raise ValueError("cannot fit imputation on an empty training set")
    X = np.array([o.x for o in train_observations])
    means = np.zeros(len(spec))
    for j, entry in enumerate(spec):
        if entry.kind == "binary":
            continue
        col = X[:, j]
        present = col[~np.isnan(col)]
        if present.size == 0:
            raise ValueError(
                f"covariate {entry.name!r} is missing in every training row"
            )
        means[j] = float(present.mean())
    return ImputationStats(means=means)


def apply_impute(observations, stats: ImputationStats) -> list[Observation]:
    """Replace missing values by the fitted statistics and clear masks."""
    out = []
    for obs in observations:
        x = np.where(obs.mask, stats.means, obs.x)
        out.append(replace(obs, x=x, mask=np.zeros_like(obs.mask)))
    return out


def split(n: int, seed: int, test_frac: float = 0.2,
          val_frac_of_train: float = 0.3) -> SplitIndex:
    """Uniform observation-level split; validation is carved from train."""
    if n < 10:
        raise ValueError(f"need at least 10 observations to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(test_frac * n))
    test = np.sort(perm[:n_test])
    rest = perm[n_test:]
    n_val = int(round(val_frac_of_train * len(rest)))
    validation = np.sort(rest[:n_val])
    train = np.sort(rest[n_val:])
    return SplitIndex(train=train, validation=validation, test=test, seed=seed)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and np.isnan(v):
        return ""
    return repr(float(v))


def write_cohort_csv(cohort: Cohort, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(
        cohort.names
        + ["treatment", "y_early", "y_late", "patient_id", "session_start",
           "session_end", "position", "provenance"]
    )
    for obs in cohort.observations:
        row = ["" if m else _fmt(float(v)) for v, m in zip(obs.x, obs.mask)]
        writer.writerow(
            row
            + [obs.t, _fmt(obs.y_early), _fmt(obs.y_late), obs.patient_id,
               _format_ts(obs.session.start), _format_ts(obs.session.end),
               obs.session.position, obs.session.provenance]
        )


def impute_matrix(X: np.ndarray, train_idx: np.ndarray) -> np.ndarray:
    """NaN-aware mean imputation fitted on training rows only.

    Columns whose observed training values are all 0/1 are treated as
    binary and imputed to 0. Raises if a column has no training value.
    """
    X = np.array(X, dtype=float)
    Xtr = X[train_idx]
    fill = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        col = Xtr[:, j]
        present = col[~np.isnan(col)]
        if present.size == 0:
            raise ValueError(f"column {j} is missing in every training row")
        if not np.all(np.isin(present, (0.0, 1.0))):
            fill[j] = float(present.mean())
    nan_mask = np.isnan(X)
    X[nan_mask] = np.broadcast_to(fill, X.shape)[nan_mask]
    return X


def load_matrix_csv(stream, outcome: str = "early"):
    """Read a cohort-format table back into dense (X, t, y) arrays.

    Covariate columns are everything before `treatment`. Rows with a
    missing outcome are dropped; missing covariates come back as NaN and
    should go through `impute_matrix` before model fitting.
    """
    reader = csv.reader(stream)
    header = next(reader)
    t_col = header.index("treatment")
    y_col = header.index({"early": "y_early", "late": "y_late"}[outcome])
    names = header[:t_col]
    X_rows, t_rows, y_rows = [], [], []
    for row in reader:
        if not row or row[y_col] == "":
            continue
        X_rows.append([float(v) if v != "" else MISSING for v in row[:t_col]])
        t_rows.append(int(float(row[t_col])))
        y_rows.append(float(row[y_col]))
    X = np.array(X_rows) if X_rows else np.empty((0, len(names)))
    return names, X, np.array(t_rows, dtype=int), np.array(y_rows, dtype=float)
