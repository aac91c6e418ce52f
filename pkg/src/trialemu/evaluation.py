"""Bootstrap evaluation protocol and cross-model agreement report.

Each estimator is refit on resamples of the training set while the test
set stays fixed; per-replicate effect estimates and factual errors are
summarized by percentile confidence intervals.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import bart as bart_mod
from . import cfrnet as cfr_mod
from . import linprop

log = logging.getLogger(__name__)

MODEL_TAGS = ("lr", "dripw", "blocking", "bart", "tarnet", "cfr")

# Reference constants from the emulated trial, shown alongside estimates.
REFERENCE_TRIAL_ATE = 15.0
REFERENCE_TRIAL_CI = (3.0, 27.0)

MAX_FAILURE_FRAC = 0.10


@dataclass(frozen=True)
class BootstrapPlan:
    n_replicates: int = 100
    frac: float = 0.95
    with_replacement: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("need at least one replicate")
        if not 0 < self.frac <= 1:
            raise ValueError("frac must lie in (0, 1]")


@dataclass
class ModelResult:
    method: str
    ate_samples: np.ndarray
    rmse_samples: np.ndarray
    failures: int = 0
    failed: bool = False
    diagnostics: list[str] = field(default_factory=list)

    @property
    def ate_mean(self) -> float:
        return float(np.mean(self.ate_samples))

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.rmse_samples))

    def ate_ci(self, level: float = 0.95):
        return percentile_ci(self.ate_samples, level)

    def rmse_ci(self, level: float = 0.95):
        return percentile_ci(self.rmse_samples, level)

    def boxplot_row(self):
        """(ci_lo, q1, median, q3, ci_hi, mean) per the report's boxplots."""
        lo, hi = self.ate_ci()
        s = np.sort(self.ate_samples)
        q1, med, q3 = (float(np.quantile(s, q)) for q in (0.25, 0.5, 0.75))
        return lo, q1, med, q3, hi, self.ate_mean


@dataclass
class AgreementReport:
    results: dict[str, ModelResult]
    unadjusted: float
    unadjusted_ci: tuple[float, float]
    reference_ate: float = REFERENCE_TRIAL_ATE
    reference_ci: tuple[float, float] = REFERENCE_TRIAL_CI


def bootstrap_indices(plan: BootstrapPlan, n_train: int, replicate_id: int) -> np.ndarray:
    """ceil(frac * n_train) uniform draws with replacement, reproducible
    per (plan seed, replicate id)."""
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    size = int(np.ceil(plan.frac * n_train))
    rng = np.random.default_rng(np.random.SeedSequence(plan.seed, spawn_key=(replicate_id,)))
    return rng.integers(0, n_train, size=size)


def rmse_factual(predictions, y) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def percentile_ci(samples, level: float = 0.95):
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        raise ValueError("samples must be nonempty")
    tail = (1.0 - level) / 2.0
    lo = float(np.quantile(s, tail, method="linear"))
    hi = float(np.quantile(s, 1.0 - tail, method="linear"))
    return lo, hi


def unadjusted_effect(t, y, plan: BootstrapPlan = BootstrapPlan()):
    """Difference in arm means with a bootstrap percentile CI."""
    t = np.asarray(t, dtype=int)
    y = np.asarray(y, dtype=float)
    if t.min() == t.max():
        raise ValueError("both treatment arms must be present")
    point = float(y[t == 1].mean() - y[t == 0].mean())
    samples = []
    for rep in range(plan.n_replicates):
        idx = bootstrap_indices(plan, len(y), rep)
        tb, yb = t[idx], y[idx]
        if tb.min() == tb.max():
            continue
        samples.append(float(yb[tb == 1].mean() - yb[tb == 0].mean()))
    return point, percentile_ci(samples)


def _model_seed(run_seed: int, tag: str, replicate_id: int) -> int:
    tag_key = zlib.crc32(tag.encode("utf-8"))
    ss = np.random.SeedSequence(run_seed, spawn_key=(tag_key, replicate_id))
    return int(ss.generate_state(1)[0])


def fit_and_evaluate(tag, Xtr, ttr, ytr, Xva, tva, yva, Xte, tte, yte,
                     seed: int = 0, config=None):
    """Fit one estimator on the given training data; return (ate, test rmse)."""
    if tag == "lr":
        fit = linprop.fit_ols(Xtr, ttr, ytr)
        return fit.treatment_coef, rmse_factual(fit.predict(Xte, tte), yte)
    if tag == "dripw":
        cfg = config or {}
        model = linprop.fit_propensity(Xtr, ttr, mode=cfg.get("mode", "all_covariates"),
                                       subset=cfg.get("subset"))
        scores = linprop.clip_scores(model.predict(Xtr), floor=cfg.get("floor", 0.1),
                                     ceiling=cfg.get("ceiling"))
        fit = linprop.dr_ipw_fit(Xtr, ttr, ytr, scores)
        return fit.treatment_coef, rmse_factual(fit.predict(Xte, tte), yte)
    if tag == "blocking":
        cfg = config or {}
        model = linprop.fit_propensity(Xtr, ttr, mode=cfg.get("mode", "all_covariates"),
                                       subset=cfg.get("subset"))
        scores = linprop.clip_scores(model.predict(Xtr), floor=cfg.get("floor", 0.1),
                                     ceiling=cfg.get("ceiling"))
        est = linprop.blocking_ate(Xtr, ttr, ytr, scores, n_blocks=cfg.get("n_blocks", 5))
        fits, bounds = linprop.blocking_fits(Xtr, ttr, ytr, scores,
                                             n_blocks=cfg.get("n_blocks", 5))
        te_scores = linprop.clip_scores(model.predict(Xte), floor=cfg.get("floor", 0.1)).values
        pred = linprop.predict_blocking(fits, bounds, np.atleast_2d(Xte), tte, te_scores)
        return est.value, rmse_factual(pred, yte)
    if tag == "bart":
        cfg = config if isinstance(config, bart_mod.BartConfig) else bart_mod.BartConfig(**(config or {}))
        post = bart_mod.bart_fit(Xtr, ttr, ytr, replace(cfg, seed=seed))
        ate = bart_mod.bart_ate(post, Xte)
        return ate.value, rmse_factual(bart_mod.bart_predict(post, Xte, tte), yte)
    if tag in ("tarnet", "cfr"):
        if isinstance(config, cfr_mod.CfrConfig):
            cfg = config
        else:
            cfg = cfr_mod.CfrConfig(**(config or {}))
        if tag == "tarnet":
            cfg = replace(cfg, alpha=0.0)
        model, _ = cfr_mod.cfr_train((Xtr, ttr, ytr), (Xva, tva, yva),
                                     replace(cfg, seed=seed))
        ate = cfr_mod.cfr_ate(model, Xte)
        return ate.value, rmse_factual(model.predict(Xte, tte), yte)
    raise ValueError(f"unknown model tag {tag!r}; expected one of {MODEL_TAGS}")


def run_protocol(X, t, y, split, models, plan: BootstrapPlan,
                 configs: dict | None = None) -> AgreementReport:
    """Bootstrap fan-out: refit each model on resampled train sets and
    evaluate on the fixed test set."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=int)
    y = np.asarray(y, dtype=float)
    configs = configs or {}

    tr, va, te = split.train, split.validation, split.test
    Xtr_all, ttr_all, ytr_all = X[tr], t[tr], y[tr]
    Xva, tva, yva = X[va], t[va], y[va]
    Xte, tte, yte = X[te], t[te], y[te]

    results: dict[str, ModelResult] = {}
    for tag in models:
        if tag not in MODEL_TAGS:
            raise ValueError(f"unknown model tag {tag!r}; expected one of {MODEL_TAGS}")
        ates, rmses, diags = [], [], []
        for rep in range(plan.n_replicates):
            idx = bootstrap_indices(plan, len(ytr_all), rep)
            seed = _model_seed(plan.seed, tag, rep)
            try:
                ate, rmse = fit_and_evaluate(
                    tag, Xtr_all[idx], ttr_all[idx], ytr_all[idx],
                    Xva, tva, yva, Xte, tte, yte, seed=seed,
                    config=configs.get(tag),
                )
            except (ValueError, RuntimeError, np.linalg.LinAlgError) as err:
                diags.append(f"replicate {rep}: {err}")
                log.warning("%s failed on replicate %d: %s", tag, rep, err)
                continue
            ates.append(ate)
            rmses.append(rmse)
        failures = plan.n_replicates - len(ates)
        failed = failures > MAX_FAILURE_FRAC * plan.n_replicates or not ates
        results[tag] = ModelResult(
            method=tag,
            ate_samples=np.sort(np.asarray(ates, dtype=float)),
            rmse_samples=np.sort(np.asarray(rmses, dtype=float)),
            failures=failures,
            failed=failed,
            diagnostics=diags,
        )

    unadj, unadj_ci = unadjusted_effect(t[tr], y[tr], plan)
    return AgreementReport(results=results, unadjusted=unadj, unadjusted_ci=unadj_ci)


def agreement(report: AgreementReport) -> dict:
    """Cross-model agreement flags."""
    ok = {tag: r for tag, r in report.results.items() if not r.failed}
    cis = {tag: r.ate_ci() for tag, r in ok.items()}
    means = {tag: r.ate_mean for tag, r in ok.items()}
    all_above_zero = bool(cis) and all(lo > 0 for lo, _ in cis.values())
    if len(means) >= 2:
        vals = list(means.values())
        max_gap = float(max(vals) - min(vals))
    else:
        max_gap = 0.0
    ref_lo, ref_hi = report.reference_ci
    overlaps = {
        tag: not (hi < ref_lo or lo > ref_hi) for tag, (lo, hi) in cis.items()
    }
    return {
        "all_cis_above_zero": all_above_zero,
        "max_pairwise_gap": max_gap,
        "overlaps_reference_ci": overlaps,
    }
