"""Classical estimators: OLS, logistic propensity scores, DR-IPW, blocking.

All fits are pure functions of their inputs; nothing here holds mutable
state, so bootstrap replicates can call into this module concurrently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MODES = ("confounder_subset", "all_covariates", "all_with_interactions")

DEFAULT_CLIP_FLOOR = 0.1
IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8


class RankDeficientError(ValueError):
    """Design matrix is not full column rank."""


class SeparationError(RuntimeError):
    """Logistic fit did not converge; classes are (quasi-)separable."""


@dataclass(frozen=True)
class OlsFit:
    """Least-squares fit of y on [1, t, X]."""

    intercept: float
    treatment_coef: float
    covariate_coefs: np.ndarray
    residual_variance: float

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate(([self.intercept, self.treatment_coef], self.covariate_coefs))

    def predict(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.intercept + self.treatment_coef * np.asarray(t, dtype=float) + X @ self.covariate_coefs


@dataclass(frozen=True)
class PropensityModel:
    """Logistic regression for P(T=1 | X), fit by IRLS with class weights."""

    coefficients: np.ndarray   # intercept first
    feature_mode: str
    class_weights: tuple[float, float]   # (weight for t=0, weight for t=1)
    subset: tuple[int, ...] | None = None

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = _design_for_mode(np.atleast_2d(np.asarray(X, dtype=float)),
                             self.feature_mode, list(self.subset) if self.subset else None)
        Z = np.column_stack([np.ones(Z.shape[0]), Z])
        return _sigmoid(Z @ self.coefficients)


@dataclass(frozen=True)
class PropensityScores:
    """Estimated propensities after clipping."""

    values: np.ndarray
    clip_floor: float
    clipped_count: int


@dataclass(frozen=True)
class AteEstimate:
    value: float
    method: str


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def fit_ols(X, t, y, weights=None) -> OlsFit:
    """Weighted least squares of y on [1, t, X].

    Raises RankDeficientError on collinear designs; there is no silent
    regularization fallback.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n <= d + 2:
        raise ValueError(f"need n > d + 2 rows, got n={n}, d={d}")
    A = np.column_stack([np.ones(n), t, X])
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if not np.any(w > 0):
            raise ValueError("at least one weight must be positive")
        # Scale-invariant: constant weights reduce to the unweighted fit
        # exactly (sqrt(1.0) multiplications preserve every bit).
        w = w / w.mean()
        sw = np.sqrt(w)
        Aw = A * sw[:, None]
        yw = y * sw
    else:
        Aw, yw = A, y

    rank = np.linalg.matrix_rank(Aw)
    if rank < A.shape[1]:
        bad = _collinear_columns(Aw)
        raise RankDeficientError(
            f"design matrix rank {rank} < {A.shape[1]}; collinear columns {bad}"
        )
    coef, _, _, _ = np.linalg.lstsq(Aw, yw, rcond=None)
    resid = y - A @ coef
    if weights is not None:
        rss = float(np.sum(w * resid**2))
        denom = float(np.sum(w))
    else:
        rss = float(np.sum(resid**2))
        denom = float(n)
    dof = max(denom - A.shape[1], 1.0)
    return OlsFit(
        intercept=float(coef[0]),
        treatment_coef=float(coef[1]),
        covariate_coefs=coef[2:],
        residual_variance=rss / dof,
    )


def _collinear_columns(A: np.ndarray) -> list[int]:
    # Columns whose removal restores full rank, reported by index into
    # [intercept, treatment, x0, x1, ...].
    full = np.linalg.matrix_rank(A)
    out = []
    for j in range(A.shape[1]):
        reduced = np.delete(A, j, axis=1)
        if np.linalg.matrix_rank(reduced) == full:
            out.append(j)
    return out


def ols_ate(fit: OlsFit) -> AteEstimate:
    """The treatment coefficient is the (constant) effect estimate."""
    return AteEstimate(value=fit.treatment_coef, method="lr")


def _design_for_mode(X: np.ndarray, mode: str, subset: list[int] | None = None) -> np.ndarray:
    if mode == "confounder_subset":
        if not subset:
            raise ValueError("confounder_subset mode requires an explicit column subset")
        return X[:, subset]
    if mode == "all_covariates":
        return X
    if mode == "all_with_interactions":
        n, d = X.shape
        cross = [X[:, i] * X[:, j] for i in range(d) for j in range(i + 1, d)]
        if cross:
            return np.column_stack([X] + cross)
        return X
    raise ValueError(f"unknown feature mode {mode!r}; expected one of {FEATURE_MODES}")


def fit_propensity(X, t, mode: str = "all_covariates", subset=None) -> PropensityModel:
    """Class-weighted maximum-likelihood logistic regression via IRLS.

    Class weight for class c is n / (2 * n_c), the usual balancing
    reweighting. Raises SeparationError when the likelihood cannot be
    maximized because the classes are separable.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=int)
    n = X.shape[0]
    n1 = int(t.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("both treatment classes must be present")
    w0, w1 = n / (2.0 * n0), n / (2.0 * n1)
    sw = np.where(t == 1, w1, w0)

    Z = _design_for_mode(X, mode, subset)
    A = np.column_stack([np.ones(n), Z])
    beta = np.zeros(A.shape[1])

    def nll(b):
        eta = A @ b
        # log(1 + exp(eta)) - t*eta, weighted
        return float(np.sum(sw * (np.logaddexp(0.0, eta) - t * eta)))

    prev = nll(beta)
    for _ in range(IRLS_MAX_ITER):
        p = _sigmoid(A @ beta)
        W = sw * p * (1 - p)
        grad = A.T @ (sw * (t - p))
        H = (A * W[:, None]).T @ A
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(H.shape[0]), grad)
        except np.linalg.LinAlgError as err:
            raise SeparationError(f"IRLS Hessian singular: {err}") from err
        # Step-halving keeps the weighted log-likelihood non-decreasing.
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            if nll(cand) <= prev:
                break
            scale /= 2.0
        beta = beta + scale * step
        cur = nll(beta)
        if np.max(np.abs(beta)) > 1e4:
            raise SeparationError(
                "coefficients diverged; treatment classes appear separable"
            )
        if abs(prev - cur) <= IRLS_TOL * (abs(prev) + 1e-12):
            prev = cur
            break
        prev = cur
    else:
        raise SeparationError(
            f"IRLS did not converge in {IRLS_MAX_ITER} iterations "
            "(possible quasi-separation)"
        )
    return PropensityModel(coefficients=beta, feature_mode=mode, class_weights=(w0, w1),
                           subset=tuple(subset) if subset else None)


def clip_scores(scores, floor: float = DEFAULT_CLIP_FLOOR, ceiling: float | None = None) -> PropensityScores:
    """Lower-only clip by default; an upper ceiling is opt-in."""
    s = np.asarray(scores, dtype=float)
    if np.any((s <= 0) | (s >= 1)):
        raise ValueError("scores must lie strictly inside (0, 1)")
    clipped = np.maximum(s, floor)
    count = int(np.sum(s < floor))
    if ceiling is not None:
        count += int(np.sum(clipped > ceiling))
        clipped = np.minimum(clipped, ceiling)
    return PropensityScores(values=clipped, clip_floor=floor, clipped_count=count)


def ipw_weight(e, t):
    """Inverse probability of the received treatment: 1 / (e^t (1-e)^(1-t))."""
    e = np.asarray(e, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any((e <= 0) | (e >= 1)):
        raise ValueError("propensity must lie strictly inside (0, 1); clip first")
    return 1.0 / (e**t * (1.0 - e) ** (1.0 - t))


def dr_ipw_ate(X, t, y, scores: PropensityScores) -> AteEstimate:
    """OLS weighted by inverse propensity of the received treatment."""
    w = ipw_weight(scores.values, t)
    fit = fit_ols(X, t, y, weights=w)
    return AteEstimate(value=fit.treatment_coef, method="dripw")


def dr_ipw_fit(X, t, y, scores: PropensityScores) -> OlsFit:
    """The full weighted fit behind dr_ipw_ate, for factual prediction."""
    return fit_ols(X, t, y, weights=ipw_weight(scores.values, t))


def _quantile_blocks(scores: np.ndarray, n_blocks: int) -> np.ndarray:
    edges = np.quantile(scores, np.linspace(0, 1, n_blocks + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    # Collapse duplicate edges (ties in the score distribution).
    edges = np.unique(edges)
    return np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, len(edges) - 2)


def _merge_single_arm_blocks(block_of: np.ndarray, t: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Merge blocks lacking an arm (or too few rows for OLS) into a neighbor."""
    d = X.shape[1]
    while True:
        labels = np.unique(block_of)
        if len(labels) <= 1:
            return block_of
        bad = None
        for lab in labels:
            m = block_of == lab
            if t[m].min() == t[m].max() or m.sum() <= d + 2:
                bad = lab
                break
        if bad is None:
            return block_of
        pos = list(labels).index(bad)
        neighbor = labels[pos - 1] if pos > 0 else labels[pos + 1]
        block_of = np.where(block_of == bad, neighbor, block_of)


def blocking_ate(X, t, y, scores: PropensityScores, n_blocks: int = 5) -> AteEstimate:
    """Stratify on the propensity score and size-weight per-block OLS effects."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=int)
    y = np.asarray(y, dtype=float)
    block_of = _quantile_blocks(scores.values, n_blocks)
    block_of = _merge_single_arm_blocks(block_of, t, X)
    labels = np.unique(block_of)
    estimates, sizes = [], []
    for lab in labels:
        m = block_of == lab
        if t[m].min() == t[m].max():
            continue
        fit = fit_ols(X[m], t[m], y[m])
        estimates.append(fit.treatment_coef)
        sizes.append(int(m.sum()))
    if not estimates:
        raise ValueError("no block contains both treatment arms")
    value = float(np.average(estimates, weights=sizes))
    return AteEstimate(value=value, method="blocking")


def blocking_fits(X, t, y, scores: PropensityScores, n_blocks: int = 5):
    """Per-block fits plus the block edges, for predicting on new rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=int)
    y = np.asarray(y, dtype=float)
    block_of = _quantile_blocks(scores.values, n_blocks)
    block_of = _merge_single_arm_blocks(block_of, t, X)
    fits = {}
    bounds = {}
    for lab in np.unique(block_of):
        m = block_of == lab
        if t[m].min() == t[m].max():
            continue
        fits[int(lab)] = fit_ols(X[m], t[m], y[m])
        bounds[int(lab)] = (float(scores.values[m].min()), float(scores.values[m].max()))
    return fits, bounds


def predict_blocking(fits, bounds, X, t, scores: np.ndarray) -> np.ndarray:
    """Route each row to the block whose score range is nearest, then predict."""
    labels = sorted(fits)
    centers = np.array([(bounds[k][0] + bounds[k][1]) / 2 for k in labels])
    out = np.empty(len(scores))
    for i, s in enumerate(scores):
        lab = labels[int(np.argmin(np.abs(centers - s)))]
        out[i] = fits[lab].predict(X[i : i + 1], np.atleast_1d(t[i]))[0]
    return out


def normalized_mean_difference(X, t) -> np.ndarray:
    """Per-covariate (mean1 - mean0) / sqrt((var1 + var0)/2); 0 when degenerate."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=int)
    if t.min() == t.max():
        raise ValueError("both treatment arms must be nonempty")
    X1, X0 = X[t == 1], X[t == 0]
    num = X1.mean(axis=0) - X0.mean(axis=0)
    pooled = (X1.var(axis=0, ddof=1) + X0.var(axis=0, ddof=1)) / 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        nmd = np.where(pooled > 0, num / np.sqrt(pooled), 0.0)
    return nmd


def overlap_histogram(scores, t, bins: int = 20):
    """Equal-width propensity histograms per arm on [0, 1]."""
    s = np.asarray(scores, dtype=float)
    t = np.asarray(t, dtype=int)
    edges = np.linspace(0.0, 1.0, bins + 1)
    treated, _ = np.histogram(s[t == 1], bins=edges)
    control, _ = np.histogram(s[t == 0], bins=edges)
    return edges, treated, control
