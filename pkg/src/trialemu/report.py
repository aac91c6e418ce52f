"""Report emission: delimited tables, a nested-text summary, and figures.

Tables are written deterministically (fixed column order, fixed float
formatting) so identical runs produce byte-identical files. Figures are
rendered from the written tables, keeping plots reproducible from the
delimited artifacts alone.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AgreementReport, agreement


def _f(v: float) -> str:
    return format(float(v), ".6g")


def write_table(report: AgreementReport, path) -> None:
    """One row per model: ATE and factual RMSE, each with mean and 95% CI."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "ate_mean", "ate_lo", "ate_hi",
                    "rmse_mean", "rmse_lo", "rmse_hi", "failed"])
        for tag, r in report.results.items():
            alo, ahi = r.ate_ci()
            rlo, rhi = r.rmse_ci()
            w.writerow([tag, _f(r.ate_mean), _f(alo), _f(ahi),
                        _f(r.rmse_mean), _f(rlo), _f(rhi), int(r.failed)])


def write_boxplot_data(report: AgreementReport, path) -> None:
    """Per-model ATE distribution quantiles: CI ends, quartiles, median, mean."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "ci_lo", "q1", "median", "q3", "ci_hi", "mean"])
        for tag, r in report.results.items():
            w.writerow([tag] + [_f(v) for v in r.boxplot_row()])


def write_overlap_data(edges, treated, control, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "treated", "control"])
        for i in range(len(treated)):
            w.writerow([_f(edges[i]), _f(edges[i + 1]), int(treated[i]), int(control[i])])


def write_balance_data(names, nmd, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["covariate", "normalized_mean_difference"])
        for name, v in zip(names, nmd):
            w.writerow([name, _f(v)])


def write_summary(report: AgreementReport, path, extra: dict | None = None) -> None:
    """Nested key/value text with all estimates, CIs and agreement flags."""
    flags = agreement(report)
    lines = []
    if extra:
        for k in sorted(extra):
            lines.append(f"{k}: {extra[k]}")
    lines.append(f"reference_trial_ate: {_f(report.reference_ate)}")
    lines.append(
        f"reference_trial_ci: ({_f(report.reference_ci[0])}, {_f(report.reference_ci[1])})"
    )
    lines.append(f"unadjusted_effect: {_f(report.unadjusted)}")
    lines.append(
        f"unadjusted_ci: ({_f(report.unadjusted_ci[0])}, {_f(report.unadjusted_ci[1])})"
    )
    lines.append("models:")
    for tag, r in report.results.items():
        alo, ahi = r.ate_ci()
        rlo, rhi = r.rmse_ci()
        lines.append(f"  {tag}:")
        lines.append(f"    ate: {_f(r.ate_mean)} ({_f(alo)}, {_f(ahi)})")
        lines.append(f"    rmse: {_f(r.rmse_mean)} ({_f(rlo)}, {_f(rhi)})")
        lines.append(f"    replicate_failures: {r.failures}")
        lines.append(f"    failed: {str(r.failed).lower()}")
    lines.append("agreement:")
    lines.append(f"  all_cis_above_zero: {str(flags['all_cis_above_zero']).lower()}")
    lines.append(f"  max_pairwise_gap: {_f(flags['max_pairwise_gap'])}")
    lines.append("  overlaps_reference_ci:")
    for tag in report.results:
        if tag in flags["overlaps_reference_ci"]:
            lines.append(f"    {tag}: {str(flags['overlaps_reference_ci'][tag]).lower()}")
    Path(path).write_text("\n".join(lines) + "\n")


def render_boxplot(boxplot_csv, png_path, reference_ate: float = 15.0) -> None:
    """Per-model ATE boxplots: CI ends as whiskers, quartile box, mean marker."""
    rows = list(csv.DictReader(open(boxplot_csv)))
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 0.9 * len(rows) + 1.5))
    stats = []
    for r in rows:
        stats.append({
            "label": r["method"],
            "whislo": float(r["ci_lo"]),
            "q1": float(r["q1"]),
            "med": float(r["median"]),
            "q3": float(r["q3"]),
            "whishi": float(r["ci_hi"]),
            "mean": float(r["mean"]),
            "fliers": [],
        })
    ax.bxp(stats, orientation="horizontal", showmeans=True,
           meanprops=dict(marker="s", markerfacecolor="black", markeredgecolor="black"))
    ax.axvline(reference_ate, linestyle=":", color="gray",
               label=f"reference trial ATE = {reference_ate:g}")
    ax.set_xlabel("ATE estimate")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def render_overlap(overlap_csv, png_path) -> None:
    """Propensity-score overlap histograms per treatment arm."""
    rows = list(csv.DictReader(open(overlap_csv)))
    if not rows:
        return
    lo = np.array([float(r["bin_lo"]) for r in rows])
    hi = np.array([float(r["bin_hi"]) for r in rows])
    treated = np.array([int(r["treated"]) for r in rows])
    control = np.array([int(r["control"]) for r in rows])
    width = hi - lo
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(lo, control, width=width, align="edge", alpha=0.6, label="control (supine)")
    ax.bar(lo, treated, width=width, align="edge", alpha=0.6, label="treated (prone)")
    ax.set_xlabel("estimated propensity score")
    ax.set_ylabel("sessions")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
