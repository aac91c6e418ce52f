"""Command-line pipeline: ingest, cohort, estimate, evaluate, simulate, report.

Exit codes are stable: 0 ok, 2 unreadable input, 3 empty cohort,
4 unknown model tag, 5 invalid generator/config spec.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation, linprop, report as report_mod, synthetic
from .cohort import (
    apply_inclusion,
    build_observations,
    default_covariate_spec,
    impute_matrix,
    load_matrix_csv,
    split as make_split,
    write_cohort_csv,
)
from .config import ConfigError, cohort_params, load_config, model_configs
from .evaluation import MODEL_TAGS, BootstrapPlan, run_protocol
from .ingest import parse_events, sessions_from_events, write_sessions_csv

EXIT_IO = 2
EXIT_EMPTY_COHORT = 3
EXIT_BAD_MODEL = 4
EXIT_BAD_SPEC = 5


def _load(config_path, seed, out_dir):
    try:
        cfg = load_config(config_path)
    except FileNotFoundError as err:
        raise SystemExit(_fail(EXIT_IO, str(err)))
    except ConfigError as err:
        raise SystemExit(_fail(EXIT_BAD_SPEC, str(err)))
    if seed is not None:
        cfg["seed"] = seed
    if out_dir is not None:
        cfg["paths"]["out_dir"] = str(out_dir)
    return cfg


def _fail(code, message):
    click.echo(f"error: {message}", err=True)
    return code


def _out_path(cfg, key) -> Path:
    out = Path(cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    name = Path(cfg["paths"][key]).name
    return out / name


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run config file (also via $TRIALEMU_CONFIG).")
@click.option("--seed", type=int, default=None, help="Override the global seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory.")
@click.pass_context
def main(ctx, config_path, seed, out_dir):
    """Trial-emulation treatment effect estimation pipeline."""
    ctx.obj = _load(config_path, seed, out_dir)


@main.command("ingest")
@click.pass_obj
def cmd_ingest(cfg):
    """Parse events and write prone/supine sessions."""
    events_path = Path(cfg["paths"]["events"])
    if not events_path.exists():
        sys.exit(_fail(EXIT_IO, f"events file not found: {events_path}"))
    try:
        with open(events_path) as fh:
            parsed = parse_events(fh)
    except OSError as err:
        sys.exit(_fail(EXIT_IO, f"cannot read {events_path}: {err}"))
    for err in parsed.errors:
        click.echo(f"line {err.line}: {err.message}", err=True)
    sessions = sessions_from_events(parsed)
    out = _out_path(cfg, "sessions")
    with open(out, "w", newline="") as fh:
        write_sessions_csv(sessions, fh)
    n_supine = sum(1 for s in sessions if s.position == "supine")
    n_prone = sum(1 for s in sessions if s.position == "prone")
    n_artificial = sum(1 for s in sessions if s.provenance == "artificial")
    click.echo(f"supine(original+artificial)={n_supine} prone={n_prone}")
    click.echo(
        f"original supine={n_supine - n_artificial} artificial supine={n_artificial}"
    )
    click.echo(f"sessions written to {out}")


@main.command("cohort")
@click.pass_obj
def cmd_cohort(cfg):
    """Build the trial-emulating cohort and print the inclusion funnel."""
    events_path = Path(cfg["paths"]["events"])
    if not events_path.exists():
        sys.exit(_fail(EXIT_IO, f"events file not found: {events_path}"))
    with open(events_path) as fh:
        parsed = parse_events(fh)
    sessions = sessions_from_events(parsed)
    params = cohort_params(cfg)
    spec = default_covariate_spec()
    observations = build_observations(sessions, parsed.by_patient(), spec, params)
    cohort, funnel = apply_inclusion(observations, spec, params)

    outcome_key = "y_early" if cfg["outcome"] == "early" else "y_late"
    n_baseline = funnel["sessions"] - sum(
        v for k, v in funnel.items() if k.startswith("missing baseline")
    )
    n_outcome = sum(
        1 for o in cohort.observations if getattr(o, outcome_key) is not None
    )
    click.echo(f"sessions={funnel['sessions']}")
    click.echo(f"baseline_present={n_baseline}")
    click.echo(f"criteria_met={funnel['included']}")
    click.echo(f"outcome_present({cfg['outcome']})={n_outcome}")
    for reason in sorted(k for k in funnel if k not in ("sessions", "included")):
        click.echo(f"excluded[{reason}]={funnel[reason]}")

    if not cohort.observations:
        sys.exit(_fail(EXIT_EMPTY_COHORT, "no observations satisfy the inclusion criteria"))
    out = _out_path(cfg, "cohort")
    with open(out, "w", newline="") as fh:
        write_cohort_csv(cohort, fh)
    click.echo(f"cohort written to {out}")


def _load_dataset(cfg):
    cohort_path = Path(cfg["paths"]["cohort"])
    if not cohort_path.exists():
        sys.exit(_fail(EXIT_IO, f"cohort file not found: {cohort_path}"))
    with open(cohort_path) as fh:
        names, X, t, y = load_matrix_csv(fh, outcome=cfg["outcome"])
    if len(y) == 0:
        sys.exit(_fail(EXIT_EMPTY_COHORT, "cohort has no rows with the requested outcome"))
    return names, X, t, y


@main.command("estimate")
@click.argument("model")
@click.pass_obj
def cmd_estimate(cfg, model):
    """Fit one estimator once on the train split and print ATE and test RMSE."""
    if model not in MODEL_TAGS:
        sys.exit(_fail(EXIT_BAD_MODEL,
                       f"unknown model tag {model!r}; valid tags: {' '.join(MODEL_TAGS)}"))
    names, X, t, y = _load_dataset(cfg)
    sp = make_split(len(y), cfg["seed"], cfg["split"]["test_frac"],
                    cfg["split"]["val_frac_of_train"])
    X = impute_matrix(X, sp.train)
    configs = model_configs(cfg)
    if model in ("cfr", "tarnet"):
        alpha = configs[model].alpha
        click.echo(f"model={model} alpha={alpha:g}")
    try:
        ate, rmse = evaluation.fit_and_evaluate(
            model, X[sp.train], t[sp.train], y[sp.train],
            X[sp.validation], t[sp.validation], y[sp.validation],
            X[sp.test], t[sp.test], y[sp.test],
            seed=cfg["seed"], config=configs.get(model),
        )
    except (ValueError, RuntimeError) as err:
        sys.exit(_fail(EXIT_BAD_SPEC, f"{model} failed: {err}"))
    click.echo(f"ATE {ate:.2f}")
    click.echo(f"RMSE {rmse:.2f}")


@main.command("evaluate")
@click.pass_obj
def cmd_evaluate(cfg):
    """Run the full bootstrap protocol and write the agreement report."""
    names, X, t, y = _load_dataset(cfg)
    sp = make_split(len(y), cfg["seed"], cfg["split"]["test_frac"],
                    cfg["split"]["val_frac_of_train"])
    X = impute_matrix(X, sp.train)
    plan = BootstrapPlan(n_replicates=cfg["bootstrap"]["replicates"],
                         frac=cfg["bootstrap"]["frac"], seed=cfg["seed"])
    rep = run_protocol(X, t, y, sp, cfg["models"], plan, configs=model_configs(cfg))
    rep.reference_ate = float(cfg["reference"]["ate"])
    rep.reference_ci = tuple(float(v) for v in cfg["reference"]["ci"])

    out = Path(cfg["paths"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report_mod.write_table(rep, out / "table.csv")
    report_mod.write_boxplot_data(rep, out / "boxplot.csv")
    report_mod.write_summary(
        rep, out / "summary.txt",
        extra={"outcome": cfg["outcome"], "seed": cfg["seed"],
               "n_observations": len(y), "n_train": len(sp.train),
               "n_validation": len(sp.validation), "n_test": len(sp.test)},
    )
    _write_diagnostics(cfg, X, t, sp, names, out)
    click.echo(
        f"reference: target-trial ATE {cfg['reference']['ate']:g} "
        f"({cfg['reference']['ci'][0]:g}, {cfg['reference']['ci'][1]:g})"
    )
    for tag, r in rep.results.items():
        lo, hi = r.ate_ci()
        status = " FAILED" if r.failed else ""
        click.echo(f"{tag}: ATE {r.ate_mean:.2f} ({lo:.2f}, {hi:.2f}){status}")
    click.echo(f"report written to {out}")


def _write_diagnostics(cfg, X, t, sp, names, out):
    """Balance and propensity-overlap tables from the training split."""
    Xtr, ttr = X[sp.train], t[sp.train]
    if ttr.min() == ttr.max():
        return
    report_mod.write_balance_data(
        names, np.abs(linprop.normalized_mean_difference(Xtr, ttr)), out / "balance.csv"
    )
    try:
        prop = linprop.fit_propensity(Xtr, ttr, mode=cfg["propensity"]["mode"],
                                      subset=cfg["propensity"]["subset"])
    except linprop.SeparationError as err:
        click.echo(f"overlap diagnostics skipped: {err}", err=True)
        return
    scores = linprop.clip_scores(prop.predict(Xtr), floor=cfg["propensity"]["floor"])
    edges, treated, control = linprop.overlap_histogram(scores.values, ttr)
    report_mod.write_overlap_data(edges, treated, control, out / "overlap.csv")


@main.command("simulate")
@click.pass_obj
def cmd_simulate(cfg):
    """Generate a synthetic cohort with ground-truth potential outcomes."""
    try:
        spec = synthetic.DgpSpec(seed=cfg["seed"], **{
            k: v for k, v in cfg["dgp"].items()
        })
        table = synthetic.generate(spec)
    except (TypeError, ValueError) as err:
        sys.exit(_fail(EXIT_BAD_SPEC, f"invalid DGP spec: {err}"))
    out = _out_path(cfg, "cohort")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"x{j}" for j in range(table.d)]
        header += ["treatment", "y_early", "y_late", "patient_id", "session_start",
                   "session_end", "position", "provenance", "y1", "y0", "e_true"]
        w.writerow(header)
        for i in range(table.n):
            row = [repr(float(v)) for v in table.x[i]]
            row += [int(table.t[i]), repr(float(table.y[i])), "", f"sim-{i}", "", "",
                    "prone" if table.t[i] else "supine", "synthetic",
                    repr(float(table.y1[i])), repr(float(table.y0[i])),
                    repr(float(table.e_true[i]))]
            w.writerow(row)
    click.echo(f"synthetic cohort ({table.n} rows, true ATE "
               f"{synthetic.true_ate(table):g}) written to {out}")


@main.command("report")
@click.pass_obj
def cmd_report(cfg):
    """Render figures from a previously written evaluation report."""
    out = Path(cfg["paths"]["out_dir"])
    boxplot_csv = out / "boxplot.csv"
    if not boxplot_csv.exists():
        sys.exit(_fail(EXIT_IO, f"no evaluation output found in {out}; run evaluate first"))
    report_mod.render_boxplot(boxplot_csv, out / "boxplot.png",
                              reference_ate=float(cfg["reference"]["ate"]))
    overlap_csv = out / "overlap.csv"
    if overlap_csv.exists():
        report_mod.render_overlap(overlap_csv, out / "overlap.png")
    click.echo(f"figures written to {out}")


if __name__ == "__main__":
    main()
