"""Command-line interface: run experiments, generate data, verify the
shrinkage bound, convert dataset formats.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
flags, 3 (verify-shrinkage only) a filter-singular tau was encountered.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from graphcp.base_models import PredictorSpec, load_external_predictions
from graphcp.data_io import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from graphcp.exceptions import FilterSingularError, GraphCPError, InputError
from graphcp.graph_core import (
    build_filter,
    build_topology,
    shrinkage_bound_check,
    spectral_summary,
)
from graphcp.harness import (
    CSV_COLUMNS,
    ExperimentConfig,
    report_rows,
    run_experiment,
    run_grid,
)

OUTPUT_ROOT_ENV = "GRAPHCP_OUTPUT_ROOT"

_PRESETS = {
    "k3": (3, [(0, 1), (1, 2), (0, 2)]),
    "c4": (4, [(0, 1), (1, 2), (2, 3), (3, 0)]),
}


def _resolve_out(out: str | None, subcommand: str) -> Path:
    if out is None:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out_dir = root / subcommand
    else:
        out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config file {path}: {exc}")
    if not isinstance(doc, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    return doc


def _build_config(config_path: str | None, overrides: dict) -> ExperimentConfig:
    """Config file first, then explicit flags override it."""
    doc = _load_config_file(config_path)
    predictor_overrides = overrides.pop("predictor_kind", None)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    cfg = ExperimentConfig.from_dict(doc)
    if predictor_overrides is not None:
        cfg = replace(cfg, predictor=replace(cfg.predictor, kind=predictor_overrides))
    cfg = replace(cfg, predictor=replace(cfg.predictor, horizon=cfg.horizon))
    cfg.validate()
    return cfg


def _write_report(report, out_dir: Path, emit_regions: bool, records) -> None:
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    with open(out_dir / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(report_rows(report))
    if emit_regions:
        with open(out_dir / "regions.jsonl", "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")


@click.group()
def main():
    """Sequential graph-aware ellipsoidal prediction regions."""


@main.command("run")
@click.option("--dataset", required=True, type=click.Path(), help="Dataset file (JSON or CSV).")
@click.option("--config", "config_path", type=click.Path(), help="JSON config; flags override it.")
@click.option("--alpha", type=float, help="Miscoverage level in (0, 1).")
@click.option("--window", type=int, help="Score window length for the quantile regressor.")
@click.option("--tau", type=float, help="Graph filter coefficient in [0, 1].")
@click.option("--horizon", type=int, help="Prediction horizon (steps ahead).")
@click.option("--mode", type=click.Choice(["graph-aware", "graph-agnostic", "both"]))
@click.option("--runs", "num_runs", type=int, help="Number of seeded runs to average.")
@click.option("--seed", type=int, help="Base seed.")
@click.option("--refit-interval", type=int, help="Steps between model refits.")
@click.option("--predictor", "predictor_kind",
              type=click.Choice(["persistence", "graph-ar", "external"]),
              help="Point predictor backing the pipeline.")
@click.option("--predictions", "predictions_path", type=click.Path(),
              help="Prediction trace file (required for --predictor external).")
@click.option("--quantile", "quantile_kind", type=click.Choice(["forest", "empirical"]))
@click.option("--zscore", is_flag=True, default=None, help="Z-score signals per node using train statistics.")
@click.option("--out", type=click.Path(), help="Output directory.")
@click.option("--emit-regions", is_flag=True, help="Also write per-timestep regions.jsonl.")
def cmd_run(dataset, config_path, alpha, window, tau, horizon, mode, num_runs,
            seed, refit_interval, predictor_kind, predictions_path,
            quantile_kind, zscore, out, emit_regions):
    """Run one sequential experiment and write report.json / report.csv."""
    try:
        if predictor_kind == "graph-ar":
            predictor_kind = "graph_ar"
        cfg = _build_config(config_path, {
            "alpha": alpha, "window": window, "tau": tau, "horizon": horizon,
            "mode": mode, "num_runs": num_runs, "seed": seed,
            "refit_interval": refit_interval, "quantile_kind": quantile_kind,
            "zscore": zscore, "predictor_kind": predictor_kind,
        })
        ds = load_dataset(dataset)
        trace = None
        if cfg.predictor.kind == "external":
            if predictions_path is None:
                raise InputError("--predictions is required with --predictor external")
            trace = load_external_predictions(predictions_path, dataset=ds)
    except InputError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    try:
        records: list[dict] = []
        sink = records.append if emit_regions else None
        report = run_experiment(ds, cfg, external_trace=trace, region_sink=sink)
        out_dir = _resolve_out(out, "run")
        _write_report(report, out_dir, emit_regions, records)
        click.echo(f"report written to {out_dir}")
    except GraphCPError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("grid")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), help="Base JSON config for every cell.")
@click.option("--alphas", default=None, help="Comma-separated miscoverage levels.")
@click.option("--windows", default=None, help="Comma-separated window lengths.")
@click.option("--taus", default=None, help="Comma-separated filter coefficients.")
@click.option("--horizons", default=None, help="Comma-separated horizons.")
@click.option("--runs", "num_runs", type=int)
@click.option("--seed", type=int)
@click.option("--out", type=click.Path())
def cmd_grid(dataset, config_path, alphas, windows, taus, horizons, num_runs, seed, out):
    """Cross-product experiment grid; one CSV row per config x mode x horizon."""
    def _parse(text, cast, fallback):
        if text is None:
            return [fallback]
        try:
            return [cast(v) for v in text.split(",") if v.strip()]
        except ValueError as exc:
            raise InputError(f"bad list value: {exc}")

    try:
        base = _build_config(config_path, {"num_runs": num_runs, "seed": seed})
        configs = [
            replace(base, alpha=a, window=w, tau=t, horizon=h,
                    predictor=replace(base.predictor, horizon=h))
            for a in _parse(alphas, float, base.alpha)
            for w in _parse(windows, int, base.window)
            for t in _parse(taus, float, base.tau)
            for h in _parse(horizons, int, base.horizon)
        ]
        for cfg in configs:
            cfg.validate()
        ds = load_dataset(dataset)
    except InputError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    results = run_grid(ds, configs)
    out_dir = _resolve_out(out, "grid")
    doc = []
    rows = []
    for res in results:
        if res.report is not None:
            doc.append({"config": res.config.to_dict(), "report": res.report.to_dict()})
            rows.extend(report_rows(res.report))
        else:
            doc.append({"config": res.config.to_dict(), "error": res.error})
    with open(out_dir / "reports.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    with open(out_dir / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    failures = [res for res in results if res.report is None]
    for res in failures:
        click.echo(f"config failed: {res.error}", err=True)
    click.echo(f"grid reports written to {out_dir}")
    if failures:
        sys.exit(1)


@main.command("generate")
@click.option("--nodes", type=int, default=20, show_default=True)
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--graph", type=click.Choice(["er", "ring", "grid"]), default="er", show_default=True)
@click.option("--er-prob", type=float, default=0.2, show_default=True)
@click.option("--beta", type=float, default=0.1, show_default=True,
              help="Share of independent noise; small beta = strongly graph-correlated.")
@click.option("--sigma", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--name", default=None)
@click.option("--out", required=True, type=click.Path(), help="Output dataset file (.json or .csv).")
def cmd_generate(nodes, steps, graph, er_prob, beta, sigma, seed, name, out):
    """Generate a synthetic homophilic dataset and report its self-check."""
    try:
        spec = SyntheticSpec(
            num_nodes=nodes, num_steps=steps, graph=graph, er_prob=er_prob,
            beta=beta, sigma=sigma, seed=seed, name=name,
        )
        ds = generate_synthetic(spec)
    except InputError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    check = ds.metadata["homophily_check"]
    click.echo(
        "homophily self-check: connected_gap={:.4f} disconnected_gap={} passed={}".format(
            check["connected_gap"],
            "n/a" if check["disconnected_gap"] is None else f"{check['disconnected_gap']:.4f}",
            check["passed"],
        )
    )
    click.echo(f"dataset written to {out}")


@main.command("verify-shrinkage")
@click.option("--dataset", type=click.Path(), help="Dataset whose topology to check.")
@click.option("--preset", type=click.Choice(sorted(_PRESETS)), help="Built-in small graph.")
@click.option("--taus", default="0.1,0.25,0.4", show_default=True)
@click.option("--out", type=click.Path(), help="Optional CSV output path.")
def cmd_verify_shrinkage(dataset, preset, taus, out):
    """Check log det(H) <= -eta*tau for each tau on the given graph."""
    try:
        if (dataset is None) == (preset is None):
            raise InputError("provide exactly one of --dataset or --preset")
        if preset is not None:
            topology = build_topology(*_PRESETS[preset])
        else:
            topology = load_dataset(dataset).topology
        tau_values = [float(v) for v in taus.split(",") if v.strip()]
        if not tau_values:
            raise InputError("--taus must list at least one value")
    except (InputError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)

    rows = []
    any_singular = False
    click.echo(f"{'tau':>6}  {'log det H':>12}  {'-eta*tau':>12}  {'slack':>12}  status")
    for tau in tau_values:
        try:
            summary = spectral_summary(topology, build_filter(topology, tau))
        except FilterSingularError as exc:
            any_singular = True
            click.echo(f"{tau:>6.3f}  {'-':>12}  {'-':>12}  {'-':>12}  singular ({exc.eigenvalue:.4f})")
            rows.append({"tau": tau, "log_det": "", "bound": "", "slack": "", "status": "singular"})
            continue
        check = shrinkage_bound_check(summary, tau)
        status = "pass" if check.passed else "FAIL"
        bound = -summary.eta * tau
        click.echo(
            f"{tau:>6.3f}  {summary.log_det_filter:>12.6f}  {bound:>12.6f}  "
            f"{check.slack:>12.6f}  {status}"
        )
        rows.append({
            "tau": tau, "log_det": summary.log_det_filter, "bound": bound,
            "slack": check.slack, "status": status,
        })
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["tau", "log_det", "bound", "slack", "status"])
            writer.writeheader()
            writer.writerows(rows)
    if any_singular:
        sys.exit(3)
    if any(row["status"] == "FAIL" for row in rows):
        sys.exit(1)


@main.command("convert")
@click.argument("input_path", type=click.Path())
@click.argument("output_path", type=click.Path())
def cmd_convert(input_path, output_path):
    """Convert a dataset between the JSON and CSV (+ edge sidecar) formats."""
    suffix = Path(output_path).suffix
    try:
        if suffix not in (".json", ".csv"):
            raise InputError(f"unsupported output format {suffix!r}; use .json or .csv")
        ds = load_dataset(input_path)
    except InputError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    save_dataset(ds, output_path)
    click.echo(f"wrote {output_path}")


if __name__ == "__main__":
    main()
