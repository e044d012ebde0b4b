"""Batch front door: toy generation, registration, emulation, calibration, report.

Each stage reads and writes files under one workspace directory and records
its configuration and input digests in ``workspace.json``; rerunning a stage
with unchanged inputs is a no-op unless ``--force`` is given. Exit codes:
0 success, 2 validation error, 3 convergence warning.
"""

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, fileformat, report
from .calibration import (
    METRIC_MODES,
    MODE_BOTH,
    ChainConfig,
    Priors,
    mode_metrics,
    posterior_summary,
    run_mcmc,
)
from .design import LHS_ALGORITHM, lhs_sample
from .emulator import (
    METRIC_AMPLITUDE,
    METRIC_EUCLIDEAN,
    METRIC_PHASE,
    TRANSFORM_IDENTITY,
    TRANSFORM_LOG,
    TrainingSet,
    gp_fit_mle,
    load_models,
    loo_cv,
    save_models,
)
from .pipeline import (
    RECIPE_VARIANTS,
    TOY_BOUNDS,
    ImageRecipe,
    ToyParams,
    build_recipe_image,
    generate_toy_run,
    load_field_source,
    make_template,
)
from .registration import RegistrationConfig, register, register_batch
from .workspace import (
    Workspace,
    WorkspaceError,
    read_design_table,
    read_metrics_table,
    write_design_table,
    write_metrics_table,
    write_samples_table,
)

EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3

RHAT_LIMIT = 1.1

_METRIC_COLUMNS = {METRIC_AMPLITUDE: "d_a", METRIC_PHASE: "d_p", METRIC_EUCLIDEAN: "d_euclid"}


def _fail(message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_VALIDATION)


def _relpath(path, root) -> str:
    return str(Path(path).relative_to(root))


# ---------------------------------------------------------------------------
# stage implementations


def stage_toy(ws: Workspace, theta_truth, n_runs, grid, seed, force=False) -> dict:
    """Generate template, synthetic observation, LHS design, and toy run fields."""
    config = {
        "theta_truth": list(theta_truth),
        "n_runs": int(n_runs),
        "grid": list(grid),
        "seed": int(seed),
        "bounds": [list(b) for b in TOY_BOUNDS],
        "lhs_algorithm": LHS_ALGORITHM,
    }
    if not force and ws.stage_is_current("toy", config, []):
        return {"status": "up-to-date"}
    if ws.manifest_path.exists() and not force:
        record = ws.stage_record("toy")
        if record is not None and record.get("config") != config:
            raise WorkspaceError(
                f"workspace {ws.root} was generated with a different toy configuration; "
                "rerun with --force to regenerate"
            )
    template = make_template("branching_crack", tuple(grid))
    truth = ToyParams(*theta_truth)
    observation = generate_toy_run(template, truth)
    design = lhs_sample(n_runs, TOY_BOUNDS, seed)

    outputs = []
    outputs.append(fileformat.write_field(ws.template_path, template, ["intensity"]))
    outputs.append(fileformat.write_field(ws.observation_path, observation, ["intensity"]))
    field_paths = []
    for idx, theta in enumerate(design.values):
        run = generate_toy_run(template, ToyParams(*theta))
        path = fileformat.write_field(ws.run_path(idx), run, ["intensity"])
        outputs.append(path)
        field_paths.append(_relpath(path, ws.root))
    outputs.append(write_design_table(ws.design_table, design.values, field_paths))
    with open(ws.design_manifest, "w") as f:
        json.dump(
            {
                "n": design.n,
                "bounds": [list(b) for b in design.bounds],
                "seed": design.seed,
                "algorithm": LHS_ALGORITHM,
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")
    outputs.append(ws.design_manifest)
    # channel files ride along with each manifest
    all_outputs = []
    for out in outputs:
        all_outputs.append(out)
        all_outputs.extend(Path(out).parent.glob(Path(out).name.replace(".json", ".*.txt")))
    ws.record_stage("toy", config, [], all_outputs)
    return {"status": "generated", "runs": n_runs}


def _design_inputs(ws: Workspace):
    theta, fields = read_design_table(ws.design_table)
    field_paths = [ws.root / f for f in fields]
    missing = [str(p) for p in [ws.observation_path, *field_paths] if not p.exists()]
    if missing:
        raise WorkspaceError(f"missing field files: {missing}")
    return theta, field_paths


def stage_register(
    ws: Workspace,
    recipe: ImageRecipe,
    cfg: RegistrationConfig,
    include_self=False,
    workers=None,
    force=False,
) -> dict:
    """Register every design run to the observation and write the metrics table."""
    config = {
        "recipe": recipe.variant,
        "threshold": recipe.threshold,
        "basis_resolution": cfg.basis_resolution,
        "step0": cfg.step0,
        "max_iters": cfg.max_iters,
        "rel_tol": cfg.rel_tol,
        "fd_eps": cfg.fd_eps,
        "include_self": bool(include_self),
    }
    theta, field_paths = _design_inputs(ws)
    inputs = [ws.design_table, ws.observation_path, *field_paths]
    inputs += [p for path in [ws.observation_path, *field_paths]
               for p in _channel_files(path)]
    if not force and ws.stage_is_current("register", config, inputs):
        return {"status": "up-to-date"}

    reference_source = load_field_source(ws.observation_path)
    reference_image, scales = build_recipe_image(reference_source, recipe)
    run_images = []
    for path in field_paths:
        image, _ = build_recipe_image(load_field_source(path), recipe, scales)
        run_images.append(image)

    results = register_batch(reference_image, run_images, cfg, workers=workers)

    rows = []
    traces = {}
    for idx, (point, result) in enumerate(zip(theta, results)):
        name = f"run_{idx:03d}"
        rows.append(
            {
                "theta": list(point),
                "d_a": result.d_amp,
                "d_p": result.d_phase,
                "d_euclid": result.d_euclid,
                "converged": result.converged,
                "iters": result.iterations,
                "run": name,
                "d_qmap0": result.initial_qmap_distance,
                "is_reference": False,
            }
        )
        traces[name] = result.energy_trace
    if include_self:
        self_result = register(reference_image, reference_image, cfg)
        rows.append(
            {
                "theta": [float("nan")] * theta.shape[1],
                "d_a": self_result.d_amp,
                "d_p": self_result.d_phase,
                "d_euclid": self_result.d_euclid,
                "converged": self_result.converged,
                "iters": self_result.iterations,
                "run": "observation",
                "d_qmap0": self_result.initial_qmap_distance,
                "is_reference": True,
            }
        )
        traces["observation"] = self_result.energy_trace

    write_metrics_table(ws.metrics_table, rows)
    with open(ws.traces_table, "w") as f:
        f.write("run,iter,energy\n")
        for name in sorted(traces):
            for it, value in enumerate(traces[name]):
                f.write(f"{name},{it},{float(value)!r}\n")
    ws.record_stage("register", config, inputs, [ws.metrics_table, ws.traces_table])
    n_failed = sum(1 for r in results if not r.converged)
    return {"status": "registered", "runs": len(results), "not_converged": n_failed}


def _channel_files(manifest_path: Path):
    stem = manifest_path.name[: -len(".json")]
    return sorted(manifest_path.parent.glob(f"{stem}.*.txt"))


def _training_set(ws: Workspace, metric_keys) -> tuple[TrainingSet, dict]:
    metrics_data = read_metrics_table(ws.metrics_table)
    theta = metrics_data["theta"]
    if theta.shape[0] < theta.shape[1] + 2:
        raise WorkspaceError(
            f"{theta.shape[0]} design points cannot support emulation; "
            f"need at least d+2 = {theta.shape[1] + 2}"
        )
    bounds = None
    if ws.design_manifest.exists():
        with open(ws.design_manifest) as f:
            bounds = tuple(tuple(b) for b in json.load(f)["bounds"])
    metrics = {key: metrics_data[_METRIC_COLUMNS[key]] for key in metric_keys}
    return TrainingSet(theta=theta, metrics=metrics, bounds=bounds), metrics_data


def stage_emulate(ws: Workspace, metric_keys, transform_policy, seed=0, n_restarts=8, force=False) -> dict:
    """Fit per-metric GPs with cross-validated transform choice; serialize them."""
    config = {
        "metrics": list(metric_keys),
        "transform": transform_policy,
        "seed": int(seed),
        "n_restarts": int(n_restarts),
    }
    inputs = [ws.metrics_table]
    if not force and ws.stage_is_current("emulate", config, inputs):
        return {"status": "up-to-date"}
    ts, _ = _training_set(ws, metric_keys)

    models = {}
    cv_payload = {}
    for metric in metric_keys:
        cv = loo_cv(ts, metric, n_restarts=n_restarts, seed=seed)
        if transform_policy == "auto":
            chosen = cv.selected
        else:
            chosen = transform_policy
            if chosen == TRANSFORM_LOG and np.any(ts.metrics[metric] <= 0):
                raise WorkspaceError(
                    f"transform 'log' requested but metric {metric!r} has nonpositive values"
                )
        models[metric] = gp_fit_mle(ts, metric, transform=chosen, n_restarts=n_restarts, seed=seed)
        cv_payload[metric] = {
            "candidates": [
                {
                    "transform": c.transform,
                    "rmse": c.rmse,
                    "crps": c.mean_crps,
                    "coverage": c.coverage,
                }
                for c in cv.candidates
            ],
            "selected": cv.selected,
            "chosen": chosen,
            "skipped": cv.skipped,
            "baseline_rmse": cv.baseline_rmse,
        }
    save_models(ws.models_path, models, metrics_table=_relpath(ws.metrics_table, ws.root))
    with open(ws.cv_report_path, "w") as f:
        json.dump(cv_payload, f, indent=2, sort_keys=True)
        f.write("\n")
    ws.record_stage("emulate", config, inputs, [ws.models_path, ws.cv_report_path])
    return {"status": "emulated", "cv": cv_payload}


def stage_calibrate(
    ws: Workspace,
    metric_mode: str,
    chain_cfg: ChainConfig,
    include_emulator_var=True,
    force=False,
) -> dict:
    """Sample the posterior for one metric mode and write its artifacts."""
    config = {
        "metric_mode": metric_mode,
        "n_chains": chain_cfg.n_chains,
        "n_iters": chain_cfg.n_iters,
        "burn_in": chain_cfg.burn_in,
        "seed": chain_cfg.seed,
        "adapt": chain_cfg.adapt,
        "include_emulator_var": bool(include_emulator_var),
    }
    if not ws.models_path.exists():
        raise WorkspaceError(f"no emulators at {ws.models_path}; run the emulate stage first")
    inputs = [ws.models_path, ws.metrics_table]
    out_dir = ws.posterior_dir(metric_mode)
    if not force and ws.stage_is_current(f"calibrate-{metric_mode}", config, inputs):
        with open(out_dir / "summary.json") as f:
            return {"status": "up-to-date", "summary": json.load(f)}

    models = load_models(ws.models_path)
    metric_keys = mode_metrics(metric_mode)
    missing = [m for m in metric_keys if m not in models]
    if missing:
        raise WorkspaceError(f"metric mode {metric_mode!r} needs emulators for {missing}")
    ts, _ = _training_set(ws, metric_keys)
    priors = Priors.from_training(
        {k: ts.metrics[k] for k in metric_keys}, theta_bounds=ts.bounds
    )
    chain = run_mcmc(models, priors, chain_cfg, metric_mode=metric_mode,
                     include_emulator_var=include_emulator_var)
    summary = posterior_summary(chain, theta_bounds=priors.theta_bounds)

    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [write_samples_table(out_dir / "samples.csv", chain)]
    summary_payload = {
        "metric_mode": metric_mode,
        "param_names": list(chain.param_names),
        "modes": {p.name: p.mode for p in summary.params},
        "intervals": {p.name: [p.ci_low, p.ci_high] for p in summary.params},
        "rhat": {name: _nan_to_none(v) for name, v in zip(chain.param_names, chain.rhat)},
        "acceptance_rate": chain.acceptance_rate,
        "acceptance_by_param": {
            name: float(v) for name, v in zip(chain.param_names, chain.acceptance_by_param)
        },
        "peak_to_mean": summary.joint.peak_to_mean if summary.joint else None,
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary_payload, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs.append(out_dir / "summary.json")
    for param in summary.params:
        path = out_dir / f"density_{param.name}.csv"
        np.savetxt(
            path,
            np.column_stack([param.grid, param.density]),
            fmt="%.17g",
            delimiter=",",
            header="value,density",
            comments="",
        )
        outputs.append(path)
    if summary.joint is not None:
        np.savetxt(out_dir / "density_2d.csv", summary.joint.density, fmt="%.17g", delimiter=",")
        with open(out_dir / "density_axes.json", "w") as f:
            json.dump(
                {
                    "x_name": summary.joint.x_name,
                    "y_name": summary.joint.y_name,
                    "x_grid": summary.joint.x_grid.tolist(),
                    "y_grid": summary.joint.y_grid.tolist(),
                },
                f,
                indent=2,
                sort_keys=True,
            )
            f.write("\n")
        outputs += [out_dir / "density_2d.csv", out_dir / "density_axes.json"]
    ws.record_stage(f"calibrate-{metric_mode}", config, inputs, outputs)
    return {"status": "calibrated", "summary": summary_payload}


def _nan_to_none(value):
    value = float(value)
    return None if np.isnan(value) else value


def _load_posterior_artifacts(ws: Workspace):
    modes = []
    base = ws.root / "posterior"
    if base.exists():
        for child in sorted(base.iterdir()):
            if (child / "summary.json").exists():
                modes.append(child.name)
    return modes


def stage_report(ws: Workspace, force=False) -> dict:
    """Render posterior heatmaps, energy traces, and CV diagnostics as SVG
    plus a plain-text summary."""
    modes = _load_posterior_artifacts(ws)
    missing = []
    if not modes:
        missing.append(str(ws.root / "posterior" / "<mode>" / "summary.json"))
    if not ws.metrics_table.exists():
        missing.append(str(ws.metrics_table))
    if not ws.cv_report_path.exists():
        missing.append(str(ws.cv_report_path))
    if missing:
        raise WorkspaceError("missing report inputs: " + ", ".join(missing))

    inputs = [ws.metrics_table, ws.cv_report_path, ws.traces_table]
    for mode in modes:
        out_dir = ws.posterior_dir(mode)
        inputs += [out_dir / "summary.json", out_dir / "samples.csv"]
        if (out_dir / "density_axes.json").exists():
            inputs += [out_dir / "density_2d.csv", out_dir / "density_axes.json"]
    config = {"modes": modes}
    if not force and ws.stage_is_current("report", config, inputs):
        return {"status": "up-to-date"}

    toy_record = ws.stage_record("toy")
    truth = toy_record["config"]["theta_truth"] if toy_record else None

    ws.report_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    lines = [f"warpcal report (version {__version__})", ""]
    for mode in modes:
        out_dir = ws.posterior_dir(mode)
        with open(out_dir / "summary.json") as f:
            summary = json.load(f)
        if (out_dir / "density_axes.json").exists():
            with open(out_dir / "density_axes.json") as f:
                axes = json.load(f)
            density = np.loadtxt(out_dir / "density_2d.csv", delimiter=",")
            from .calibration import JointDensity

            joint = JointDensity(
                x_name=axes["x_name"],
                y_name=axes["y_name"],
                x_grid=np.array(axes["x_grid"]),
                y_grid=np.array(axes["y_grid"]),
                density=density,
            )
            fig = report.posterior_density_figure(joint, truth=truth, title=f"posterior ({mode})")
            path = ws.report_dir / f"posterior_{mode}.svg"
            report.save_svg(fig, path)
            outputs.append(path)
        lines.append(f"[{mode}]")
        for name in summary["param_names"]:
            lo, hi = summary["intervals"][name]
            rhat = summary["rhat"][name]
            rhat_str = f"{rhat:.4f}" if rhat is not None else "n/a"
            lines.append(
                f"  {name}: mode {summary['modes'][name]:.6g} "
                f"95% CI ({lo:.6g}, {hi:.6g}) R-hat {rhat_str}"
            )
        lines.append(f"  acceptance rate {summary['acceptance_rate']:.3f}")
        if summary.get("peak_to_mean") is not None:
            lines.append(f"  density peak-to-mean {summary['peak_to_mean']:.3f}")
        lines.append("")

    if ws.traces_table.exists():
        traces = {}
        with open(ws.traces_table) as f:
            next(f)
            for line in f:
                name, _, value = line.strip().split(",")
                traces.setdefault(name, []).append(float(value))
        fig = report.energy_trace_figure(traces)
        path = ws.report_dir / "energy_traces.svg"
        report.save_svg(fig, path)
        outputs.append(path)

    with open(ws.cv_report_path) as f:
        cv_payload = json.load(f)
    fig = report.cv_figure(cv_payload)
    path = ws.report_dir / "cv_report.svg"
    report.save_svg(fig, path)
    outputs.append(path)

    metrics_data = read_metrics_table(ws.metrics_table)
    d_a = metrics_data["d_a"]
    lines.append("[registration metrics]")
    lines.append(f"  runs: {len(d_a)}")
    lines.append(f"  median d_a {np.median(d_a):.6g}  CV {d_a.std() / d_a.mean():.3f}")
    lines.append(f"  median d_p {np.median(metrics_data['d_p']):.6g}")
    lines.append(f"  median d_euclid {np.median(metrics_data['d_euclid']):.6g}")
    if metrics_data["d_qmap0"].size:
        lines.append(f"  median pre-registration q-map distance {np.median(metrics_data['d_qmap0']):.6g}")
    lines.append(f"  converged {int(metrics_data['converged'].sum())}/{len(d_a)}")
    lines.append("")
    summary_path = ws.report_dir / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    outputs.append(summary_path)
    ws.record_stage("report", config, inputs, outputs)
    return {"status": "reported", "files": [str(p) for p in outputs]}


# ---------------------------------------------------------------------------
# click commands


@click.group()
@click.version_option(version=__version__)
def main():
    """Calibrate simulator inputs against a reference image via warping metrics."""


def _workspace_option(func):
    return click.option(
        "--workspace", "-w", required=True, type=click.Path(), help="workspace directory"
    )(func)


@main.command("toy")
@_workspace_option
@click.option("--theta1", default=0.3, show_default=True, help="first truth parameter")
@click.option("--theta2", default=0.1, show_default=True, help="second truth parameter")
@click.option("--runs", "-n", default=50, show_default=True, help="number of design runs")
@click.option("--grid", default=64, show_default=True, help="grid nodes per axis")
@click.option("--seed", default=0, show_default=True)
@click.option("--force", is_flag=True)
def cmd_toy(workspace, theta1, theta2, runs, grid, seed, force):
    """Generate the synthetic toy workspace (template, observation, LHS runs)."""
    ws = Workspace(workspace)
    try:
        result = stage_toy(ws, (theta1, theta2), runs, (grid, grid), seed, force=force)
    except (WorkspaceError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"toy: {result['status']}")


@main.command("register")
@_workspace_option
@click.option("--recipe", type=click.Choice(RECIPE_VARIANTS), default="grad", show_default=True)
@click.option("--threshold", default=0.4, show_default=True, help="jump magnitude cutoff (km)")
@click.option("--basis-k", default=8, show_default=True, help="basis resolution per axis")
@click.option("--step0", default=0.1, show_default=True)
@click.option("--max-iters", default=200, show_default=True)
@click.option("--rel-tol", default=1e-6, show_default=True)
@click.option("--fd-eps", default=1e-4, show_default=True)
@click.option("--include-self", is_flag=True, help="also register the observation to itself")
@click.option("--workers", default=None, type=int, help="max parallel workers")
@click.option("--force", is_flag=True)
def cmd_register(workspace, recipe, threshold, basis_k, step0, max_iters, rel_tol, fd_eps,
                 include_self, workers, force):
    """Register every design run to the observation; write the metrics table."""
    ws = Workspace(workspace)
    try:
        result = stage_register(
            ws,
            ImageRecipe(variant=recipe, threshold=threshold),
            RegistrationConfig(
                basis_resolution=basis_k,
                step0=step0,
                max_iters=max_iters,
                rel_tol=rel_tol,
                fd_eps=fd_eps,
            ),
            include_self=include_self,
            workers=workers,
            force=force,
        )
    except (WorkspaceError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"register: {result['status']}")
    if result.get("not_converged"):
        click.echo(f"register: {result['not_converged']} run(s) hit the iteration cap", err=True)


@main.command("emulate")
@_workspace_option
@click.option("--metrics", default="amplitude,phase,euclidean", show_default=True,
              help="comma-separated metric set to emulate")
@click.option("--transform", type=click.Choice(["auto", TRANSFORM_IDENTITY, TRANSFORM_LOG]),
              default="auto", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--restarts", default=8, show_default=True, help="MLE restarts")
@click.option("--force", is_flag=True)
def cmd_emulate(workspace, metrics, transform, seed, restarts, force):
    """Fit Gaussian-process emulators to the registration metrics."""
    ws = Workspace(workspace)
    keys = tuple(m.strip() for m in metrics.split(",") if m.strip())
    bad = [k for k in keys if k not in _METRIC_COLUMNS]
    if bad:
        _fail(f"unknown metrics {bad}; choose from {sorted(_METRIC_COLUMNS)}")
    try:
        result = stage_emulate(ws, keys, transform, seed=seed, n_restarts=restarts, force=force)
    except (WorkspaceError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"emulate: {result['status']}")
    if result.get("cv"):
        for metric, payload in result["cv"].items():
            click.echo(f"  {metric}: transform={payload['chosen']} (cv pick: {payload['selected']})")


@main.command("calibrate")
@_workspace_option
@click.option("--metric", "metric_mode", type=click.Choice(METRIC_MODES), default=MODE_BOTH,
              show_default=True)
@click.option("--chains", default=3, show_default=True)
@click.option("--iters", default=30000, show_default=True)
@click.option("--burnin", default=15000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--mean-only", is_flag=True,
              help="ignore emulator predictive variance in the likelihood")
@click.option("--force", is_flag=True)
def cmd_calibrate(workspace, metric_mode, chains, iters, burnin, seed, mean_only, force):
    """Sample the Bayesian posterior of the simulator inputs."""
    ws = Workspace(workspace)
    try:
        result = stage_calibrate(
            ws,
            metric_mode,
            ChainConfig(n_chains=chains, n_iters=iters, burn_in=burnin, seed=seed),
            include_emulator_var=not mean_only,
            force=force,
        )
    except (WorkspaceError, ValueError) as exc:
        _fail(str(exc))
    summary = result["summary"]
    click.echo(f"calibrate[{metric_mode}]: {result['status']}")
    for name in summary["param_names"]:
        lo, hi = summary["intervals"][name]
        click.echo(f"  {name}: mode {summary['modes'][name]:.4g} CI ({lo:.4g}, {hi:.4g})")
    rhats = [v for v in summary["rhat"].values() if v is not None]
    if rhats and max(rhats) > RHAT_LIMIT:
        click.echo(
            f"warning: max R-hat {max(rhats):.3f} exceeds {RHAT_LIMIT}; chains may not have mixed",
            err=True,
        )
        sys.exit(EXIT_CONVERGENCE)


@main.command("report")
@_workspace_option
@click.option("--force", is_flag=True)
def cmd_report(workspace, force):
    """Render figures and a text summary from workspace artifacts."""
    ws = Workspace(workspace)
    try:
        result = stage_report(ws, force=force)
    except (WorkspaceError, ValueError) as exc:
        _fail(str(exc))
    click.echo(f"report: {result['status']}")


@main.command("run")
@_workspace_option
@click.option("--theta1", default=0.3, show_default=True)
@click.option("--theta2", default=0.1, show_default=True)
@click.option("--runs", "-n", default=50, show_default=True)
@click.option("--grid", default=64, show_default=True)
@click.option("--recipe", type=click.Choice(RECIPE_VARIANTS), default="grad", show_default=True)
@click.option("--basis-k", default=6, show_default=True)
@click.option("--step0", default=0.1, show_default=True)
@click.option("--max-iters", default=600, show_default=True)
@click.option("--rel-tol", default=1e-8, show_default=True)
@click.option("--metric", "metric_modes", multiple=True,
              type=click.Choice(METRIC_MODES), help="repeatable; default: all four modes")
@click.option("--chains", default=3, show_default=True)
@click.option("--iters", default=30000, show_default=True)
@click.option("--burnin", default=15000, show_default=True)
@click.option("--transform", type=click.Choice(["auto", TRANSFORM_IDENTITY, TRANSFORM_LOG]),
              default="auto", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--workers", default=None, type=int)
@click.option("--force", is_flag=True)
def cmd_run(workspace, theta1, theta2, runs, grid, recipe, basis_k, step0, max_iters, rel_tol,
            metric_modes, chains, iters, burnin, transform, seed, workers, force):
    """Run the whole toy pipeline: toy, register, emulate, calibrate, report.

    Registration defaults here are tuned for the synthetic toy workspace;
    the standalone register command keeps the generic defaults.
    """
    ws = Workspace(workspace)
    modes = metric_modes or METRIC_MODES
    convergence_flag = False
    try:
        click.echo(f"toy: {stage_toy(ws, (theta1, theta2), runs, (grid, grid), seed, force=force)['status']}")
        result = stage_register(
            ws,
            ImageRecipe(variant=recipe),
            RegistrationConfig(basis_resolution=basis_k, step0=step0, max_iters=max_iters,
                               rel_tol=rel_tol),
            workers=workers,
            force=force,
        )
        click.echo(f"register: {result['status']}")
        result = stage_emulate(ws, tuple(_METRIC_COLUMNS), transform, seed=seed, force=force)
        click.echo(f"emulate: {result['status']}")
        for mode in modes:
            result = stage_calibrate(
                ws,
                mode,
                ChainConfig(n_chains=chains, n_iters=iters, burn_in=burnin, seed=seed),
                force=force,
            )
            summary = result["summary"]
            click.echo(f"calibrate[{mode}]: {result['status']}")
            rhats = [v for v in summary["rhat"].values() if v is not None]
            if rhats and max(rhats) > RHAT_LIMIT:
                convergence_flag = True
                click.echo(f"warning: [{mode}] max R-hat {max(rhats):.3f} > {RHAT_LIMIT}", err=True)
        click.echo(f"report: {stage_report(ws, force=force)['status']}")
    except (WorkspaceError, ValueError) as exc:
        _fail(str(exc))
    if convergence_flag:
        sys.exit(EXIT_CONVERGENCE)


if __name__ == "__main__":
    main()
