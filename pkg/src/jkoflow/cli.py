"""Config-driven command line: validate, run, convergence, compare.

Exit codes are a stable contract: 0 success, 1 failed hypothesis check,
2 config/usage error, 3 inner-solver failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_HYPOTHESIS = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jkoflow",
        description="Multi-species nonlinear-diffusion / nonlocal-interaction "
                    "simulator with a verification-style diagnostics suite.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", help="check hypotheses and initial data")
    p_val.add_argument("config")

    p_run = sub.add_parser("run", help="validate, run the scheme, write reports")
    p_run.add_argument("config")
    p_run.add_argument("--best-effort", action="store_true",
                       help="continue past inner-solver failures")

    p_conv = sub.add_parser("convergence", help="refinement study over time steps")
    p_conv.add_argument("config")
    p_conv.add_argument("--levels", required=True,
                        help="comma-separated decreasing h values, each halving")
    p_conv.add_argument("--best-effort", action="store_true")

    p_cmp = sub.add_parser("compare", help="distance table between two run outputs")
    p_cmp.add_argument("run_dir_a")
    p_cmp.add_argument("run_dir_b")
    p_cmp.add_argument("--output", default=None,
                       help="directory for the comparison CSV and figure")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .config import ConfigError
    from .jko import SolverError

    try:
        if args.command == "validate":
            return cmd_validate(args.config)
        if args.command == "run":
            return cmd_run(args.config, best_effort=args.best_effort)
        if args.command == "convergence":
            return cmd_convergence(args.config, args.levels,
                                   best_effort=args.best_effort)
        if args.command == "compare":
            return cmd_compare(args.run_dir_a, args.run_dir_b, args.output)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as err:
        where = f" (step {err.step}, species {err.species})" if err.step is not None else ""
        print(f"solver failure{where}: {err}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_CONFIG


# ---------------------------------------------------------------------------
# validate

def validation_reports(cfg):
    """Hypothesis and initial-data checks behind `validate` (and `run`)."""
    import numpy as np

    from .diagnostics import _initial_interaction
    from .energy import check_class_Hm, check_mccann, eval_functional
    from .interaction import certify_hypotheses
    from .reporting import Report

    system = cfg.system()
    inits = cfg.initial_densities()
    reports = []
    samples = np.logspace(-3.0, 1.0, 41)
    mccann_samples = np.linspace(0.05, 8.0, 160)
    for i, energy in enumerate(cfg.energies):
        rep = check_class_Hm(energy, samples)
        rep.title = f"species{i + 1}_{rep.title}"
        reports.append(rep)
        rep = check_mccann(energy, cfg.grid.dim, mccann_samples)
        rep.title = f"species{i + 1}_{rep.title}"
        reports.append(rep)
    if not cfg.interaction.is_zero:
        reports.append(certify_hypotheses(cfg.interaction, _trial_pairs(cfg, inits)))
    init_rep = Report("initial_data")
    for i, rho in enumerate(inits):
        cell_peak = float(np.max(cfg.energies[i].F(rho.values))) * cfg.grid.cell_volume
        init_rep.add(f"species{i + 1}_energy_concentration", cell_peak, 1.0)
        total = eval_functional(cfg.energies[i], rho) + _initial_interaction(system, i, inits)
        init_rep.add(f"species{i + 1}_energy_finite",
                     0.0 if np.isfinite(total) else float("inf"), 0.5)
        init_rep.info[f"species{i + 1}_initial_energy"] = total
    reports.append(init_rep)
    return reports, system, inits


def _trial_pairs(cfg, inits):
    """Deterministic density variants for the regularity certification."""
    import numpy as np

    from .grid import Density

    grid = cfg.grid
    shift = max(1, grid.cells[0] // 16)
    uniform = np.full(grid.shape, 1.0 / (grid.cell_volume * np.prod(grid.shape)))
    va = [rho for rho in inits]
    vb = [Density(grid, np.roll(rho.values, shift, axis=0)) for rho in inits]
    vc = [Density(grid, 0.5 * rho.values + 0.5 * uniform) for rho in inits]
    return [(va, vb), (va, vc), (vb, vc)]


def cmd_validate(config_path) -> int:
    from .config import load_config

    cfg = load_config(config_path)
    reports, _, _ = validation_reports(cfg)
    ok = True
    for rep in reports:
        for line in rep.summary_lines():
            print(line)
        ok = ok and rep.passed
    print("validation:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_HYPOTHESIS


# ---------------------------------------------------------------------------
# run

def cmd_run(config_path, best_effort: bool = False) -> int:
    from .config import load_config

    cfg = load_config(config_path)
    reports, system, inits = validation_reports(cfg)
    if not all(r.passed for r in reports):
        for rep in reports:
            if not rep.passed:
                for line in rep.summary_lines():
                    print(line)
        print("validation: FAIL (run refused)")
        return EXIT_HYPOTHESIS
    from .jko import run_scheme

    traj = run_scheme(system, inits, cfg.h, cfg.T, solver=cfg.solver,
                      epsilon=cfg.epsilon, tol=cfg.tol, best_effort=best_effort,
                      max_iter=cfg.max_iter)
    summary = write_run_outputs(cfg, system, traj, reports)
    print(f"run: {traj.n_steps} steps -> {cfg.output_dir} "
          f"(pass={summary['pass']})")
    return EXIT_OK


def _recorded_steps(n_steps: int, every: int):
    steps = list(range(0, n_steps + 1, every))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return steps


def write_run_outputs(cfg, system, traj, validation=()):
    """Snapshots, time-series CSV, summary JSON, checkpoint index, figures."""
    import numpy as np

    from .diagnostics import time_series_rows
    from .grid import _fmt, save_density
    from .reporting import Report, _jsonable

    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    header, rows = time_series_rows(traj, system)
    csv_path = outdir / "timeseries.csv"
    if "csv" in cfg.formats:
        with open(csv_path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    recorded = _recorded_steps(traj.n_steps, cfg.record_every)
    snap_dir = outdir / "snapshots"
    snapshots = {}
    if "csv" in cfg.formats:
        snap_dir.mkdir(exist_ok=True)
        for k in recorded:
            files = []
            for i in range(traj.n_species):
                name = f"species_{i + 1}_step_{k}.csv"
                save_density(traj.densities[k][i], snap_dir / name)
                files.append(f"snapshots/{name}")
            snapshots[str(k)] = files

    run_rep = Report("run_invariants")
    recs = [traj.records[k][i] for k in range(traj.n_steps)
            for i in range(traj.n_species)]
    gtol = cfg.tol if cfg.tol is not None else 1e-10
    run_rep.add("mass_max_deviation",
                max(abs(r.mass_before_renorm - 1.0) for r in recs), 1e-8)
    run_rep.add("renorm_factor_max",
                max(r.renorm_factor for r in recs), 1.0 + 1e-6)
    slack_bound = 10.0 * gtol if cfg.solver == "exact1d" else 10.0 * gtol + traj.epsilon
    run_rep.add("dissipation_slack_max",
                max(r.dissipation_slack for r in recs), slack_bound)
    run_rep.add("unconverged_steps",
                sum(0 if r.converged else 1 for r in recs), 0.0)
    c_lip = system.interaction.lipschitz_constant
    run_rep.add("potential_gradient_sup",
                max(r.potential_grad_sup for r in recs), c_lip * (1 + 1e-9) + 1e-12)

    baseline_rep = None
    if cfg.baseline:
        baseline_rep = _baseline_errors(cfg, traj)

    all_reports = list(validation) + [run_rep] + ([baseline_rep] if baseline_rep else [])
    summary = {
        "config": cfg.config_path,
        "h": traj.h,
        "T": traj.n_steps * traj.h,
        "steps": traj.n_steps,
        "species": traj.n_species,
        "solver": traj.solver,
        "epsilon": traj.epsilon,
        "pass": all(r.passed for r in all_reports),
        "reports": {r.title: r.to_dict() for r in all_reports},
    }
    if "json" in cfg.formats:
        (outdir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2))
        checkpoint = {
            "h": traj.h,
            "T": traj.n_steps * traj.h,
            "steps": traj.n_steps,
            "species": traj.n_species,
            "record_every": cfg.record_every,
            "recorded_steps": recorded,
            "snapshots": snapshots,
            "diagnostics": "timeseries.csv",
            "summary": "summary.json",
        }
        (outdir / "checkpoint.json").write_text(json.dumps(checkpoint, indent=2))
    if "png" in cfg.formats:
        from .figures import save_density_evolution, save_time_series

        save_density_evolution(traj, outdir / "fig_densities.png")
        save_time_series(header, rows, outdir / "fig_timeseries.png")
    return summary


def _baseline_errors(cfg, traj):
    from .diagnostics import (barenblatt_density_values, gibbs_density,
                              heat_density_values, l1_error)
    from .reporting import Report
    from . import transport

    b = dict(cfg.baseline)
    name = b.pop("name")
    rep = Report(f"baseline_{name}")
    t_end = traj.n_steps * traj.h
    if name == "heat":
        exact = heat_density_values(cfg.grid, float(b.get("sigma0", 0.3)), t_end)
        rep.add("l1_error", l1_error(traj.densities[-1][0], exact),
                float(b.get("l1_bound", 0.02)))
    elif name == "barenblatt":
        exact = barenblatt_density_values(cfg.grid, float(b.get("t0", 0.5)), t_end)
        rep.add("l1_error", l1_error(traj.densities[-1][0], exact),
                float(b.get("l1_bound", 0.05)))
    elif name == "gibbs":
        confinement = cfg.interaction.external[0]
        rho0 = gibbs_density(cfg.grid, confinement)
        drift = max(
            transport.w2_exact_1d(traj.densities[k][0], rho0).distance
            for k in range(traj.n_steps + 1)
        )
        rep.add("w2_drift", drift,
                float(b.get("drift_bound", 2.0 * max(cfg.grid.spacing))))
    return rep


# ---------------------------------------------------------------------------
# convergence

def cmd_convergence(config_path, levels_arg: str, best_effort: bool = False) -> int:
    from .config import ConfigError, load_config
    from .diagnostics import (barenblatt_density_values, heat_density_values, l1_error)
    from .grid import _fmt
    from .jko import run_scheme
    from . import transport

    cfg = load_config(config_path)
    try:
        levels = [float(v) for v in levels_arg.split(",") if v.strip()]
    except ValueError as err:
        raise ConfigError(f"--levels: {err}") from err
    if len(levels) < 3:
        raise ConfigError("--levels: need at least 3 h values")
    for a, b in zip(levels, levels[1:]):
        if not math.isclose(b, a / 2.0, rel_tol=1e-9):
            raise ConfigError(f"--levels: {b} is not half of {a}")

    system = cfg.system()
    inits = cfg.initial_densities()
    runs = []
    for h in levels:
        traj = run_scheme(system, inits, h, cfg.T, solver=cfg.solver,
                          epsilon=cfg.epsilon, tol=cfg.tol, best_effort=best_effort,
                          max_iter=cfg.max_iter)
        runs.append(traj)

    errors = []
    w2sums = []
    reference = None
    if cfg.baseline and cfg.baseline["name"] in ("heat", "barenblatt"):
        b = cfg.baseline
        def exact_at(traj):
            t_end = traj.n_steps * traj.h
            if b["name"] == "heat":
                return heat_density_values(cfg.grid, float(b.get("sigma0", 0.3)), t_end)
            return barenblatt_density_values(cfg.grid, float(b.get("t0", 0.5)), t_end)
    else:
        exact_at = None
        reference = runs[-1]
    for traj in runs:
        w2sums.append(sum(traj.records[k][i].w2_sq
                          for k in range(traj.n_steps)
                          for i in range(traj.n_species)))
        if exact_at is not None:
            errors.append(l1_error(traj.densities[-1][0], exact_at(traj)))
        elif traj is reference:
            errors.append(0.0)
        else:
            errors.append(sum(
                l1_error(traj.densities[-1][i], reference.densities[-1][i].values)
                for i in range(traj.n_species)))

    print(f"{'h':>12} {'error':>14} {'order':>8} {'sum_W2sq':>14}")
    rows = []
    for j, (h, err, w2) in enumerate(zip(levels, errors, w2sums)):
        order = ""
        if j > 0 and errors[j] > 0 and errors[j - 1] > 0:
            order = f"{math.log2(errors[j - 1] / errors[j]):.2f}"
        print(f"{h:>12.6g} {err:>14.6g} {order:>8} {w2:>14.6g}")
        rows.append([h, err, w2])

    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    if "csv" in cfg.formats:
        with open(outdir / "convergence.csv", "w") as fh:
            fh.write("h,error,sum_W2sq\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    if "png" in cfg.formats:
        from .figures import save_convergence

        n_err = [e for e in errors if e > 0]
        n_lev = [h for h, e in zip(levels, errors) if e > 0]
        if n_err:
            save_convergence(n_lev, n_err, outdir / "fig_convergence.png",
                             ylabel="L1 error")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare

def cmd_compare(dir_a, dir_b, output=None) -> int:
    from .config import ConfigError
    from .diagnostics import fit_growth_rate
    from .grid import _fmt, load_density
    from . import transport

    def load_checkpoint(d):
        path = Path(d) / "checkpoint.json"
        if not path.exists():
            raise ConfigError(f"{d}: missing checkpoint.json")
        return json.loads(path.read_text())

    ck_a = load_checkpoint(dir_a)
    ck_b = load_checkpoint(dir_b)
    if ck_a["species"] != ck_b["species"]:
        raise ConfigError("runs have different species counts")
    if not math.isclose(ck_a["h"], ck_b["h"], rel_tol=1e-12):
        raise ConfigError("runs have different time steps")
    common = [k for k in ck_a["recorded_steps"] if k in set(ck_b["recorded_steps"])]
    if not common:
        raise ConfigError("runs share no recorded steps")

    l = ck_a["species"]
    times = []
    totals = []
    per_species = []
    for k in common:
        row = []
        total = 0.0
        for i in range(l):
            da = load_density(Path(dir_a) / ck_a["snapshots"][str(k)][i])
            db = load_density(Path(dir_b) / ck_b["snapshots"][str(k)][i])
            if not da.grid.same_as(db.grid):
                raise ConfigError("runs live on different grids")
            if da.grid.dim == 1:
                dist = transport.w2_exact_1d(da, db).distance
            else:
                eps = min(da.grid.spacing) ** 2
                dist = math.sqrt(max(transport.sinkhorn_divergence(da, db, eps), 0.0))
            row.append(dist)
            total += dist * dist
        times.append(k * ck_a["h"])
        per_species.append(row)
        totals.append(total)

    header = ["t"] + [f"W2_{i + 1}" for i in range(l)] + ["sum_W2sq"]
    print(" ".join(f"{h:>14}" for h in header))
    for t, row, tot in zip(times, per_species, totals):
        print(" ".join(f"{v:>14.6g}" for v in [t] + row + [tot]))
    rate = fit_growth_rate(times, totals)
    print(f"fitted growth rate of log sum W2^2: {rate:.6g}")

    if output:
        outdir = Path(output)
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "compare.csv", "w") as fh:
            fh.write(",".join(header) + "\n")
            for t, row, tot in zip(times, per_species, totals):
                fh.write(",".join(_fmt(v) for v in [t] + row + [tot]) + "\n")
        from .figures import save_compare

        save_compare(times, totals, outdir / "fig_compare.png")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
