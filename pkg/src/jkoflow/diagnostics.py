"""Quantitative checks on computed trajectories plus closed-form baselines.

Everything here is a deterministic, read-only function of its inputs, so
reports are bit-identical across reruns and checks may run concurrently.
The refinement-style checks use factor thresholds rather than absolute
constants: the estimates being verified hold with non-explicit constants,
so acceptance is scaling-based.
"""

from __future__ import annotations

import math

import numpy as np

from .energy import InternalEnergy, eval_functional
from .grid import Density, Grid, GridField, discrete_gradient, second_moment
from .interaction import ExternalPotential, InteractionSpec, Kernel, zero_interaction
from .jko import QuantileState, SpeciesSystem, Trajectory, quantile_internal_energy, run_scheme
from .reporting import Report
from . import transport

DiagnosticsReport = Report


# ---------------------------------------------------------------------------
# closed-form reference solutions

def heat_density_values(grid: Grid, sigma0: float, t: float) -> np.ndarray:
    """Gaussian with variance sigma0^2 + 2t (the entropy-flow solution)."""
    var = sigma0**2 + 2.0 * t
    q = grid.center_sqnorm
    return np.exp(-0.5 * q / var) / (2.0 * np.pi * var) ** (grid.dim / 2.0)


_BARENBLATT_B = 0.75 ** (2.0 / 3.0)  # unit mass in 1-D for m = 2


def barenblatt_density_values(grid: Grid, t0: float, t: float) -> np.ndarray:
    """Self-similar quadratic-diffusion profile at time t0 + t (1-D, m = 2)."""
    if grid.dim != 1:
        raise ValueError("the self-similar profile is implemented in 1-D only")
    u = (12.0 * (t0 + t)) ** (-1.0 / 3.0)
    x = grid.axes[0]
    return u * np.maximum(_BARENBLATT_B - x**2 * u * u, 0.0)


def gibbs_density(grid: Grid, potential: ExternalPotential) -> Density:
    """Discrete stationary density exp(-U)/Z with the grid's own normalization."""
    vals = np.exp(-np.asarray(potential.value(grid.centers, grid.dim)))
    return Density(grid, vals / (vals.sum() * grid.cell_volume))


def density_from_values(grid: Grid, values) -> Density:
    values = np.asarray(values, dtype=float)
    return Density(grid, values / (values.sum() * grid.cell_volume))


def l1_error(rho: Density, exact_values) -> float:
    return float(np.sum(np.abs(rho.values - exact_values))) * rho.grid.cell_volume


# ---------------------------------------------------------------------------
# gradient estimates

def gradient_estimate_L2H1(traj: Trajectory, system: SpeciesSystem, i: int) -> float:
    """Squared L2-in-time H1 norm of rho^{m/2} accumulated over the run.

    Defined for m > 1 (for m = 1 the diffusion term is already linear and
    the estimate is not needed); returns nan in that case.
    """
    m = system.energies[i].m
    if m <= 1.0:
        return float("nan")
    total = 0.0
    for k in range(1, traj.n_steps + 1):
        rho = traj.densities[k][i]
        half_power = rho.values ** (m / 2.0)
        grad = discrete_gradient(GridField(rho.grid, half_power)).values
        total += float(np.sum(grad**2)) * rho.grid.cell_volume
        total += float(np.sum(half_power**2)) * rho.grid.cell_volume
    return traj.h * total


def gradient_estimate_L1W11(traj: Trajectory, system: SpeciesSystem, i: int) -> float:
    """L1-in-time W^{1,1} norm of rho^m accumulated over the run."""
    m = system.energies[i].m
    total = 0.0
    for k in range(1, traj.n_steps + 1):
        rho = traj.densities[k][i]
        power = rho.values**m
        grad = discrete_gradient(GridField(rho.grid, power)).values
        total += float(np.sum(power)) * rho.grid.cell_volume
        total += float(np.sum(np.abs(grad))) * rho.grid.cell_volume
    return traj.h * total


def benamou_brenier_action(traj: Trajectory, i: int) -> float:
    """Kinetic action of the trajectory: h sum_k sum_cells psi(rho, flux).

    psi(r, m) = |m|^2 / r with psi(0, 0) = 0 and psi(0, m != 0) = +inf, so a
    nonzero flux on a vacuum cell flags the whole value as infinite.  The
    per-step terms are recorded by the scheme (flux = grad P(rho^k) +
    rho^k grad V[rho^{k-1}]).
    """
    terms = [traj.records[k][i].action_term for k in range(traj.n_steps)]
    if any(math.isinf(t) for t in terms):
        return float("inf")
    return traj.h * float(np.sum(terms))


def holder_constant(traj: Trajectory, i: int, n_samples: int = 16) -> float:
    """Empirical constant in W2(rho(t), rho(s)) <= C (|t-s| + h)^(1/2)."""
    n = traj.n_steps
    idx = np.unique(np.linspace(0, n, min(n_samples, n + 1)).astype(int))
    best = 0.0
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            ka, kb = idx[a], idx[b]
            d = transport.w2_exact_1d(traj.densities[ka][i], traj.densities[kb][i]).distance
            best = max(best, d / math.sqrt((kb - ka) * traj.h + traj.h))
    return best


# ---------------------------------------------------------------------------
# displacement convexity along geodesics

def displacement_energy_profile(energy: InternalEnergy, rho: Density, mu: Density, ts):
    """Internal energy along the displacement interpolation of two densities.

    Evaluated in the geodesic's own mass-coordinate representation (linear
    interpolation of the quantile maps on merged mass knots): for energies
    satisfying the displacement-convexity condition the profile is convex
    exactly, without the O(dx) noise cell re-binning would inject.
    """
    qa = QuantileState.from_density(rho)
    qb = QuantileState.from_density(mu)
    su = np.union1d(qa.sigma, qb.sigma)
    xa = np.interp(su, qa.sigma, qa.x)
    xb = np.interp(su, qb.sigma, qb.x)
    w = np.diff(su)
    return np.array(
        [quantile_internal_energy(energy, w, (1.0 - t) * xa + t * xb) for t in ts]
    )


# ---------------------------------------------------------------------------
# trajectory comparison / contraction

def trajectory_distances(traj_a: Trajectory, traj_b: Trajectory, epsilon: float = None):
    """Summed squared distances sum_i W2^2(rho_i^a(t), rho_i^b(t)) per step.

    Exact in 1-D; in 2-D falls back to the debiased entropic cost (epsilon
    defaults to dx^2 and is reported by callers).
    """
    if traj_a.n_steps != traj_b.n_steps or not traj_a.grid.same_as(traj_b.grid):
        raise ValueError("trajectories must share grid and step count")
    n = traj_a.n_steps
    out = np.zeros(n + 1)
    for k in range(n + 1):
        if traj_a.grid.dim == 1:
            out[k] = transport.product_w2_sq(traj_a.densities[k], traj_b.densities[k])
        else:
            eps = epsilon if epsilon is not None else min(traj_a.grid.spacing) ** 2
            out[k] = sum(
                max(transport.sinkhorn_divergence(a, b, eps), 0.0)
                for a, b in zip(traj_a.densities[k], traj_b.densities[k])
            )
    return out


def fit_growth_rate(times, values) -> float:
    """Least-squares slope of log(values) over the second half of the window.

    The bound being checked is global in time but start-up noise dominates
    the first steps, so the fit skips them.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    half = len(t) // 2
    t, v = t[half:], v[half:]
    if np.all(v < 1e-300):
        return float("-inf")
    logv = np.log(np.maximum(v, 1e-300))
    a = np.vstack([t, np.ones_like(t)]).T
    slope, _ = np.linalg.lstsq(a, logv, rcond=None)[0]
    return float(slope)


def contraction_check(system: SpeciesSystem, init_a, init_b, h: float, T: float,
                      solver: str = "exact1d", margin: float = 0.5,
                      epsilon: float = None, tol: float = None) -> Report:
    """Run two trajectories and bound the growth rate of their distance.

    Pass iff the fitted rate of log sum_i W2^2 is at most 4 C + margin with
    C the certified second-derivative constant of the interaction (the
    contraction estimate's constant aggregates the regularity hypotheses;
    the margin absorbs both that aggregation and discretization).
    """
    traj_a = run_scheme(system, init_a, h, T, solver=solver, epsilon=epsilon, tol=tol)
    traj_b = run_scheme(system, init_b, h, T, solver=solver, epsilon=epsilon, tol=tol)
    d = trajectory_distances(traj_a, traj_b, epsilon)
    report = Report("contraction")
    c_cert = system.interaction.hessian_constant * math.sqrt(system.grid.dim)
    bound = 4.0 * c_cert + margin
    if float(np.max(d)) <= 1e-14:
        report.add("growth_rate", float("-inf"), bound)
    else:
        report.add("growth_rate", fit_growth_rate(traj_a.times, d), bound)
    report.info["certified_constant"] = c_cert
    report.info["lipschitz_constant"] = system.interaction.lipschitz_constant
    report.info["margin"] = margin
    report.info["distances"] = d
    report.info["times"] = traj_a.times
    if system.grid.dim > 1:
        report.info["entropic_epsilon"] = (
            epsilon if epsilon is not None else min(system.grid.spacing) ** 2
        )
    return report


# ---------------------------------------------------------------------------
# closed-form baselines

_BASELINE_BOUNDS = {"heat": 0.02, "barenblatt": 0.05}


def closed_form_baseline(name: str, params: dict, h: float, grid: Grid,
                         solver: str = "exact1d", tol: float = None,
                         epsilon: float = None) -> Report:
    """Run one named baseline and report errors against its exact solution.

    heat:       entropy energy, no interaction, Gaussian initial data
                (params: sigma0, T); exact solution is the widening Gaussian.
    barenblatt: quadratic diffusion from the self-similar profile
                (params: t0, T); exact solution is the translated-in-time
                profile, the standard degenerate-diffusion benchmark.
    gibbs:      entropy plus smoothed quadratic confinement started at the
                stationary density (params: radius, steps); the check is
                that the scheme does not drift off the fixed point.
    """
    params = dict(params)
    report = Report(f"baseline_{name}")
    if name == "heat":
        sigma0 = float(params.pop("sigma0", 0.3))
        T = float(params.pop("T"))
        system = SpeciesSystem(grid, (InternalEnergy("entropy"),), zero_interaction(1))
        rho0 = density_from_values(grid, heat_density_values(grid, sigma0, 0.0))
        traj = run_scheme(system, [rho0], h, T, solver=solver, tol=tol, epsilon=epsilon)
        exact = heat_density_values(grid, sigma0, traj.n_steps * h)
        bound = float(params.pop("l1_bound", _BASELINE_BOUNDS["heat"]))
        report.add("l1_error", l1_error(traj.densities[-1][0], exact), bound)
        if grid.dim == 1:
            report.info["w2_error"] = transport.w2_exact_1d(
                traj.densities[-1][0], density_from_values(grid, exact)).distance
        report.info["l1_series"] = [
            l1_error(traj.densities[k][0], heat_density_values(grid, sigma0, k * h))
            for k in range(traj.n_steps + 1)
        ]
    elif name == "barenblatt":
        t0 = float(params.pop("t0", 0.5))
        T = float(params.pop("T"))
        system = SpeciesSystem(grid, (InternalEnergy("power", m=2.0),), zero_interaction(1))
        rho0 = density_from_values(grid, barenblatt_density_values(grid, t0, 0.0))
        traj = run_scheme(system, [rho0], h, T, solver=solver, tol=tol, epsilon=epsilon)
        exact = barenblatt_density_values(grid, t0, traj.n_steps * h)
        bound = float(params.pop("l1_bound", _BASELINE_BOUNDS["barenblatt"]))
        report.add("l1_error", l1_error(traj.densities[-1][0], exact), bound)
        report.info["w2_error"] = transport.w2_exact_1d(
            traj.densities[-1][0], density_from_values(grid, exact)).distance
    elif name == "gibbs":
        radius = float(params.pop("radius", 4.0))
        steps = int(params.pop("steps", 100))
        confinement = ExternalPotential("quadratic", radius=radius,
                                        center=(0.0,) * grid.dim)
        spec = InteractionSpec(kernels=((Kernel("zero"),),), external=(confinement,))
        system = SpeciesSystem(grid, (InternalEnergy("entropy"),), spec)
        rho0 = gibbs_density(grid, confinement)
        traj = run_scheme(system, [rho0], h, steps * h, solver=solver, tol=tol,
                          epsilon=epsilon)
        drifts = [
            transport.w2_exact_1d(traj.densities[k][0], rho0).distance
            if grid.dim == 1 else
            math.sqrt(max(transport.sinkhorn_divergence(
                traj.densities[k][0], rho0, min(grid.spacing) ** 2), 0.0))
            for k in range(traj.n_steps + 1)
        ]
        bound = float(params.pop("drift_bound", 2.0 * max(grid.spacing)))
        report.add("w2_drift", float(np.max(drifts)), bound)
        report.info["drift_series"] = drifts
    else:
        raise ValueError(f"unknown baseline {name!r}")
    report.info["h"] = h
    report.info["solver"] = solver
    return report


# ---------------------------------------------------------------------------
# per-step time series (the delimited report the CLI writes out)

TIME_SERIES_COLUMNS = ("mass", "M", "F", "V", "W2sq_increment", "residual", "action")


def time_series_rows(traj: Trajectory, system: SpeciesSystem):
    """Header and rows of the per-step diagnostics table (one row per step)."""
    l = traj.n_species
    header = ["t"]
    for i in range(1, l + 1):
        header.extend(f"{c}_{i}" for c in TIME_SERIES_COLUMNS)
    rows = []
    for k in range(traj.n_steps + 1):
        row = [k * traj.h]
        for i in range(l):
            rho = traj.densities[k][i]
            if k == 0:
                mass = rho.mass
                f_val = eval_functional(system.energies[i], rho)
                v_val = _initial_interaction(system, i, traj.densities[0])
                w2, resid, action = 0.0, float("nan"), float("nan")
            else:
                rec = traj.records[k - 1][i]
                mass = rec.mass_before_renorm
                f_val = rec.internal_energy
                v_val = rec.interaction_energy
                w2, resid, action = rec.w2_sq, rec.optimality_residual, rec.action_term
            row.extend([mass, second_moment(rho), f_val, v_val, w2, resid, action])
        rows.append(row)
    return header, rows


def _initial_interaction(system, i, initial):
    if system.interaction.is_zero:
        return 0.0
    from .interaction import eval_interaction_functional

    return eval_interaction_functional(system.interaction, i, initial[i], list(initial))
