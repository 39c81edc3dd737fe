"""Semi-implicit minimizing-movement time stepping for interacting species.

Each step advances every species i by minimizing

    (1/2h) W2^2(rho, rho_i^{k-1}) + F_i(rho) + integral of V_i[rho^{k-1}] rho,

with the interaction potential frozen at the full previous species vector,
which is what decouples the per-species subproblems and admits
non-proportional cross kernels.

Two inner solvers are provided:

* ``exact1d`` works in mass (quantile) coordinates: node positions X(s) on a
  fixed cumulative-mass knot grid, the transport term integrated exactly for
  piecewise-linear X, the internal energy evaluated segment-wise, and a
  damped projected Newton iteration on the monotone cone.  The knot grid is
  built once from the initial data (four sub-parcels per occupied cell) and
  persists across steps, so re-binning to cells happens only when a snapshot
  is taken and never feeds back into the dynamics.

* ``entropic`` runs generalized scaling iterations on the entropy-regularized
  step: alternately matching the previous-iterate marginal and applying the
  cell-wise KL-proximal of the internal energy tilted by the frozen
  potential.  It is the only choice in 2-D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from .energy import InternalEnergy, eval_functional, kl_prox_log
from .grid import Density, Grid, GridError, GridField, discrete_gradient
from .interaction import InteractionSpec, assemble_potential
from .transport import _lse_apply_1d, _lse_apply_2d, _sq_dist_matrix

_LOG_FLOOR = 1e-300


class SolverError(RuntimeError):
    """Inner solver failed to reach its tolerance."""

    def __init__(self, message, residual=float("nan"), step=None, species=None):
        super().__init__(message)
        self.residual = residual
        self.step = step
        self.species = species


@dataclass(frozen=True)
class SpeciesSystem:
    """Grid, one internal energy per species, and the interaction spec."""

    grid: Grid
    energies: tuple
    interaction: InteractionSpec

    def __post_init__(self):
        object.__setattr__(self, "energies", tuple(self.energies))
        if len(self.energies) != self.interaction.n_species:
            raise GridError(
                f"{len(self.energies)} energies vs "
                f"{self.interaction.n_species} interaction species"
            )
        if not np.isfinite(self.interaction.lipschitz_constant):
            raise GridError("interaction constants must be finite")

    @property
    def n_species(self) -> int:
        return len(self.energies)


@dataclass
class StepRecord:
    """Per-step, per-species scheme data and solver statistics."""

    w2_sq: float                  # squared movement in the solver's metric
    internal_energy: float        # F_i(rho^k) on the grid
    interaction_energy: float     # frozen-potential energy of rho^k
    objective_prev: float         # E_{i,h}(rho^{k-1} | frozen) in the solver
    objective_new: float          # E_{i,h}(rho^k | frozen) in the solver
    dissipation_slack: float      # descent violation; see _advance_species
    mass_before_renorm: float
    renorm_factor: float
    optimality_residual: float    # L1 Euler-Lagrange residual; nan if n/a
    action_term: float            # per-step kinetic-action integrand
    potential_grad_sup: float     # sup |grad V_i| seen this step
    iterations: int
    solver_residual: float
    converged: bool


@dataclass
class Trajectory:
    """Scheme output: densities at every step plus per-step records."""

    grid: Grid
    h: float
    solver: str
    epsilon: float
    densities: list = field(default_factory=list)   # densities[k][i]
    records: list = field(default_factory=list)     # records[k][i], k >= 1 offset 0

    @property
    def n_steps(self) -> int:
        return len(self.records)

    @property
    def n_species(self) -> int:
        return len(self.densities[0])

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.n_steps + 1)

    def interpolate(self, t: float, i: int) -> Density:
        """Piecewise-constant interpolation: rho(t) = rho^k on ((k-1)h, kh]."""
        if t < 0:
            raise GridError("time must be nonnegative")
        if t == 0:
            return self.densities[0][i]
        k = int(math.ceil(t / self.h - 1e-12))
        if k > self.n_steps:
            raise GridError(f"time {t} beyond trajectory end {self.n_steps * self.h}")
        return self.densities[k][i]


# ---------------------------------------------------------------------------
# mass-coordinate (quantile) representation

class QuantileState:
    """Piecewise-linear quantile of a 1-D density on fixed mass knots.

    ``sigma`` are cumulative-mass knots in [0, 1], ``x`` the node positions.
    Segment k carries mass w_k = sigma_{k+1} - sigma_k spread uniformly over
    (x_k, x_{k+1}); vacuum gaps appear as zero-mass segments.  Conversion to
    cells and back is exact for states produced by ``from_density``.
    """

    __slots__ = ("sigma", "x", "w")

    def __init__(self, sigma, x):
        self.sigma = np.asarray(sigma, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.w = np.diff(self.sigma)

    @classmethod
    def from_density(cls, rho: Density, subdiv: int = 4,
                     mass_floor: float = 1e-13) -> "QuantileState":
        grid = rho.grid
        if grid.dim != 1:
            raise GridError("quantile states are 1-D only")
        edges = grid.edges[0]
        masses = rho.cell_masses()
        cum = np.concatenate(([0.0], np.cumsum(masses)))
        cum[-1] = 1.0
        occupied = np.flatnonzero(masses > 0.0)
        sig = []
        pos = []
        barrier = []
        prev = None
        for c in occupied:
            if prev is None or c != prev + 1:
                if prev is not None:
                    barrier[-1] = True      # right end of the vacuum span
                sig.append(cum[c])
                pos.append(edges[c])
                barrier.append(prev is not None)
            frac = np.arange(1, subdiv + 1) / subdiv
            sig.extend(cum[c] + masses[c] * frac)
            pos.extend(edges[c] + grid.spacing[0] * frac)
            barrier.extend([False] * subdiv)
            prev = c
        sigma = np.asarray(sig)
        sigma[-1] = 1.0
        pos = np.asarray(pos)
        barrier = np.asarray(barrier)
        # Merge parcels below the mass floor into their neighbors: segments
        # carrying less mass than float resolution allows would otherwise
        # collapse to zero-width gaps once the flow compresses them.  Only
        # knots delimiting genuine vacuum spans survive unconditionally.
        n = len(sigma)
        keep = np.zeros(n, dtype=bool)
        keep[0] = keep[-1] = True
        last_sig = sigma[0]
        for k in range(1, n - 1):
            if barrier[k] or sigma[k] - last_sig >= mass_floor:
                keep[k] = True
                last_sig = sigma[k]
        sigma, pos, barrier = sigma[keep], pos[keep], barrier[keep]
        # fold a sub-floor trailing chunk into the previous parcel
        if len(sigma) > 2 and 0.0 < sigma[-1] - sigma[-2] < mass_floor \
                and not barrier[-2]:
            sigma = np.delete(sigma, -2)
            pos = np.delete(pos, -2)
        return cls(sigma, pos)

    def to_density(self, grid: Grid) -> Density:
        """Exact pushforward onto cells through the piecewise-linear CDF."""
        edges = grid.edges[0]
        cdf = np.interp(edges, self.x, self.sigma, left=0.0, right=1.0)
        masses = np.diff(cdf)
        return Density(grid, masses / grid.cell_volume)

    def raw_mass(self, grid: Grid) -> float:
        edges = grid.edges[0]
        cdf = np.interp(edges, self.x, self.sigma, left=0.0, right=1.0)
        return float(np.sum(np.diff(cdf)))


def quantile_distance_sq(w, x_a, x_b) -> float:
    """Exact integral over (0,1) of |X_a - X_b|^2 for shared-knot states."""
    d = x_a - x_b
    dl, dr = d[:-1], d[1:]
    return float(np.sum(w / 3.0 * (dl * dl + dl * dr + dr * dr)))


def quantile_internal_energy(energy: InternalEnergy, w, x) -> float:
    g = np.diff(x)
    pos = w > 0.0
    val = np.zeros_like(w)
    val[pos] = g[pos] * energy.F(w[pos] / g[pos])
    return float(np.sum(val))


def _node_masses(w):
    m = np.zeros(len(w) + 1)
    m[:-1] += 0.5 * w
    m[1:] += 0.5 * w
    return m


# ---------------------------------------------------------------------------
# frozen interaction potential with consistent value/derivative evaluation

class FrozenPotential1D:
    """V_i[rho^{k-1}] tabulated on a fine knot grid, evaluated by cubic
    Hermite interpolation so that value and gradient are exactly consistent
    (the gradient returned is the derivative of the value returned, which the
    line search relies on near convergence)."""

    def __init__(self, spec: InteractionSpec, i: int, rhos, knots_per_cell: int = 8):
        grid = rhos[0].grid
        lo, hi = grid.lower[0], grid.upper[0]
        nk = knots_per_cell * grid.cells[0] + 1
        z = np.linspace(lo, hi, nk)
        u = spec.external[i]
        val = np.asarray(u.value(z, 1), dtype=float)
        der = np.asarray(u.grad(z, 1), dtype=float)[..., 0]
        der2 = np.asarray(u.d2_1d(z), dtype=float)
        xc = grid.axes[0]
        for j, rho in enumerate(rhos):
            k = spec.kernels[i][j]
            if k.is_zero:
                continue
            offs = z[:, None] - xc[None, :]
            masses = rho.cell_masses()
            if k.family == "constant":
                val += k.amplitude * masses.sum()
                continue
            s2 = k.sigma**2
            e = k.amplitude * np.exp(-0.5 * offs**2 / s2)
            val += e @ masses
            der += (-offs / s2 * e) @ masses
            der2 += ((offs**2 / s2**2 - 1.0 / s2) * e) @ masses
        self.z = z
        self.dz = z[1] - z[0]
        self.val = val
        self.der = der
        self.der2 = der2
        self.grad_sup = float(np.max(np.abs(der)))

    def _locate(self, x):
        idx = np.clip(((x - self.z[0]) / self.dz).astype(int), 0, len(self.z) - 2)
        t = (x - self.z[idx]) / self.dz
        return idx, t

    def value(self, x):
        idx, t = self._locate(x)
        v0, v1 = self.val[idx], self.val[idx + 1]
        d0, d1 = self.der[idx], self.der[idx + 1]
        h00 = (1 + 2 * t) * (1 - t) ** 2
        h10 = t * (1 - t) ** 2
        h01 = t * t * (3 - 2 * t)
        h11 = t * t * (t - 1)
        return h00 * v0 + self.dz * h10 * d0 + h01 * v1 + self.dz * h11 * d1

    def grad(self, x):
        idx, t = self._locate(x)
        v0, v1 = self.val[idx], self.val[idx + 1]
        d0, d1 = self.der[idx], self.der[idx + 1]
        g00 = 6 * t * t - 6 * t
        g10 = 3 * t * t - 4 * t + 1
        g01 = 6 * t - 6 * t * t
        g11 = 3 * t * t - 2 * t
        return (g00 * v0 + g01 * v1) / self.dz + g10 * d0 + g11 * d1

    def hess(self, x):
        return np.interp(x, self.z, self.der2)


# ---------------------------------------------------------------------------
# exact 1-D inner solver: damped Newton in mass coordinates

def _step_objective(x, x_prev, w, h, energy, pot):
    j = quantile_distance_sq(w, x, x_prev) / (2.0 * h)
    j += quantile_internal_energy(energy, w, x)
    if pot is not None:
        j += float(np.sum(_node_masses(w) * pot.value(x)))
    return j


def _step_gradient(x, x_prev, w, h, energy, pot, m):
    d = x - x_prev
    dl, dr = d[:-1], d[1:]
    grad = np.zeros_like(x)
    grad[:-1] += w / 3.0 * (2.0 * dl + dr) / (2.0 * h)
    grad[1:] += w / 3.0 * (2.0 * dr + dl) / (2.0 * h)
    g = np.diff(x)
    pos = w > 0.0
    eprime = np.zeros_like(w)
    eprime[pos] = -energy.pressure(w[pos] / g[pos])
    grad[1:] += eprime
    grad[:-1] -= eprime
    if pot is not None:
        grad += m * pot.grad(x)
    return grad


def _step_hessian_banded(x, w, h, energy, pot, m):
    g = np.diff(x)
    pos = w > 0.0
    esec = np.zeros_like(w)
    if energy.kind == "entropy":
        esec[pos] = energy.alpha * w[pos] / g[pos] ** 2
    else:
        esec[pos] = (w[pos] ** 2 / g[pos] ** 3) * energy.d2F(w[pos] / g[pos])
    diag = np.zeros_like(x)
    diag[:-1] += (2.0 / 3.0) * w / (2.0 * h) + esec
    diag[1:] += (2.0 / 3.0) * w / (2.0 * h) + esec
    upper = w / 3.0 / (2.0 * h) - esec
    if pot is not None:
        diag += m * np.maximum(pot.hess(x), 0.0)
    ab = np.zeros((2, len(x)))
    ab[0, 1:] = upper
    ab[1, :] = diag
    return ab


def _solve_banded_spd(ab, rhs, residual):
    damping = 0.0
    for _ in range(8):
        try:
            if damping:
                ab_try = ab.copy()
                ab_try[1, :] += damping
            else:
                ab_try = ab
            return solveh_banded(ab_try, rhs)
        except np.linalg.LinAlgError:
            damping = max(10.0 * damping, 1e-12 * np.max(ab[1]))
    raise SolverError("banded Hessian factorization failed", residual)


def _kkt_residual(grad, x, m, lo, hi):
    r = grad / m
    at_lo = x <= lo
    at_hi = x >= hi
    r = np.where(at_lo, np.minimum(r, 0.0), r)
    r = np.where(at_hi, np.maximum(r, 0.0), r)
    return r


def solve_quantile_step(x_prev, w, h, energy, pot, lo, hi,
                        gtol: float = 1e-10, max_iter: int = 60):
    """Minimize the single-species step objective over monotone node vectors.

    Newton directions from the banded Hessian (with the potential curvature
    clamped to keep it positive definite), step length capped to preserve
    positive gaps and the box, Armijo backtracking for global descent.
    Convergence is declared on the mass-scaled KKT residual; a Newton
    direction below the float resolution of the node positions also counts
    as converged, since no representable point can do better (this matters
    only for extremely small h, where the residual scale is eps/h).
    """
    m = _node_masses(w)
    x = x_prev.copy()
    j_val = _step_objective(x, x_prev, w, h, energy, pot)
    grad = _step_gradient(x, x_prev, w, h, energy, pot, m)
    flat_tol = 10.0 * np.finfo(float).eps
    iterations = 0
    residual = float(np.max(np.abs(_kkt_residual(grad, x, m, lo, hi))))
    for iterations in range(1, max_iter + 1):
        if residual <= gtol:
            return x, j_val, iterations - 1, residual, True
        ab0 = _step_hessian_banded(x, w, h, energy, pot, m)
        # pin wall-contact end nodes whose Newton move points outward
        # (monotonicity means only the two end nodes can touch the walls)
        pin_lo = pin_hi = False
        for _ in range(3):
            ab = ab0.copy()
            rhs = -grad.copy()
            if pin_lo:
                ab[1, 0] = 1.0
                ab[0, 1] = 0.0
                rhs[0] = 0.0
            if pin_hi:
                ab[1, -1] = 1.0
                ab[0, -1] = 0.0
                rhs[-1] = 0.0
            direction = _solve_banded_spd(ab, rhs, residual)
            need_lo = (not pin_lo) and x[0] <= lo and direction[0] < 0.0
            need_hi = (not pin_hi) and x[-1] >= hi and direction[-1] > 0.0
            if not (need_lo or need_hi):
                break
            pin_lo |= need_lo
            pin_hi |= need_hi
        if np.max(np.abs(direction)) <= 8.0 * np.finfo(float).eps * max(abs(lo), abs(hi)):
            return x, j_val, iterations, residual, True
        # cap the step so gaps stay positive and nodes stay in the box
        dg = np.diff(direction)
        gaps = np.diff(x)
        alpha = 1.0
        shrink = dg < 0
        if np.any(shrink):
            alpha = min(alpha, 0.95 * np.min(gaps[shrink] / -dg[shrink]))
        up = direction > 0
        dn = direction < 0
        if np.any(up):
            alpha = min(alpha, float(np.min((hi - x[up]) / direction[up])))
        if np.any(dn):
            alpha = min(alpha, float(np.min((x[dn] - lo) / -direction[dn])))
        if alpha <= 0.0 or not np.isfinite(alpha):
            raise SolverError("no feasible step length", residual)
        slope = float(np.dot(grad, direction))
        accepted = False
        for _ in range(40):
            x_try = np.clip(x + alpha * direction, lo, hi)
            j_try = _step_objective(x_try, x_prev, w, h, energy, pot)
            if j_try <= j_val + 1e-4 * alpha * slope + flat_tol * max(1.0, abs(j_val)):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
        x = x_try
        j_val = min(j_try, j_val)
        grad = _step_gradient(x, x_prev, w, h, energy, pot, m)
        residual = float(np.max(np.abs(_kkt_residual(grad, x, m, lo, hi))))
    converged = residual <= gtol
    return x, j_val, iterations, residual, converged


# ---------------------------------------------------------------------------
# entropic inner solver: generalized scaling with the KL-proximal

def _entropic_step(grid, energy, q_masses, v_cells, h, epsilon, tol, max_iter):
    """One entropy-regularized step; returns new cell masses and stats.

    Scaling form: gamma = diag(a) K diag(b) with K the Gibbs kernel of
    |x-y|^2 / eps; b enforces the previous-iterate marginal, a applies the
    cell-wise KL-proximal of the internal energy tilted by exp(-2h V / eps).
    All updates run in the log domain.
    """
    omega = grid.cell_volume
    tau = 2.0 * h / epsilon
    tilt = -2.0 * h * np.asarray(v_cells) / epsilon
    logq = np.where(q_masses > 0, np.log(np.maximum(q_masses, _LOG_FLOOR)), -np.inf)
    if grid.dim == 1:
        x = grid.axes[0]
        D = _sq_dist_matrix(x, x) / epsilon
        apply_k = lambda lw: _lse_apply_1d(lw, D)
    else:
        x0, x1 = grid.axes
        D0 = _sq_dist_matrix(x0, x0) / epsilon
        D1 = _sq_dist_matrix(x1, x1) / epsilon
        apply_k = lambda lw: _lse_apply_2d(lw, D0, D1)
    log_a = np.zeros(grid.shape)
    s = np.array(q_masses, dtype=float)
    residual = np.inf
    iterations = 0
    with np.errstate(invalid="ignore"):
        for iterations in range(1, max_iter + 1):
            log_b = logq - apply_k(log_a)
            log_z = apply_k(log_b)
            log_ztilde = log_z - np.log(omega) + tilt
            s_new = omega * kl_prox_log(energy, tau, log_ztilde.ravel()).reshape(grid.shape)
            log_a = np.where(s_new > 0,
                             np.log(np.maximum(s_new, _LOG_FLOOR)) - log_z,
                             -np.inf)
            residual = float(np.sum(np.abs(s_new - s)))
            s = s_new
            if residual <= tol:
                break
    # plan cost <gamma, c> for the movement record
    from .transport import _entropic_cost_2d

    if grid.dim == 1:
        la = log_a
        lb = log_b
        sq = _sq_dist_matrix(grid.axes[0], grid.axes[0])
        mat = np.exp(la[:, None] + lb[None, :] - sq / epsilon)
        cost = float(np.sum(mat * sq))
    else:
        cost = _entropic_cost_2d(log_a, log_b, *grid.axes, epsilon)
    return s, cost, iterations, residual, residual <= tol


# ---------------------------------------------------------------------------
# scheme driver

def default_epsilon(grid: Grid) -> float:
    """Entropic regularization matched to the spatial resolution (dx^2)."""
    return float(min(grid.spacing)) ** 2


def _check_initial_energy(system: SpeciesSystem, initial):
    for i, rho in enumerate(initial):
        f = eval_functional(system.energies[i], rho)
        v = 0.0
        if not system.interaction.is_zero:
            from .interaction import eval_interaction_functional

            v = eval_interaction_functional(system.interaction, i, rho, initial)
        if not np.isfinite(f + v):
            raise GridError(f"initial energy of species {i} is not finite")


def run_scheme(system: SpeciesSystem, initial, h: float, T: float,
               solver: str = "exact1d", epsilon: float = None, tol: float = None,
               best_effort: bool = False, subdiv: int = 4,
               max_iter: int = None) -> Trajectory:
    """Iterate the scheme for N = ceil(T/h) steps from the given initial data.

    All species in one step see the same frozen previous vector; species
    updates are independent of each other within the step (they could run
    concurrently) and records are kept in species order regardless.
    """
    if h <= 0:
        raise GridError("time step h must be positive")
    if T < 0:
        raise GridError("horizon T must be nonnegative")
    if solver not in ("exact1d", "entropic"):
        raise GridError(f"unknown solver {solver!r}")
    if solver == "exact1d" and system.grid.dim != 1:
        raise GridError("the exact1d solver requires a 1-D grid")
    initial = list(initial)
    if len(initial) != system.n_species:
        raise GridError("initial data count does not match species count")
    for rho in initial:
        system.grid.require_same(rho.grid)
    _check_initial_energy(system, initial)
    n_steps = max(1, int(math.ceil(T / h - 1e-12)))
    eps = default_epsilon(system.grid) if epsilon is None else float(epsilon)
    gtol = 1e-10 if tol is None else float(tol)
    traj = Trajectory(grid=system.grid, h=h, solver=solver, epsilon=eps)
    traj.densities.append(list(initial))
    states = None
    if solver == "exact1d":
        states = [QuantileState.from_density(rho, subdiv) for rho in initial]
    inner_max = max_iter if max_iter is not None else (60 if solver == "exact1d" else 5000)
    for k in range(n_steps):
        frozen = traj.densities[-1]
        new_densities = []
        recs = []
        for i in range(system.n_species):
            dens, rec, states_i = _advance_species(
                system, frozen, i, h, solver, eps, gtol, inner_max,
                states[i] if states else None, best_effort, k,
            )
            if states is not None:
                states[i] = states_i
            new_densities.append(dens)
            recs.append(rec)
        traj.densities.append(new_densities)
        traj.records.append(recs)
    return traj


def _advance_species(system, frozen, i, h, solver, eps, gtol, inner_max,
                     state, best_effort, k):
    energy = system.energies[i]
    spec = system.interaction
    grid = system.grid
    if solver == "exact1d":
        pot = None
        if not spec.is_zero:
            pot = FrozenPotential1D(spec, i, frozen)
        if state is None:
            state = QuantileState.from_density(frozen[i])
        lo, hi = grid.lower[0], grid.upper[0]
        obj_prev = _step_objective(state.x, state.x, state.w, h, energy, pot)
        try:
            x_new, obj_new, iters, resid, ok = solve_quantile_step(
                state.x, state.w, h, energy, pot, lo, hi, gtol, inner_max)
        except SolverError as err:
            err.step, err.species = k, i
            raise
        if not ok and not best_effort:
            raise SolverError(
                f"step {k} species {i}: residual {resid:g} above tolerance {gtol:g}",
                resid, k, i)
        new_state = QuantileState(state.sigma, x_new)
        raw_mass = new_state.raw_mass(grid)
        dens = new_state.to_density(grid)
        w2_sq = quantile_distance_sq(state.w, x_new, state.x)
        t_back = np.interp(grid.axes[0], x_new, state.x)
        resid_l1 = _el_residual(grid, energy, dens, pot, h, t_back)
        rec = StepRecord(
            w2_sq=w2_sq,
            internal_energy=eval_functional(energy, dens),
            interaction_energy=_frozen_energy(spec, i, dens, frozen),
            objective_prev=obj_prev,
            objective_new=obj_new,
            dissipation_slack=0.0,
            mass_before_renorm=raw_mass,
            renorm_factor=1.0 / raw_mass if raw_mass > 0 else float("inf"),
            optimality_residual=resid_l1,
            action_term=_action_term(grid, energy, dens, pot),
            potential_grad_sup=pot.grad_sup if pot else 0.0,
            iterations=iters,
            solver_residual=resid,
            converged=ok,
        )
        rec.dissipation_slack = max(0.0, rec.objective_new - rec.objective_prev)
        return dens, rec, new_state
    # entropic
    v_cells = np.zeros(grid.shape)
    if not spec.is_zero:
        v_cells = assemble_potential(spec, i, frozen).values
    q = frozen[i].cell_masses()
    s, cost, iters, resid, ok = _entropic_step(
        grid, energy, q, v_cells, h, eps, gtol, inner_max)
    if not ok and not best_effort:
        raise SolverError(
            f"step {k} species {i}: entropic residual {resid:g} above {gtol:g}",
            resid, k, i)
    raw_mass = float(s.sum())
    if raw_mass <= 0:
        raise SolverError(f"step {k} species {i}: entropic iterate lost all mass",
                          resid, k, i)
    dens = Density(grid, s / (raw_mass * grid.cell_volume))
    f_new = eval_functional(energy, dens)
    v_new = float(np.sum(v_cells * dens.values)) * grid.cell_volume
    f_prev = eval_functional(energy, frozen[i])
    v_prev = float(np.sum(v_cells * frozen[i].values)) * grid.cell_volume
    rec = StepRecord(
        w2_sq=cost,
        internal_energy=f_new,
        interaction_energy=v_new,
        objective_prev=f_prev + v_prev,
        objective_new=cost / (2.0 * h) + f_new + v_new,
        dissipation_slack=0.0,
        mass_before_renorm=raw_mass,
        renorm_factor=1.0 / raw_mass if raw_mass > 0 else float("inf"),
        optimality_residual=float("nan"),
        action_term=_action_term_cells(grid, energy, dens, v_cells if not spec.is_zero else None),
        potential_grad_sup=float(np.max(np.abs(np.stack(np.gradient(v_cells, *grid.spacing))))) if not spec.is_zero else 0.0,
        iterations=iters,
        solver_residual=resid,
        converged=ok,
    )
    # the plan cost in objective_new carries the eps-blur even for zero
    # movement, so the meaningful descent check is on the frozen energy
    # alone (the dissipation inequality implies it a fortiori)
    rec.dissipation_slack = max(0.0, (f_new + v_new) - rec.objective_prev)
    return dens, rec, None


def _frozen_energy(spec, i, rho, frozen):
    if spec.is_zero:
        return 0.0
    from .interaction import eval_interaction_functional

    return eval_interaction_functional(spec, i, rho, frozen)


def _el_residual(grid, energy, rho_new, pot, h, t_back):
    """L1 norm of (x - T(x)) rho + h grad(V) rho + h grad(P(rho)) on cells."""
    x = grid.axes[0]
    p_field = GridField(grid, energy.pressure(rho_new.values))
    dp = discrete_gradient(p_field).values[..., 0]
    gv = pot.grad(x) if pot is not None else 0.0
    resid = (x - t_back) * rho_new.values + h * gv * rho_new.values + h * dp
    return float(np.sum(np.abs(resid))) * grid.cell_volume


def _action_term(grid, energy, rho, pot):
    """Kinetic-action integrand sum psi(rho, grad P + rho grad V) |cell|."""
    flux = discrete_gradient(GridField(grid, energy.pressure(rho.values))).values[..., 0]
    if pot is not None:
        flux = flux + rho.values * pot.grad(grid.axes[0])
    return kinetic_action_sum(rho.values, flux[..., None], grid.cell_volume)


def _action_term_cells(grid, energy, rho, v_cells):
    flux = discrete_gradient(GridField(grid, energy.pressure(rho.values))).values
    if v_cells is not None:
        gv = np.stack(np.gradient(v_cells, *grid.spacing, edge_order=1), axis=-1) \
            if grid.dim > 1 else np.gradient(v_cells, grid.spacing[0], edge_order=1)[..., None]
        flux = flux + rho.values[..., None] * gv
    return kinetic_action_sum(rho.values, flux, grid.cell_volume)


def kinetic_action_sum(r, m_vec, cell_volume) -> float:
    """Sum of psi(r, m) |cell| with psi = |m|^2/r, psi(0,0) = 0, else inf."""
    msq = np.sum(m_vec**2, axis=-1)
    out = np.zeros_like(msq)
    pos = r > 0
    out[pos] = msq[pos] / r[pos]
    bad = (~pos) & (msq > 0)
    if np.any(bad):
        return float("inf")
    return float(np.sum(out)) * cell_volume


def jko_step(system: SpeciesSystem, prev, i: int, h: float,
             solver: str = "exact1d", epsilon: float = None, tol: float = None):
    """One proximal step for species i with the interaction frozen at ``prev``.

    Returns the new density and its step record.  ``prev`` must contain the
    full previous species vector even though only species i advances.
    """
    if not 0 <= i < system.n_species:
        raise GridError(f"species index {i} out of range")
    prev = list(prev)
    for rho in prev:
        system.grid.require_same(rho.grid)
    eps = default_epsilon(system.grid) if epsilon is None else float(epsilon)
    gtol = 1e-10 if tol is None else float(tol)
    inner_max = 60 if solver == "exact1d" else 5000
    dens, rec, _ = _advance_species(system, prev, i, h, solver, eps, gtol,
                                    inner_max, None, False, 0)
    return dens, rec


def optimality_residual(system: SpeciesSystem, prev, rho_new: Density,
                        i: int, h: float) -> float:
    """Standalone Euler-Lagrange residual from cell data.

    Uses the exact monotone map from rho_new back to the previous iterate
    (1-D only; entropic trajectories have no map and get nan).
    """
    if system.grid.dim != 1:
        return float("nan")
    from .transport import w2_exact_1d

    t_back = w2_exact_1d(rho_new, prev[i]).map
    pot = None
    if not system.interaction.is_zero:
        pot = FrozenPotential1D(system.interaction, i, list(prev))
    return _el_residual(system.grid, system.energies[i], rho_new, pot, h, t_back)
