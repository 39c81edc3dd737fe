"""Optimal-transport primitives.

Exact 1-D quadratic/linear Wasserstein distances with the monotone optimal
map, a log-domain entropic (Sinkhorn) solver for 1-D and 2-D grids, a small
linear-programming oracle for cross-checks, and displacement interpolation.

The 1-D exact routines treat a grid density as the atomic measure carrying
each cell's mass at the cell center; the quantile integral between two such
measures is computed exactly by merging the cumulative-mass breakpoints, so
it agrees with the linear-programming optimum to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from .grid import Density, Grid

_SUPPORT_FLOOR = 0.0      # cells with mass strictly above this count as support
_LOG_FLOOR = 1e-300


class TransportError(ValueError):
    pass


@dataclass
class TransportResult:
    """Outcome of one transport solve.

    ``cost`` is squared-distance-valued for quadratic problems; ``map`` is
    the per-cell image point (1-D exact only, monotone nondecreasing);
    ``potentials`` is the dual pair from the entropic solver.
    """

    cost: float
    map: np.ndarray = None
    potentials: tuple = None
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    plan: np.ndarray = None

    @property
    def distance(self) -> float:
        return float(np.sqrt(max(self.cost, 0.0)))


def _require_1d_pair(rho: Density, mu: Density):
    if rho.grid.dim != 1:
        raise TransportError("exact transport routines are 1-D only")
    rho.grid.require_same(mu.grid)


def _atoms(rho: Density):
    x = rho.grid.axes[0]
    p = rho.cell_masses()
    keep = p > _SUPPORT_FLOOR
    return x[keep], p[keep]


def _merged_quantile_integral(x1, p1, x2, p2, power: int) -> float:
    """Integral over s in (0,1) of |Q1(s) - Q2(s)|^power for atomic measures."""
    c1 = np.cumsum(p1)
    c2 = np.cumsum(p2)
    c1[-1] = 1.0
    c2[-1] = 1.0
    s = np.union1d(c1, c2)
    ds = np.diff(np.concatenate(([0.0], s)))
    i1 = np.minimum(np.searchsorted(c1, s, side="left"), len(x1) - 1)
    i2 = np.minimum(np.searchsorted(c2, s, side="left"), len(x2) - 1)
    d = np.abs(x1[i1] - x2[i2])
    return float(np.sum(ds * d**power))


def w2_exact_1d(rho: Density, mu: Density) -> TransportResult:
    """Exact quadratic transport between two 1-D grid densities.

    Returns the squared cost and the monotone map T with T(x_c) the image of
    cell c's mass point; T is evaluated on every cell through the composed
    quantile functions, so it is nondecreasing across the whole grid.
    """
    _require_1d_pair(rho, mu)
    xs, ps = _atoms(rho)
    xt, pt = _atoms(mu)
    cost = _merged_quantile_integral(xs, ps, xt, pt, 2)
    p_all = rho.cell_masses()
    cum = np.cumsum(p_all)
    s_mid = np.clip(cum - 0.5 * p_all, 0.0, 1.0)
    ct = np.cumsum(pt)
    ct[-1] = 1.0
    it = np.minimum(np.searchsorted(ct, s_mid, side="left"), len(xt) - 1)
    return TransportResult(cost=cost, map=xt[it])


def w1_exact_1d(rho: Density, mu: Density) -> float:
    """First-order Wasserstein distance: integral of the CDF gap."""
    _require_1d_pair(rho, mu)
    dx = rho.grid.spacing[0]
    cr = np.cumsum(rho.cell_masses())
    cm = np.cumsum(mu.cell_masses())
    return float(np.sum(np.abs(cr[:-1] - cm[:-1]))) * dx


def product_w2_sq(rhos_a, rhos_b) -> float:
    """Squared product distance: sum_i W2^2(a_i, b_i) (1-D exact)."""
    return sum(w2_exact_1d(a, b).cost for a, b in zip(rhos_a, rhos_b))


# ---------------------------------------------------------------------------
# entropic solver (log domain; separable kernel in 2-D)

def _sq_dist_matrix(x, y):
    return (x[:, None] - y[None, :]) ** 2


def _lse_apply_1d(w, D_over_eps):
    # out[i] = log sum_j exp(w[j] - D[i, j] / eps)
    return logsumexp(w[None, :] - D_over_eps, axis=1)


def _lse_apply_2d(w, D0_over_eps, D1_over_eps):
    # out[x0, x1] = log sum_{y0, y1} exp(w[y0, y1] - D0[x0, y0] - D1[x1, y1])
    a = logsumexp(w[:, None, :] - D1_over_eps[None, :, :], axis=2)   # (ny0, nx1)
    return logsumexp(a[None, :, :] - D0_over_eps[:, :, None], axis=1)


def sinkhorn(rho: Density, mu: Density, epsilon: float, tol: float = 1e-9,
             max_iter: int = 20000) -> TransportResult:
    """Entropic transport with cost |x - y|^2 via log-domain scaling.

    Alternates the two marginal updates on the dual potentials (each update
    is a stabilized log-sum-exp, i.e. max-subtraction happens every
    iteration) and stops when the L1 violation of the free marginal drops
    below ``tol``.  Returns the plan cost <gamma, c> and the dual pair; the
    plan itself is implied by the potentials.
    """
    rho.grid.require_same(mu.grid)
    if epsilon <= 0:
        raise TransportError("epsilon must be positive")
    if rho.grid.dim == 1:
        return _sinkhorn_1d(rho, mu, epsilon, tol, max_iter)
    return _sinkhorn_2d(rho, mu, epsilon, tol, max_iter)


def _sinkhorn_1d(rho, mu, epsilon, tol, max_iter):
    xs, p = _atoms(rho)
    xt, q = _atoms(mu)
    logp = np.log(np.maximum(p, _LOG_FLOOR))
    logq = np.log(np.maximum(q, _LOG_FLOOR))
    D = _sq_dist_matrix(xs, xt) / epsilon
    f = np.zeros(len(xs))
    g = np.zeros(len(xt))
    residual = np.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        f = -epsilon * _lse_apply_1d(g / epsilon + logq, D)
        g = -epsilon * _lse_apply_1d(f / epsilon + logp, D.T)
        # row marginals of the implied plan
        row = np.exp(f / epsilon + logp + _lse_apply_1d(g / epsilon + logq, D))
        residual = float(np.sum(np.abs(row - p)))
        if residual <= tol:
            break
    M = (f[:, None] + g[None, :] - _sq_dist_matrix(xs, xt)) / epsilon \
        + logp[:, None] + logq[None, :]
    gamma = np.exp(M)
    cost = float(np.sum(gamma * _sq_dist_matrix(xs, xt)))
    return TransportResult(cost=cost, potentials=(f, g), iterations=iterations,
                           residual=residual, converged=residual <= tol)


def _sinkhorn_2d(rho, mu, epsilon, tol, max_iter):
    grid = rho.grid
    x0, x1 = grid.axes
    D0 = _sq_dist_matrix(x0, x0) / epsilon
    D1 = _sq_dist_matrix(x1, x1) / epsilon
    p = rho.cell_masses()
    q = mu.cell_masses()
    logp = np.where(p > 0, np.log(np.maximum(p, _LOG_FLOOR)), -np.inf)
    logq = np.where(q > 0, np.log(np.maximum(q, _LOG_FLOOR)), -np.inf)
    f = np.zeros(grid.shape)
    g = np.zeros(grid.shape)
    residual = np.inf
    iterations = 0
    with np.errstate(invalid="ignore"):
        for iterations in range(1, max_iter + 1):
            f = -epsilon * _lse_apply_2d(g / epsilon + logq, D0, D1)
            g = -epsilon * _lse_apply_2d(f / epsilon + logp, D0, D1)
            phi = _lse_apply_2d(g / epsilon + logq, D0, D1)
            row = np.exp(np.where(p > 0, f / epsilon + logp + phi, -np.inf))
            residual = float(np.sum(np.abs(row - p)))
            if residual <= tol:
                break
    cost = _entropic_cost_2d(f / epsilon + logp, g / epsilon + logq, x0, x1, epsilon)
    return TransportResult(cost=cost, potentials=(f, g), iterations=iterations,
                           residual=residual, converged=residual <= tol)


def _entropic_cost_2d(la, lb, x0, x1, epsilon):
    # <gamma, c> through per-axis contractions of the separable Gibbs kernel,
    # gamma = exp(la[x] + lb[y] - |x-y|^2/eps)
    sa = np.max(la[np.isfinite(la)])
    sb = np.max(lb[np.isfinite(lb)])
    A = np.exp(np.where(np.isfinite(la), la - sa, -np.inf))   # (n0, n1)
    B = np.exp(np.where(np.isfinite(lb), lb - sb, -np.inf))
    E0 = np.exp(-_sq_dist_matrix(x0, x0) / epsilon)
    E1 = np.exp(-_sq_dist_matrix(x1, x1) / epsilon)
    C0 = _sq_dist_matrix(x0, x0) * E0
    C1 = _sq_dist_matrix(x1, x1) * E1
    H1 = A @ E1 @ B.T          # (n0, n0): contraction over the second axis
    H0 = A.T @ E0 @ B          # (n1, n1): contraction over the first axis
    return float((np.sum(C0 * H1) + np.sum(C1 * H0)) * np.exp(sa + sb))


def sinkhorn_divergence(rho: Density, mu: Density, epsilon: float,
                        tol: float = 1e-9, max_iter: int = 20000) -> float:
    """Debiased entropic cost: cost(rho,mu) - (cost(rho,rho)+cost(mu,mu))/2."""
    ab = sinkhorn(rho, mu, epsilon, tol, max_iter).cost
    aa = sinkhorn(rho, rho, epsilon, tol, max_iter).cost
    bb = sinkhorn(mu, mu, epsilon, tol, max_iter).cost
    return ab - 0.5 * (aa + bb)


# ---------------------------------------------------------------------------
# linear-programming oracle (tests and cross-checks only)

def brute_force_ot(rho: Density, mu: Density) -> TransportResult:
    """Exact optimum of the quadratic-cost transport LP on small supports."""
    rho.grid.require_same(mu.grid)
    pts_r = rho.grid.centers.reshape(-1, rho.grid.dim)
    pts_m = mu.grid.centers.reshape(-1, mu.grid.dim)
    p = rho.cell_masses().ravel()
    q = mu.cell_masses().ravel()
    sr = p > 0
    sm = q > 0
    ns, nt = int(sr.sum()), int(sm.sum())
    if ns > 64 or nt > 64:
        raise TransportError(f"support too large for the LP oracle ({ns} x {nt})")
    xs, xt = pts_r[sr], pts_m[sm]
    ps, qt = p[sr], q[sm]
    C = np.sum((xs[:, None, :] - xt[None, :, :]) ** 2, axis=-1)
    A_eq = np.zeros((ns + nt, ns * nt))
    for i in range(ns):
        A_eq[i, i * nt : (i + 1) * nt] = 1.0
    for j in range(nt):
        A_eq[ns + j, j::nt] = 1.0
    b_eq = np.concatenate([ps, qt])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=b_eq, method="highs")
    if res.status != 0:
        raise TransportError(f"LP oracle failed: {res.message}")
    plan = res.x.reshape(ns, nt)
    viol = max(
        float(np.max(np.abs(plan.sum(axis=1) - ps))),
        float(np.max(np.abs(plan.sum(axis=0) - qt))),
    )
    return TransportResult(cost=float(res.fun), plan=plan, residual=viol)


# ---------------------------------------------------------------------------
# displacement interpolation

def deposit_1d(grid: Grid, positions, masses) -> Density:
    """Linear (two-cell split) deposition of point masses onto a 1-D grid."""
    x = grid.axes[0]
    dx = grid.spacing[0]
    u = (np.asarray(positions) - x[0]) / dx
    i_left = np.clip(np.floor(u).astype(int), 0, grid.cells[0] - 2)
    w_right = np.clip(u - i_left, 0.0, 1.0)
    values = np.zeros(grid.cells[0])
    np.add.at(values, i_left, np.asarray(masses) * (1.0 - w_right))
    np.add.at(values, i_left + 1, np.asarray(masses) * w_right)
    return Density(grid, values / grid.cell_volume)


def displacement_interpolate_1d(rho: Density, mu: Density, t: float) -> Density:
    """Geodesic interpolant: push rho forward under (1-t) Id + t T."""
    if not 0.0 <= t <= 1.0:
        raise TransportError(f"interpolation parameter {t} outside [0, 1]")
    _require_1d_pair(rho, mu)
    if t == 0.0:
        return rho
    result = w2_exact_1d(rho, mu)
    x = rho.grid.axes[0]
    positions = (1.0 - t) * x + t * result.map
    return deposit_1d(rho.grid, positions, rho.cell_masses())
