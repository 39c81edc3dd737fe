"""Interaction potentials V_i[rho] = U_i + sum_j W_ij * rho_j.

Kernels come from a smooth nonnegative menu (gaussian / constant / zero)
whose derivative bounds are known in closed form, so the regularity
constants the scheme relies on are certified analytically and then
cross-checked empirically on trial densities.  Singular kernels are out of
scope by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Density, GridField, convolve
from .reporting import Report
from . import transport

_E_HALF = float(np.exp(-0.5))


class InteractionError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    """A nonnegative convolution kernel with bounded first two derivatives."""

    family: str
    amplitude: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.family not in ("gaussian", "constant", "zero"):
            raise InteractionError(f"unknown kernel family {self.family!r}")
        if self.amplitude < 0:
            raise InteractionError("kernel amplitude must be nonnegative")
        if self.family == "gaussian" and self.sigma <= 0:
            raise InteractionError("gaussian kernel width must be positive")

    @property
    def is_zero(self) -> bool:
        return self.family == "zero" or self.amplitude == 0.0

    def value(self, offsets) -> np.ndarray:
        """W at offsets; offsets carry the axis dimension last (or are 1-D)."""
        sq = _offset_sqnorm(offsets)
        if self.is_zero:
            return np.zeros_like(sq)
        if self.family == "constant":
            return np.full_like(sq, self.amplitude)
        return self.amplitude * np.exp(-0.5 * sq / self.sigma**2)

    def grad(self, offsets) -> np.ndarray:
        """Gradient of W, shape offsets.shape (vector components last)."""
        d = np.asarray(offsets, dtype=float)
        if self.is_zero or self.family == "constant":
            return np.zeros_like(d)
        sq = _offset_sqnorm(d)
        s2 = self.sigma**2
        w = self.amplitude * np.exp(-0.5 * sq / s2)
        if d.shape == sq.shape:          # bare scalar offsets
            return -d * w / s2
        return -d * (w / s2)[..., None]  # trailing spatial axis

    def d2_1d(self, offsets) -> np.ndarray:
        """Second derivative along a 1-D offset axis."""
        d = np.asarray(offsets, dtype=float)
        if self.is_zero or self.family == "constant":
            return np.zeros_like(d)
        s2 = self.sigma**2
        w = self.amplitude * np.exp(-0.5 * d**2 / s2)
        return w * (d**2 / s2**2 - 1.0 / s2)

    @property
    def grad_bound(self) -> float:
        """Analytic sup |grad W| (attained at |d| = sigma for gaussians)."""
        if self.is_zero or self.family == "constant":
            return 0.0
        return self.amplitude * _E_HALF / self.sigma

    @property
    def hess_bound(self) -> float:
        """Analytic sup of the second-derivative operator norm (at d = 0)."""
        if self.is_zero or self.family == "constant":
            return 0.0
        return self.amplitude / self.sigma**2


def _offset_sqnorm(offsets):
    d = np.asarray(offsets, dtype=float)
    if d.ndim == 0:
        return d**2
    # trailing axis is the spatial dimension when it has length 1 or 2 and
    # the array is not itself a bare 1-D offset list
    if d.ndim >= 2 and d.shape[-1] in (1, 2):
        return np.sum(d**2, axis=-1)
    return d**2


@dataclass(frozen=True)
class ExternalPotential:
    """Fixed external potential U >= 0 with bounded first two derivatives.

    family="quadratic" is the pre-smoothed confinement
    U(x) = min(|x - x0|^2 / 2, R^2/2 + R (|x - x0| - R)): quadratic inside
    radius R, linear with slope R outside, so sup|grad U| = R and the second
    derivative stays bounded by 1 on the whole box.
    """

    family: str
    radius: float = 1.0
    center: tuple = ()

    def __post_init__(self):
        if self.family not in ("zero", "quadratic"):
            raise InteractionError(f"unknown external potential family {self.family!r}")
        if self.family == "quadratic" and self.radius <= 0:
            raise InteractionError("confinement radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def _shift(self, pts, dim):
        p = np.asarray(pts, dtype=float)
        if dim == 1 and (p.ndim == 1 or p.shape[-1] != 1):
            p = p[..., None]
        center = np.asarray(self.center if self.center else (0.0,) * dim)
        return p - center

    def value(self, pts, dim) -> np.ndarray:
        if self.family == "zero":
            return np.zeros(_scalar_shape(pts, dim))
        d = self._shift(pts, dim)
        r = np.sqrt(np.sum(d**2, axis=-1))
        R = self.radius
        return np.where(r <= R, 0.5 * r**2, 0.5 * R**2 + R * (r - R))

    def grad(self, pts, dim) -> np.ndarray:
        d = self._shift(pts, dim)
        if self.family == "zero":
            return np.zeros_like(d)
        r = np.sqrt(np.sum(d**2, axis=-1))
        R = self.radius
        scale = np.where(r <= R, 1.0, R / np.maximum(r, 1e-300))
        return d * scale[..., None]

    def d2_1d(self, pts) -> np.ndarray:
        """Second derivative on a 1-D axis (0 on the linear wings)."""
        d = self._shift(pts, 1)[..., 0]
        if self.family == "zero":
            return np.zeros_like(d)
        return np.where(np.abs(d) <= self.radius, 1.0, 0.0)

    @property
    def grad_bound(self) -> float:
        return 0.0 if self.family == "zero" else self.radius

    @property
    def hess_bound(self) -> float:
        return 0.0 if self.family == "zero" else 1.0


def _scalar_shape(pts, dim):
    p = np.asarray(pts)
    if dim == 1 and (p.ndim == 1 or (p.ndim and p.shape[-1] != 1)):
        return p.shape
    return p.shape[:-1]


@dataclass(frozen=True)
class InteractionSpec:
    """Kernel matrix plus external potentials for l species.

    The regularity constants C_lip (first derivatives) and C_hess (second
    derivatives) are finite by construction of the kernel menu; they bound
    the assembled potentials uniformly over all density arguments.
    """

    kernels: tuple
    external: tuple

    def __post_init__(self):
        kernels = tuple(tuple(row) for row in self.kernels)
        l = len(kernels)
        if l == 0 or any(len(row) != l for row in kernels):
            raise InteractionError("kernel matrix must be square and nonempty")
        external = tuple(self.external)
        if len(external) != l:
            raise InteractionError(f"need {l} external potentials, got {len(external)}")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "external", external)

    @property
    def n_species(self) -> int:
        return len(self.kernels)

    @property
    def lipschitz_constant(self) -> float:
        return max(
            self.external[i].grad_bound + sum(k.grad_bound for k in self.kernels[i])
            for i in range(self.n_species)
        )

    @property
    def hessian_constant(self) -> float:
        return max(
            self.external[i].hess_bound + sum(k.hess_bound for k in self.kernels[i])
            for i in range(self.n_species)
        )

    @property
    def is_zero(self) -> bool:
        return all(k.is_zero for row in self.kernels for k in row) and all(
            u.family == "zero" for u in self.external
        )


def zero_interaction(n_species: int) -> InteractionSpec:
    z = Kernel("zero")
    return InteractionSpec(
        kernels=tuple((z,) * n_species for _ in range(n_species)),
        external=(ExternalPotential("zero"),) * n_species,
    )


def assemble_potential(spec: InteractionSpec, i: int, rhos) -> GridField:
    """V_i[rhos] sampled at cell centers: U_i + sum_j (W_ij * rho_j)."""
    _check_species(spec, i, rhos)
    grid = rhos[0].grid
    v = spec.external[i].value(grid.centers, grid.dim)
    v = np.broadcast_to(np.asarray(v, dtype=float), grid.shape).copy()
    for j, rho in enumerate(rhos):
        k = spec.kernels[i][j]
        if not k.is_zero:
            v += convolve(k.value, rho).values
    return GridField(grid, np.maximum(v, 0.0))


def assemble_gradient(spec: InteractionSpec, i: int, rhos) -> GridField:
    """grad V_i[rhos] at cell centers, using the analytic kernel gradients."""
    _check_species(spec, i, rhos)
    grid = rhos[0].grid
    out = np.array(spec.external[i].grad(grid.centers, grid.dim), dtype=float)
    out = np.broadcast_to(out, grid.shape + (grid.dim,)).copy()
    for j, rho in enumerate(rhos):
        k = spec.kernels[i][j]
        if k.is_zero or k.family == "constant":
            continue
        for axis in range(grid.dim):
            comp = convolve(lambda d, k=k, axis=axis: k.grad(d)[..., axis], rho)
            out[..., axis] += comp.values
    return GridField(grid, out)


def eval_interaction_functional(spec: InteractionSpec, i: int, rho: Density, mus) -> float:
    """Frozen-argument interaction energy: integral of V_i[mus] against rho."""
    from .grid import integrate

    return integrate(assemble_potential(spec, i, mus), rho)


def _check_species(spec, i, rhos):
    if not 0 <= i < spec.n_species:
        raise InteractionError(f"species index {i} out of range [0, {spec.n_species})")
    if len(rhos) != spec.n_species:
        raise InteractionError(f"need {spec.n_species} densities, got {len(rhos)}")
    g = rhos[0].grid
    for r in rhos:
        g.require_same(r.grid)


def certify_hypotheses(spec: InteractionSpec, trial_pairs, tolerance: float = None) -> Report:
    """Certify the regularity hypotheses on a list of trial density pairs.

    Reports the analytic constants and, for each pair (nu, sigma) of species
    vectors, the ratio sup|grad V_i[nu] - grad V_i[sigma]| / W2(nu, sigma),
    which smoothness bounds by C_hess * sqrt(n).  Pairs at distance zero are
    skipped.  The default tolerance allows 5% slack on the bound for the
    grid quadrature of the gradients.
    """
    if len(trial_pairs) < 3:
        raise InteractionError("need at least 3 trial pairs")
    c_lip = spec.lipschitz_constant
    c_hess = spec.hessian_constant
    grid = trial_pairs[0][0][0].grid
    n = grid.dim
    bound = c_hess * np.sqrt(n)
    if tolerance is None:
        tolerance = 0.05 * bound + 1e-12
    report = Report("interaction_hypotheses")
    report.info["lipschitz_constant"] = c_lip
    report.info["hessian_constant"] = c_hess
    report.info["w2_lipschitz_bound"] = bound
    ratios = []
    grad_sups = []
    for nu, sig in trial_pairs:
        if grid.dim == 1:
            dist = np.sqrt(transport.product_w2_sq(nu, sig))
        else:
            eps = grid.spacing[0] ** 2
            div = sum(max(transport.sinkhorn_divergence(a, b, eps), 0.0)
                      for a, b in zip(nu, sig))
            dist = np.sqrt(div)
            report.info["entropic_epsilon"] = eps
        for i in range(spec.n_species):
            ga = assemble_gradient(spec, i, nu).values
            gb = assemble_gradient(spec, i, sig).values
            grad_sups.append(float(np.max(np.abs(ga))))
            grad_sups.append(float(np.max(np.abs(gb))))
            if dist > 1e-15:
                ratios.append(float(np.max(np.abs(ga - gb))) / dist)
    report.info["ratios"] = ratios
    report.add("gradient_bound", max(grad_sups) if grad_sups else 0.0, c_lip + 1e-12)
    report.add("w2_lipschitz_ratio", max(ratios) if ratios else 0.0, bound + tolerance)
    return report
