"""Internal energies, pressures, KL-proximal maps, and convexity checks.

Two families are supported: the Boltzmann entropy ``x log x`` (m = 1) and
power laws ``c x^m / (m-1)`` for m > 1.  Both satisfy F(0) = F'(0) = 0,
F'' bounded below by a multiple of x^(m-2), and pressure growth at most
C (x + x^m), which is what the scheme's estimates rely on.  The diffusion
weight ``alpha`` is folded multiplicatively into F (the evolution is linear
in the internal-energy functional, so this is exact).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Density
from .reporting import Report

EnergyReport = Report

_LOG_FLOOR = 1e-300  # floor inside logarithms; 0 log 0 := 0 by continuity


class EnergyError(ValueError):
    pass


@dataclass(frozen=True)
class InternalEnergy:
    """An internal energy from the entropy / power-law menu.

    kind="entropy": F(x) = alpha * x log x, pressure P(x) = alpha * x.
    kind="power":   F(x) = alpha * c * x^m / (m-1), P(x) = alpha * c * x^m.
    """

    kind: str
    m: float = 1.0
    c: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("entropy", "power"):
            raise EnergyError(f"unknown energy kind {self.kind!r}")
        if self.kind == "entropy" and self.m != 1.0:
            raise EnergyError("entropy energy requires m = 1")
        if self.kind == "power" and not self.m > 1.0:
            raise EnergyError("power energy requires m > 1")
        if self.c <= 0 or self.alpha <= 0:
            raise EnergyError("coefficients c and alpha must be positive")

    # -- pointwise evaluations (array-capable, x >= 0) ----------------------

    def F(self, x):
        x = _nonneg(x)
        if self.kind == "entropy":
            safe = np.maximum(x, _LOG_FLOOR)
            return self.alpha * np.where(x > 0.0, x * np.log(safe), 0.0)
        return self.alpha * self.c * x**self.m / (self.m - 1.0)

    def dF(self, x):
        x = _nonneg(x)
        if self.kind == "entropy":
            return self.alpha * (np.log(np.maximum(x, _LOG_FLOOR)) + 1.0)
        return self.alpha * self.c * self.m / (self.m - 1.0) * x ** (self.m - 1.0)

    def d2F(self, x):
        x = _nonneg(x)
        if self.kind == "entropy":
            return self.alpha / np.maximum(x, _LOG_FLOOR)
        return self.alpha * self.c * self.m * x ** (self.m - 2.0)

    def pressure(self, x):
        """P(x) = x F'(x) - F(x); rewrites the diffusion term as Laplacian of P."""
        x = _nonneg(x)
        if self.kind == "entropy":
            return self.alpha * x
        return self.alpha * self.c * x**self.m

    # -- certified class constants ------------------------------------------

    @property
    def lower_constant(self) -> float:
        """C with F''(x) >= C x^(m-2)."""
        return self.alpha if self.kind == "entropy" else self.alpha * self.c * self.m

    @property
    def upper_constant(self) -> float:
        """C with P(x) <= C (x + x^m)."""
        return self.alpha if self.kind == "entropy" else self.alpha * self.c


def _nonneg(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0):
        raise EnergyError("energy evaluations require x >= 0")
    return x


def eval_F(energy: InternalEnergy, x):
    return energy.F(x)


def pressure(energy: InternalEnergy, x):
    return energy.pressure(x)


def eval_functional(energy: InternalEnergy, rho: Density) -> float:
    """Integral of F(rho) over the box (midpoint quadrature on the grid)."""
    return float(np.sum(energy.F(rho.values))) * rho.grid.cell_volume


# ---------------------------------------------------------------------------
# KL-proximal operator
#
# kl_prox(e, tau, z) = argmin_{s >= 0}  tau F(s) + s log(s/z) - s + z.
# This is the cell-wise building block of the entropic splitting solver.
# Stationarity: tau F'(s) + log(s/z) = 0, strictly monotone in s, so the
# root is unique.  The entropy case has a closed form; power laws use a
# safeguarded Newton iteration in log s with a bisection bracket.

def kl_prox(energy: InternalEnergy, tau: float, z):
    if tau <= 0:
        raise EnergyError("kl_prox requires tau > 0")
    z = np.asarray(z, dtype=float)
    if np.any(z < 0.0):
        raise EnergyError("kl_prox requires z >= 0")
    scalar = z.ndim == 0
    z = np.atleast_1d(z)
    pos = z > 0.0
    logz = np.log(np.maximum(z, _LOG_FLOOR))
    out = np.zeros_like(z)
    if np.any(pos):
        out[pos] = kl_prox_log(energy, tau, logz[pos])
    return float(out[0]) if scalar else out


def kl_prox_log(energy: InternalEnergy, tau: float, logz):
    """kl_prox against log z; usable when z itself would under/overflow."""
    logz = np.atleast_1d(np.asarray(logz, dtype=float))
    if energy.kind == "entropy":
        a = energy.alpha
        # tau*alpha*(log s + 1) + log s - log z = 0
        return np.exp((logz - tau * a) / (1.0 + tau * a))
    return _power_prox_newton(energy, tau, logz)


def _power_prox_newton(energy: InternalEnergy, tau: float, logz, tol=1e-12, max_iter=100):
    # solve g(t) = beta * exp((m-1) t) + t - logz = 0 for t = log s,
    # with beta = tau * alpha * c * m / (m-1); g is convex and increasing.
    m = energy.m
    beta = tau * energy.alpha * energy.c * m / (m - 1.0)
    t_hi = np.array(logz, dtype=float)            # g(logz) >= 0, root is below
    t_lo = np.minimum(0.0, logz - beta)           # g(t_lo) <= 0 (case split on sign)
    t = t_hi.copy()
    for _ in range(max_iter):
        with np.errstate(over="ignore"):
            e = beta * np.exp((m - 1.0) * t)
        g = e + t - logz
        dg = (m - 1.0) * e + 1.0
        with np.errstate(invalid="ignore"):
            t_new = t - g / dg
        # bisect wherever Newton leaves the bracket
        bad = (t_new <= t_lo) | (t_new >= t_hi) | ~np.isfinite(t_new)
        t_new[bad] = 0.5 * (t_lo[bad] + t_hi[bad])
        with np.errstate(over="ignore"):
            g_new = beta * np.exp((m - 1.0) * t_new) + t_new - logz
        t_hi = np.where(g_new > 0.0, t_new, t_hi)
        t_lo = np.where(g_new <= 0.0, t_new, t_lo)
        t = t_new
        if np.all(np.abs(g_new) <= tol):
            return np.exp(t)
    raise EnergyError(
        f"kl_prox Newton failed to reach |residual| <= {tol:g} "
        f"(max residual {np.max(np.abs(g_new)):g}); this signals a bug"
    )


# ---------------------------------------------------------------------------
# class-membership and displacement-convexity checks

def check_class_Hm(energy, samples) -> EnergyReport:
    """Verify F'' >= C_lower x^(m-2) and P <= C_upper (x + x^m) on samples.

    Accepts any object exposing m, d2F, pressure and the two certified
    constants, so deliberately broken energies can be fed in as negative
    controls.  Reports the tightest empirical constants alongside.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size == 0 or np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise EnergyError("samples must be positive finite scalars")
    m = energy.m
    c_lo = energy.lower_constant
    c_up = energy.upper_constant
    slack = 1e-12
    d2 = np.asarray(energy.d2F(x), dtype=float)
    lower_gap = c_lo * x ** (m - 2.0) - d2          # <= 0 required
    p = np.asarray(energy.pressure(x), dtype=float)
    upper_gap = p - c_up * (x + x**m)               # <= 0 required
    report = EnergyReport("class_Hm")
    report.add("second_derivative_lower_bound", float(np.max(lower_gap)), slack * max(1.0, c_lo))
    report.add("pressure_growth_upper_bound", float(np.max(upper_gap)), slack * max(1.0, c_up))
    with np.errstate(divide="ignore"):
        report.info["certified_lower_constant"] = c_lo
        report.info["certified_upper_constant"] = c_up
        report.info["empirical_lower_constant"] = float(np.min(d2 / x ** (m - 2.0)))
        report.info["empirical_upper_constant"] = float(np.max(p / (x + x**m)))
        report.info["n_samples"] = int(x.size)
    return report


def check_mccann(energy, n: int, samples) -> EnergyReport:
    """Displacement-convexity condition: x -> x^n F(x^-n) convex nonincreasing.

    Monotonicity is checked on consecutive samples and convexity through
    nondecreasing divided differences (second-difference test, tolerance
    1e-10), which also covers non-uniformly spaced samples.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise EnergyError("need at least 3 samples")
    if np.any(np.diff(x) <= 0) or np.any(x <= 0):
        raise EnergyError("samples must form an increasing positive sequence")
    if n not in (1, 2):
        raise EnergyError("dimension must be 1 or 2")
    g = x**n * np.asarray(energy.F(x ** (-float(n))), dtype=float)
    tol = 1e-10
    scale = max(1.0, float(np.max(np.abs(g))))
    mono_gap = float(np.max(np.diff(g)))            # <= 0 required (nonincreasing)
    slopes = np.diff(g) / np.diff(x)
    convex_gap = float(np.max(-np.diff(slopes))) if slopes.size > 1 else 0.0
    report = EnergyReport(f"mccann_condition_n{n}")
    report.add("nonincreasing", mono_gap, tol * scale)
    report.add("convex", convex_gap, tol * scale)
    report.info["n"] = n
    report.info["n_samples"] = int(x.size)
    return report
