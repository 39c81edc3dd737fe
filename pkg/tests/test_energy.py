"""Internal-energy family tests: functionals, pressure, proximal map, checks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import brentq, minimize_scalar

from jkoflow.energy import (EnergyError, InternalEnergy, check_class_Hm,
                            check_mccann, eval_functional, kl_prox, pressure)
from jkoflow.grid import Density, Grid


def test_eval_F_values():
    ent = InternalEnergy("entropy")
    assert ent.F(1.0) == 0.0
    assert ent.F(0.0) == 0.0
    assert ent.F(np.e) == pytest.approx(np.e, abs=1e-12)
    pw = InternalEnergy("power", m=2.0)
    assert pw.F(1.0) == pytest.approx(1.0)
    assert pw.F(0.0) == 0.0


def test_energy_constructor_validation():
    with pytest.raises(EnergyError):
        InternalEnergy("entropy", m=2.0)
    with pytest.raises(EnergyError):
        InternalEnergy("power", m=1.0)
    with pytest.raises(EnergyError):
        InternalEnergy("power", m=2.0, c=-1.0)
    with pytest.raises(EnergyError):
        InternalEnergy("cubic")
    with pytest.raises(EnergyError):
        InternalEnergy("entropy").F(-0.1)


def test_alpha_scales_everything():
    base = InternalEnergy("power", m=3.0)
    scaled = InternalEnergy("power", m=3.0, alpha=2.5)
    x = np.linspace(0.1, 4.0, 17)
    assert_allclose(scaled.F(x), 2.5 * base.F(x), rtol=1e-14)
    assert_allclose(scaled.pressure(x), 2.5 * base.pressure(x), rtol=1e-14)


def test_functional_uniform_values():
    g = Grid(0.0, 1.0, 50)
    rho = Density(g, np.ones(50))
    assert eval_functional(InternalEnergy("entropy"), rho) == pytest.approx(0.0, abs=1e-14)
    assert eval_functional(InternalEnergy("power", m=2.0), rho) == pytest.approx(1.0)


def test_functional_gaussian_vs_refined_quadrature():
    # 4x refined grid as the quadrature oracle
    def value(cells):
        g = Grid(-4.0, 4.0, cells)
        v = np.exp(-0.5 * (g.axes[0] / 0.5) ** 2)
        rho = Density(g, v / (v.sum() * g.cell_volume))
        return eval_functional(InternalEnergy("entropy"), rho)

    assert abs(value(256) - value(1024)) <= 1e-6


def test_pressure_closed_forms():
    ent = InternalEnergy("entropy")
    assert pressure(ent, 0.7) == pytest.approx(0.7, abs=1e-14)
    assert pressure(ent, 0.0) == 0.0
    pw = InternalEnergy("power", m=2.0)
    assert pressure(pw, 3.0) == pytest.approx(9.0)
    assert pressure(pw, 0.0) == 0.0


@pytest.mark.parametrize("energy", [
    InternalEnergy("entropy"),
    InternalEnergy("power", m=2.0),
    InternalEnergy("power", m=3.0, c=0.7, alpha=1.3),
])
def test_pressure_identity_fd_oracle(energy):
    # P(x) = x F'(x) - F(x) with a finite-difference oracle for F'
    rng = np.random.default_rng(21)
    x = rng.uniform(0.05, 5.0, 1000)
    step = 1e-6
    dF = (energy.F(x + step) - energy.F(x - step)) / (2.0 * step)
    assert np.max(np.abs(energy.pressure(x) - (x * dF - energy.F(x)))) <= 1e-5


def test_kl_prox_small_tau_is_identity():
    for e in (InternalEnergy("entropy"), InternalEnergy("power", m=2.0)):
        z = np.array([0.2, 1.0, 3.5])
        assert_allclose(kl_prox(e, 1e-12, z), z, rtol=1e-9)


def test_kl_prox_entropy_closed_form_vs_minimizer():
    e = InternalEnergy("entropy")
    s = kl_prox(e, 1.0, 1.0)
    assert s == pytest.approx(np.exp(-0.5), abs=1e-12)
    # scalar-minimization oracle
    obj = lambda t: 1.0 * t * np.log(max(t, 1e-300)) + t * np.log(max(t, 1e-300)) - t + 1.0
    res = minimize_scalar(obj, bounds=(1e-9, 2.0), method="bounded",
                          options={"xatol": 1e-12})
    assert s == pytest.approx(res.x, abs=1e-7)


def test_kl_prox_power_vs_bisection_oracle():
    e = InternalEnergy("power", m=2.0)
    s = kl_prox(e, 0.5, 1.0)
    # stationarity s + log s = 0 solved by bracketed root finding
    root = brentq(lambda t: t + np.log(t), 1e-12, 1.0, xtol=1e-15)
    assert s == pytest.approx(root, abs=1e-12)


def test_kl_prox_monotone_and_stationarity_residual():
    rng = np.random.default_rng(8)
    for e in (InternalEnergy("entropy"), InternalEnergy("power", m=2.0),
              InternalEnergy("power", m=3.0, c=0.4)):
        z = np.sort(rng.uniform(1e-4, 10.0, 200))
        tau = 0.7
        s = kl_prox(e, tau, z)
        assert np.all(np.diff(s) >= -1e-14)
        resid = tau * e.dF(s) + np.log(s / z)
        assert np.max(np.abs(resid)) <= 1e-10
    assert kl_prox(InternalEnergy("entropy"), 1.0, 0.0) == 0.0


def test_check_class_Hm_constants():
    rep = check_class_Hm(InternalEnergy("power", m=2.0), np.linspace(0.1, 5.0, 40))
    assert rep.passed
    assert rep.info["certified_lower_constant"] == pytest.approx(2.0)
    assert rep.info["certified_upper_constant"] == pytest.approx(1.0)
    assert check_class_Hm(InternalEnergy("entropy"), np.linspace(0.1, 5.0, 40)).passed


class _BrokenEnergy:
    """Pressure growing like x^(m+1): violates the class's upper bound."""

    m = 2.0
    lower_constant = 2.0
    upper_constant = 1.0

    def d2F(self, x):
        return 2.0 * np.ones_like(np.asarray(x, dtype=float))

    def pressure(self, x):
        x = np.asarray(x, dtype=float)
        return x ** (self.m + 1.0)


def test_check_class_Hm_negative_control():
    rep = check_class_Hm(_BrokenEnergy(), np.linspace(0.5, 10.0, 30))
    assert not rep.passed


@pytest.mark.parametrize("energy,n", [
    (InternalEnergy("entropy"), 1),
    (InternalEnergy("entropy"), 2),
    (InternalEnergy("power", m=2.0), 1),
    (InternalEnergy("power", m=2.0), 2),
    (InternalEnergy("power", m=3.0), 1),
    (InternalEnergy("power", m=3.0), 2),
])
def test_check_mccann_passes_for_menu(energy, n):
    samples = np.linspace(0.05, 8.0, 160)
    assert check_mccann(energy, n, samples).passed


class _ConcaveEnergy:
    def F(self, x):
        return -np.asarray(x, dtype=float) ** 2


def test_check_mccann_negative_control():
    assert not check_mccann(_ConcaveEnergy(), 1, np.linspace(0.1, 4.0, 60)).passed


def test_check_mccann_requires_increasing_samples():
    with pytest.raises(EnergyError):
        check_mccann(InternalEnergy("entropy"), 1, np.array([1.0, 0.5, 2.0]))


def test_functional_midpoint_convexity():
    rng = np.random.default_rng(12)
    g = Grid(-2.0, 2.0, 64)
    for e in (InternalEnergy("entropy"), InternalEnergy("power", m=2.0)):
        for _ in range(5):
            va = rng.random(64) + 0.01
            vb = rng.random(64) + 0.01
            a = Density(g, va / (va.sum() * g.cell_volume))
            b = Density(g, vb / (vb.sum() * g.cell_volume))
            mid = Density(g, 0.5 * (a.values + b.values))
            lhs = eval_functional(e, mid)
            rhs = 0.5 * (eval_functional(e, a) + eval_functional(e, b))
            assert lhs <= rhs + 1e-12
