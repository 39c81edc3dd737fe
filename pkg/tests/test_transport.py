"""Transport-primitive tests against the linear-programming oracle."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from jkoflow.grid import Density, Grid
from jkoflow.transport import (TransportError, brute_force_ot,
                               displacement_interpolate_1d, sinkhorn,
                               sinkhorn_divergence, w1_exact_1d, w2_exact_1d)

G8 = Grid(0.0, 1.0, 8)


def rand_density(rng, grid=G8, floor=0.05):
    v = rng.random(grid.shape) + floor
    return Density(grid, v / (v.sum() * grid.cell_volume))


def cells_density(grid, masses):
    v = np.asarray(masses, dtype=float)
    return Density(grid, v / (v.sum() * grid.cell_volume))


def test_w2_identity_and_map():
    rng = np.random.default_rng(1)
    rho = rand_density(rng)
    res = w2_exact_1d(rho, rho)
    assert res.cost == pytest.approx(0.0, abs=1e-15)
    assert_allclose(res.map, G8.axes[0])


def test_w2_whole_cell_shift():
    g = Grid(0.0, 1.0, 16)
    v = np.zeros(16)
    v[2:6] = [1.0, 2.0, 2.0, 1.0]
    rho = cells_density(g, v)
    mu = cells_density(g, np.roll(v, 5))
    a = 5 * g.spacing[0]
    assert w2_exact_1d(rho, mu).distance == pytest.approx(a, abs=1e-10)
    assert w1_exact_1d(rho, mu) == pytest.approx(a, abs=1e-12)


def test_w2_matches_lp_oracle():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(15):
        a, b = rand_density(rng), rand_density(rng)
        worst = max(worst, abs(w2_exact_1d(a, b).cost - brute_force_ot(a, b).cost))
    assert worst <= 1e-8


def test_w1_upper_bounded_by_w2():
    rng = np.random.default_rng(7)
    a0 = rand_density(rng)
    assert w1_exact_1d(a0, a0) == 0.0
    for _ in range(10):
        a, b = rand_density(rng), rand_density(rng)
        assert w1_exact_1d(a, b) <= w2_exact_1d(a, b).distance + 1e-10


def test_metric_axioms_on_random_triples():
    rng = np.random.default_rng(13)
    for _ in range(8):
        a, b, c = (rand_density(rng) for _ in range(3))
        dab = w2_exact_1d(a, b).distance
        dba = w2_exact_1d(b, a).distance
        assert abs(dab - dba) <= 1e-12
        assert dab <= w2_exact_1d(a, c).distance + w2_exact_1d(c, b).distance + 1e-10


def test_map_monotone():
    rng = np.random.default_rng(17)
    g = Grid(-1.0, 1.0, 40)
    for _ in range(6):
        a, b = rand_density(rng, g, floor=0.0), rand_density(rng, g, floor=0.0)
        t = w2_exact_1d(a, b).map
        assert np.all(np.diff(t) >= 0.0)


def test_w2_requires_1d_same_grid():
    g2 = Grid((0.0, 0.0), (1.0, 1.0), (4, 4))
    rho2 = Density(g2, np.ones((4, 4)))
    with pytest.raises(TransportError):
        w2_exact_1d(rho2, rho2)
    rng = np.random.default_rng(0)
    with pytest.raises(Exception):
        w2_exact_1d(rand_density(rng), rand_density(rng, Grid(0.0, 1.0, 16)))


def test_sinkhorn_self_divergence_zero():
    rng = np.random.default_rng(23)
    rho = rand_density(rng)
    assert abs(sinkhorn_divergence(rho, rho, 0.05, tol=1e-11)) <= 1e-9


def test_sinkhorn_gap_to_lp_decreasing_in_eps():
    rng = np.random.default_rng(31)
    a, b = rand_density(rng), rand_density(rng)
    lp = brute_force_ot(a, b).cost
    gaps = []
    for eps in (0.1, 0.05, 0.025):
        res = sinkhorn(a, b, eps, tol=1e-11)
        assert res.converged
        gap = res.cost - lp
        assert -1e-9 <= gap <= 5.0 * eps
        gaps.append(gap)
    assert gaps[0] > gaps[1] > gaps[2]


def test_sinkhorn_marginals_within_tol():
    rng = np.random.default_rng(37)
    a, b = rand_density(rng), rand_density(rng)
    eps, tol = 0.05, 1e-10
    res = sinkhorn(a, b, eps, tol=tol)
    f, g = res.potentials
    x = G8.axes[0]
    sq = (x[:, None] - x[None, :]) ** 2
    logp = np.log(a.cell_masses())
    logq = np.log(b.cell_masses())
    plan = np.exp((f[:, None] + g[None, :] - sq) / eps + logp[:, None] + logq[None, :])
    assert np.sum(np.abs(plan.sum(axis=1) - a.cell_masses())) <= tol
    assert np.sum(np.abs(plan.sum(axis=0) - b.cell_masses())) <= 10 * tol


def test_sinkhorn_shifted_gaussians():
    g = Grid(-4.0, 4.0, 64)
    x = g.axes[0]
    a_shift = 1.0
    va = np.exp(-0.5 * ((x + a_shift / 2) / 0.4) ** 2)
    vb = np.exp(-0.5 * ((x - a_shift / 2) / 0.4) ** 2)
    rho = Density(g, va / (va.sum() * g.cell_volume))
    mu = Density(g, vb / (vb.sum() * g.cell_volume))
    eps = 0.05
    div = sinkhorn_divergence(rho, mu, eps, tol=1e-10)
    assert abs(div - a_shift**2) <= 5.0 * eps + g.spacing[0]


def test_sinkhorn_validates_epsilon():
    rng = np.random.default_rng(2)
    with pytest.raises(TransportError):
        sinkhorn(rand_density(rng), rand_density(rng), 0.0)


def test_brute_force_point_to_point():
    g = Grid(0.0, 1.0, 8)
    va = np.zeros(8)
    va[1] = 1.0
    vb = np.zeros(8)
    vb[6] = 1.0
    a, b = cells_density(g, va), cells_density(g, vb)
    res = brute_force_ot(a, b)
    assert res.cost == pytest.approx((g.axes[0][6] - g.axes[0][1]) ** 2, abs=1e-12)
    assert brute_force_ot(a, a).cost == pytest.approx(0.0, abs=1e-12)


def test_brute_force_three_cell_hand_check():
    # masses (1/2, 1/2, 0) -> (0, 1/2, 1/2): monotone assignment moves each
    # half-unit one cell to the right
    g = Grid(0.0, 3.0, 3)
    a = cells_density(g, [0.5, 0.5, 0.0])
    b = cells_density(g, [0.0, 0.5, 0.5])
    expected = 0.5 * 1.0**2 + 0.5 * 1.0**2
    assert brute_force_ot(a, b).cost == pytest.approx(expected, abs=1e-12)
    assert w2_exact_1d(a, b).cost == pytest.approx(expected, abs=1e-12)


def test_brute_force_support_limit():
    g = Grid(0.0, 1.0, 128)
    rng = np.random.default_rng(3)
    a = rand_density(rng, g)
    with pytest.raises(TransportError):
        brute_force_ot(a, a)


def test_displacement_endpoints():
    rng = np.random.default_rng(51)
    g = Grid(-2.0, 2.0, 64)
    a, b = rand_density(rng, g), rand_density(rng, g)
    d0 = displacement_interpolate_1d(a, b, 0.0)
    assert np.array_equal(d0.values, a.values)
    d1 = displacement_interpolate_1d(a, b, 1.0)
    assert w2_exact_1d(d1, b).distance <= g.spacing[0]
    with pytest.raises(TransportError):
        displacement_interpolate_1d(a, b, 1.5)


def test_displacement_of_translates():
    g = Grid(-4.0, 4.0, 128)
    x = g.axes[0]
    v = np.exp(-0.5 * ((x + 1.0) / 0.4) ** 2)
    a = Density(g, v / (v.sum() * g.cell_volume))
    cells = 32
    b = Density(g, np.roll(a.values, cells))
    t = 0.5
    mid = displacement_interpolate_1d(a, b, t)
    expected = Density(g, np.roll(a.values, cells // 2))
    assert w2_exact_1d(mid, expected).distance <= g.spacing[0]


def test_entropic_cost_2d_matches_dense_plan():
    # separable contraction against the brute-force dense plan cost
    rng = np.random.default_rng(19)
    g = Grid((0.0, 0.0), (1.0, 0.8), (6, 5))
    va = rng.random((6, 5)) + 0.1
    vb = rng.random((6, 5)) + 0.1
    a = Density(g, va / (va.sum() * g.cell_volume))
    b = Density(g, vb / (vb.sum() * g.cell_volume))
    eps = 0.1
    res = sinkhorn(a, b, eps, tol=1e-11)
    pts = g.centers.reshape(-1, 2)
    sq = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    f, gg = res.potentials
    la = (f / eps + np.log(a.cell_masses())).ravel()
    lb = (gg / eps + np.log(b.cell_masses())).ravel()
    plan = np.exp(la[:, None] + lb[None, :] - sq / eps)
    assert res.cost == pytest.approx(float(np.sum(plan * sq)), rel=1e-10)


def test_entropic_cost_2d_point_shift():
    g = Grid((0.0, 0.0), (1.0, 1.0), (8, 8))
    va = np.zeros((8, 8))
    va[2, 2] = 1.0
    vb = np.zeros((8, 8))
    vb[4, 2] = 1.0
    a = Density(g, va / (va.sum() * g.cell_volume))
    b = Density(g, vb / (vb.sum() * g.cell_volume))
    res = sinkhorn(a, b, 0.01, tol=1e-10)
    assert res.cost == pytest.approx((2 * g.spacing[0]) ** 2, rel=1e-6)
