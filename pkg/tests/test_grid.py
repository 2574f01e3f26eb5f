import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from stochhom.grid import (BC, ConvergenceError, Grid, GridFunction, assemble_diffusion, cg,
                           cg_solve, direct, grid_values, harmonic_mean, integrate, solve,
                           write_grid_csv)


def test_grid_geometry():
    g = Grid.cube(4, 2, side=2.0)
    assert g.size == 16 and np.allclose(g.h, 0.5) and g.cell_volume == 0.25
    c = g.centers()
    assert np.allclose(c[0], [0.25, 0.25]) and np.allclose(c[1], [0.25, 0.75])
    with pytest.raises(ValueError):
        Grid((1,), (0.0,), (1.0,))


def test_integrate_midpoint():
    g = Grid.cube(8, 2)
    f = GridFunction(g, np.ones(g.size) * 3.0)
    assert integrate(f) == pytest.approx(3.0)


@pytest.mark.parametrize("n", [8, 13])
def test_dirichlet_sine_modes_are_exact_eigenvectors(n):
    g = Grid.cube(n, 2)
    op = assemble_diffusion(g, 1.0)
    x = g.centers()
    for k, l in [(1, 1), (2, 3)]:
        v = np.sin(k * np.pi * x[:, 0]) * np.sin(l * np.pi * x[:, 1])
        h = 1.0 / n
        lam = (2 / h**2) * (1 - math.cos(k * math.pi * h)) + (2 / h**2) * (1 - math.cos(l * math.pi * h))
        assert np.allclose(op.matrix @ v, lam * v, rtol=0, atol=1e-9 * lam)


def test_layered_transmissibility_is_harmonic_mean():
    g = Grid.cube(2, 1, bc=BC.NEUMANN0)
    op = assemble_diffusion(g, lambda x: np.where(x[:, 0] < 0.5, 1.0, 4.0))
    h = 0.5
    t = 2 * 1.0 * 4.0 / (1.0 + 4.0)
    assert np.allclose(op.matrix.toarray(), t / h**2 * np.array([[1, -1], [-1, 1]]))
    assert harmonic_mean(1.0, 4.0) == pytest.approx(t)


def test_poisson_1d_second_order():
    errs = []
    for n in (32, 64, 128):
        g = Grid.cube(n, 1)
        u = solve(assemble_diffusion(g, 1.0), np.ones(n))
        x = g.centers()[:, 0]
        errs.append(np.abs(u.values - x * (1 - x) / 2).max())
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.1)


@given(st.integers(0, 2**32 - 1), st.sampled_from(list(BC)))
@settings(max_examples=25, deadline=None)
def test_operator_symmetric_and_semidefinite(seed, bc):
    rng = np.random.default_rng(seed)
    g = Grid.cube(6, 2, bc=bc)
    m = rng.normal(size=(g.size, 2, 2))
    a = m @ np.swapaxes(m, 1, 2) + 0.5 * np.eye(2)
    op = assemble_diffusion(g, lambda x: a)
    A = op.matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()
    eig = np.linalg.eigvalsh(A.toarray())
    assert eig[0] >= -1e-9 * eig[-1]
    u = rng.normal(size=g.size)
    assert op.energy(u) == pytest.approx(0.5 * op.bilinear(u, u), rel=1e-12)


def test_neumann_and_periodic_kernel_is_constants():
    for bc in (BC.NEUMANN0, BC.PERIODIC):
        op = assemble_diffusion(Grid.cube(5, 2, bc=bc), 2.0)
        assert np.abs(op.matrix @ np.ones(25)).max() < 1e-12
        assert op.singular


def test_discrete_maximum_principle():
    g = Grid.cube(24, 2)
    rng = np.random.default_rng(0)
    a = np.where(rng.random(g.size) < 0.5, 1.0, 10.0)
    op = assemble_diffusion(g, lambda x: a)
    u = solve(op, np.ones(g.size)).values
    assert u.min() > 0


def test_cg_error_energy_norm_monotone():
    g = Grid.cube(16, 2)
    a = np.where(np.random.default_rng(1).random(g.size) < 0.5, 1.0, 4.0)
    op = assemble_diffusion(g, lambda x: a)
    b = np.random.default_rng(2).normal(size=g.size)
    exact = sp.linalg.spsolve(op.matrix.tocsc(), b)
    errs = []
    cg(op.matrix, b, tol=1e-12, callback=lambda k, x: errs.append(
        float((x - exact) @ (op.matrix @ (x - exact)))))
    assert all(e2 <= e1 * (1 + 1e-10) for e1, e2 in zip(errs, errs[1:]))


def test_cg_raises_on_cap_with_residual():
    g = Grid.cube(16, 2)
    op = assemble_diffusion(g, 1.0)
    with pytest.raises(ConvergenceError) as info:
        cg(op.matrix, np.ones(g.size), tol=1e-14, max_iter=2)
    assert info.value.residual > 1e-14


def test_singular_solve_returns_zero_mean():
    g = Grid.cube(12, 2, bc=BC.PERIODIC)
    op = assemble_diffusion(g, 1.0)
    x = g.centers()
    f = np.sin(2 * np.pi * x[:, 0]) + 0.3
    u = cg_solve(op, f).values
    assert abs(u.mean()) < 1e-12
    v, _ = direct(op.matrix, f, singular=True)
    assert np.allclose(u, v, atol=1e-8)


def test_direct_and_cg_agree():
    g = Grid.cube(40, 1)
    a = np.where(np.random.default_rng(3).random(40) < 0.5, 1.0, 4.0)
    op = assemble_diffusion(g, lambda x: a)
    f = np.ones(40)
    assert np.allclose(solve(op, f, method="cg").values, solve(op, f, method="direct").values,
                       atol=1e-9)


def test_anisotropic_plane_wave_matches_scheme_symbol():
    g = Grid.cube(10, 2, bc=BC.PERIODIC)
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    op = assemble_diffusion(g, A)
    x = g.centers()
    k = 2 * np.pi
    u = np.sin(k * (x[:, 0] + x[:, 1]))
    h = 0.1
    # symbol of the scheme for the diagonal (compact) and cross (centred) parts
    sym = (A[0, 0] + A[1, 1]) * (2 / h**2) * (1 - math.cos(k * h)) + 2 * A[0, 1] * (math.sin(k * h) / h) ** 2
    assert np.allclose(op.matrix @ u, sym * u, atol=1e-9 * sym)


def test_grid_values_and_csv(tmp_path):
    g = Grid.cube(3, 1)
    assert np.array_equal(grid_values(g, 2.0), np.full(3, 2.0))
    assert np.allclose(grid_values(g, lambda x: x[:, 0]), g.centers()[:, 0])
    p = tmp_path / "f.csv"
    write_grid_csv(p, GridFunction(g, np.array([0.1, 1 / 3, 2.0])))
    lines = p.read_text().splitlines()
    assert lines[0] == "x0,v0"
    assert lines[2].split(",")[1] == format(1 / 3, ".17g")
