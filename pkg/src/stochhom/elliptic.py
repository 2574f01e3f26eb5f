"""Heterogeneous and homogenised Dirichlet problems, and epsilon-convergence studies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corrector import EffectiveTensor, effective_tensor
from .field import FieldSample, FieldSpec, Kind, ellipticity_bounds, sample_field, scaled
from .grid import BC, DiffusionOperator, Grid, GridFunction, assemble_diffusion, grid_values, solve

CELLS_PER_EPS = 8


class UnderResolvedError(ValueError):
    """Grid too coarse for the microstructure at scale epsilon."""


def check_resolution(grid: Grid, spec: FieldSpec, eps: float, cells: int = CELLS_PER_EPS) -> None:
    if spec.kind is Kind.CONSTANT:
        return
    need = eps * spec.correlation_length / cells
    hmax = float(grid.h.max())
    if hmax > need * (1 + 1e-12):
        raise UnderResolvedError(
            f"h = {hmax:.4g} exceeds eps*ell/{cells} = {need:.4g} (eps = {eps:g}, "
            f"ell = {spec.correlation_length:g}); refine to at least "
            f"{math.ceil((np.asarray(grid.upper) - grid.lower).max() / need)} cells per axis")


def heterogeneous_operator(sample: FieldSample, eps: float, grid: Grid) -> DiffusionOperator:
    check_resolution(grid, sample.spec, eps)
    return assemble_diffusion(grid, scaled(sample, eps), BC.DIRICHLET0)


def solve_heterogeneous(sample: FieldSample, eps: float, f, grid: Grid,
                        tol: float = 1e-10) -> GridFunction:
    """Solve ``-div(a(x/eps) grad u) = f`` with ``u = 0`` on the boundary."""
    op = heterogeneous_operator(sample, eps, grid)
    return solve(op, grid_values(op.grid, f), tol)


def solve_homogenized(a_eff, f, grid: Grid, tol: float = 1e-10) -> GridFunction:
    """Solve ``-div(a_eff grad u) = f`` with ``u = 0`` on the boundary."""
    op = assemble_diffusion(grid, a_eff, BC.DIRICHLET0)
    return solve(op, grid_values(op.grid, f), tol)


def h1_seminorm(op: DiffusionOperator, u: np.ndarray) -> float:
    """Discrete ``||grad u||_{L^2}`` on the faces of ``op``'s grid."""
    vol = op.grid.cell_volume
    return math.sqrt(sum(float(np.sum(w * (G @ u) ** 2)) for G, w in zip(op.gradients, op.face_weights)) * vol)


def poincare_constant(grid: Grid) -> float:
    """``1 / sqrt(lambda_1)`` for the discrete Dirichlet Laplacian on ``grid``."""
    lam = sum((2.0 / h**2) * (1.0 - math.cos(math.pi / n)) for h, n in zip(grid.h, grid.n))
    return 1.0 / math.sqrt(lam)


def galerkin_residual(op: DiffusionOperator, u: np.ndarray, f: np.ndarray, tests) -> float:
    """Largest ``|a(u, v) - (f, v)| / (||f|| ||v||)`` over discrete test functions ``v``."""
    r = op.matrix @ u - f
    fn = float(np.linalg.norm(f)) or 1.0
    return max(abs(float(v @ r)) / (fn * float(np.linalg.norm(v))) for v in tests)


def inject(coarse: GridFunction, fine: Grid) -> np.ndarray:
    """Piecewise-constant prolongation of ``coarse`` onto the cells of ``fine``."""
    g = coarse.grid
    idx = []
    for k, x in enumerate(fine.axes()):
        i = np.floor((x - g.lower[k]) / g.h[k]).astype(int)
        idx.append(np.clip(i, 0, g.n[k] - 1))
    mesh = np.meshgrid(*idx, indexing="ij")
    flat = np.ravel_multi_index([m.ravel() for m in mesh], g.n)
    return coarse.values[flat]


@dataclass
class ConvergenceRow:
    epsilon: float
    l2_error: float
    rel_error: float
    h1_seminorm: float
    energy: float
    n: int


@dataclass
class ConvergenceTable:
    rows: list[ConvergenceRow]
    a_eff: np.ndarray
    h1_bound: float
    seed: int
    u0_l2: float
    extras: dict = field(default_factory=dict)

    columns = ("epsilon", "l2_error", "rel_error", "h1_seminorm", "energy")

    def errors(self) -> np.ndarray:
        return np.array([r.l2_error for r in self.rows])

    def strictly_decreasing(self) -> bool:
        e = self.errors()
        return bool(np.all(np.diff(e) < 0))

    def h1_bounded(self) -> bool:
        return all(r.h1_seminorm <= self.h1_bound * (1 + 1e-9) for r in self.rows)

    def as_rows(self) -> list[list[float]]:
        return [[r.epsilon, r.l2_error, r.rel_error, r.h1_seminorm, r.energy] for r in self.rows]


def grid_for(eps: float, spec: FieldSpec, d: int, side: float = 1.0,
             cells: int = CELLS_PER_EPS, n_fixed: int | None = None) -> Grid:
    if n_fixed is not None:
        n = int(n_fixed)
    else:
        n = max(2, math.ceil(cells * side / (eps * spec.correlation_length) - 1e-9))
    return Grid.cube(n, d, side=side, bc=BC.DIRICHLET0)


def convergence_study(spec: FieldSpec, seed: int, f, eps_list, *, side: float = 1.0,
                      cells_per_eps: int = CELLS_PER_EPS, n_fixed: int | None = None,
                      a_eff=None, rve: dict | None = None, tol: float = 1e-10) -> ConvergenceTable:
    """Quenched convergence of ``u^eps`` to ``u^0`` along ``eps_list`` for one realisation.

    ``a_eff`` may be an :class:`EffectiveTensor`, a matrix, or ``None`` (then it is
    estimated with :func:`effective_tensor` using the ``rve`` keyword arguments).
    The same realisation (``seed``) is used at every scale.
    """
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list) or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be positive and strictly decreasing")
    d = spec.dimension
    if a_eff is None:
        a_eff = effective_tensor(spec, seed=seed, **(rve or {}))
    a_mat = np.atleast_2d(a_eff.matrix if isinstance(a_eff, EffectiveTensor) else np.asarray(a_eff, float))
    if a_mat.shape == (1, 1) and d > 1:
        a_mat = a_mat[0, 0] * np.eye(d)

    grids = [grid_for(e, spec, d, side, cells_per_eps, n_fixed) for e in eps_list]
    finest = max(grids, key=lambda g: g.size)
    if spec.kind is Kind.POISSON:
        sample = sample_field(spec, seed, (np.zeros(d), np.full(d, side / eps_list[-1])))
    else:
        sample = sample_field(spec, seed)

    u0 = solve_homogenized(a_mat, f, finest, tol)
    vol = finest.cell_volume
    u0_l2 = math.sqrt(float(np.sum(u0.values**2)) * vol)
    fvals = grid_values(finest, f)
    c1, _ = ellipticity_bounds(spec)
    bound = poincare_constant(finest) * math.sqrt(float(np.sum(fvals**2)) * vol) / c1

    rows = []
    for eps, grid in zip(eps_list, grids):
        op = heterogeneous_operator(sample, eps, grid)
        u = solve(op, grid_values(grid, f), tol)
        diff = inject(u, finest) - u0.values
        l2 = math.sqrt(float(np.sum(diff**2)) * vol)
        rows.append(ConvergenceRow(eps, l2, l2 / u0_l2 if u0_l2 else 0.0,
                                   h1_seminorm(op, u.values), op.energy(u.values), grid.n[0]))
        bound = max(bound, poincare_constant(grid) * math.sqrt(
            float(np.sum(grid_values(grid, f) ** 2)) * grid.cell_volume) / c1)
    return ConvergenceTable(rows, a_mat, bound, seed, u0_l2)
