"""Harmonic maps into the sphere for a weighted Dirichlet energy.

Stationary points are reached by an explicit projected gradient flow: the
tangential part of ``div(a grad u)`` is added with step ``dt`` and each cell
is renormalised. Fixed points satisfy ``u x div_h(a grad_h u) = 0``, the
discrete counterpart of the cross-product weak form, which
:func:`weak_residual` evaluates against a bank of interior bump functions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import BC, DiffusionOperator, Grid, GridFunction, assemble_diffusion

UNIT_TOL = 1e-12


class DegenerateStepError(RuntimeError):
    """A cell's updated vector vanished, so its direction is undefined."""


class StabilityError(ValueError):
    """Time step above the explicit stability bound."""


class DirectorField(GridFunction):
    """Grid function with unit vectors in R^3 in every cell."""

    def __post_init__(self):
        super().__post_init__()
        v = self.values
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("director fields carry three components per cell")
        dev = np.abs(np.linalg.norm(v, axis=1) - 1.0).max()
        if dev > 1e-10:
            raise ValueError(f"director field is not unit-norm (max deviation {dev:.3e})")

    @classmethod
    def from_values(cls, grid: Grid, values) -> "DirectorField":
        return cls(grid, normalize(np.asarray(values, float)))

    def norm_defect(self) -> float:
        return float(np.abs(np.linalg.norm(self.values, axis=1) - 1.0).max())


def normalize(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=1)
    if np.any(norm == 0):
        raise DegenerateStepError(f"zero vector at cell {int(np.argmin(norm))}")
    return v / norm[:, None]


def as_operator(grid: Grid, coeff, bc=BC.NEUMANN0) -> DiffusionOperator:
    if isinstance(coeff, DiffusionOperator):
        return coeff
    return assemble_diffusion(grid, coeff, bc)


def stable_dt(op: DiffusionOperator, factor: float = 1.0) -> float:
    """Largest admissible explicit step ``h_min^2 / (4 d c2 factor)``."""
    return float(op.grid.h.min() ** 2 / (4 * op.grid.d * op.c2 * factor))


def energy(u: GridFunction, coeff) -> float:
    """Weighted Dirichlet energy ``1/2 int a grad u . grad u``."""
    op = as_operator(u.grid, coeff)
    return op.energy(u.values)


def tension(op: DiffusionOperator, u: np.ndarray) -> np.ndarray:
    """Tangential part of ``div(a grad u)``."""
    H = -(op.matrix @ u)
    return H - np.sum(H * u, axis=1)[:, None] * u


@dataclass
class FlowResult:
    field: DirectorField
    energies: list[float]
    steps: int
    converged: bool
    max_norm_defect: float = 0.0
    increments: list[float] = field(default_factory=list)


def heat_flow(u0: DirectorField, coeff, dt: float, steps: int, stop_tol: float = 0.0,
              pinned=None, bc=BC.NEUMANN0) -> FlowResult:
    """Projected gradient flow of the weighted Dirichlet energy.

    ``pinned`` is an optional boolean mask of cells held at their initial value
    (Dirichlet pinning). Stops when the energy decrease over a step falls below
    ``stop_tol`` or after ``steps`` steps. The ledger ``energies`` holds the
    energy before the first and after every step.
    """
    op = as_operator(u0.grid, coeff, bc)
    limit = stable_dt(op)
    if dt > limit * (1 + 1e-12):
        raise StabilityError(f"dt = {dt:.3e} exceeds the stability bound {limit:.3e}")
    u = u0.values.copy()
    free = None if pinned is None else ~np.asarray(pinned, bool)
    A = op.matrix
    half_vol = 0.5 * op.grid.cell_volume
    Au = A @ u
    # the assembled matrix reproduces the face-sum energy exactly, so one
    # matvec per step serves both the update and the ledger
    e = half_vol * float(np.sum(u * Au))
    energies = [e]
    increments = []
    defect = 0.0
    converged = False
    k = 0
    for k in range(1, steps + 1):
        H = -Au
        w = H - np.sum(H * u, axis=1)[:, None] * u
        if free is not None:
            w[~free] = 0.0
        v = u + dt * w
        norm = np.linalg.norm(v, axis=1)
        if np.any(norm == 0):
            raise DegenerateStepError(f"antipodal degeneracy at cell {int(np.argmin(norm))}")
        u = v / norm[:, None]
        defect = max(defect, float(np.abs(np.linalg.norm(u, axis=1) - 1).max()))
        Au = A @ u
        e_new = half_vol * float(np.sum(u * Au))
        energies.append(e_new)
        increments.append(float(np.abs(w).max()))
        if e - e_new < stop_tol:
            converged = True
            e = e_new
            break
        e = e_new
    return FlowResult(DirectorField(u0.grid, u), energies, k, converged, defect, increments)


def _cross_form(op: DiffusionOperator, u: np.ndarray, phi: np.ndarray) -> float:
    """``sum_ij int a_ij (d_j u x u) . d_i phi`` with face and centred differences."""
    total = 0.0
    for G, T, w, L in zip(op.gradients, op.face_coefficients, op.face_weights, op.face_left):
        gu = G @ u
        total += float(np.sum((w * T)[:, None] * np.cross(gu, u[L]) * (G @ phi)))
    for i, j, w, Di, Dj in op.pairs:
        total += float(np.sum(w[:, None] * np.cross(Dj @ u, u) * (Di @ phi)))
    return total * op.grid.cell_volume


def weak_residual(u: GridFunction, coeff, bank, bc=BC.NEUMANN0) -> float:
    """Max over ``bank`` of the cross-product weak-form residual."""
    op = as_operator(u.grid, coeff, bc)
    return max(abs(_cross_form(op, u.values, phi)) for phi in bank)


def bump(grid: Grid, center, radius, direction=None) -> np.ndarray:
    """C^1 bump ``prod cos^2(pi (x - c) / (2 r))`` on ``|x - c|_inf < r``."""
    x = grid.centers()
    s = np.abs(x - np.asarray(center)) / np.asarray(radius)
    prof = np.where(s < 1, np.cos(0.5 * np.pi * np.minimum(s, 1)) ** 2, 0.0).prod(axis=1)
    if direction is None:
        return prof
    return prof[:, None] * np.asarray(direction, float)[None, :]


def bump_bank(grid: Grid, count: int = 20, seed: int = 0, margin: float | None = None,
              components: int = 3) -> list[np.ndarray]:
    """Random interior bumps (unit amplitude) kept ``margin`` away from the boundary."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    side = hi - lo
    margin = 2.0 * grid.h.max() if margin is None else margin
    bank = []
    for _ in range(count):
        r = side * rng.uniform(0.1, 0.25, size=grid.d)
        c = rng.uniform(lo + margin + r, hi - margin - r)
        e = rng.normal(size=components)
        bank.append(bump(grid, c, r, e / np.linalg.norm(e) if components > 1 else None))
    return bank


def orthogonality_check(u: GridFunction) -> float:
    """Max over cells and axes of ``|centred d_i u . u|`` (zero in the continuum)."""
    v = u.values
    if v.ndim != 2 or np.abs(np.linalg.norm(v, axis=1) - 1).max() > 1e-10:
        raise ValueError("orthogonality check needs a unit-norm vector field")
    grid = u.grid
    arr = v.reshape(grid.shape + (3,))
    worst = 0.0
    for k in range(grid.d):
        if grid.bc is BC.PERIODIC:
            diff = (np.roll(arr, -1, axis=k) - np.roll(arr, 1, axis=k))
            base = arr
        else:
            sl = [slice(None)] * grid.d
            up, down, mid = list(sl), list(sl), list(sl)
            up[k], down[k], mid[k] = slice(2, None), slice(None, -2), slice(1, -1)
            diff = arr[tuple(up)] - arr[tuple(down)]
            base = arr[tuple(mid)]
        if diff.size:
            worst = max(worst, float(np.abs(np.sum(diff * base, axis=-1)).max() / (2 * grid.h[k])))
    return worst


def boundary_ring(grid: Grid, width: int = 1) -> np.ndarray:
    """Mask of cells within ``width`` layers of the boundary."""
    idx = np.indices(grid.shape).reshape(grid.d, -1)
    n = np.asarray(grid.shape)[:, None]
    return np.any((idx < width) | (idx >= n - width), axis=0)


def winding_field(grid: Grid, turns: float = 0.5, tilt: float = 0.0, seed: int | None = None):
    """In-plane map ``(cos t, sin t, 0)`` with ``t = 2 pi turns x_1``, optionally
    lifted out of the plane by a centred bump of height ``tilt``."""
    x = grid.centers()
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    t = 2 * np.pi * turns * (x[:, 0] - lo[0]) / (hi[0] - lo[0])
    v = np.stack([np.cos(t), np.sin(t), np.zeros_like(t)], axis=1)
    if tilt:
        v[:, 2] += tilt * bump(grid, 0.5 * (lo + hi), 0.4 * (hi - lo))
    return DirectorField.from_values(grid, v)


def prolong(coarse: DirectorField, fine: Grid) -> np.ndarray:
    """Piecewise-constant transfer of ``coarse`` onto the cells of ``fine``."""
    g = coarse.grid
    idx = [np.clip(np.floor((x - g.lower[k]) / g.h[k]).astype(int), 0, g.n[k] - 1)
           for k, x in enumerate(fine.axes())]
    mesh = np.meshgrid(*idx, indexing="ij")
    return coarse.values[np.ravel_multi_index([m.ravel() for m in mesh], g.n)]


def nested_flow(boundary_data, coeff, n: int, d: int, stop_tol: float, max_steps: int,
                coarsest: int = 32) -> FlowResult:
    """Projected flow with constant ``coeff`` on ``n^d`` cells, warm-started from
    the converged state on ``n/2, n/4, ...`` down to ``coarsest`` cells per axis.

    ``boundary_data(grid)`` returns the director field whose ring cells are pinned
    (and which seeds the coarsest level). The energy-decrease tolerance is
    scaled with ``dt``, i.e. with ``h^2``, relative to level ``n``.
    """
    levels = [n]
    while levels[-1] // 2 >= coarsest and levels[-1] % 2 == 0:
        levels.append(levels[-1] // 2)
    result = None
    for m in reversed(levels):
        grid = Grid.cube(m, d, bc=BC.NEUMANN0)
        pin = boundary_ring(grid)
        data = boundary_data(grid)
        if result is None:
            start = data
        else:
            v = prolong(result.field, grid)
            v[pin] = data.values[pin]
            start = DirectorField.from_values(grid, v)
        op = assemble_diffusion(grid, coeff, BC.NEUMANN0)
        result = heat_flow(start, op, stable_dt(op), max_steps, stop_tol * (n / m) ** 2, pinned=pin)
    return result


@dataclass
class LadderRow:
    epsilon: float          # 0 marks the homogenised run
    energy: float
    steps: int
    converged: bool
    residual_own: float
    residual_hom: float
    norm_defect: float
    energy_monotone: bool


@dataclass
class Ladder:
    rows: list[LadderRow]
    fields: dict = field(repr=False, default_factory=dict)
    ledgers: dict = field(repr=False, default_factory=dict)

    columns = ("epsilon", "energy", "steps", "converged", "residual_own", "residual_hom",
               "norm_defect", "energy_monotone")

    def as_rows(self):
        return [[r.epsilon, r.energy, r.steps, r.converged, r.residual_own, r.residual_hom,
                 r.norm_defect, r.energy_monotone] for r in self.rows]

    def max_norm_defect(self) -> float:
        return max(r.norm_defect for r in self.rows)

    def energy_monotone(self) -> bool:
        return all(r.energy_monotone for r in self.rows)

    def all_converged(self) -> bool:
        return all(r.converged for r in self.rows)

    def homogenized_residual_decreasing(self) -> bool:
        res = [r.residual_hom for r in self.rows if r.epsilon > 0]
        return all(b < a for a, b in zip(res, res[1:]))


def _monotone(energies, tol: float = 1e-12) -> bool:
    e = np.asarray(energies)
    return bool(np.all(np.diff(e) <= tol * max(e[0], 1.0)))


def homogenization_ladder(spec, seed: int, eps_list, a_eff, n: int, *, turns: float = 0.5,
                          tilt: float = 0.3, stop_tol: float = 2.5e-11, max_steps: int = 1_000_000,
                          bank_size: int = 20, bank_seed: int = 1, margin: float = 0.05,
                          cells_per_eps: int = 4) -> Ladder:
    """Heterogeneous flows along ``eps_list`` and the homogenised flow, pinned to
    winding boundary data on ``(0, 1)^d``.

    All heterogeneous runs start from the same datum: the homogenised stationary
    state, so every run selects the critical point next to the homogenised one.
    Each row reports the residual in its own weak form and in the homogenised
    weak form with ``a_eff``. Lattice microstructures align with the grid when
    ``n * eps * cell_size`` is an integer, so ``cells_per_eps`` may be lower
    than for the elliptic studies.
    """
    from .elliptic import check_resolution
    from .field import Kind, sample_field, scaled

    d = spec.dimension
    a_mat = np.atleast_2d(np.asarray(a_eff, float))
    if a_mat.shape == (1, 1) and d > 1:
        a_mat = a_mat[0, 0] * np.eye(d)
    for eps in eps_list:
        check_resolution(Grid.cube(n, d), spec, eps, cells_per_eps)
    data = lambda g: winding_field(g, turns=turns, tilt=tilt)
    hom = nested_flow(data, a_mat, n, d, stop_tol, max_steps)
    grid = hom.field.grid
    pin = boundary_ring(grid)
    bank = bump_bank(grid, bank_size, seed=bank_seed, margin=margin)
    hom_op = assemble_diffusion(grid, a_mat, BC.NEUMANN0)
    h_res = weak_residual(hom.field, hom_op, bank)
    rows = [LadderRow(0.0, hom.energies[-1], hom.steps, hom.converged, h_res, h_res,
                      hom.max_norm_defect, _monotone(hom.energies))]
    ladder = Ladder(rows, {0.0: hom.field}, {0.0: hom.energies})
    box = None
    if spec.kind is Kind.POISSON:
        box = (np.zeros(d), np.full(d, 1.0 / min(eps_list)))
    sample = sample_field(spec, seed, box)
    for eps in eps_list:
        op = assemble_diffusion(grid, scaled(sample, eps), BC.NEUMANN0)
        r = heat_flow(hom.field, op, stable_dt(op), max_steps, stop_tol, pinned=pin)
        rows.append(LadderRow(float(eps), r.energies[-1], r.steps, r.converged,
                              weak_residual(r.field, op, bank), weak_residual(r.field, hom_op, bank),
                              r.max_norm_defect, _monotone(r.energies)))
        ladder.fields[float(eps)] = r.field
        ladder.ledgers[float(eps)] = r.energies
    return ladder
