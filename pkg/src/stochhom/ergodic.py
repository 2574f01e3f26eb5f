"""Spatial averages along one realisation and oscillating test-function pairings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .field import FieldSample, FieldSpec, Kind, derive_seed, evaluate, phase, sample_field
from .grid import Grid, GridFunction

MIN_CELLS_PER_LENGTH = 4


@dataclass(frozen=True)
class Statistic:
    """Bounded pointwise functional of the field, with an optional reference mean.

    ``provenance`` must say where ``expected_value`` comes from (an analytic
    formula or a declared high-resolution oracle run).
    """

    name: str
    evaluator: Callable[[FieldSample, np.ndarray], np.ndarray]
    expected_value: float | None = None
    provenance: str | None = None

    def __call__(self, sample: FieldSample, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.evaluator(sample, x), dtype=float)


def constant_statistic(value: float = 1.0) -> Statistic:
    return Statistic("constant", lambda s, x: np.full(np.shape(x)[0], float(value)),
                     float(value), "analytic: constant")


def phase_indicator(spec: FieldSpec) -> Statistic:
    """Indicator of the ``a_inside`` phase; mean from the void probability or Bernoulli law."""
    p = spec.inside_probability()
    why = {Kind.POISSON: "analytic: 1 - exp(-intensity |B_r|) (Poisson void probability)",
           Kind.CONSTANT: "analytic: constant field"}.get(spec.kind, "analytic: Bernoulli phase probability")
    return Statistic("phase_indicator", lambda s, x: phase(s, x).astype(float), p, why)


def coefficient_entry(spec: FieldSpec, i: int = 0, j: int = 0) -> Statistic:
    mean = float(spec.mean_coefficient()[i, j])
    return Statistic(f"a_{i + 1}{j + 1}", lambda s, x: evaluate(s, x)[:, i, j], mean,
                     "analytic: two-point law p a0 + (1 - p) a1")


def window_sample(spec: FieldSpec, seed: int, t: float) -> FieldSample:
    d = spec.dimension
    if spec.kind is Kind.POISSON:
        return sample_field(spec, seed, (np.zeros(d), np.full(d, float(t))))
    return sample_field(spec, seed)


def default_cells(spec: FieldSpec, t: float) -> int:
    return max(2, math.ceil(MIN_CELLS_PER_LENGTH * t / spec.correlation_length - 1e-9))


def birkhoff_average(sample: FieldSample, stat: Statistic, t: float, n: int | None = None,
                     chunk: int = 1 << 18) -> float:
    """Midpoint-rule average of ``stat`` over the window ``[0, t]^d``."""
    if not t > 0:
        raise ValueError("window scale must be positive")
    spec = sample.spec
    n = default_cells(spec, t) if n is None else int(n)
    if spec.kind is not Kind.CONSTANT and n < MIN_CELLS_PER_LENGTH * t / spec.correlation_length - 1e-9:
        raise ValueError(f"{n} cells per axis under-resolve the window: need "
                         f"{MIN_CELLS_PER_LENGTH} per correlation length")
    grid = Grid.cube(n, spec.dimension, side=t)
    axes = grid.axes()
    d = spec.dimension
    # stream over slabs of the first axis to bound memory
    rest = int(np.prod([len(a) for a in axes[1:]])) if d > 1 else 1
    rows = max(1, chunk // rest)
    total = 0.0
    for start in range(0, n, rows):
        sub = [axes[0][start:start + rows]] + axes[1:]
        mesh = np.meshgrid(*sub, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        total += float(np.sum(stat(sample, pts)))
    return total / grid.size


@dataclass
class BirkhoffTable:
    t: list[float]
    average: list[float]
    error: list[float]
    spread: list[float]
    reference: float
    provenance: str
    seed: int

    columns = ("t", "average", "abs_error", "cross_seed_spread")

    @property
    def final_is_smallest(self) -> bool:
        return self.error[-1] <= min(self.error)

    def as_rows(self):
        return [list(r) for r in zip(self.t, self.average, self.error, self.spread)]


def birkhoff_convergence(spec: FieldSpec, seed: int, stat: Statistic, t_list,
                         spread_seeds: int = 8) -> BirkhoffTable:
    """Quenched averages over nested windows ``[0, t]^d`` for one realisation.

    The ``cross_seed_spread`` column is the standard deviation of the same
    average over ``spread_seeds`` independent realisations, so atypical-looking
    seeds are visible.
    """
    if stat.expected_value is None or not stat.provenance:
        raise ValueError(f"statistic {stat.name!r} has no reference value with provenance")
    t_list = [float(t) for t in t_list]
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be increasing")
    t_max = t_list[-1]

    def averages(s):
        sample = window_sample(spec, s, t_max)
        return [birkhoff_average(sample, stat, t) for t in t_list]

    avg = averages(seed)
    others = np.array([averages(derive_seed(seed, 1000 + k)) for k in range(spread_seeds)])
    spread = others.std(axis=0, ddof=1).tolist() if spread_seeds > 1 else [0.0] * len(t_list)
    err = [abs(a - stat.expected_value) for a in avg]
    return BirkhoffTable(t_list, avg, err, spread, stat.expected_value, stat.provenance, seed)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def two_scale_pairing(v, phi, b: Statistic, sample: FieldSample, eps: float,
                      grid: Grid | None = None) -> float:
    """``int v(x) phi(x) b(T_{x/eps} omega) dx`` by the midpoint rule on the grid of ``v``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if isinstance(v, GridFunction):
        grid = v.grid
        v = v.values
    if isinstance(phi, GridFunction):
        if grid is not None and phi.grid != grid:
            raise ValueError("v and phi live on different grids")
        grid = phi.grid
        phi = phi.values
    if grid is None:
        raise ValueError("a grid is required when v and phi are plain arrays")
    x = grid.centers()
    bx = b(sample, x / eps)
    return float(np.sum(np.asarray(v) * np.asarray(phi) * bx)) * grid.cell_volume


def oscillating(b: Statistic, sample: FieldSample, eps: float, grid: Grid) -> GridFunction:
    """``x -> b(T_{x/eps} omega)`` sampled at the cell centres."""
    return GridFunction(grid, b(sample, grid.centers() / eps))
