"""Effective tensor from periodised cell problems on a representative volume.

For a direction ``nu`` the corrector ``phi`` is the zero-mean periodic solution
of ``-div(a (nu + grad phi)) = 0`` on ``[0, L]^d``. Column ``j`` of the
effective tensor is the volume-averaged flux for ``nu = e_j``. The same
discrete quadratic form gives the energy ``Q_nu(phi)``, and the two must agree
on the diagonal.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .field import FieldSample, FieldSpec, Kind, derive_seed, ellipticity_bounds, evaluate, sample_field
from .grid import BC, DiffusionOperator, Grid, GridFunction, assemble_diffusion, solve

DEFAULT_TOL = 1e-10
Q_RTOL = 1e-8


class ConsistencyError(RuntimeError):
    """Flux and energy definitions of the effective tensor disagree."""


@dataclass(frozen=True, eq=False)
class CorrectorSolution:
    grid: Grid
    direction: np.ndarray
    phi: GridFunction
    flux: np.ndarray             # per-cell a (nu + grad phi), shape (size, d)
    mean_flux: np.ndarray
    mean_gradient: np.ndarray    # volume average of grad phi (zero for periodic phi)
    energy: float                # Q_nu(phi)
    divergence: np.ndarray       # discrete div of the flux, per cell
    rhs_norm: float


def rve_grid(L: float, n: int, d: int) -> Grid:
    return Grid.cube(n, d, side=L, bc=BC.PERIODIC)


def rve_operator(sample: FieldSample, L: float, n: int) -> DiffusionOperator:
    grid = rve_grid(L, n, sample.spec.dimension)
    return assemble_diffusion(grid, lambda x: evaluate(sample, x))


def _forcing(op: DiffusionOperator, nu: np.ndarray) -> np.ndarray:
    """Discrete ``-(-div(a nu))``: right-hand side of the cell problem."""
    b = np.zeros(op.grid.size)
    for k, (G, T, w) in enumerate(zip(op.gradients, op.face_coefficients, op.face_weights)):
        if nu[k] != 0:
            b -= G.T @ (w * T * nu[k])
    for k, l, w, Dk, Dl in op.pairs:
        if nu[l] != 0:
            b -= Dk.T @ (w * nu[l])
    return b


def corrector_from_operator(op: DiffusionOperator, nu, tol: float = DEFAULT_TOL,
                            method: str = "auto") -> CorrectorSolution:
    nu = np.asarray(nu, dtype=float).reshape(-1)
    d = op.grid.d
    if nu.shape != (d,):
        raise ValueError(f"direction must have {d} components")
    if not np.any(nu):
        raise ValueError("direction must be non-zero")
    b = _forcing(op, nu)
    phi = solve(op, b, tol=tol, method=method).values

    a = op.cell_coeffs
    flux = np.zeros((op.grid.size, d))
    divergence = np.zeros(op.grid.size)
    energy = 0.0
    mean_grad = np.zeros(d)
    for k, (G, T) in enumerate(zip(op.gradients, op.face_coefficients)):
        grad = G @ phi
        mean_grad[k] = grad.mean()
        face_flux = T * (nu[k] + grad)
        energy += float(np.mean(face_flux * (nu[k] + grad)))
        divergence += G.T @ face_flux
        # each cell owns the average of its two faces along axis k
        flux[:, k] = 0.5 * (abs(G.T) @ face_flux) * op.grid.h[k]
    for k, l, w, Dk, Dl in op.pairs:
        cross = w * (nu[l] + Dl @ phi)
        flux[:, k] += cross
        energy += float(np.mean(cross * (nu[k] + Dk @ phi)))
        divergence += Dk.T @ cross
    return CorrectorSolution(op.grid, nu, GridFunction(op.grid, phi), flux, flux.mean(axis=0),
                             mean_grad, energy, divergence, float(np.linalg.norm(b)))


def solve_cell_problem(sample: FieldSample, L: float, n: int, nu,
                       tol: float = DEFAULT_TOL) -> CorrectorSolution:
    """Periodic corrector for direction ``nu`` on ``[0, L]^d`` with ``n`` cells per axis."""
    return corrector_from_operator(rve_operator(sample, L, n), nu, tol)


@dataclass(frozen=True, eq=False)
class SampleTensor:
    """Effective tensor of one realisation on one window."""

    raw: np.ndarray               # column j = mean flux for e_j (not symmetrised)
    energies: np.ndarray          # Q_{e_j}(phi_j)
    mean_coefficient: np.ndarray  # window average of a
    asymmetry: float              # |raw - raw^T|_max / |raw|_max

    @property
    def matrix(self) -> np.ndarray:
        return 0.5 * (self.raw + self.raw.T)


def effective_single(sample: FieldSample, L: float, n: int,
                     tol: float = DEFAULT_TOL) -> SampleTensor:
    op = rve_operator(sample, L, n)
    d = op.grid.d
    raw = np.zeros((d, d))
    energies = np.zeros(d)
    for j in range(d):
        sol = corrector_from_operator(op, np.eye(d)[j], tol)
        raw[:, j] = sol.mean_flux
        energies[j] = sol.energy
    scale = np.abs(raw).max()
    gap = np.abs(np.diag(raw) - energies).max()
    if gap > Q_RTOL * scale:
        raise ConsistencyError(f"flux/energy mismatch {gap:.3e} on the effective diagonal")
    asym = float(np.abs(raw - raw.T).max() / scale)
    return SampleTensor(raw, energies, op.cell_coeffs.mean(axis=0), asym)


@dataclass(frozen=True, eq=False)
class EffectiveTensor:
    """Monte Carlo estimate of the effective tensor."""

    dimension: int
    matrix: np.ndarray
    stderr: np.ndarray
    per_sample: list = field(repr=False)
    L: float = 0.0
    n: int = 0
    M: int = 0
    seed: int = 0
    bounds: tuple[float, float] = (0.0, 0.0)

    @property
    def raw_asymmetry(self) -> float:
        return max(s.asymmetry for s in self.per_sample) if self.per_sample else 0.0

    @property
    def q_consistency(self) -> float:
        """Largest |a_jj - Q_{e_j}| relative to the tensor scale over samples."""
        if not self.per_sample:
            return 0.0
        return max(float(np.abs(np.diag(s.raw) - s.energies).max() / np.abs(s.raw).max())
                   for s in self.per_sample)

    def bounds_check(self) -> bool:
        c1, c2 = self.bounds
        slack = 1e-8 * c2
        for m in [self.matrix] + [s.matrix for s in self.per_sample]:
            eig = np.linalg.eigvalsh(m)
            if eig[0] < c1 - slack or eig[-1] > c2 + slack:
                return False
        return True

    def scalar(self) -> float:
        return float(np.trace(self.matrix) / self.dimension)

    def to_dict(self) -> dict:
        return {
            "L": self.L, "n": self.n, "M": self.M, "seed": self.seed,
            "matrix": self.matrix.tolist(),
            "stderr": self.stderr.tolist(),
            "bounds": list(self.bounds),
            "bounds_check": self.bounds_check(),
            "Q_consistency": self.q_consistency,
            "raw_asymmetry": self.raw_asymmetry,
        }


def constant_tensor(matrix, bounds=None) -> EffectiveTensor:
    """Wrap a known matrix (e.g. an analytic effective tensor) as an estimate."""
    m = np.atleast_2d(np.asarray(matrix, float))
    eig = np.linalg.eigvalsh(m)
    return EffectiveTensor(m.shape[0], m, np.zeros_like(m), [],
                           bounds=bounds or (float(eig[0]), float(eig[-1])))


def sample_for_rve(spec: FieldSpec, seed: int, L: float) -> FieldSample:
    d = spec.dimension
    return sample_field(spec, seed, (np.zeros(d), np.full(d, float(L))))


def effective_tensor(spec: FieldSpec, L: float, n: int, M: int, seed: int,
                     tol: float = DEFAULT_TOL, threads: int = 1) -> EffectiveTensor:
    """Mean and entrywise standard error of the RVE tensor over ``M`` realisations."""
    if M < 1:
        raise ValueError("M must be >= 1")

    def one(m):
        return effective_single(sample_for_rve(spec, derive_seed(seed, m), L), L, n, tol)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            samples = list(pool.map(one, range(M)))
    else:
        samples = [one(m) for m in range(M)]
    stack = np.stack([s.raw for s in samples])
    mean = stack.mean(axis=0)
    # deviations from the first sample keep identical samples at exactly zero spread
    dev = stack - stack[0]
    stderr = dev.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(mean)
    return EffectiveTensor(spec.dimension, 0.5 * (mean + mean.T), stderr, samples,
                           L, n, M, seed, ellipticity_bounds(spec))


@dataclass(frozen=True)
class IsotropyReport:
    offdiag_max: float
    offdiag_stderr: float
    diag_spread: float
    spread_stderr: float

    @property
    def isotropic(self) -> bool:
        """Off-diagonals and diagonal spread both within 3 standard errors of zero."""
        return (self.offdiag_max <= 3 * self.offdiag_stderr
                and self.diag_spread <= 3 * self.spread_stderr)


def isotropy_report(t: EffectiveTensor) -> IsotropyReport:
    d = t.dimension
    if d == 1:
        return IsotropyReport(0.0, 0.0, 0.0, 0.0)
    off = ~np.eye(d, dtype=bool)
    sym = 0.5 * (t.matrix + t.matrix.T)
    k = np.argmax(np.abs(sym[off]))
    off_max = float(np.abs(sym[off])[k])
    off_se = float(t.stderr[off][k])
    diag = np.diag(sym)
    i, j = int(np.argmax(diag)), int(np.argmin(diag))
    spread = float(diag[i] - diag[j])
    if t.per_sample and len(t.per_sample) > 1:
        # paired differences remove the common sample-to-sample fluctuation
        diffs = np.array([s.raw[i, i] - s.raw[j, j] for s in t.per_sample])
        spread_se = float(diffs.std(ddof=1) / np.sqrt(len(diffs)))
    else:
        spread_se = float(np.hypot(t.stderr[i, i], t.stderr[j, j]))
    return IsotropyReport(off_max, off_se, spread, spread_se)


def dual_spec(spec: FieldSpec) -> FieldSpec:
    """Law of ``alpha * beta / a`` for a two-phase scalar field (phases swapped)."""
    d = spec.dimension
    for m in (spec.a_inside, spec.a_outside):
        if not np.allclose(m, m[0, 0] * np.eye(d)):
            raise ValueError("duality needs scalar phases")
    data = spec.to_dict()
    data["a_inside"], data["a_outside"] = data["a_outside"], data["a_inside"]
    return FieldSpec.from_dict(data)
