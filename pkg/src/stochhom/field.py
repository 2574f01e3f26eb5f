"""Stationary random coefficient fields.

Four laws are supported: a constant matrix, a 1-D laminate (phases depend on
the first coordinate only), a checkerboard, and the Poisson inclusion field in
which ``a = a_inside`` within ``inclusion_radius`` of a Poisson point and
``a_outside`` elsewhere.

Lattice phases are never stored. Each cell's phase is a stateless hash of
``(seed, cell index)`` so arbitrarily distant cells can be evaluated in O(1)
memory and translates remain reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class FieldError(ValueError):
    """Invalid field specification."""


class OutOfDomainError(ValueError):
    """Evaluation requested outside the sampled bounding box."""


class Kind(str, Enum):
    CONSTANT = "Constant"
    LAYERED_1D = "Layered1D"
    CHECKERBOARD = "Checkerboard"
    POISSON = "PoissonInclusion"


def splitmix64(x):
    """Vectorised splitmix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed for sample ``index`` of a run seeded by ``seed``."""
    base = splitmix64(np.array([seed & _MASK], dtype=np.uint64))
    return int(splitmix64(base ^ np.uint64(index & _MASK))[0])


def cell_hash(seed: int, index) -> np.ndarray:
    """Hash of integer cell indices ``index`` (shape ``(..., k)``) under ``seed``."""
    index = np.asarray(index, dtype=np.int64)
    h = splitmix64(np.full(index.shape[:-1], seed & _MASK, dtype=np.uint64))
    for k in range(index.shape[-1]):
        h = splitmix64(h ^ index[..., k].view(np.uint64))
    return h


def hash_uniform(h) -> np.ndarray:
    """Map 64-bit hashes to uniforms in [0, 1) using the top 53 bits."""
    return (np.asarray(h, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _as_matrix(a, d: int, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=float)
    if m.ndim == 0:
        m = float(m) * np.eye(d)
    if m.shape != (d, d):
        raise FieldError(f"{name} must be a {d}x{d} matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FieldError(f"{name} has non-finite entries")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise FieldError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(m)[0] <= 0:
        raise FieldError(f"{name} is not positive definite")
    return 0.5 * (m + m.T)


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """Law of a stationary ergodic matrix-valued coefficient field."""

    kind: Kind
    dimension: int
    a_inside: np.ndarray
    a_outside: np.ndarray | None = None
    inclusion_radius: float = 0.5
    intensity: float = 1.0
    phase_probability: float = 0.5
    cell_size: float = 1.0

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        d = int(self.dimension)
        if d not in (1, 2, 3):
            raise FieldError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        object.__setattr__(self, "dimension", d)
        a0 = _as_matrix(self.a_inside, d, "a_inside")
        a1 = a0 if self.a_outside is None else _as_matrix(self.a_outside, d, "a_outside")
        object.__setattr__(self, "a_inside", a0)
        object.__setattr__(self, "a_outside", a1)
        if kind is Kind.POISSON:
            if not self.intensity > 0:
                raise FieldError("intensity must be > 0 for PoissonInclusion")
            if not self.inclusion_radius > 0:
                raise FieldError("inclusion_radius must be > 0")
        if kind in (Kind.LAYERED_1D, Kind.CHECKERBOARD):
            if not self.cell_size > 0:
                raise FieldError("cell_size must be > 0 for lattice kinds")
            if not 0.0 <= self.phase_probability <= 1.0:
                raise FieldError("phase_probability must lie in [0, 1]")

    @property
    def correlation_length(self) -> float:
        """Microstructure length: inclusion diameter or lattice cell size."""
        if self.kind is Kind.POISSON:
            return 2.0 * self.inclusion_radius
        if self.kind is Kind.CONSTANT:
            return 1.0
        return self.cell_size

    def mean_coefficient(self) -> np.ndarray:
        """Ensemble mean E[a] under the law."""
        if self.kind is Kind.CONSTANT:
            return self.a_inside.copy()
        p = self.inside_probability()
        return p * self.a_inside + (1 - p) * self.a_outside

    def inside_probability(self) -> float:
        """P(a(x) = a_inside) for any fixed x."""
        if self.kind is Kind.CONSTANT:
            return 1.0
        if self.kind is Kind.POISSON:
            return 1.0 - np.exp(-self.intensity * ball_volume(self.dimension, self.inclusion_radius))
        return self.phase_probability

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "dimension": self.dimension,
            "a_inside": self.a_inside.tolist(),
            "a_outside": self.a_outside.tolist(),
            "inclusion_radius": self.inclusion_radius,
            "intensity": self.intensity,
            "phase_probability": self.phase_probability,
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FieldSpec":
        return cls(**data)


def ball_volume(d: int, r: float) -> float:
    return {1: 2.0 * r, 2: np.pi * r**2, 3: 4.0 / 3.0 * np.pi * r**3}[d]


@dataclass(frozen=True, eq=False)
class FieldSample:
    """One realisation of a :class:`FieldSpec`, possibly translated.

    ``points`` holds the Poisson points (empty for other kinds); ``box`` is the
    region where evaluation is allowed, in the coordinates of the untranslated
    realisation.
    """

    spec: FieldSpec
    seed: int
    box: tuple[np.ndarray, np.ndarray] | None = None
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    shift: np.ndarray | None = None
    _tree: cKDTree | None = field(default=None, repr=False)

    def __post_init__(self):
        d = self.spec.dimension
        if self.shift is None:
            object.__setattr__(self, "shift", np.zeros(d))
        if self.spec.kind is Kind.POISSON and self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.points.reshape(-1, d)))

    def count_in(self, lower, upper) -> int:
        """Number of Poisson points of the realisation inside ``[lower, upper)``."""
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        pts = self.points.reshape(-1, self.spec.dimension)
        return int(np.count_nonzero(np.all((pts >= lower) & (pts < upper), axis=1)))


def sample_field(spec: FieldSpec, seed: int, bounding_box=None) -> FieldSample:
    """Draw the realisation of ``spec`` indexed by ``seed``.

    ``bounding_box`` is ``(lower, upper)``; it is mandatory for the Poisson kind,
    whose points are simulated in the box enlarged by ``inclusion_radius`` so
    that evaluation anywhere in the box is exact.
    """
    d = spec.dimension
    seed = int(seed) & _MASK
    if bounding_box is None:
        if spec.kind is Kind.POISSON:
            raise FieldError("PoissonInclusion sampling needs a bounding box")
        return FieldSample(spec, seed)
    lower = np.broadcast_to(np.asarray(bounding_box[0], float), (d,)).copy()
    upper = np.broadcast_to(np.asarray(bounding_box[1], float), (d,)).copy()
    if not np.all(upper > lower):
        raise FieldError("bounding box is degenerate")
    if spec.kind is not Kind.POISSON:
        return FieldSample(spec, seed, box=(lower, upper))
    margin = spec.inclusion_radius
    lo, hi = lower - margin, upper + margin
    rng = np.random.default_rng(seed)
    count = rng.poisson(spec.intensity * np.prod(hi - lo))
    points = lo + (hi - lo) * rng.random((count, d))
    return FieldSample(spec, seed, box=(lower, upper), points=points)


def _points(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != d:
        raise ValueError(f"points must have trailing dimension {d}")
    return x


def phase(sample: FieldSample, x) -> np.ndarray:
    """Boolean array: True where the field equals ``a_inside``."""
    spec = sample.spec
    x = _points(x, spec.dimension) + sample.shift
    kind = spec.kind
    if kind is Kind.CONSTANT:
        return np.ones(x.shape[:-1], dtype=bool)
    if kind is Kind.POISSON:
        lower, upper = sample.box
        tol = 1e-12 * max(1.0, float(np.abs(upper).max()))
        if np.any(x < lower - tol) or np.any(x > upper + tol):
            raise OutOfDomainError("evaluation point outside the sampled bounding box")
        if sample._tree.n == 0:
            return np.zeros(x.shape[:-1], dtype=bool)
        r = spec.inclusion_radius
        dist, _ = sample._tree.query(x.reshape(-1, spec.dimension), k=1,
                                     distance_upper_bound=r * (1 + 1e-12) + 1e-300)
        return (dist <= r).reshape(x.shape[:-1])
    idx = np.floor(x / spec.cell_size).astype(np.int64)
    if kind is Kind.LAYERED_1D:
        idx = idx[..., :1]
    return hash_uniform(cell_hash(sample.seed, idx)) < spec.phase_probability


def evaluate(sample: FieldSample, x) -> np.ndarray:
    """Coefficient matrices at points ``x`` (shape ``(..., d)``) -> ``(..., d, d)``."""
    inside = phase(sample, x)
    spec = sample.spec
    return np.where(inside[..., None, None], spec.a_inside, spec.a_outside)


def translate(sample: FieldSample, y) -> FieldSample:
    """Translated realisation: ``evaluate(translate(s, y), x) == evaluate(s, x + y)``."""
    y = np.broadcast_to(np.asarray(y, float), (sample.spec.dimension,))
    return replace(sample, shift=sample.shift + y)


def ellipticity_bounds(spec: FieldSpec) -> tuple[float, float]:
    """(c1, c2): extreme eigenvalues over both phases."""
    eig = np.concatenate([np.linalg.eigvalsh(spec.a_inside), np.linalg.eigvalsh(spec.a_outside)])
    return float(eig.min()), float(eig.max())


def scaled(sample: FieldSample, eps: float):
    """Coefficient callable ``x -> a(x / eps)`` for a fixed realisation."""
    return lambda x: evaluate(sample, np.asarray(x, float) / eps)
