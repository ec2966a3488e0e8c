"""Compact boxes and sup-over-box sampling with witnesses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_POINTS = 41
DEFAULT_REFINE = 10
MAX_LATTICE = 200_000
MAX_RANDOM = 200_000


@dataclass(frozen=True)
class CompactBox:
    """Product of closed intervals ``[lo[i], hi[i]]``."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or not self.lo:
            raise ValueError("box needs matching, nonempty lo/hi")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("box needs lo <= hi in every dimension")

    @classmethod
    def of(cls, *intervals) -> "CompactBox":
        """``CompactBox.of((-1, 1), (-4, 4))``"""
        return cls(tuple(float(a) for a, _ in intervals), tuple(float(b) for _, b in intervals))

    @classmethod
    def symmetric(cls, radius: float, dim: int = 1) -> "CompactBox":
        return cls((-float(radius),) * dim, (float(radius),) * dim)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def bound(self) -> float:
        """Largest Euclidean norm attained on the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def product(self, other: "CompactBox") -> "CompactBox":
        return CompactBox(self.lo + other.lo, self.hi + other.hi)

    def inflate(self, eta: float) -> "CompactBox":
        return CompactBox(tuple(a - eta for a in self.lo), tuple(b + eta for b in self.hi))

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((x >= lo - tol) & (x <= hi + tol), axis=-1)

    def lattice(self, points: int = DEFAULT_POINTS) -> np.ndarray:
        """Regular grid including every corner; degenerate axes get one point."""
        axes = [np.linspace(a, b, points) if b > a else np.array([a])
                for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def random(self, count: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return lo + (hi - lo) * rng.uniform(0.0, 1.0, size=(count, self.dim))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


def box_from(spec) -> CompactBox:
    """Accepts a CompactBox, ``{"lo": [...], "hi": [...]}`` or ``[[lo, hi], ...]``."""
    if isinstance(spec, CompactBox):
        return spec
    if isinstance(spec, dict):
        return CompactBox(tuple(map(float, spec["lo"])), tuple(map(float, spec["hi"])))
    spec = list(spec)
    if len(spec) == 2 and not isinstance(spec[0], (list, tuple)):
        return CompactBox.of(spec)
    return CompactBox.of(*spec)


def lattice_points_for(dim: int, points: int, cap: int = MAX_LATTICE) -> int:
    """Shrink points-per-dimension until the lattice fits under ``cap``."""
    p = points
    while p > 2 and p ** dim > cap:
        p = (p + 1) // 2
    return p


def samples(box: CompactBox, points: int = DEFAULT_POINTS, refine: int = DEFAULT_REFINE,
            seed: int = 0, max_random: int = MAX_RANDOM) -> np.ndarray:
    """Deterministic lattice followed by ``refine`` times as many seeded
    uniform points. Lattices nest under ``points -> 2*points - 1`` and random
    draws share a prefix for a fixed seed, so refining never loses samples."""
    lat = box.lattice(lattice_points_for(box.dim, points))
    count = min(refine * len(lat), max_random)
    if count <= 0:
        return lat
    rnd = box.random(count, np.random.default_rng(seed))
    return np.concatenate([lat, rnd])


@dataclass
class SupResult:
    value: float
    witness: np.ndarray
    index: int
    count: int


def sup_with_witness(values: np.ndarray, points: np.ndarray) -> SupResult:
    """Max with smallest-index tie-break; NaN counts as +inf (undefined is worst)."""
    v = np.where(np.isnan(values), np.inf, values)
    i = int(np.argmax(v))
    return SupResult(float(v[i]), np.asarray(points[i]), i, len(v))


def open_interval(hi: float, count: int, lo: float = 0.0) -> np.ndarray:
    """``count`` evenly spaced interior points of ``(lo, hi)``."""
    return lo + (hi - lo) * np.arange(1, count + 1) / (count + 1)
