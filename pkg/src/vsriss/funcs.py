"""Comparison functions: class-K, class-KL and nondecreasing gains.

Every descriptor is an immutable dataclass, evaluates elementwise on floats
or numpy arrays, and round-trips through ``to_dict``/``from_dict`` using a
``kind`` tag, e.g. ``{"kind": "power", "c": 10, "p": 1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ode

DEFAULT_INVERSE_TOL = 1e-10
DEFAULT_CEILING = 1e12
DEFAULT_KL_RTOL = 1e-10


class DomainError(ValueError):
    """Negative argument passed to a comparison function."""


class RangeError(ValueError):
    """Value lies above f(ceiling); inversion cannot bracket it."""


class IntegrationError(RuntimeError):
    pass


def _check_nonneg(s):
    if np.any(np.asarray(s) < 0):
        raise DomainError(f"comparison functions take s >= 0, got {s!r}")


def _num(x):
    """Return python scalars for 0-d results, arrays otherwise."""
    if isinstance(x, np.ndarray) and x.ndim == 0:
        return x.item()
    return x


class KFunction:
    """Base class. Subclasses implement ``_eval`` on nonnegative input."""

    def __call__(self, s):
        _check_nonneg(s)
        return _num(self._eval(s))

    def _eval(self, s):  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class Power(KFunction):
    """c * s**p"""

    c: float
    p: float

    def __post_init__(self):
        if not (self.c > 0 and self.p > 0):
            raise ValueError("power requires c > 0 and p > 0")

    def _eval(self, s):
        return self.c * s ** self.p

    def to_dict(self):
        return {"kind": "power", "c": self.c, "p": self.p}


def identity() -> Power:
    return Power(1, 1)


@dataclass(frozen=True)
class PowerSum(KFunction):
    terms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("power_sum needs at least one term")
        for c, p in self.terms:
            if not (c > 0 and p > 0):
                raise ValueError("power_sum terms need c > 0 and p > 0")

    def _eval(self, s):
        return sum(c * s ** p for c, p in self.terms)

    def to_dict(self):
        return {"kind": "power_sum", "terms": [[c, p] for c, p in self.terms]}


@dataclass(frozen=True)
class Sum(KFunction):
    terms: tuple[KFunction, ...]

    def _eval(self, s):
        return sum(f._eval(s) for f in self.terms)

    def to_dict(self):
        return {"kind": "sum", "terms": [f.to_dict() for f in self.terms]}


@dataclass(frozen=True)
class Scaled(KFunction):
    k: float
    f: KFunction

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("scale factor must be positive")

    def _eval(self, s):
        return self.k * self.f._eval(s)

    def to_dict(self):
        return {"kind": "scale", "k": self.k, "f": self.f.to_dict()}


@dataclass(frozen=True)
class Max(KFunction):
    f: KFunction
    g: KFunction

    def _eval(self, s):
        return np.maximum(self.f._eval(s), self.g._eval(s))

    def to_dict(self):
        return {"kind": "max", "f": self.f.to_dict(), "g": self.g.to_dict()}


@dataclass(frozen=True)
class Compose(KFunction):
    """outer(inner(s))"""

    outer: KFunction
    inner: KFunction

    def _eval(self, s):
        return self.outer._eval(self.inner._eval(s))

    def to_dict(self):
        return {"kind": "compose", "outer": self.outer.to_dict(), "inner": self.inner.to_dict()}


@dataclass(frozen=True)
class Inverse(KFunction):
    f: KFunction
    tol: float = DEFAULT_INVERSE_TOL
    ceiling: float = DEFAULT_CEILING

    def _eval(self, y):
        return inverse_k(self.f, y, self.tol, self.ceiling)

    def to_dict(self):
        return {"kind": "inverse", "f": self.f.to_dict(), "tol": self.tol, "ceiling": self.ceiling}


@dataclass(frozen=True)
class KLSection(KFunction):
    """s -> beta(s, t) for a fixed time t."""

    beta: "KLFunction"
    t: float = 0.0

    def _eval(self, s):
        return self.beta._eval(s, self.t)

    def to_dict(self):
        return {"kind": "kl_section", "beta": self.beta.to_dict(), "t": self.t}


def eval_k(f: KFunction, s):
    return f(s)


def compose_k(f: KFunction, g: KFunction) -> KFunction:
    """The function s -> f(g(s))."""
    return Compose(f, g)


def add_k(*fs: KFunction) -> KFunction:
    return Sum(tuple(fs))


def scale_k(k: float, f: KFunction) -> KFunction:
    return Scaled(k, f)


def max_k(f: KFunction, g: KFunction) -> KFunction:
    return Max(f, g)


def inverse_k(f: KFunction, y, tol: float = DEFAULT_INVERSE_TOL,
              ceiling: float = DEFAULT_CEILING):
    """Invert a class-K function by bracketing bisection.

    Works elementwise on arrays. The upper bracket is grown by doubling from
    1 up to ``ceiling``; values above ``f(ceiling)`` raise :class:`RangeError`.
    The result satisfies ``|f(s) - y| <= tol`` unless f is too steep for that
    to be representable, in which case the closest bracket midpoint is returned.
    """
    _check_nonneg(y)
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    top = float(f._eval(ceiling))
    if np.any(y_arr > top):
        raise RangeError(f"value {y_arr.max()!r} exceeds f(ceiling={ceiling:g}) = {top:g}")

    lo = np.zeros_like(y_arr)
    hi = np.ones_like(y_arr)
    while True:
        short = f._eval(hi) < y_arr
        if not np.any(short):
            break
        hi = np.where(short, np.minimum(2 * hi, ceiling), hi)
        lo = np.where(short, hi / 2, lo)
        if np.all(hi[short] >= ceiling):
            break

    # bisect to float resolution; tol is then met whenever it is attainable
    for _ in range(1100):
        mid = 0.5 * (lo + hi)
        active = (mid > lo) & (mid < hi)
        if not np.any(active):
            break
        fm = f._eval(mid)
        below = fm < y_arr
        lo = np.where(active & below, mid, lo)
        hi = np.where(active & ~below, mid, hi)
    out = 0.5 * (lo + hi)
    out[y_arr == 0] = 0.0
    if np.ndim(y) == 0:
        return float(out[0])
    return out.reshape(np.shape(y))


# -- class-KL -------------------------------------------------------------------


class KLFunction:
    def __call__(self, s, t):
        _check_nonneg(s)
        if np.any(np.asarray(t) < 0):
            raise DomainError("KL functions take t >= 0")
        return _num(self._eval(s, t))

    def _eval(self, s, t):  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class SeparableKL(KLFunction):
    """kappa(s) * exp(-rate * t)"""

    kappa: KFunction
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("decay rate must be positive")

    def _eval(self, s, t):
        return self.kappa._eval(s) * np.exp(-self.rate * np.asarray(t, dtype=float))

    def to_dict(self):
        return {"kind": "separable", "kappa": self.kappa.to_dict(), "rate": self.rate}


@dataclass(frozen=True)
class ComparisonKL(KLFunction):
    """Solution y(t) of dy/dt = -alpha(y), y(0) = s."""

    alpha: KFunction
    rtol: float = DEFAULT_KL_RTOL

    def _eval(self, s, t):
        return comparison_kl(self.alpha, s, t, self.rtol)

    def to_dict(self):
        return {"kind": "comparison", "alpha": self.alpha.to_dict(), "rtol": self.rtol}


@dataclass(frozen=True)
class ComposedKL(KLFunction):
    """outer(inner(pre(s), t))"""

    outer: KFunction
    inner: KLFunction
    pre: KFunction

    def _eval(self, s, t):
        return self.outer._eval(self.inner._eval(self.pre._eval(s), t))

    def to_dict(self):
        return {"kind": "composed", "outer": self.outer.to_dict(),
                "inner": self.inner.to_dict(), "pre": self.pre.to_dict()}


def comparison_kl(alpha: KFunction, s0, t, tol: float = DEFAULT_KL_RTOL):
    """Integrate dy/dt = -alpha(y) from y(0)=s0 to time t.

    ``s0`` and ``t`` broadcast against each other; each pair is integrated on
    its own horizon in one batched call.
    """
    _check_nonneg(s0)
    _check_nonneg(t)
    s_arr, t_arr = np.broadcast_arrays(np.asarray(s0, dtype=float), np.asarray(t, dtype=float))
    shape = s_arr.shape
    s_flat = s_arr.ravel()
    t_flat = t_arr.ravel()
    out = s_flat.copy()
    todo = np.flatnonzero((s_flat > 0) & (t_flat > 0))
    if todo.size:
        horizon = t_flat[todo]

        def rhs(y, idx):
            return -horizon[idx, None] * alpha._eval(np.maximum(y, 0.0))

        sol = ode.integrate(rhs, s_flat[todo, None], rtol=tol, atol=tol * 1e-3)
        if np.any(sol.status != ode.OK):
            raise IntegrationError(
                f"comparison ODE failed for s0={s_flat[todo][sol.status != ode.OK][:3]}")
        out[todo] = np.maximum(sol.y[:, 0], 0.0)
    if shape == ():
        return float(out[0])
    return out.reshape(shape)


# -- nondecreasing gains --------------------------------------------------------


class NondecreasingFn:
    def __call__(self, s):
        return _num(self._eval(np.asarray(s, dtype=float)))


@dataclass(frozen=True)
class Constant(NondecreasingFn):
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("constant gain must be nonnegative")

    def _eval(self, s):
        return np.full(np.shape(s), self.value) if np.ndim(s) else self.value

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class PiecewiseConstant(NondecreasingFn):
    """values[i] on [breakpoints[i-1], breakpoints[i]); values[0] below breakpoints[0]."""

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != len(self.breakpoints) + 1:
            raise ValueError("need len(values) == len(breakpoints) + 1")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(v2 < v1 for v1, v2 in zip(self.values, self.values[1:])) or self.values[0] < 0:
            raise ValueError("values must be nonnegative and nondecreasing")

    def _eval(self, s):
        i = np.searchsorted(np.asarray(self.breakpoints), s, side="right")
        return np.asarray(self.values)[i]

    def to_dict(self):
        return {"kind": "piecewise", "breakpoints": list(self.breakpoints),
                "values": list(self.values)}


# -- serialization ----------------------------------------------------------------


def k_from_dict(d: dict) -> KFunction:
    kind = d.get("kind")
    if kind == "power":
        return Power(d["c"], d["p"])
    if kind == "identity":
        return identity()
    if kind == "power_sum":
        return PowerSum(tuple((c, p) for c, p in d["terms"]))
    if kind == "sum":
        return Sum(tuple(k_from_dict(t) for t in d["terms"]))
    if kind == "scale":
        return Scaled(d["k"], k_from_dict(d["f"]))
    if kind == "max":
        return Max(k_from_dict(d["f"]), k_from_dict(d["g"]))
    if kind == "compose":
        return Compose(k_from_dict(d["outer"]), k_from_dict(d["inner"]))
    if kind == "chain":
        fs = [k_from_dict(x) for x in d["fs"]]
        out = fs[-1]
        for f in reversed(fs[:-1]):
            out = Compose(f, out)
        return out
    if kind == "inverse":
        return Inverse(k_from_dict(d["f"]), d.get("tol", DEFAULT_INVERSE_TOL),
                       d.get("ceiling", DEFAULT_CEILING))
    if kind == "kl_section":
        return KLSection(kl_from_dict(d["beta"]), d.get("t", 0.0))
    raise ValueError(f"unknown K-function kind {kind!r}")


def kl_from_dict(d: dict) -> KLFunction:
    kind = d.get("kind")
    if kind == "separable":
        return SeparableKL(k_from_dict(d["kappa"]), d["rate"])
    if kind == "comparison":
        return ComparisonKL(k_from_dict(d["alpha"]), d.get("rtol", DEFAULT_KL_RTOL))
    if kind == "composed":
        return ComposedKL(k_from_dict(d["outer"]), kl_from_dict(d["inner"]),
                          k_from_dict(d["pre"]))
    raise ValueError(f"unknown KL-function kind {kind!r}")


def nondecreasing_from_dict(d: dict) -> NondecreasingFn:
    kind = d.get("kind")
    if kind == "constant":
        return Constant(d["value"])
    if kind == "piecewise":
        return PiecewiseConstant(tuple(d["breakpoints"]), tuple(d["values"]))
    raise ValueError(f"unknown nondecreasing-function kind {kind!r}")


def as_k(x) -> KFunction:
    return x if isinstance(x, KFunction) else k_from_dict(x)


def sample_points(ceiling: float = 10.0, n: int = 200) -> Sequence[float]:
    """Sorted sample grid on [0, ceiling] mixing linear and log spacing."""
    lin = np.linspace(0.0, ceiling, n)
    log = np.geomspace(1e-6, ceiling, n)
    return np.unique(np.concatenate([lin, log]))
