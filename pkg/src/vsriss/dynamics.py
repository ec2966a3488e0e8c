"""Continuous-time plants and one-step discrete-time maps.

State arrays are ``(n,)`` for a single point or ``(B, n)`` for a batch;
inputs follow the same convention with ``m`` columns. Periods may be a
scalar or a length-``B`` array.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ode

DEFAULT_ORACLE_TOL = 1e-12
DEFAULT_GUARD = 1e9


class DimensionError(ValueError):
    pass


class FlowStatus(enum.IntEnum):
    OK = ode.OK
    FINITE_ESCAPE = ode.FINITE_ESCAPE
    TOLERANCE_NOT_MET = ode.TOLERANCE_NOT_MET


@dataclass(frozen=True)
class Plant:
    """Vector field f(x, u) with f(0, 0) = 0.

    ``field`` must accept ``x`` of shape ``(B, n)`` and ``u`` of shape
    ``(B, m)`` and return ``(B, n)``.
    """

    name: str
    state_dim: int
    input_dim: int
    field: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)


@dataclass
class FlowResult:
    """Outcome of one step; arrays carry a leading batch axis when batched."""

    state: np.ndarray
    status: np.ndarray
    t_escape: np.ndarray

    @property
    def ok(self):
        return self.status == FlowStatus.OK

    @property
    def all_ok(self) -> bool:
        return bool(np.all(self.status == FlowStatus.OK))


def _batch(a, dim: int, what: str):
    a = np.asarray(a, dtype=float)
    single = a.ndim <= 1
    a2 = np.atleast_2d(a.reshape(-1) if a.ndim <= 1 else a)
    if a.ndim == 0:
        a2 = a2.reshape(1, 1)
    if a2.shape[-1] != dim:
        raise DimensionError(f"{what} has trailing dimension {a2.shape[-1]}, expected {dim}")
    return a2, single


def _batched_args(plant: Plant, x, u):
    x2, single_x = _batch(x, plant.state_dim, "state")
    u2, single_u = _batch(u, plant.input_dim, "input")
    B = max(x2.shape[0], u2.shape[0])
    x2 = np.broadcast_to(x2, (B, plant.state_dim))
    u2 = np.broadcast_to(u2, (B, plant.input_dim))
    return x2, u2, single_x and single_u


def _periods(T, B):
    T = np.asarray(T, dtype=float)
    return np.broadcast_to(T.reshape(-1) if T.ndim else T, (B,)).astype(float)


def eval_field(plant: Plant, x, u):
    x2, u2, single = _batched_args(plant, x, u)
    out = np.asarray(plant.field(x2, u2), dtype=float)
    return out[0] if single else out


def euler_step(plant: Plant, x, u, T):
    """x + T f(x, u)"""
    x2, u2, single = _batched_args(plant, x, u)
    Tb = _periods(T, x2.shape[0])
    if np.any(Tb < 0):
        raise ValueError("period must be nonnegative")
    out = x2 + Tb[:, None] * plant.field(x2, u2)
    return out[0] if single else out


def rk4_step(plant: Plant, x, u, T):
    """Classical fourth-order Runge-Kutta step with u held constant."""
    x2, u2, single = _batched_args(plant, x, u)
    Tb = _periods(T, x2.shape[0])[:, None]
    if np.any(Tb < 0):
        raise ValueError("period must be nonnegative")
    f = plant.field
    k1 = f(x2, u2)
    k2 = f(x2 + 0.5 * Tb * k1, u2)
    k3 = f(x2 + 0.5 * Tb * k2, u2)
    k4 = f(x2 + Tb * k3, u2)
    out = x2 + Tb / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return out[0] if single else out


def exact_step(plant: Plant, x, u, T, tol: float = DEFAULT_ORACLE_TOL,
               guard: float = DEFAULT_GUARD) -> FlowResult:
    """Flow of dx/dt = f(x, u) over [0, T] with u held constant.

    Escape is reported when the state norm crosses ``guard`` or the step
    size collapses while the solution is blowing up; ``t_escape`` then holds
    the time reached (NaN for rows that completed).
    """
    x2, u2, single = _batched_args(plant, x, u)
    Tb = _periods(T, x2.shape[0])
    if np.any(Tb <= 0) or tol <= 0:
        raise ValueError("exact_step needs T > 0 and tol > 0")
    u_c = np.ascontiguousarray(u2)

    def rhs(y, idx):
        return Tb[idx, None] * plant.field(y, u_c[idx])

    sol = ode.integrate(rhs, x2, rtol=tol, guard=guard)
    t_esc = np.where(sol.status == ode.OK, np.nan, sol.s_stop * Tb)
    if single:
        return FlowResult(sol.y[0], np.asarray(sol.status[0]), np.asarray(t_esc[0]))
    return FlowResult(sol.y, sol.status, t_esc)


def _guarded(x_new, guard, single):
    bad = ~np.all(np.isfinite(x_new), axis=1) | (np.max(np.abs(x_new), axis=1) > guard)
    x_new = np.where(bad[:, None], np.nan, x_new)
    status = np.where(bad, FlowStatus.FINITE_ESCAPE, FlowStatus.OK).astype(int)
    t_esc = np.full(x_new.shape[0], np.nan)
    if single:
        return FlowResult(x_new[0], np.asarray(status[0]), np.asarray(t_esc[0]))
    return FlowResult(x_new, status, t_esc)


@dataclass(frozen=True)
class DiscreteMap:
    """A one-step model (x, u, T) -> x'.

    ``kind`` is one of ``exact``, ``euler``, ``rk4`` or ``closed_form``.
    Approximate kinds share the exact oracle's blow-up guard so that
    trajectories of all kinds stop the same way.
    """

    kind: str
    plant: Plant | None = None
    tol: float = DEFAULT_ORACLE_TOL
    guard: float = DEFAULT_GUARD
    fn: Callable | None = field(default=None, repr=False)
    name: str = ""
    state_dim: int | None = None
    input_dim: int | None = None

    @property
    def n(self) -> int:
        return self.plant.state_dim if self.plant is not None else self.state_dim

    @property
    def m(self) -> int:
        return self.plant.input_dim if self.plant is not None else self.input_dim

    def step(self, x, u, T) -> FlowResult:
        if self.kind == "exact":
            return exact_step(self.plant, x, u, T, self.tol, self.guard)
        if self.kind == "euler":
            x_new = euler_step(self.plant, x, u, T)
        elif self.kind == "rk4":
            x_new = rk4_step(self.plant, x, u, T)
        elif self.kind == "closed_form":
            x2, single = _batch(x, self.n, "state")
            u2, _ = _batch(u, self.m, "input")
            x2 = np.broadcast_to(x2, (max(len(x2), len(u2)), self.n))
            u2 = np.broadcast_to(u2, (len(x2), self.m))
            x_new = np.asarray(self.fn(x2, u2, _periods(T, len(x2))), dtype=float)
            if single and len(x_new) == 1:
                x_new = x_new[0]
        else:
            raise ValueError(f"unknown map kind {self.kind!r}")
        single = np.ndim(x_new) == 1
        with np.errstate(all="ignore"):
            return _guarded(np.atleast_2d(x_new), self.guard, single)

    def __call__(self, x, u, T):
        return self.step(x, u, T).state


def exact_oracle(plant: Plant, tol: float = DEFAULT_ORACLE_TOL,
                 guard: float = DEFAULT_GUARD) -> DiscreteMap:
    return DiscreteMap("exact", plant, tol=tol, guard=guard, name=f"exact[{plant.name}]")


def euler(plant: Plant, guard: float = DEFAULT_GUARD) -> DiscreteMap:
    return DiscreteMap("euler", plant, guard=guard, name=f"euler[{plant.name}]")


def rk4(plant: Plant, guard: float = DEFAULT_GUARD) -> DiscreteMap:
    return DiscreteMap("rk4", plant, guard=guard, name=f"rk4[{plant.name}]")


def closed_form(fn, state_dim: int, input_dim: int, name: str = "closed_form",
                guard: float = DEFAULT_GUARD) -> DiscreteMap:
    """Wrap a user map ``fn(x (B,n), u (B,m), T (B,)) -> (B,n)``."""
    return DiscreteMap("closed_form", fn=fn, name=name, state_dim=state_dim,
                       input_dim=input_dim, guard=guard)


# -- polynomial fields and the built-in registry --------------------------------------


@dataclass(frozen=True)
class Monomial:
    coef: float
    x_pows: tuple[int, ...]
    u_pows: tuple[int, ...]


def polynomial_field(components: list[list[Monomial]], n: int, m: int):
    """Vector field whose i-th component is a sum of monomials in (x, u)."""
    if len(components) != n:
        raise DimensionError(f"need {n} component polynomials, got {len(components)}")
    for comp in components:
        for mono in comp:
            if len(mono.x_pows) != n or len(mono.u_pows) != m:
                raise DimensionError("monomial exponent lists must match (n, m)")

    def f(x, u):
        out = np.zeros(x.shape[:-1] + (n,))
        for i, comp in enumerate(components):
            for mono in comp:
                term = np.full(x.shape[:-1], float(mono.coef))
                for j, p in enumerate(mono.x_pows):
                    if p:
                        term = term * x[..., j] ** p
                for j, p in enumerate(mono.u_pows):
                    if p:
                        term = term * u[..., j] ** p
                out[..., i] += term
        return out

    return f


def plant_from_dict(d: dict) -> Plant:
    """Built-in name (``{"name": "cubic"}``) or polynomial field.

    Polynomial form::

        {"name": "mine", "state_dim": 1, "input_dim": 1,
         "polynomial": [[{"coef": 1, "x": [3], "u": [0]},
                         {"coef": 1, "x": [0], "u": [1]}]]}
    """
    if "polynomial" not in d:
        return builtin_plant(d["name"])
    n, m = int(d["state_dim"]), int(d["input_dim"])
    comps = [[Monomial(t["coef"], tuple(t.get("x", [0] * n)), tuple(t.get("u", [0] * m)))
              for t in comp] for comp in d["polynomial"]]
    return Plant(d.get("name", "polynomial"), n, m, polynomial_field(comps, n, m))


def _cubic(x, u):
    return x ** 3 + u


def _integrator(x, u):
    return u.copy()


def _stable_linear(x, u):
    return -x + u


_BUILTIN = {
    "cubic": (Plant("cubic", 1, 1, _cubic), "dx/dt = x^3 + u"),
    "integrator": (Plant("integrator", 1, 1, _integrator), "dx/dt = u"),
    "stable_linear": (Plant("stable_linear", 1, 1, _stable_linear), "dx/dt = -x + u"),
}


def builtin_plant(name: str) -> Plant:
    try:
        return _BUILTIN[name][0]
    except KeyError:
        raise KeyError(f"unknown plant {name!r}; known: {sorted(_BUILTIN)}") from None


def builtin_plants() -> dict[str, str]:
    return {k: v[1] for k, v in _BUILTIN.items()}


def map_from_dict(d: dict, plant: Plant) -> DiscreteMap:
    kind = d["kind"] if isinstance(d, dict) else d
    if kind == "euler":
        return euler(plant)
    if kind == "rk4":
        return rk4(plant)
    if kind == "exact":
        return exact_oracle(plant, tol=d.get("tol", DEFAULT_ORACLE_TOL) if isinstance(d, dict) else DEFAULT_ORACLE_TOL)
    raise ValueError(f"unknown model kind {kind!r}")
