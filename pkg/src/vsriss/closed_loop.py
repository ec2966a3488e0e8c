"""Control laws, the closed-loop map, sampling schedules and simulation.

The closed loop is ``x_{k+1} = F(x_k, U(x_k + e_k, T_k), T_k)``: the
measurement error enters only through the controller, never the plant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dynamics
from .dynamics import DEFAULT_GUARD, DiscreteMap, FlowResult, FlowStatus, Plant

VSR_LOW_FRACTION = 0.1
OPEN_MARGIN = 1e-9


# -- control laws -------------------------------------------------------------------


@dataclass(frozen=True)
class ControlLaw:
    """u = U(x_hat, T). ``evaluator`` maps ``(B, n), (B,) -> (B, m)``.

    ``bound_profile`` optionally maps a state bound M to a declared
    ``(T_star, C)`` pair for the local-uniform-boundedness check.
    """

    name: str
    state_dim: int
    input_dim: int
    evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    bound_profile: Callable[[float], tuple[float, float]] | None = field(default=None, repr=False)

    def __call__(self, x_hat, T):
        x2 = np.atleast_2d(np.asarray(x_hat, dtype=float))
        single = np.ndim(x_hat) <= 1
        Tb = np.broadcast_to(np.asarray(T, dtype=float).reshape(-1) if np.ndim(T) else T,
                             (x2.shape[0],))
        u = np.asarray(self.evaluator(x2, Tb), dtype=float)
        return u[0] if single else u


def _u_law(x, T):
    return -x - 3 * x ** 3


def _w_law(x, T):
    return -x - x ** 3


def _zero_law(x, T):
    return np.zeros_like(x)


_LAWS = {
    "U": (_u_law, "u = -x - 3x^3"),
    "W": (_w_law, "u = -x - x^3"),
    "zero": (_zero_law, "u = 0"),
}


def builtin_law(name: str) -> ControlLaw:
    try:
        fn, _ = _LAWS[name]
    except KeyError:
        raise KeyError(f"unknown control law {name!r}; known: {sorted(_LAWS)}") from None
    return ControlLaw(name, 1, 1, fn)


def builtin_laws() -> dict[str, str]:
    return {k: v[1] for k, v in _LAWS.items()}


def law_from_dict(d: dict) -> ControlLaw:
    """Built-in name or a polynomial in x_hat (same monomial grammar as plants,
    with ``u`` exponents omitted)."""
    if "polynomial" not in d:
        return builtin_law(d["name"])
    n, m = int(d["state_dim"]), int(d["input_dim"])
    comps = [[dynamics.Monomial(t["coef"], tuple(t.get("x", [0] * n)), ())
              for t in comp] for comp in d["polynomial"]]
    if len(comps) != m or any(len(t.x_pows) != n for c in comps for t in c):
        raise dynamics.DimensionError("law polynomial must have input_dim components over state_dim exponents")

    def law(x, T):
        out = np.zeros(x.shape[:-1] + (m,))
        for i, comp in enumerate(comps):
            for mono in comp:
                term = np.full(x.shape[:-1], float(mono.coef))
                for j, p in enumerate(mono.x_pows):
                    if p:
                        term = term * x[..., j] ** p
                out[..., i] += term
        return out

    return ControlLaw(d.get("name", "polynomial"), n, m, law)


# -- closed-loop systems --------------------------------------------------------------


@dataclass(frozen=True)
class ClosedLoopSystem:
    model: DiscreteMap
    law: ControlLaw

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def name(self) -> str:
        return f"{self.model.name}+{self.law.name}"

    def inputs(self, x, e, T):
        return self.law(np.asarray(x, dtype=float) + np.asarray(e, dtype=float), T)

    def step(self, x, e, T) -> FlowResult:
        return self.model.step(x, self.inputs(x, e, T), T)

    def __call__(self, x, e, T):
        return self.step(x, e, T).state


@dataclass(frozen=True)
class DirectClosedLoop:
    """A closed-loop map given directly as ``fn(x (B,n), e (B,n), T (B,))``."""

    fn: Callable = field(repr=False)
    n: int = 1
    name: str = "direct"
    guard: float = DEFAULT_GUARD

    def inputs(self, x, e, T):
        return np.zeros(np.shape(np.atleast_2d(x))[:-1] + (0,))

    def step(self, x, e, T) -> FlowResult:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        e2 = np.broadcast_to(np.atleast_2d(np.asarray(e, dtype=float)), x2.shape)
        Tb = np.broadcast_to(np.asarray(T, dtype=float).reshape(-1) if np.ndim(T) else T,
                             (x2.shape[0],))
        with np.errstate(all="ignore"):
            out = np.asarray(self.fn(x2, e2, Tb), dtype=float)
            res = dynamics._guarded(out, self.guard, single=False)
        if np.ndim(x) <= 1:
            return FlowResult(res.state[0], res.status[0], res.t_escape[0])
        return res

    def __call__(self, x, e, T):
        return self.step(x, e, T).state


def closed_loop_step(sys, x, e, T) -> FlowResult:
    if np.any(np.asarray(T) <= 0):
        raise ValueError("closed_loop_step needs T > 0")
    return sys.step(x, e, T)


def euler_cubic_u_map(x, e, T):
    """Euler model of x' = x^3 + u under u = U(x+e), expanded in closed form."""
    return x - T * (2 * x ** 3 + 9 * e * x ** 2 + (9 * e ** 2 + 1) * x + 3 * e ** 3 + e)


def euler_cubic_w_map(x, e, T):
    """Euler model of x' = x^3 + u under u = W(x+e), expanded in closed form."""
    return x - T * (3 * e * x ** 2 + (1 + 3 * e ** 2) * x + e ** 3 + e)


def _direct_T(fn):
    return lambda x, e, T: fn(x, e, np.asarray(T)[:, None])


def direct_euler_cubic_u() -> DirectClosedLoop:
    return DirectClosedLoop(_direct_T(euler_cubic_u_map), 1, "euler-cubic-U")


def direct_euler_cubic_w() -> DirectClosedLoop:
    return DirectClosedLoop(_direct_T(euler_cubic_w_map), 1, "euler-cubic-W")


# -- schedules ----------------------------------------------------------------------------


@dataclass
class Schedule:
    """Sampling periods in (0, T_star) and measurement errors bounded by E.

    When ``adversarial`` is set the errors are chosen during simulation as
    ``-E * sign(x_k)`` and ``errors`` holds only a zero placeholder.
    """

    periods: np.ndarray
    errors: np.ndarray
    T_star: float
    E: float
    spec: dict = field(default_factory=dict)
    seed: int | None = None
    adversarial: bool = False

    @property
    def K(self) -> int:
        return len(self.periods)

    def validate(self):
        if not np.all((self.periods > 0) & (self.periods < self.T_star)):
            raise ValueError("periods must lie in the open interval (0, T_star)")
        norms = np.linalg.norm(self.errors, axis=1)
        if np.any(norms > self.E * (1 + 1e-12)):
            raise ValueError("error sequence exceeds its bound E")
        return self


def _ball(rng, count, n, radius):
    if n == 1:
        return rng.uniform(-radius, radius, size=(count, 1))
    d = rng.standard_normal((count, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(0, 1, size=(count, 1)) ** (1.0 / n)
    return d * r


def make_periods(spec: dict, K: int, rng: np.random.Generator | None = None):
    """Return ``(periods, T_star)`` for a period spec."""
    kind = spec.get("kind")
    if kind not in ("uniform", "random_vsr", "sawtooth"):
        raise ValueError(f"unknown period spec {kind!r}")
    needed = "T" if kind == "uniform" else "T_star"
    if needed not in spec:
        raise ValueError(f"period spec {kind!r} needs {needed}")
    if K < 1:
        raise ValueError("schedule length K must be >= 1")
    if kind == "uniform":
        T = float(spec["T"])
        T_star = float(spec.get("T_star", np.nextafter(T, np.inf)))
        if not 0 < T < T_star:
            raise ValueError("uniform period needs 0 < T < T_star")
        return np.full(K, T), T_star
    T_star = float(spec["T_star"])
    if not T_star > 0:
        raise ValueError("T_star must be positive")
    lo, hi = VSR_LOW_FRACTION * T_star, T_star * (1 - OPEN_MARGIN)
    if kind == "random_vsr":
        return rng.uniform(lo, hi, size=K), T_star
    teeth = int(spec.get("teeth", 10))
    if teeth < 1:
        raise ValueError("sawtooth needs teeth >= 1")
    ramp = np.linspace(lo, hi, teeth)
    return ramp[np.arange(K) % teeth], T_star


def make_errors(spec: dict, K: int, n: int, rng: np.random.Generator | None = None):
    """Return ``(errors, E, adversarial)`` for an error spec."""
    kind = spec.get("kind", "zero")
    if kind == "zero":
        return np.zeros((K, n)), 0.0, False
    if kind == "constant":
        e = np.broadcast_to(np.asarray(spec["e"], dtype=float).reshape(-1), (n,))
        return np.tile(e, (K, 1)), float(np.linalg.norm(e)), False
    if kind not in ("random", "adversarial_sign"):
        raise ValueError(f"unknown error spec {kind!r}")
    if "E" not in spec:
        raise ValueError(f"error spec {kind!r} needs E")
    E = float(spec["E"])
    if E < 0:
        raise ValueError("error bound E must be nonnegative")
    if kind == "random":
        return _ball(rng, K, n, E), E, False
    return np.zeros((K, n)), E, True


def make_schedule(period_spec: dict, error_spec: dict, K: int, n: int = 1,
                  seed: int | None = None) -> Schedule:
    """Build a reproducible schedule; periods and errors use independent
    child streams of ``seed`` so changing one spec never perturbs the other."""
    p_seq, e_seq = np.random.SeedSequence(seed).spawn(2)
    periods, T_star = make_periods(period_spec, K, np.random.default_rng(p_seq))
    errors, E, adv = make_errors(error_spec, K, n, np.random.default_rng(e_seq))
    sched = Schedule(periods, errors, T_star, E,
                     spec={"periods": dict(period_spec), "errors": dict(error_spec), "K": K},
                     seed=seed, adversarial=adv)
    if adv:
        return sched
    return sched.validate()


def adversarial_errors(x, E):
    """-E * sign(x) componentwise, scaled onto the E-ball, with sign(0) = +1."""
    s = np.where(x >= 0, 1.0, -1.0)
    n = x.shape[-1]
    return -E * s / np.sqrt(n)


# -- trajectories ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Sampled closed-loop solution.

    ``states`` holds x_0..x_k; ``inputs``, ``errors`` and ``periods`` hold
    the k applied steps. ``escape_index`` is the first index whose state does
    not exist (None when complete).
    """

    states: np.ndarray
    times: np.ndarray
    inputs: np.ndarray
    errors: np.ndarray
    periods: np.ndarray
    status: str = "complete"
    escape_index: int | None = None

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.states, axis=1)

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.ndim == 2 else 0
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t_k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
                   + [f"e{i}" for i in range(n)] + ["T_k"])
        K = len(self.periods)
        for k in range(len(self.states)):
            row = [k, repr(float(self.times[k]))] + [repr(float(v)) for v in self.states[k]]
            if k < K:
                row += [repr(float(v)) for v in self.inputs[k]]
                row += [repr(float(v)) for v in self.errors[k]]
                row += [repr(float(self.periods[k]))]
            else:
                row += [""] * (m + n + 1)
            w.writerow(row)
        return buf.getvalue()


@dataclass
class BatchTrajectory:
    """Ensemble of trajectories with NaN states after each row's escape."""

    states: np.ndarray        # (B, K+1, n)
    inputs: np.ndarray        # (B, K, m)
    errors: np.ndarray        # (B, K, n)
    periods: np.ndarray       # (B, K)
    escape_index: np.ndarray  # (B,), -1 when complete

    @property
    def times(self) -> np.ndarray:
        B = self.periods.shape[0]
        return np.concatenate([np.zeros((B, 1)), np.cumsum(self.periods, axis=1)], axis=1)

    def row(self, b: int) -> Trajectory:
        esc = int(self.escape_index[b])
        last = esc if esc >= 0 else self.states.shape[1]
        return Trajectory(self.states[b, :last], self.times[b, :last],
                          self.inputs[b, :last - 1], self.errors[b, :last - 1],
                          self.periods[b, :last - 1],
                          "escaped" if esc >= 0 else "complete", esc if esc >= 0 else None)


def _sys_input_dim(sys) -> int:
    if isinstance(sys, ClosedLoopSystem):
        return sys.law.input_dim
    return 0


def simulate_batch(sys, x0, periods, errors=None, adversarial_E: float | None = None
                   ) -> BatchTrajectory:
    """Iterate the closed-loop map for every row of ``x0`` in lock-step.

    ``periods`` is ``(B, K)``; ``errors`` is ``(B, K, n)`` unless
    ``adversarial_E`` is given, in which case e_k = -E sign(x_k).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    periods = np.atleast_2d(np.asarray(periods, dtype=float))
    B, K = periods.shape
    n = x0.shape[1]
    if x0.shape[0] != B:
        x0 = np.broadcast_to(x0, (B, n))
    m = _sys_input_dim(sys)
    states = np.full((B, K + 1, n), np.nan)
    inputs = np.full((B, K, m), np.nan)
    errs = np.full((B, K, n), np.nan)
    if errors is not None:
        errors = np.broadcast_to(np.asarray(errors, dtype=float), (B, K, n))
    states[:, 0] = x0
    esc = np.full(B, -1)
    alive = np.arange(B)
    for k in range(K):
        if alive.size == 0:
            break
        x = states[alive, k]
        e = adversarial_errors(x, adversarial_E) if adversarial_E is not None else errors[alive, k]
        T = periods[alive, k]
        errs[alive, k] = e
        if m:
            inputs[alive, k] = sys.inputs(x, e, T)
        res = sys.step(x, e, T)
        ok = res.status == FlowStatus.OK
        states[alive[ok], k + 1] = res.state[ok]
        esc[alive[~ok]] = k + 1
        alive = alive[ok]
    return BatchTrajectory(states, inputs, errs, periods, esc)


def simulate(sys, x0, sched: Schedule) -> Trajectory:
    """x_{k+1} = F(x_k, U(x_k + e_k, T_k), T_k); truncates on escape."""
    if sched.K < 1:
        raise ValueError("schedule must contain at least one step")
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    bt = simulate_batch(sys, x0, sched.periods[None, :],
                        None if sched.adversarial else sched.errors[None, :, :],
                        adversarial_E=sched.E if sched.adversarial else None)
    return bt.row(0)


@dataclass
class DenseTrajectory:
    times: np.ndarray
    states: np.ndarray
    sample_times: np.ndarray
    sample_states: np.ndarray
    status: str = "complete"
    escape_interval: int | None = None
    escape_time: float | None = None


def simulate_intersample(plant: Plant, law: ControlLaw, x0, sched: Schedule,
                         dt_out: float, tol: float = dynamics.DEFAULT_ORACLE_TOL,
                         guard: float = DEFAULT_GUARD) -> DenseTrajectory:
    """Continuous-time closed loop under zero-order hold.

    Within each sampling interval the input is frozen at
    U(x_k + e_k, T_k) and the plant is integrated with the exact oracle,
    emitting the state on the global grid ``0, dt_out, 2 dt_out, ...`` as
    well as at every sampling instant.
    """
    if not dt_out > 0:
        raise ValueError("dt_out must be positive")
    x = np.asarray(x0, dtype=float).reshape(-1)
    t = 0.0
    times, states = [0.0], [x.copy()]
    s_times, s_states = [0.0], [x.copy()]
    for k in range(sched.K):
        T = float(sched.periods[k])
        e = adversarial_errors(x[None, :], sched.E)[0] if sched.adversarial else sched.errors[k]
        u = law(x + e, T)
        t_end = t + T
        j0 = int(np.floor(t / dt_out)) + 1
        grid = [j * dt_out for j in range(j0, int(np.ceil(t_end / dt_out)) + 1)
                if t < j * dt_out < t_end]
        cursor, x_int = t, x
        for tg in grid + [t_end]:
            h = tg - cursor
            if h <= 0:
                continue
            r = dynamics.exact_step(plant, x_int, u, h, tol, guard)
            if not r.all_ok:
                return DenseTrajectory(np.array(times), np.array(states), np.array(s_times),
                                       np.array(s_states), "escaped", k,
                                       float(cursor + r.t_escape))
            x_int, cursor = r.state, tg
            if tg != t_end:
                times.append(tg)
                states.append(x_int.copy())
        x, t = x_int, t_end
        times.append(t)
        states.append(x.copy())
        s_times.append(t)
        s_states.append(x.copy())
    return DenseTrajectory(np.array(times), np.array(states), np.array(s_times), np.array(s_states))


# -- boundedness of the control law ------------------------------------------------------


@dataclass
class BoundednessReport:
    C_est: float
    C_coarse: float
    witness_x: list
    witness_T: float
    suspected_unbounded: bool
    M: float
    T_star: float


def _state_grid(M: float, n: int, points: int) -> np.ndarray:
    axis = np.linspace(-M, M, points)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    return mesh[np.linalg.norm(mesh, axis=1) <= M * (1 + 1e-12)]


def _open_periods(T_star: float, count: int) -> np.ndarray:
    return T_star * np.arange(1, count + 1) / (count + 1)


def _law_sup(law: ControlLaw, M, T_star, points, periods):
    X = _state_grid(M, law.state_dim, points)
    Ts = _open_periods(T_star, periods)
    xx = np.repeat(X, len(Ts), axis=0)
    tt = np.tile(Ts, len(X))
    vals = np.linalg.norm(np.atleast_2d(law(xx, tt)), axis=1)
    i = int(np.argmax(vals))
    return float(vals[i]), xx[i], float(tt[i])


def check_locally_uniformly_bounded(law: ControlLaw, M: float, T_star: float,
                                    points: int = 41, periods: int = 10,
                                    growth_factor: float = 10.0) -> BoundednessReport:
    """Grid estimate of C = sup |U(x, T)| over |x| <= M, T in (0, T_star).

    The grid is refined once; a refined sup exceeding ``growth_factor`` times
    the coarse sup is flagged as suspected unboundedness.
    """
    if not M > 0:
        raise ValueError("M must be positive")
    coarse, _, _ = _law_sup(law, M, T_star, points, periods)
    fine, wx, wT = _law_sup(law, M, T_star, 2 * points - 1, 2 * periods)
    flag = not np.isfinite(fine) or (coarse > 0 and fine > growth_factor * coarse)
    return BoundednessReport(fine, coarse, wx.tolist(), wT, bool(flag), M, T_star)
