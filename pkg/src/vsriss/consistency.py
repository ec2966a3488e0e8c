"""Numerical checks of one-step consistency, the sufficient conditions for it
and for multi-step error consistency (MSEC), and the MSEC error recursion.

Every sup over a compact set is a grid-plus-random-refinement estimate; each
report carries the worst witness so failures can be replayed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import boxes
from .boxes import CompactBox, open_interval, samples, sup_with_witness
from .closed_loop import make_periods, simulate_batch
from .dynamics import DiscreteMap, FlowStatus, Plant, eval_field
from .funcs import Constant, KFunction, NondecreasingFn, Power

__all__ = [
    "CompactBox", "ConsistencyReport", "DegenerateFitError", "MsecParams",
    "check_lemma1_hypotheses", "check_lemma4_condition", "check_lemma5_contraction",
    "check_msec_empirical", "check_one_step_consistency", "closed_bound",
    "default_slack", "estimate_consistency_order", "estimate_msec_params",
    "find_msec_T_star", "msec_alpha_recursion", "msec_eta_sequence",
]


class DegenerateFitError(ValueError):
    """Too few mismatches above the oracle noise floor to fit an order."""


def default_slack(oracle_tol: float | None = None) -> float:
    return max(1e-9, 100 * oracle_tol) if oracle_tol else 1e-9


def _oracle_tol(*maps) -> float | None:
    tols = [getattr(m, "tol", None) for m in maps if getattr(m, "kind", None) == "exact"]
    return max(tols) if tols else None


def _model_of(sys):
    return getattr(sys, "model", sys)


# -- one-step consistency ---------------------------------------------------------------


@dataclass
class ConsistencyReport:
    T_grid: list
    worst: list
    bound: list
    margin: list
    witnesses: list
    passed: bool
    slack: float
    oracle_tol: float | None
    undefined_T: list = field(default_factory=list)
    admissible_T0: float | None = None
    order: float | None = None
    order_c: float | None = None
    worst_witness: dict | None = None
    samples_per_T: int = 0


def _mismatch(exact: DiscreteMap, approx: DiscreteMap, pts: np.ndarray, T: float):
    n = exact.n
    x, u = pts[:, :n], pts[:, n:]
    re = exact.step(x, u, T)
    ra = approx.step(x, u, T)
    d = np.linalg.norm(re.state - ra.state, axis=1)
    d[re.status != FlowStatus.OK] = np.nan
    return d, re.status != FlowStatus.OK


def _mismatch_table(exact, approx, omega, T_grid, points, refine, seed):
    pts = samples(omega, points, refine, seed)
    rows = []
    for T in T_grid:
        d, escaped = _mismatch(exact, approx, pts, float(T))
        rows.append((float(T), d, bool(np.any(escaped))))
    return pts, rows


def check_one_step_consistency(exact: DiscreteMap, approx: DiscreteMap, omega: CompactBox,
                               rho: KFunction, T_grid, points: int = boxes.DEFAULT_POINTS,
                               refine: int = boxes.DEFAULT_REFINE, seed: int = 0,
                               slack: float | None = None) -> ConsistencyReport:
    """sup over omega of |F^e(x,u,T) - F^a(x,u,T)| against T * rho(T).

    ``omega`` is a box over the concatenated ``(x, u)`` coordinates. Periods at
    which the oracle escapes somewhere in omega are reported as undefined and
    cap the admissible T0 below them; pass/fail is judged on the rest.
    """
    T_grid = sorted(float(T) for T in T_grid)
    if not T_grid:
        raise ValueError("T_grid must be nonempty")
    tol = _oracle_tol(exact, approx)
    slack = default_slack(tol) if slack is None else slack
    pts, rows = _mismatch_table(exact, approx, omega, T_grid, points, refine, seed)

    undefined = [T for T, _, esc in rows if esc]
    T0 = None
    for T, _, esc in rows:
        if esc:
            break
        T0 = T
    worst, bound, margin, wits = [], [], [], []
    passed = T0 is not None
    worst_wit = None
    worst_excess = -math.inf
    for T, d, esc in rows:
        s = sup_with_witness(d, pts)
        b = T * float(rho(T))
        worst.append(s.value)
        bound.append(b)
        margin.append(b - s.value)
        w = {"x": s.witness[:exact.n].tolist(), "u": s.witness[exact.n:].tolist(), "T": T,
             "mismatch": s.value}
        wits.append(w)
        if T0 is not None and T <= T0:
            if s.value > b + slack:
                passed = False
            if s.value - b > worst_excess:
                worst_excess, worst_wit = s.value - b, w
    report = ConsistencyReport(T_grid, worst, bound, margin, wits, passed, slack, tol,
                               undefined, T0, worst_witness=worst_wit, samples_per_T=len(pts))
    try:
        fit = _fit_order(np.array(T_grid), np.array(worst), tol)
        report.order, report.order_c = fit.q, fit.c
    except ValueError:
        pass
    return report


@dataclass
class OrderFit:
    q: float
    c: float
    residual: float
    T_used: list
    worst: list


def _noise_floor(tol):
    return 100 * tol if tol else 0.0


def _fit_order(T, worst, tol) -> OrderFit:
    floor = _noise_floor(tol)
    keep = np.isfinite(worst) & (worst > floor) & (worst > 0)
    if keep.sum() < 2:
        raise DegenerateFitError(
            f"only {int(keep.sum())} mismatches exceed the oracle noise floor {floor:g}")
    lt, lw = np.log(T[keep]), np.log(worst[keep])
    A = np.stack([lt, np.ones_like(lt)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, lw, rcond=None)
    resid = float(np.sqrt(res[0] / keep.sum())) if res.size else 0.0
    return OrderFit(float(coef[0]), float(np.exp(coef[1])), resid,
                    T[keep].tolist(), worst[keep].tolist())


def estimate_consistency_order(exact: DiscreteMap, approx: DiscreteMap, omega: CompactBox,
                               T_grid, points: int = 21, refine: int = 2,
                               seed: int = 0) -> OrderFit:
    """Least-squares fit of log worst(T) = log c + q log T.

    Mismatches under 100x the oracle tolerance are treated as noise and
    dropped; Euler on a smooth field gives q close to 2.
    """
    T = np.array(sorted(float(t) for t in T_grid))
    if len(T) < 4 or T[-1] / T[0] < 10 * (1 - 1e-12):
        raise ValueError("order fit needs >= 4 periods spanning >= 1 decade")
    pts, rows = _mismatch_table(exact, approx, omega, T, points, refine, seed)
    worst = np.array([sup_with_witness(d, pts).value for _, d, _ in rows])
    return _fit_order(T, worst, _oracle_tol(exact, approx))


# -- consistency from bounds on f ------------------------------------------------


@dataclass
class FieldBoundsReport:
    M_est: float
    M_witness: dict
    passed: bool
    worst_excess: float
    witness: dict | None
    pairs: int


def check_lemma1_hypotheses(plant: Plant, X: CompactBox, U: CompactBox, rho: KFunction,
                            points: int = 41, slack: float = 1e-9) -> FieldBoundsReport:
    """M = sup |f| on X x U and the modulus bound |f(y,u) - f(x,u)| <= rho(|y-x|)."""
    n = plant.state_dim
    xs = X.lattice(boxes.lattice_points_for(n, points, 5_000))
    us = U.lattice(boxes.lattice_points_for(U.dim, points, 200))
    xu = np.concatenate([np.repeat(xs, len(us), axis=0), np.tile(us, (len(xs), 1))], axis=1)
    fv = eval_field(plant, xu[:, :n], xu[:, n:])
    s = sup_with_witness(np.linalg.norm(fv, axis=1), xu)
    M_wit = {"x": s.witness[:n].tolist(), "u": s.witness[n:].tolist()}

    F = fv.reshape(len(xs), len(us), n)
    worst, wit = -math.inf, None
    for j in range(len(us)):
        diff = np.linalg.norm(F[:, None, j] - F[None, :, j], axis=-1)
        dist = np.linalg.norm(xs[:, None] - xs[None, :], axis=-1)
        excess = diff - np.asarray(rho(dist))
        i = np.unravel_index(int(np.argmax(excess)), excess.shape)
        if excess[i] > worst:
            worst = float(excess[i])
            wit = {"x": xs[i[0]].tolist(), "y": xs[i[1]].tolist(), "u": us[j].tolist()}
    return FieldBoundsReport(s.value, M_wit, worst <= slack, worst, wit, len(xs) ** 2 * len(us))


# -- Lipschitz growth of the approximate closed loop ----------------------------------


@dataclass
class ContractionReport:
    passed: bool
    sigma_hat: float
    worst_excess: float
    witness: dict | None
    tuples: int


def check_lemma5_contraction(approx_closed, X: CompactBox, E: CompactBox,
                             sigma: NondecreasingFn, T1: float, points: int = 21,
                             periods: int = 10, slack: float = 1e-9) -> ContractionReport:
    """|F(x,e,T) - F(z,e,T)| <= (1 + T sigma(T)) |x - z| on sampled tuples.

    Also reports the empirical growth rate
    max (|F(x)-F(z)| - |x-z|) / (T |x-z|); pairs with x = z are skipped.
    """
    if not T1 > 0:
        raise ValueError("T1 must be positive")
    xs = X.lattice(boxes.lattice_points_for(X.dim, points, 2_000))
    es = E.lattice(boxes.lattice_points_for(E.dim, points, 200))
    Ts = open_interval(T1, periods)
    Nx, Ne, Nt = len(xs), len(es), len(Ts)
    xx = np.repeat(xs, Ne * Nt, axis=0)
    ee = np.tile(np.repeat(es, Nt, axis=0), (Nx, 1))
    tt = np.tile(Ts, Nx * Ne)
    res = approx_closed.step(xx, ee, tt)
    Fv = res.state.reshape(Nx, Ne, Nt, -1)
    dF = np.linalg.norm(Fv[:, None] - Fv[None, :], axis=-1)          # (Nx, Nx, Ne, Nt)
    dx = np.linalg.norm(xs[:, None] - xs[None, :], axis=-1)[:, :, None, None]
    Tb = Ts[None, None, None, :]
    sig = np.asarray(sigma(Ts))[None, None, None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        excess = np.where(dx > 0, dF - (1 + Tb * sig) * dx, -np.inf)
        ratio = np.where(dx > 0, (dF - dx) / (Tb * dx), -np.inf)
    excess = np.where(np.isnan(excess), np.inf, excess)
    i = np.unravel_index(int(np.argmax(excess)), excess.shape)
    worst = float(excess[i])
    wit = {"x": xs[i[0]].tolist(), "z": xs[i[1]].tolist(), "e": es[i[2]].tolist(), "T": float(Ts[i[3]])}
    sigma_hat = float(np.nanmax(ratio))
    return ContractionReport(worst <= slack, sigma_hat, worst, wit, int(np.sum(dx > 0)) * Ne * Nt)


# -- MSEC recursion ---------------------------------------------------------------------


@dataclass(frozen=True)
class MsecParams:
    rho0: KFunction
    sigma: NondecreasingFn
    T_star: float
    provenance: str = "user"

    def __post_init__(self):
        if not self.T_star > 0:
            raise ValueError("T_star must be positive")

    def alpha(self, delta, T):
        """T rho0(T) + (1 + T sigma(T)) delta"""
        return T * self.rho0(T) + (1 + T * self.sigma(T)) * delta

    def to_dict(self):
        return {"rho0": self.rho0.to_dict(), "sigma": self.sigma.to_dict(),
                "T_star": self.T_star, "provenance": self.provenance}


def msec_eta_sequence(params: MsecParams, periods) -> list:
    """[eta_0, ..., eta_K] with eta_0 = 0 and eta_k = alpha(eta_{k-1}, T_{k-1}).

    Arithmetic follows the input types, so Fractions stay exact.
    """
    for T in periods:
        if not 0 < T < params.T_star:
            raise ValueError(f"period {T!r} outside (0, T_star={params.T_star!r})")
    etas = [0]
    for T in periods:
        etas.append(params.alpha(etas[-1], T))
    return etas


def msec_alpha_recursion(params: MsecParams, periods, k: int):
    if k < 0 or k > len(periods):
        raise ValueError("k must lie in [0, len(periods)]")
    return msec_eta_sequence(params, list(periods)[:k])[k]


def closed_bound(params: MsecParams, L: float, T_hat: float) -> float:
    """exp(sigma(T_hat) L) rho0(T_hat) L"""
    return math.exp(float(params.sigma(T_hat)) * L) * float(params.rho0(T_hat)) * L


# -- empirical multi-step error -------------------------------------------------------


@dataclass
class MsecReport:
    passed: bool
    max_deviation: float
    eta: float
    T_star: float
    trials: int
    witness: dict | None
    exit_fraction: float
    exact_escapes: int
    seed: int


def check_msec_empirical(exact_cl, approx_cl, X: CompactBox, E: CompactBox, L: float,
                         eta: float, T_star: float, trials: int = 200,
                         seed: int = 0) -> MsecReport:
    """Simulate exact and approximate loops from shared initial states,
    periods and errors; record max_k |x^e_k - x^a_k| over sum_{i<k} T_i <= L.

    Indices at or after the first exit of x^a from X are discarded. An exact
    escape reached from an admissible index is a failure.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    K = int(math.ceil(L / (T_star * 0.1))) + 1
    xi = X.random(trials, rng)
    periods = np.stack([make_periods({"kind": "random_vsr", "T_star": T_star}, K, rng)[0]
                        for _ in range(trials)])
    errors = E.random(trials * K, rng).reshape(trials, K, E.dim)
    be = simulate_batch(exact_cl, xi, periods, errors)
    ba = simulate_batch(approx_cl, xi, periods, errors)

    t = np.concatenate([np.zeros((trials, 1)), np.cumsum(periods, axis=1)], axis=1)
    in_horizon = t <= L
    inside = X.contains(ba.states) & ~np.isnan(ba.states).any(axis=-1)
    admissible = np.cumprod(inside, axis=1).astype(bool) & in_horizon
    dev = np.linalg.norm(be.states - ba.states, axis=-1)
    dev = np.where(admissible, dev, -np.inf)
    # exact escape at index k is charged if x^a was admissible at k-1
    escaped = 0
    for b in np.flatnonzero(be.escape_index >= 0):
        k = int(be.escape_index[b])
        if admissible[b, k - 1] and t[b, k] <= L:
            dev[b, k] = np.inf
            escaped += 1
    dev = np.where(np.isnan(dev), np.inf, dev)
    b, k = np.unravel_index(int(np.argmax(dev)), dev.shape)
    worst = float(dev[b, k])
    exit_frac = float(np.mean(~np.all(inside | ~in_horizon, axis=1)))
    wit = {"trial": int(b), "k": int(k), "xi": xi[b].tolist(), "t_k": float(t[b, k]),
           "deviation": worst}
    return MsecReport(worst <= eta, worst, eta, T_star, trials, wit, exit_frac, escaped, seed)


def find_msec_T_star(exact_cl, approx_cl, X: CompactBox, E: CompactBox, L: float, eta: float,
                     T_start: float, trials: int = 200, seed: int = 0,
                     floor: float = 1e-6) -> tuple[float | None, list[MsecReport]]:
    """Halve T_star from ``T_start`` until the empirical check passes."""
    reports = []
    T = T_start
    while T >= floor:
        r = check_msec_empirical(exact_cl, approx_cl, X, E, L, eta, T, trials, seed)
        reports.append(r)
        if r.passed:
            return T, reports
        T /= 2
    return None, reports


# -- MSEC sufficient condition -------------------------------------------------------


@dataclass
class MsecConditionReport:
    passed: bool
    worst_excess: float
    witness: dict | None
    tuples: int
    slack: float
    undefined: int


def _cl_grid(sys, xs, es, Ts):
    Nx, Ne, Nt = len(xs), len(es), len(Ts)
    xx = np.repeat(xs, Ne * Nt, axis=0)
    ee = np.tile(np.repeat(es, Nt, axis=0), (Nx, 1))
    tt = np.tile(Ts, Nx * Ne)
    r = sys.step(xx, ee, tt)
    return r.state.reshape(Nx, Ne, Nt, -1), (r.status != FlowStatus.OK).reshape(Nx, Ne, Nt)


def check_lemma4_condition(exact_cl, approx_cl, X: CompactBox, E: CompactBox,
                           params: MsecParams, points: int = 21, periods: int = 10,
                           slack: float | None = None) -> MsecConditionReport:
    """|F^e(x,e,T) - F^a(y,e,T)| <= T rho0(T) + (1 + T sigma(T)) |x - y| on a
    lattice of (x, y, e) and interior periods of (0, T_star)."""
    tol = _oracle_tol(_model_of(exact_cl), _model_of(approx_cl))
    slack = default_slack(tol) if slack is None else slack
    xs = X.lattice(boxes.lattice_points_for(X.dim, points, 2_000))
    es = E.lattice(boxes.lattice_points_for(E.dim, points, 200))
    Ts = open_interval(params.T_star, periods)
    Fe, bad = _cl_grid(exact_cl, xs, es, Ts)
    Fa, _ = _cl_grid(approx_cl, xs, es, Ts)
    lhs = np.linalg.norm(Fe[:, None] - Fa[None, :], axis=-1)        # (x, y, e, T)
    dx = np.linalg.norm(xs[:, None] - xs[None, :], axis=-1)[:, :, None, None]
    rho_T = Ts * np.asarray(params.rho0(Ts), dtype=float)
    sig = np.asarray(params.sigma(Ts), dtype=float)
    rhs = rho_T[None, None, None, :] + (1 + Ts * sig)[None, None, None, :] * dx
    excess = np.where(np.isnan(lhs), np.inf, lhs - rhs)
    i = np.unravel_index(int(np.argmax(excess)), excess.shape)
    worst = float(excess[i])
    wit = {"x": xs[i[0]].tolist(), "y": xs[i[1]].tolist(), "e": es[i[2]].tolist(),
           "T": float(Ts[i[3]])}
    return MsecConditionReport(worst <= slack, worst, wit, int(excess.size), slack, int(bad.sum()))


def estimate_msec_params(exact_cl, approx_cl, X: CompactBox, E: CompactBox, T_star: float,
                         safety: float = 2.0, points: int = 21, periods: int = 10) -> MsecParams:
    """Grid estimates for rho0 and a constant sigma, inflated by ``safety``.

    rho0(T) = c T^(q-1) from a log-log fit of the closed-loop one-step
    mismatch; sigma is the empirical growth rate of the approximate loop.
    """
    xs = X.lattice(boxes.lattice_points_for(X.dim, points, 2_000))
    es = E.lattice(boxes.lattice_points_for(E.dim, points, 200))
    Ts = open_interval(T_star, periods)
    Fe, bad = _cl_grid(exact_cl, xs, es, Ts)
    if bad.any():
        raise ValueError("exact closed loop escapes inside X x E below T_star")
    Fa, _ = _cl_grid(approx_cl, xs, es, Ts)
    worst = np.linalg.norm(Fe - Fa, axis=-1).max(axis=(0, 1))
    fit = _fit_order(Ts, worst, _oracle_tol(_model_of(exact_cl)))
    q = max(fit.q, 1.0 + 1e-6)
    c = safety * float(np.max(worst / Ts ** q))
    rep = check_lemma5_contraction(approx_cl, X, E, Constant(0.0), T_star, points, periods)
    sigma = Constant(safety * max(rep.sigma_hat, 0.0))
    return MsecParams(Power(c, q - 1), sigma, T_star, provenance="estimated")
