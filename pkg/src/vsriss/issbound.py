"""Trajectory-level SP-ISS-VSR testing, candidate fitting, ultimate bounds,
divergence detection and the explicit gain constructions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .closed_loop import BatchTrajectory, Trajectory, _ball, make_schedule, simulate_batch
from .funcs import (ComparisonKL, Compose, ComposedKL, Inverse, KFunction, KLFunction,
                    KLSection, Power, Scaled, SeparableKL, Sum, identity)

DEFAULT_P_GRID = (0.5, 0.75, 1.0)
DEFAULT_RATE_GRID = tuple(np.geomspace(0.05, 20.0, 16))
# keeps gamma strictly increasing when training saw no error
GAIN_FLOOR = 1e-12


@dataclass(frozen=True)
class IssCandidate:
    """|x_k| <= beta(|x_0|, t_k) + gamma(sup_{i<k} |e_i|) + R for |x_0| <= M,
    errors bounded by E and periods in (0, T_star)."""

    beta: KLFunction
    gamma: KFunction
    R: float
    T_star: float
    M: float
    E: float

    def __post_init__(self):
        if self.R < 0 or not self.T_star > 0 or self.M < 0 or self.E < 0:
            raise ValueError("candidate needs R >= 0, T_star > 0, M >= 0, E >= 0")

    def beta_dominates(self, samples: int = 200) -> bool:
        """r <= beta(r, 0) on sampled r in [0, M]."""
        r = np.linspace(0.0, self.M, samples)
        return bool(np.all(r <= np.asarray(self.beta(r, 0.0)) * (1 + 1e-12)))

    def bound(self, x0_norm, t, e_sup):
        return np.asarray(self.beta(x0_norm, t)) + np.asarray(self.gamma(e_sup)) + self.R

    def to_dict(self):
        return {"beta": self.beta.to_dict(), "gamma": self.gamma.to_dict(), "R": self.R,
                "T_star": self.T_star, "M": self.M, "E": self.E}


# -- ensembles --------------------------------------------------------------------------------


@dataclass
class Ensemble:
    x0: np.ndarray
    batch: BatchTrajectory
    trial_seeds: list
    T_star: float
    E: float

    @property
    def trials(self) -> int:
        return len(self.x0)

    @property
    def escapes(self) -> int:
        return int(np.sum(self.batch.escape_index >= 0))


def simulate_ensemble(sys, M: float, E: float, T_star: float, trials: int, K: int,
                      seed: int = 0, period_spec: dict | None = None,
                      error_spec: dict | None = None, x0=None) -> Ensemble:
    """``trials`` runs from |x_0| <= M with per-trial schedules seeded by
    ``(seed, trial)``; errors default to uniform draws from the E-ball."""
    if trials < 1 or K < 1:
        raise ValueError("trials and K must be >= 1")
    n = sys.n
    period_spec = period_spec or {"kind": "random_vsr", "T_star": T_star}
    error_spec = error_spec or ({"kind": "random", "E": E} if E > 0 else {"kind": "zero"})
    if x0 is None:
        x0 = _ball(np.random.default_rng([seed, 0x5eed]), trials, n, M)
    x0 = np.asarray(x0, dtype=float).reshape(trials, n)
    seeds = [[seed, i] for i in range(trials)]
    scheds = [make_schedule(period_spec, error_spec, K, n, s) for s in seeds]
    if any(s.T_star > T_star * (1 + 1e-12) for s in scheds):
        raise ValueError("schedule periods exceed the candidate T_star")
    periods = np.stack([s.periods for s in scheds])
    adv = scheds[0].adversarial
    errors = None if adv else np.stack([s.errors for s in scheds])
    batch = simulate_batch(sys, x0, periods, errors, adversarial_E=scheds[0].E if adv else None)
    return Ensemble(x0, batch, seeds, T_star, E)


def adversarial_probe(sys, ens: Ensemble) -> Ensemble:
    """Rerun ``ens`` from the same initial states and periods with
    e_k = -E sign(x_k), the error sequence that pushes the state outward."""
    K = ens.batch.periods.shape[1]
    seed = ens.trial_seeds[0][0]
    r = float(np.max(np.linalg.norm(ens.x0, axis=1)))
    spec = {"kind": "adversarial_sign", "E": ens.E}
    probe = simulate_ensemble(sys, r, ens.E, ens.T_star, ens.trials, K, seed,
                              error_spec=spec, x0=ens.x0)
    if not np.array_equal(probe.batch.periods, ens.batch.periods):
        raise ValueError("probe periods differ from the ensemble's; pass the same period spec")
    return probe


def _running_error_sup(batch: BatchTrajectory) -> np.ndarray:
    """sup_{i<k} |e_i| for k = 0..K (zero at k = 0)."""
    en = np.linalg.norm(np.nan_to_num(batch.errors, nan=0.0), axis=-1)
    run = np.maximum.accumulate(en, axis=1)
    return np.concatenate([np.zeros((len(en), 1)), run], axis=1)


# -- SP-ISS-VSR check --------------------------------------------------------------------------


@dataclass
class IssCheckReport:
    passed: bool
    trials: int
    violations: int
    worst_excess: float
    witness: dict | None
    escapes: int
    beta_valid: bool
    slack: float
    ultimate_bound: dict | None = None


def check_spissvsr(sys, cand: IssCandidate, trials: int = 100, K: int = 1000, seed: int = 0,
                   slack: float = 1e-9, ensemble: Ensemble | None = None, **ens_kw) -> IssCheckReport:
    """Check the trajectory bound at every k <= K of every trial; an escape is
    a violation at its escape index."""
    ens = ensemble or simulate_ensemble(sys, cand.M, cand.E, cand.T_star, trials, K, seed, **ens_kw)
    b = ens.batch
    x0n = np.linalg.norm(ens.x0, axis=1)[:, None]
    t = b.times
    bound = cand.bound(np.broadcast_to(x0n, t.shape), t, _running_error_sup(b))
    xn = np.linalg.norm(b.states, axis=-1)
    excess = np.where(np.isnan(xn), -np.inf, xn - bound)
    for i in np.flatnonzero(b.escape_index >= 0):
        excess[i, b.escape_index[i]] = np.inf
    per_trial = excess.max(axis=1)
    violations = int(np.sum(per_trial > slack))
    i, k = np.unravel_index(int(np.argmax(excess)), excess.shape)
    worst = float(excess[i, k])
    wit = {"trial": int(i), "seed": ens.trial_seeds[i], "x0": ens.x0[i].tolist(), "k": int(k),
           "t_k": float(t[i, k]), "norm": float(xn[i, k]), "bound": float(bound[i, k])}
    return IssCheckReport(violations == 0, ens.trials, violations, worst, wit, ens.escapes,
                          cand.beta_dominates(), slack)


# -- candidate fitting ---------------------------------------------------------------------------


@dataclass
class FitResult:
    candidate: IssCandidate
    p: float
    rate: float
    a: float
    c: float
    R: float
    objective: float
    train: IssCheckReport
    probes: list = field(default_factory=list)


def _cover_lp(phi, s, y, a_min, seed_rows: int = 2000, add_rows: int = 2000):
    """min mean(a phi + c s + R) s.t. a phi + c s + R >= y, solved by adding
    violated rows to a strided subset until the full set is covered."""
    cost = np.array([phi.mean(), s.mean(), 1.0])
    rows = np.unique(np.concatenate([np.linspace(0, len(y) - 1, min(seed_rows, len(y))).astype(int),
                                     [int(np.argmax(y))]]))
    bounds = [(a_min, None), (0, None), (0, None)]
    while True:
        A = -np.stack([phi[rows], s[rows], np.ones(len(rows))], axis=1)
        res = linprog(cost, A_ub=A, b_ub=-y[rows], bounds=bounds, method="highs")
        if res.status != 0:
            return None
        a, c, R = res.x
        gap = y - (a * phi + c * s + R)
        bad = np.setdiff1d(np.flatnonzero(gap > 1e-12 * max(1.0, float(y.max()))), rows)
        if bad.size == 0:
            # rows already in the LP may miss by the solver's feasibility
            # tolerance; lifting R closes that gap exactly
            R += max(0.0, float(gap.max()))
            return float(cost @ [a, c, R]), float(a), float(c), float(R)
        bad = bad[np.argsort(-gap[bad])][:add_rows]
        rows = np.union1d(rows, bad)


def fit_candidate(ens: Ensemble, M: float, margin: float = 0.1, p_grid=DEFAULT_P_GRID,
                  rate_grid=DEFAULT_RATE_GRID, probes=()) -> FitResult:
    """Fit beta = a s^p exp(-rate t), gamma = c s and R to a training ensemble.

    For each (p, rate) a linear program over (a, c, R) >= 0 minimizes the mean
    bound subject to covering (1 + margin)|x_k| at every sample, with
    a >= M^(1-p) so that r <= beta(r, 0) on [0, M]. The grid point with the
    smallest mean bound wins. ``probes`` are further ensembles (typically
    ``adversarial_probe(sys, ens)``) whose samples must be covered too.
    """
    sets = [ens, *probes]
    if any(e.escapes for e in sets):
        raise ValueError("training ensemble contains escapes; no finite candidate fits")
    xn, t, s, x0n = [], [], [], []
    for e in sets:
        b = e.batch
        xn.append(np.linalg.norm(b.states, axis=-1).ravel())
        t.append(b.times.ravel())
        s.append(_running_error_sup(b).ravel())
        x0n.append(np.repeat(np.linalg.norm(e.x0, axis=1), b.times.shape[1]))
    xn, t, s, x0n = (np.concatenate(v) for v in (xn, t, s, x0n))
    y = (1 + margin) * xn
    best = None
    for p in p_grid:
        a_min = M ** (1 - p) if M > 0 else 0.0
        for lam in rate_grid:
            phi = x0n ** p * np.exp(-lam * t)
            sol = _cover_lp(phi, s, y, a_min)
            if sol is not None and (best is None or sol[0] < best[0] - 1e-15):
                best = (sol[0], p, float(lam), *sol[1:])
    if best is None:
        raise ValueError("no feasible candidate on the (p, rate) grid")
    obj, p, lam, a, c, R = best
    cand = IssCandidate(SeparableKL(Power(a, p), lam), Power(max(c, GAIN_FLOOR), 1),
                        R, ens.T_star, M, ens.E)
    train = check_spissvsr(None, cand, ensemble=ens)
    checks = [check_spissvsr(None, cand, ensemble=pr) for pr in probes]
    return FitResult(cand, p, lam, a, c, R, obj, train, checks)


# -- ultimate bound ------------------------------------------------------------------------------


@dataclass
class UltimateBoundTable:
    rows: list
    monotone: bool
    tail_fraction: float
    atol: float

    def to_csv(self, header: str | None = None) -> str:
        lines = [f"# {header}"] if header else []
        lines.append("T_star,b,trials,escapes,K")
        for r in self.rows:
            b = "inf" if math.isinf(r["b"]) else repr(r["b"])
            lines.append(f"{r['T_star']!r},{b},{r['trials']},{r['escapes']},{r['K']}")
        return "\n".join(lines) + "\n"


def tail_bound(ens: Ensemble, tail_fraction: float = 0.5) -> float:
    if ens.escapes:
        return math.inf
    xn = np.linalg.norm(ens.batch.states, axis=-1)
    K = xn.shape[1] - 1
    start = int(math.floor((1 - tail_fraction) * K))
    return float(np.max(xn[:, start:]))


def estimate_ultimate_bound(sys, M: float, E: float, T_star_list, trials: int = 100,
                            K: int = 2000, tail_fraction: float = 0.5, seed: int = 0,
                            horizon_factor: float = 20.0, atol: float = 1e-9,
                            ensembles: dict | None = None, **ens_kw) -> UltimateBoundTable:
    """b(T_star) = max over trials of sup |x_k| over the last ``tail_fraction``
    of the horizon. The horizon is at least ``horizon_factor / T_star`` steps.

    ``monotone`` is True when b does not increase as T_star decreases, up to
    ``atol``. Escapes give b = inf.
    """
    if not 0 < tail_fraction <= 1:
        raise ValueError("tail_fraction must lie in (0, 1]")
    rows = []
    for T in sorted((float(T) for T in T_star_list), reverse=True):
        K_eff = max(K, int(math.ceil(horizon_factor / T)))
        ens = (ensembles or {}).get(T)
        if ens is None or ens.batch.periods.shape[1] < K_eff:
            ens = simulate_ensemble(sys, M, E, T, trials, K_eff, seed, **ens_kw)
        rows.append({"T_star": T, "b": tail_bound(ens, tail_fraction), "trials": ens.trials,
                     "escapes": ens.escapes, "K": K_eff})
    bs = [r["b"] for r in rows]
    mono = all(b2 <= b1 + atol for b1, b2 in zip(bs, bs[1:]))
    return UltimateBoundTable(rows, mono, tail_fraction, atol)


# -- divergence ------------------------------------------------------------------------------------


@dataclass
class DivergenceVerdict:
    diverged: bool
    k_cross: int | None
    escaped: bool
    growth_rate: float | None
    threshold: float


def detect_divergence(traj: Trajectory, threshold: float, growth_window: int = 20) -> DivergenceVerdict:
    """First k with |x_k| >= threshold (or the escape index) and the geometric
    mean of |x_{k+1}| / |x_k| over the last ``growth_window`` steps before it."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    xn = traj.norms
    hit = np.flatnonzero(xn >= threshold)
    k_cross = int(hit[0]) if hit.size else None
    escaped = traj.escape_index is not None
    if k_cross is None and escaped:
        k_cross = int(traj.escape_index)
    end = k_cross if k_cross is not None else len(xn) - 1
    end = min(end, len(xn) - 1)
    seg = xn[max(0, end - growth_window):end + 1]
    rate = None
    if len(seg) >= 2 and seg[0] > 0 and seg[-1] > 0:
        rate = float((seg[-1] / seg[0]) ** (1.0 / (len(seg) - 1)))
    return DivergenceVerdict(k_cross is not None, k_cross, escaped, rate, threshold)


# -- gain constructions ------------------------------------------------------------------------------


def construct_exact_gain(beta: KLFunction, gamma: KFunction) -> KFunction:
    """s -> beta(2 gamma(s), 0) + gamma(s)"""
    return Sum((Compose(KLSection(beta, 0.0), Scaled(2.0, gamma)), gamma))


def decay_rate(alpha3: KFunction, alpha2: KFunction) -> KFunction:
    """alpha = alpha3 o alpha2^{-1}, the rate of the comparison ODE."""
    return Compose(alpha3, Inverse(alpha2))


def construct_theorem2_gains(alpha1: KFunction, alpha2: KFunction, alpha: KFunction,
                             eta_tilde: KFunction) -> tuple[KLFunction, KFunction]:
    """beta(s, t) = alpha1^{-1}(3 beta1(alpha2(s), t)) with beta1 solving
    dy/dt = -alpha(y), and gamma(s) = alpha1^{-1}(3 alpha2(2 eta_tilde(s)))."""
    inv1 = Inverse(alpha1)
    beta = ComposedKL(Compose(inv1, Scaled(3.0, identity())), ComparisonKL(alpha), alpha2)
    gamma = Compose(inv1, Compose(Scaled(3.0, alpha2), Scaled(2.0, eta_tilde)))
    return beta, gamma
