"""Checks of the four sufficient conditions for SP-ISS-VSR of a closed loop
x' = F(x, e, T): zero fixed point, continuity at the origin, boundedness on
compacts and a Lyapunov decrease outside an error-dependent ball.

Every check is a grid search. A pass is evidence on the sampled set, a fail
comes with a witness that can be re-evaluated directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm, qmc

from .boxes import CompactBox, SupResult, samples, sup_with_witness
from .consistency import default_slack
from .dynamics import FlowStatus
from .funcs import KFunction, k_from_dict

DEFAULT_EPS_LADDER = (1.0, 0.1, 0.01, 0.001)
DELTA_FLOOR = 1e-12


def _oracle_tol(sys) -> float | None:
    model = getattr(sys, "model", None)
    return getattr(model, "tol", None) if getattr(model, "kind", None) == "exact" else None


def _slack(sys, slack):
    return default_slack(_oracle_tol(sys)) if slack is None else slack


def _open_grid(T_hi: float, count: int) -> np.ndarray:
    return T_hi * np.arange(1, count + 1) / (count + 1)


def _ball_points(radius: float, n: int, points: int) -> np.ndarray:
    axis = np.linspace(-radius, radius, points)
    if n == 1:
        return axis[:, None]
    p = max(3, int(round(points ** (2.0 / n))) | 1)
    axis = np.linspace(-radius, radius, p)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    return mesh[np.linalg.norm(mesh, axis=1) <= radius * (1 + 1e-12)]


def _directions(n: int, count: int) -> np.ndarray:
    """Unit vectors: ``[-1, +1]`` for n = 1, scrambled-free Halton points
    pushed through the normal quantile and normalized otherwise."""
    if n == 1:
        return np.array([[-1.0], [1.0]])
    h = qmc.Halton(d=n, scramble=False).random(count + 1)[1:]
    d = norm.ppf(np.clip(h, 1e-12, 1 - 1e-12))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d


def _step(sys, x, e, T):
    res = sys.step(x, e, T)
    state = np.where((res.status == FlowStatus.OK)[:, None], res.state, np.nan)
    return state


# -- certificate ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolynomialV:
    """V(x) = sum of coef * prod x_j ** p_j."""

    terms: tuple[tuple[float, tuple[int, ...]], ...]

    @classmethod
    def quadratic(cls, n: int = 1) -> "PolynomialV":
        return cls(tuple((1.0, tuple(2 if j == i else 0 for j in range(n))) for i in range(n)))

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for c, pows in self.terms:
            term = np.full(x.shape[0], float(c))
            for j, p in enumerate(pows):
                if p:
                    term = term * x[:, j] ** p
            out += term
        return out

    def to_dict(self):
        return {"kind": "polynomial", "terms": [{"coef": c, "x": list(p)} for c, p in self.terms]}


def v_from_dict(d) -> PolynomialV:
    if d.get("kind", "polynomial") == "quadratic":
        return PolynomialV.quadratic(int(d.get("dim", 1)))
    return PolynomialV(tuple((float(t["coef"]), tuple(int(p) for p in t["x"])) for t in d["terms"]))


@dataclass(frozen=True)
class LyapunovCertificate:
    V: Callable
    alpha1: KFunction
    alpha2: KFunction
    alpha3: KFunction
    rho: KFunction
    M: float
    E: float
    R: float
    T_tilde: float | None = None

    def __post_init__(self):
        if not (self.M >= self.R > 0):
            raise ValueError("certificate needs M >= R > 0")
        if not self.E > 0:
            raise ValueError("certificate needs E > 0")
        if self.T_tilde is not None and not self.T_tilde > 0:
            raise ValueError("T_tilde must be positive")

    def with_T(self, T_tilde: float | None) -> "LyapunovCertificate":
        return LyapunovCertificate(self.V, self.alpha1, self.alpha2, self.alpha3, self.rho,
                                   self.M, self.E, self.R, T_tilde)

    def to_dict(self):
        V = self.V.to_dict() if hasattr(self.V, "to_dict") else repr(self.V)
        return {"V": V, "alpha1": self.alpha1.to_dict(), "alpha2": self.alpha2.to_dict(),
                "alpha3": self.alpha3.to_dict(), "rho": self.rho.to_dict(),
                "M": self.M, "E": self.E, "R": self.R, "T_tilde": self.T_tilde}


def certificate_from_dict(d: dict) -> LyapunovCertificate:
    return LyapunovCertificate(v_from_dict(d.get("V", {"kind": "quadratic"})),
                               k_from_dict(d["alpha1"]), k_from_dict(d["alpha2"]),
                               k_from_dict(d["alpha3"]), k_from_dict(d["rho"]),
                               float(d["M"]), float(d["E"]), float(d["R"]),
                               None if d.get("T_tilde") is None else float(d["T_tilde"]))


# -- condition i) ------------------------------------------------------------------------


@dataclass
class ZeroReport:
    passed: bool
    worst: float
    witness_T: float
    slack: float


def check_zero_fixed_point(sys, T_ring: float, T_grid=None, slack: float | None = None) -> ZeroReport:
    """|F(0, 0, T)| <= slack on periods inside (0, T_ring)."""
    T = _open_grid(T_ring, 20) if T_grid is None else np.asarray(T_grid, dtype=float)
    if np.any((T <= 0) | (T >= T_ring)):
        raise ValueError("T_grid must lie in (0, T_ring)")
    slack = _slack(sys, slack)
    z = np.zeros((len(T), sys.n))
    val = np.linalg.norm(_step(sys, z, z, T), axis=1)
    s = sup_with_witness(val, T)
    return ZeroReport(s.value <= slack, s.value, float(s.witness), slack)


# -- condition ii) -------------------------------------------------------------------------


@dataclass
class ContinuityReport:
    passed: bool
    table: list
    T_hat: float
    floor: float


def _sup_near_origin(sys, delta, T, points):
    pts = _ball_points(delta, sys.n, points)
    xs = np.repeat(pts, len(pts), axis=0)
    es = np.tile(pts, (len(pts), 1))
    B = len(xs)
    xx = np.repeat(xs, len(T), axis=0)
    ee = np.repeat(es, len(T), axis=0)
    tt = np.tile(T, B)
    val = np.linalg.norm(_step(sys, xx, ee, tt), axis=1)
    return float(np.max(np.where(np.isnan(val), np.inf, val)))


def check_continuity_at_origin(sys, T_hat: float, eps_ladder=DEFAULT_EPS_LADDER,
                               ceiling: float = 1.0, floor: float = DELTA_FLOOR,
                               points: int = 21, periods: int = 10,
                               slack: float | None = None) -> ContinuityReport:
    """For each eps, halve delta from ``ceiling`` until
    sup |F(x, e, T)| over |x|, |e| <= delta, T in (0, T_hat) is below eps."""
    eps_ladder = [float(e) for e in eps_ladder]
    if any(b >= a for a, b in zip(eps_ladder, eps_ladder[1:])):
        raise ValueError("eps_ladder must be strictly decreasing")
    slack = _slack(sys, slack)
    T = _open_grid(T_hat, periods)
    table, ok = [], True
    delta = ceiling
    for eps in eps_ladder:
        found = None
        while delta >= floor:
            sup = _sup_near_origin(sys, delta, T, points)
            if sup <= eps - slack:
                found = delta
                break
            delta /= 2
        table.append({"eps": eps, "delta": found, "sup": sup if found is not None else None})
        if found is None:
            ok = False
            table[-1]["delta_tried"] = delta * 2
            break
    return ContinuityReport(ok, table, T_hat, floor)


# -- condition iii) ------------------------------------------------------------------------


@dataclass
class BoundednessReport:
    passed: bool
    C_est: float
    witness: dict
    escapes: int
    M: float
    E: float
    T_check: float


def check_boundedness(sys, M: float, E: float, T_check: float, points: int = 41,
                      periods: int = 10) -> BoundednessReport:
    """C = grid sup of |F(x, e, T)| over |x| <= M, |e| <= E, T in (0, T_check)."""
    if not (M > 0 and E > 0):
        raise ValueError("M and E must be positive")
    xs = _ball_points(M, sys.n, points)
    es = _ball_points(E, sys.n, max(3, points // 2) | 1)
    T = _open_grid(T_check, periods)
    xx = np.repeat(xs, len(es) * len(T), axis=0)
    ee = np.tile(np.repeat(es, len(T), axis=0), (len(xs), 1))
    tt = np.tile(T, len(xs) * len(es))
    val = np.linalg.norm(_step(sys, xx, ee, tt), axis=1)
    escapes = int(np.isnan(val).sum())
    s = sup_with_witness(val, np.arange(len(val)))
    i = s.index
    wit = {"x": xx[i].tolist(), "e": ee[i].tolist(), "T": float(tt[i])}
    return BoundednessReport(escapes == 0 and math.isfinite(s.value), s.value, wit, escapes,
                             M, E, T_check)


def boundedness_table(sys, pairs, T_check: float, points: int = 41) -> dict:
    """C_est over several (M, E) pairs; ``monotone`` records whether C is
    nondecreasing along every comparable pair. Evidence only."""
    rows = [check_boundedness(sys, M, E, T_check, points) for M, E in pairs]
    mono = all(b.C_est >= a.C_est - 1e-12
               for a in rows for b in rows if b.M >= a.M and b.E >= a.E)
    return {"rows": [{"M": r.M, "E": r.E, "C_est": r.C_est, "escapes": r.escapes} for r in rows],
            "monotone": mono}


# -- sup over a box -------------------------------------------------------------------------


def sup_over_box(g: Callable, box: CompactBox, points: int = 41, refine: int = 10,
                 seed: int = 0) -> SupResult:
    """Grid-plus-random sup of ``g(*coords)``; ties resolve to the lowest sample index."""
    pts = samples(box, points, refine, seed)
    vals = np.asarray(g(*pts.T), dtype=float)
    vals = np.broadcast_to(vals, (len(pts),))
    return sup_with_witness(vals, pts)


def cubic_u_bracket_sq(x, e):
    """Square of 2x^3 + 9ex^2 + (9e^2 + 1)x + 3e^3 + e."""
    return (2 * x ** 3 + 9 * e * x ** 2 + (9 * e ** 2 + 1) * x + 3 * e ** 3 + e) ** 2


def bracket_T_tilde(R: float, G: float) -> float:
    return 1.8 * R ** 2 / G


# -- condition iv) --------------------------------------------------------------------------


@dataclass
class DecreaseReport:
    passed: bool
    worst_margin: float
    witness: dict | None
    sandwich_passed: bool
    sandwich_margin: float
    sandwich_witness: dict | None
    samples: int
    T_tilde: float
    slack: float
    escapes: int = 0


def _annulus_samples(cert: LyapunovCertificate, n, radii, errors, directions):
    if n == 1:
        es = np.linspace(-cert.E, cert.E, errors)[:, None]
    else:
        shells = np.linspace(0, cert.E, max(2, errors // directions + 1))
        dirs = _directions(n, directions)
        es = np.concatenate([np.zeros((1, n))] + [r * dirs for r in shells[1:]])
    dirs = _directions(n, directions)
    xs_all, es_all = [], []
    for e in es:
        lo = float(cert.rho(float(np.linalg.norm(e)))) + cert.R
        if lo > cert.M:
            continue
        r = np.linspace(lo, cert.M, radii)
        x = (r[:, None, None] * dirs[None]).reshape(-1, n)
        xs_all.append(x)
        es_all.append(np.broadcast_to(e, x.shape))
    if not xs_all:
        return np.zeros((0, n)), np.zeros((0, n))
    return np.concatenate(xs_all), np.concatenate(es_all)


def check_lyapunov_decrease(sys, cert: LyapunovCertificate, radii: int = 200,
                            errors: int = 50, periods: int = 20, directions: int = 16,
                            slack: float | None = None) -> DecreaseReport:
    """V(F(x,e,T)) - V(x) <= -T alpha3(|x|) on rho(|e|) + R <= |x| <= M,
    |e| <= E and T in (0, T_tilde], plus the sandwich alpha1 <= V <= alpha2.

    Periods are ``T_tilde * j / periods`` for j = 1..periods, so the right
    end is included; the annulus is closed on both sides.
    """
    if cert.T_tilde is None:
        raise ValueError("certificate has no T_tilde; use find_max_T")
    slack = _slack(sys, slack)
    n = sys.n
    xs, es = _annulus_samples(cert, n, radii, errors, directions)
    T = cert.T_tilde * np.arange(1, periods + 1) / periods
    if len(xs) == 0:
        return DecreaseReport(True, math.inf, None, True, math.inf, None, 0, cert.T_tilde, slack)

    r = np.linalg.norm(xs, axis=1)
    Vx = cert.V(xs)
    a1, a2 = np.asarray(cert.alpha1(r), float), np.asarray(cert.alpha2(r), float)
    sw = np.minimum(Vx - a1, a2 - Vx)
    j = int(np.argmin(sw))
    sandwich_margin = float(sw[j])
    sandwich_wit = {"x": xs[j].tolist(), "V": float(Vx[j]), "alpha1": float(a1[j]),
                    "alpha2": float(a2[j])}
    sandwich_ok = sandwich_margin >= -slack * max(1.0, float(np.max(np.abs(Vx))))

    a3 = np.asarray(cert.alpha3(r), float)
    worst, wit, escapes = math.inf, None, 0
    for Tj in T:
        Fx = _step(sys, xs, es, np.full(len(xs), Tj))
        dV = cert.V(Fx) - Vx
        margin = -Tj * a3 - dV
        bad = np.isnan(margin)
        escapes += int(bad.sum())
        margin = np.where(bad, -np.inf, margin)
        i = int(np.argmin(margin))
        if margin[i] < worst:
            worst = float(margin[i])
            wit = {"x": xs[i].tolist(), "e": es[i].tolist(), "T": float(Tj),
                   "dV": float(dV[i]), "bound": float(-Tj * a3[i]), "margin": worst}
    return DecreaseReport(worst >= -slack and sandwich_ok, worst, wit, sandwich_ok,
                          sandwich_margin, sandwich_wit, len(xs) * len(T), cert.T_tilde,
                          slack, escapes)


@dataclass
class FindTReport:
    T_est: float | None
    tried: list = field(default_factory=list)
    floor: float = 0.0
    witness: dict | None = None


def find_max_T(sys, cert: LyapunovCertificate, T_hi: float, floor: float = 1e-8,
               **grid) -> FindTReport:
    """Largest T on the ladder T_hi, T_hi/2, ... for which the decrease check passes."""
    if not T_hi > 0:
        raise ValueError("T_hi must be positive")
    T, tried, last = T_hi, [], None
    while T >= floor:
        rep = check_lyapunov_decrease(sys, cert.with_T(T), **grid)
        tried.append({"T": T, "passed": rep.passed, "worst_margin": rep.worst_margin})
        if rep.passed:
            return FindTReport(T, tried, floor, None)
        last = rep.witness
        T /= 2
    return FindTReport(None, tried, tried[-1]["T"] if tried else floor, last)


# -- aggregation ------------------------------------------------------------------------------


@dataclass
class CertificateReport:
    passed: bool
    conditions: dict
    failing: list
    T_tilde: float | None
    T_tilde_source: str
    zero: ZeroReport
    continuity: ContinuityReport | None
    boundedness: BoundednessReport | None
    decrease: DecreaseReport | None


def check_certificate(sys, cert: LyapunovCertificate, T_hi: float | None = None,
                      radii: int = 200, errors: int = 50, periods: int = 20,
                      eps_ladder=DEFAULT_EPS_LADDER, slack: float | None = None) -> CertificateReport:
    """Run conditions i)-iv). Without ``cert.T_tilde`` the period is searched
    from ``T_hi`` on a halving ladder."""
    source = "supplied"
    if cert.T_tilde is None:
        if T_hi is None:
            raise ValueError("need cert.T_tilde or T_hi")
        found = find_max_T(sys, cert, T_hi, radii=radii, errors=errors, periods=periods,
                           slack=slack)
        source = "searched"
        T_t = found.T_est
    else:
        T_t = cert.T_tilde
    T_ref = T_t if T_t is not None else (T_hi or 1e-3)
    zero = check_zero_fixed_point(sys, T_ref, slack=slack)
    cont = check_continuity_at_origin(sys, T_ref, eps_ladder, slack=slack)
    bnd = check_boundedness(sys, cert.M, cert.E, T_ref)
    if T_t is not None:
        dec = check_lyapunov_decrease(sys, cert.with_T(T_t), radii, errors, periods, slack=slack)
    else:
        dec = check_lyapunov_decrease(sys, cert.with_T(T_ref), radii, errors, periods, slack=slack)
        dec.passed = False
    conds = {"i": zero.passed, "ii": cont.passed, "iii": bnd.passed, "iv": dec.passed}
    failing = [k for k, v in conds.items() if not v]
    return CertificateReport(not failing, conds, failing, T_t, source, zero, cont, bnd, dec)
