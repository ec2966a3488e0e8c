"""Scenario loading, validation and execution.

A scenario is a tree of plain records (YAML or JSON); ``docs/config.md``
documents the grammar. Every check block produces a report, an outcome and
whether that outcome matched the block's ``expect`` field.
"""

from __future__ import annotations

import concurrent.futures
import copy
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, closed_loop, consistency, dynamics, funcs, issbound, lyapunov, scenarios
from .boxes import box_from
from .reporting import to_jsonable

CHECK_KINDS = ("consistency", "order", "field_bounds", "contraction", "msec", "lyapunov", "iss",
               "divergence")
SUP_FUNCTIONS = {"cubic_u_bracket_sq": lyapunov.cubic_u_bracket_sq}


class ConfigError(ValueError):
    """Invalid scenario; ``path`` locates the offending field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


def csv_header(name: str) -> str:
    return f"vsriss {__version__} scenario={name}"


# -- loading -------------------------------------------------------------------------------------


def load_config(target: str) -> dict:
    """A built-in scenario name, a YAML/JSON file, or a result file whose
    echoed scenario is re-run."""
    if target in scenarios.BUILTIN:
        return scenarios.builtin(target)
    path = Path(target)
    if not path.exists():
        raise ConfigError("", f"no built-in scenario or file named {target!r}")
    text = path.read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(str(path), f"parse error at {where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    if "scenario" in doc and "checks" in doc and "version" in doc:
        doc = doc["scenario"]
    doc.setdefault("name", path.stem)
    return doc


def _get(d: dict, key: str, path: str, kind=None, default=...):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected a mapping")
    if key not in d:
        if default is ...:
            raise ConfigError(f"{path}.{key}" if path else key, "required field missing")
        return default
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"{path}.{key}" if path else key, f"expected {getattr(kind, '__name__', kind)}")
    return v


def _positive(d, key, path, default=...):
    v = _get(d, key, path, (int, float), default)
    if v is not None and not v > 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    return v


def _wrap(path, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc).strip("'\"")) from None


def _T_grid(spec, path):
    if isinstance(spec, list):
        return [float(t) for t in spec]
    if isinstance(spec, dict) and "log" in spec:
        lo, hi, n = spec["log"]
        return list(np.geomspace(float(lo), float(hi), int(n)))
    raise ConfigError(path, "T_grid must be a list or {log: [lo, hi, count]}")


@dataclass
class Scenario:
    name: str
    config: dict
    plant: dynamics.Plant
    law: closed_loop.ControlLaw
    model: dynamics.DiscreteMap
    seed: int
    slack: float | None
    checks: list = field(default_factory=list)

    def system(self, which: str = "approx"):
        if which == "approx":
            return closed_loop.ClosedLoopSystem(self.model, self.law)
        if which == "exact":
            tol = self.config.get("model", {}).get("tol", dynamics.DEFAULT_ORACLE_TOL)
            return closed_loop.ClosedLoopSystem(dynamics.exact_oracle(self.plant, tol), self.law)
        raise ConfigError("system", f"unknown system {which!r}; use approx or exact")


def validate(cfg: dict, seed: int | None = None, slack: float | None = None) -> Scenario:
    """Resolve names and check required fields, raising ConfigError."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = seed
    if slack is not None:
        cfg["slack"] = slack
    name = str(cfg.get("name", "scenario"))
    plant = _wrap("plant", dynamics.plant_from_dict, _get(cfg, "plant", "", dict))
    law = _wrap("law", closed_loop.law_from_dict, _get(cfg, "law", "", dict))
    if law.state_dim != plant.state_dim or law.input_dim != plant.input_dim:
        raise ConfigError("law", "law dimensions do not match the plant")
    model = _wrap("model", dynamics.map_from_dict, cfg.get("model", {"kind": "euler"}), plant)
    checks = _get(cfg, "checks", "", list, [])
    for i, c in enumerate(checks):
        kind = _get(c, "kind", f"checks[{i}]", str)
        if kind not in CHECK_KINDS:
            raise ConfigError(f"checks[{i}].kind", f"unknown check {kind!r}; known: {list(CHECK_KINDS)}")
    if "schedule" in cfg:
        _schedule(cfg, plant.state_dim)
    sc = Scenario(name, cfg, plant, law, model, int(cfg.get("seed", 0)), cfg.get("slack"), checks)
    for i, c in enumerate(checks):
        _RUNNERS[c["kind"]](sc, c, f"checks[{i}]", dry=True)
    return sc


def _schedule(cfg, n, path="schedule"):
    s = _get(cfg, "schedule", "", dict)
    K = int(_positive(s, "K", path))
    x0 = np.asarray(_get(s, "x0", path, list), dtype=float)
    if x0.shape != (n,):
        raise ConfigError(f"{path}.x0", f"expected {n} components")
    sched = _wrap(path, closed_loop.make_schedule, _get(s, "periods", path, dict),
                  s.get("errors", {"kind": "zero"}), K, n, int(cfg.get("seed", 0)))
    return x0, sched


# -- check runners ---------------------------------------------------------------------------------


@dataclass
class CheckResult:
    kind: str
    name: str
    expect: str
    outcome: str
    met: bool
    report: object
    outputs: list = field(default_factory=list)


def _expect(c, path, allowed=("pass", "fail")):
    e = c.get("expect", allowed[0])
    if e not in allowed:
        raise ConfigError(f"{path}.expect", f"must be one of {list(allowed)}")
    return e


def _run_consistency(sc, c, path, dry=False):
    omega = _wrap(f"{path}.omega", box_from, _get(c, "omega", path))
    rho = _wrap(f"{path}.rho", funcs.k_from_dict, _get(c, "rho", path, dict))
    Tg = _T_grid(_get(c, "T_grid", path), f"{path}.T_grid")
    approx = _wrap(f"{path}.approx", dynamics.map_from_dict, c.get("approx", sc.config.get("model", {"kind": "euler"})), sc.plant)
    tol = float(c.get("oracle_tol", dynamics.DEFAULT_ORACLE_TOL))
    expect = _expect(c, path)
    if omega.dim != sc.plant.state_dim + sc.plant.input_dim:
        raise ConfigError(f"{path}.omega", "omega must cover state and input coordinates")
    if dry:
        return None
    rep = consistency.check_one_step_consistency(
        dynamics.exact_oracle(sc.plant, tol), approx, omega, rho, Tg,
        int(c.get("points", 41)), int(c.get("refine", 10)), sc.seed, sc.slack)
    return "pass" if rep.passed else "fail", expect, rep


def _run_order(sc, c, path, dry=False):
    omega = _wrap(f"{path}.omega", box_from, _get(c, "omega", path))
    Tg = _T_grid(_get(c, "T_grid", path), f"{path}.T_grid")
    approx = _wrap(f"{path}.approx", dynamics.map_from_dict, c.get("approx", "euler"), sc.plant)
    lo, hi = _get(c, "q_range", path, list)
    expect = _expect(c, path)
    if dry:
        return None
    try:
        fit = consistency.estimate_consistency_order(dynamics.exact_oracle(sc.plant), approx, omega, Tg)
    except consistency.DegenerateFitError as exc:
        return "fail", expect, {"error": str(exc)}
    return "pass" if lo <= fit.q <= hi else "fail", expect, fit


def _run_field_bounds(sc, c, path, dry=False):
    X = _wrap(f"{path}.X", box_from, _get(c, "X", path))
    U = _wrap(f"{path}.U", box_from, _get(c, "U", path))
    rho = _wrap(f"{path}.rho", funcs.k_from_dict, _get(c, "rho", path, dict))
    expect = _expect(c, path)
    if dry:
        return None
    rep = consistency.check_lemma1_hypotheses(sc.plant, X, U, rho, slack=sc.slack or 1e-9)
    return "pass" if rep.passed else "fail", expect, rep


def _run_contraction(sc, c, path, dry=False):
    X = _wrap(f"{path}.X", box_from, _get(c, "X", path))
    E = _wrap(f"{path}.E", box_from, _get(c, "E", path))
    sigma = _wrap(f"{path}.sigma", funcs.nondecreasing_from_dict, _get(c, "sigma", path, dict))
    T1 = _positive(c, "T1", path)
    expect = _expect(c, path)
    if dry:
        return None
    rep = consistency.check_lemma5_contraction(sc.system(c.get("system", "approx")), X, E, sigma,
                                               T1, slack=sc.slack or 1e-9)
    return "pass" if rep.passed else "fail", expect, rep


def _run_msec(sc, c, path, dry=False):
    X = _wrap(f"{path}.X", box_from, _get(c, "X", path))
    E = _wrap(f"{path}.E", box_from, _get(c, "E", path))
    L, eta = _positive(c, "L", path), _positive(c, "eta", path)
    Ts = _get(c, "T_star", path)
    trials = int(_positive(c, "trials", path, 200))
    expect = _expect(c, path)
    if not (isinstance(Ts, (int, float)) and Ts > 0 or isinstance(Ts, dict) and "search_from" in Ts):
        raise ConfigError(f"{path}.T_star", "expected a positive number or {search_from: T}")
    if dry:
        return None
    ex, ap = sc.system("exact"), sc.system("approx")
    if isinstance(Ts, dict):
        T, reps = consistency.find_msec_T_star(ex, ap, X, E, L, eta, float(Ts["search_from"]),
                                               trials, sc.seed)
        return ("pass" if T is not None else "fail"), expect, {"T_star": T, "ladder": reps}
    rep = consistency.check_msec_empirical(ex, ap, X, E, L, eta, float(Ts), trials, sc.seed)
    return "pass" if rep.passed else "fail", expect, rep


def _certificate(sc, d, path):
    d = dict(d)
    Tt = d.get("T_tilde")
    G = None
    if isinstance(Tt, dict):
        fs = _get(Tt, "from_sup", f"{path}.T_tilde", dict)
        g = SUP_FUNCTIONS.get(_get(fs, "g", f"{path}.T_tilde.from_sup", str))
        if g is None:
            raise ConfigError(f"{path}.T_tilde.from_sup.g", f"known: {sorted(SUP_FUNCTIONS)}")
        box = _wrap(f"{path}.T_tilde.from_sup.box", box_from, _get(fs, "box", f"{path}.T_tilde.from_sup"))
        G = lyapunov.sup_over_box(g, box)
        d["T_tilde"] = float(fs.get("factor", 1.8)) * float(d["R"]) ** 2 / G.value
    elif Tt == "search":
        d["T_tilde"] = None
    cert = _wrap(path, lyapunov.certificate_from_dict, d)
    return cert, G


def _run_lyapunov(sc, c, path, dry=False):
    cert, G = _certificate(sc, _get(c, "certificate", path, dict), f"{path}.certificate")
    expect = _expect(c, path)
    T_hi = c.get("T_hi")
    if cert.T_tilde is None and T_hi is None:
        raise ConfigError(f"{path}.T_hi", "required when T_tilde is 'search'")
    if dry:
        return None
    rep = lyapunov.check_certificate(sc.system(c.get("system", "approx")), cert, T_hi,
                                     int(c.get("radii", 200)), int(c.get("errors", 50)),
                                     int(c.get("periods", 20)), slack=sc.slack)
    out = {"G": None if G is None else {"value": G.value, "witness": G.witness}, "report": rep}
    return "pass" if rep.passed else "fail", expect, out


def _run_iss(sc, c, path, dry=False):
    M, E = _positive(c, "M", path), _get(c, "E", path, (int, float))
    T_list = [float(t) for t in _get(c, "T_star_list", path, list)]
    trials = int(_positive(c, "trials", path, 100))
    K = int(_positive(c, "K", path, 1000))
    expect = _expect(c, path)
    if dry:
        return None
    sys = sc.system(c.get("system", "exact"))
    rows, ok, ens_by_T = [], True, {}
    half = max(1, trials // 2)
    for T in T_list:
        train = issbound.simulate_ensemble(sys, M, E, T, half, K, sc.seed)
        held = issbound.simulate_ensemble(sys, M, E, T, trials - half or 1, K, sc.seed + 1)
        ens_by_T[T] = held
        if train.escapes or held.escapes:
            rows.append({"T_star": T, "escapes": train.escapes + held.escapes, "fit": None})
            ok = False
            continue
        probes = [issbound.adversarial_probe(sys, train)] if c.get("probe", True) else []
        if any(pr.escapes for pr in probes):
            rows.append({"T_star": T, "escapes": probes[0].escapes, "fit": None})
            ok = False
            continue
        fit = issbound.fit_candidate(train, M, float(c.get("margin", 0.1)), probes=probes)
        val = issbound.check_spissvsr(sys, fit.candidate, ensemble=held,
                                      slack=sc.slack if sc.slack is not None else 1e-9)
        ok = ok and val.passed and fit.candidate.beta_dominates()
        rows.append({"T_star": T, "escapes": 0, "fit": fit, "validation": val})
    out = {"per_T_star": rows}
    if c.get("ultimate_bound"):
        tab = issbound.estimate_ultimate_bound(sys, M, E, T_list, trials - half or 1, K,
                                               float(c.get("tail_fraction", 0.5)), sc.seed + 1,
                                               ensembles=ens_by_T)
        out["ultimate_bound"] = tab
        ok = ok and tab.monotone
    return "pass" if ok else "fail", expect, out


def _run_divergence(sc, c, path, dry=False):
    thr = _positive(c, "threshold", path)
    expect = _expect(c, path, ("diverge", "bounded"))
    x0, sched = _schedule(sc.config, sc.plant.state_dim)
    if dry:
        return None
    traj = closed_loop.simulate(sc.system(c.get("system", "approx")), x0, sched)
    v = issbound.detect_divergence(traj, thr, int(c.get("growth_window", 20)))
    return "diverge" if v.diverged else "bounded", expect, {"verdict": v, "trajectory": traj}


_RUNNERS = {
    "consistency": _run_consistency, "order": _run_order, "field_bounds": _run_field_bounds,
    "contraction": _run_contraction, "msec": _run_msec, "lyapunov": _run_lyapunov, "iss": _run_iss,
    "divergence": _run_divergence,
}


# -- execution and output ----------------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    checks: list
    wall_time: float
    files: list

    @property
    def all_met(self) -> bool:
        return all(r.met for r in self.checks)

    def to_dict(self) -> dict:
        return {"toolkit": "vsriss", "version": __version__, "scenario": self.scenario.config,
                "all_met": self.all_met, "wall_time_s": self.wall_time,
                "checks": [{"kind": r.kind, "name": r.name, "expect": r.expect,
                            "outcome": r.outcome, "met": r.met, "outputs": r.outputs,
                            "report": to_jsonable(r.report)} for r in self.checks]}


def _one(sc: Scenario, i: int, c: dict) -> CheckResult:
    outcome, expect, rep = _RUNNERS[c["kind"]](sc, c, f"checks[{i}]")
    return CheckResult(c["kind"], str(c.get("name", f"{c['kind']}-{i}")), expect, outcome,
                       outcome == expect, rep)


def default_out_dir() -> Path:
    return Path(os.environ.get("VSRISS_OUT_DIR", "vsriss-out"))


def run_scenario(sc: Scenario, out_dir: Path | None = None, threads: int = 1) -> RunResult:
    """Execute check blocks in declaration order (or concurrently with
    ``threads > 1``) and write ``result.json`` plus CSV side outputs under
    ``out_dir / name``."""
    t0 = time.perf_counter()
    if threads > 1 and len(sc.checks) > 1:
        with concurrent.futures.ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda ic: _one(sc, *ic), enumerate(sc.checks)))
    else:
        results = [_one(sc, i, c) for i, c in enumerate(sc.checks)]
    wall = time.perf_counter() - t0
    files = []
    if out_dir is not None:
        d = Path(out_dir) / sc.name
        d.mkdir(parents=True, exist_ok=True)
        files = _write_side_outputs(sc, results, d)
        res = RunResult(sc, results, wall, files)
        (d / "result.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
        files.append(str(d / "result.json"))
        return res
    return RunResult(sc, results, wall, files)


def _write_side_outputs(sc, results, d: Path) -> list:
    files = []
    head = csv_header(sc.name)
    if "schedule" in sc.config:
        p = d / "trajectory.csv"
        p.write_text(export_trajectory(sc))
        files.append(str(p))
    for i, r in enumerate(results):
        stem = f"{i:02d}-{r.kind}-{r.name}"
        if r.kind == "iss" and "ultimate_bound" in r.report:
            p = d / f"{stem}-ultimate_bound.csv"
            p.write_text(r.report["ultimate_bound"].to_csv(head))
            r.outputs.append(p.name)
        if r.kind == "divergence":
            p = d / f"{stem}-trajectory.csv"
            p.write_text(r.report["trajectory"].to_csv(head))
            r.outputs.append(p.name)
        if r.kind == "consistency":
            p = d / f"{stem}-sweep.csv"
            rep = r.report
            lines = [f"# {head}", "T,worst,bound,margin"]
            lines += [f"{T!r},{w!r},{b!r},{m!r}" for T, w, b, m in
                      zip(rep.T_grid, rep.worst, rep.bound, rep.margin)]
            p.write_text("\n".join(lines) + "\n")
            r.outputs.append(p.name)
        files += [str(d / o) for o in r.outputs]
    return files


def export_trajectory(sc: Scenario, system: str = "approx", dense_dt: float | None = None) -> str:
    """Sampled (or ZOH-dense, for the plant under the law) trajectory CSV of
    the scenario's ``schedule`` block."""
    if "schedule" not in sc.config:
        raise ConfigError("schedule", "export needs a schedule block")
    x0, sched = _schedule(sc.config, sc.plant.state_dim)
    head = csv_header(sc.name)
    if dense_dt is None:
        return closed_loop.simulate(sc.system(system), x0, sched).to_csv(head)
    dense = closed_loop.simulate_intersample(sc.plant, sc.law, x0, sched, dense_dt)
    lines = [f"# {head}", "t," + ",".join(f"x{i}" for i in range(sc.plant.state_dim))]
    lines += [repr(float(t)) + "," + ",".join(repr(float(v)) for v in x)
              for t, x in zip(dense.times, dense.states)]
    if dense.status != "complete":
        lines.append(f"# escaped in interval {dense.escape_interval} at t={dense.escape_time!r}")
    return "\n".join(lines) + "\n"

