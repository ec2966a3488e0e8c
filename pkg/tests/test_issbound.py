import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsriss import closed_loop as cl
from vsriss import issbound as ib
from vsriss.dynamics import builtin_plant, euler, exact_oracle
from vsriss.funcs import Power, SeparableKL, identity

cubic = builtin_plant("cubic")
EXACT_U = cl.ClosedLoopSystem(exact_oracle(cubic), cl.builtin_law("U"))
EULER_U = cl.ClosedLoopSystem(euler(cubic), cl.builtin_law("U"))
EULER_W = cl.ClosedLoopSystem(euler(cubic), cl.builtin_law("W"))
LINEAR = cl.DirectClosedLoop(lambda x, e, T: (1 - T[:, None]) * x, 1, "linear")


def w_map(x, e, T):
    return x - T * (3 * e * x ** 2 + (1 + 3 * e ** 2) * x + e ** 3 + e)


def loose(M=2.0, E=0.1, T=0.02):
    return ib.IssCandidate(SeparableKL(Power(2, 1), 0.5), Power(5, 1), 0.1, T, M, E)


class TestCandidate:
    def test_invariants(self):
        with pytest.raises(ValueError):
            ib.IssCandidate(SeparableKL(Power(1, 1), 1), identity(), -1, 0.1, 1, 0)
        with pytest.raises(ValueError):
            ib.IssCandidate(SeparableKL(Power(1, 1), 1), identity(), 0, 0.0, 1, 0)

    def test_beta_domination(self):
        assert loose().beta_dominates()
        weak = ib.IssCandidate(SeparableKL(Power(0.5, 1), 1), identity(), 0, 0.1, 2, 0)
        assert not weak.beta_dominates()

    def test_k0_reduces_to_beta(self):
        # k = 0 has no error history and zero elapsed time
        c = loose()
        assert c.bound(1.5, 0.0, 0.0) == pytest.approx(2 * 1.5 + 0.1)


class TestCheck:
    def test_loose_candidate_passes_exact_loop(self):
        r = ib.check_spissvsr(EXACT_U, loose(), trials=10, K=100, seed=1)
        assert r.passed and r.violations == 0 and r.escapes == 0 and r.beta_valid

    def test_violations_iff_not_passed(self):
        tight = ib.IssCandidate(SeparableKL(Power(1, 1), 50), Power(1e-3, 1), 0.0, 0.02, 2, 0.1)
        r = ib.check_spissvsr(EULER_U, tight, trials=10, K=50, seed=1)
        assert (r.violations == 0) == r.passed
        assert not r.passed and r.worst_excess > 0

    def test_witness_replays(self):
        tight = ib.IssCandidate(SeparableKL(Power(1, 1), 50), Power(1e-3, 1), 0.0, 0.02, 2, 0.1)
        ens = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 10, 50, seed=1)
        r = ib.check_spissvsr(None, tight, ensemble=ens)
        w = r.witness
        row = ens.batch.row(w["trial"])
        assert row.norms[w["k"]] == pytest.approx(w["norm"], rel=1e-15)
        e_sup = np.abs(row.errors[:w["k"], 0]).max() if w["k"] else 0.0
        t_k = row.periods[:w["k"]].sum()
        assert w["bound"] == pytest.approx(float(tight.bound(abs(w["x0"][0]), t_k, e_sup)),
                                           rel=1e-12)

    def test_w_law_with_minus_one_violates(self):
        c = ib.IssCandidate(SeparableKL(Power(2, 1), 0.5), Power(5, 1), 0.1, 0.051, 2, 1.0)
        r = ib.check_spissvsr(EULER_W, c, trials=4, K=400, seed=0,
                              period_spec={"kind": "uniform", "T": 0.05, "T_star": 0.051},
                              error_spec={"kind": "constant", "e": [-1.0]},
                              x0=np.ones((4, 1)))
        assert r.violations > 0

    def test_escape_counts_as_violation(self):
        c = ib.IssCandidate(SeparableKL(Power(1e6, 1), 1e-3), Power(1e6, 1), 1e6, 0.051, 2, 1.0)
        esc = cl.DirectClosedLoop(lambda x, e, T: x * 1e4, 1, "blow", guard=1e9)
        r = ib.check_spissvsr(esc, c, trials=2, K=10, seed=0, x0=np.ones((2, 1)))
        assert r.escapes == 2 and r.violations == 2 and math.isinf(r.worst_excess)

    def test_uniform_special_case(self):
        c = loose(T=0.02)
        rnd = ib.check_spissvsr(EXACT_U, c, trials=8, K=100, seed=4)
        uni = ib.check_spissvsr(EXACT_U, c, trials=8, K=100, seed=4,
                                period_spec={"kind": "uniform", "T": 0.015, "T_star": 0.02})
        assert rnd.passed and uni.passed


class TestCausality:
    @settings(max_examples=15)
    @given(st.integers(1, 40), st.integers(0, 1000))
    def test_future_errors_do_not_matter(self, k, seed):
        sched = cl.make_schedule({"kind": "random_vsr", "T_star": 0.02},
                                 {"kind": "random", "E": 0.1}, 40, 1, seed)
        x0 = np.array([[1.5]])
        full = cl.simulate_batch(EXACT_U, x0, sched.periods[None], sched.errors[None])
        cut = sched.errors.copy()
        cut[k:] = 0.0
        part = cl.simulate_batch(EXACT_U, x0, sched.periods[None], cut[None])
        assert np.array_equal(full.states[0, :k + 1], part.states[0, :k + 1])

    def test_running_sup_is_strictly_past(self):
        ens = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 3, 20, seed=2)
        run = ib._running_error_sup(ens.batch)
        errs = np.abs(ens.batch.errors[..., 0])
        assert np.all(run[:, 0] == 0)
        for k in range(1, 21):
            assert np.array_equal(run[:, k], errs[:, :k].max(axis=1))


class TestEnsemble:
    def test_initial_states_in_ball(self):
        ens = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 50, 5, seed=0)
        assert np.all(np.abs(ens.x0) <= 2) and ens.trials == 50

    def test_periods_in_open_interval(self):
        ens = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 5, 50, seed=0)
        p = ens.batch.periods
        assert np.all((p > 0) & (p < 0.02))

    def test_deterministic(self):
        a = ib.simulate_ensemble(EXACT_U, 2, 0.1, 0.02, 5, 30, seed=7)
        b = ib.simulate_ensemble(EXACT_U, 2, 0.1, 0.02, 5, 30, seed=7)
        assert np.array_equal(a.batch.states, b.batch.states)

    def test_rejects_schedule_above_T_star(self):
        with pytest.raises(ValueError):
            ib.simulate_ensemble(EULER_U, 2, 0.1, 0.01, 2, 5,
                                 period_spec={"kind": "random_vsr", "T_star": 0.02})


class TestFit:
    def test_fit_validates_on_held_out_seeds(self):
        train = ib.simulate_ensemble(EXACT_U, 2, 0.1, 0.02, 30, 300, seed=0)
        fit = ib.fit_candidate(train, 2.0)
        assert fit.train.passed and fit.candidate.beta_dominates()
        r = ib.check_spissvsr(EXACT_U, fit.candidate, trials=30, K=300, seed=1)
        assert r.passed

    def test_fit_covers_margin(self):
        train = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 10, 100, seed=0)
        fit = ib.fit_candidate(train, 2.0, margin=0.1)
        b = train.batch
        x0n = np.abs(train.x0)
        bound = fit.candidate.bound(np.broadcast_to(x0n, b.times.shape), b.times,
                                    ib._running_error_sup(b))
        assert np.all(1.1 * np.abs(b.states[..., 0]) <= bound * (1 + 1e-9) + 1e-12)

    def test_zero_error_gain_floor(self):
        train = ib.simulate_ensemble(EULER_U, 2, 0.0, 0.02, 5, 100, seed=0)
        fit = ib.fit_candidate(train, 2.0)
        assert fit.candidate.gamma(1.0) >= ib.GAIN_FLOOR

    def test_probe_shares_x0_and_periods(self):
        train = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 4, 50, seed=5)
        probe = ib.adversarial_probe(EULER_U, train)
        assert np.array_equal(probe.x0, train.x0)
        assert np.array_equal(probe.batch.periods, train.batch.periods)
        x, e = probe.batch.states[:, :-1, 0], probe.batch.errors[..., 0]
        assert np.all(e == np.where(x >= 0, -0.1, 0.1))

    def test_probe_data_is_covered(self):
        train = ib.simulate_ensemble(EULER_U, 2, 0.1, 0.02, 10, 200, seed=0)
        probe = ib.adversarial_probe(EULER_U, train)
        fit = ib.fit_candidate(train, 2.0, probes=[probe])
        assert fit.train.passed and all(r.passed for r in fit.probes)
        plain = ib.fit_candidate(train, 2.0)
        assert fit.objective >= plain.objective

    def test_lp_cover_is_exact(self):
        rng = np.random.default_rng(0)
        phi, s = rng.uniform(0, 1, 5000), np.full(5000, 0.1)
        y = 0.3 * phi + 0.05 + rng.uniform(0, 1e-3, 5000)
        _, a, c, R = ib._cover_lp(phi, s, y, 0.0, seed_rows=50, add_rows=10)
        assert np.all(a * phi + c * s + R >= y)

    def test_escapes_refuse_to_fit(self):
        esc = cl.DirectClosedLoop(lambda x, e, T: x * 1e4, 1, "blow", guard=1e9)
        ens = ib.simulate_ensemble(esc, 2, 0.1, 0.02, 2, 10, seed=0, x0=np.ones((2, 1)))
        with pytest.raises(ValueError):
            ib.fit_candidate(ens, 2.0)


class TestUltimateBound:
    def test_horizon_scales_with_T_star(self):
        t = ib.estimate_ultimate_bound(EULER_U, 2, 0.0, [0.01, 0.02, 0.005], trials=2, K=100)
        assert [r["T_star"] for r in t.rows] == [0.02, 0.01, 0.005]
        assert [r["K"] for r in t.rows] == [1000, 2000, 4000]

    def test_cubic_zero_error_nonincreasing(self):
        # with e = 0 the tail must outlast the unit-rate transient before b can be compared
        t = ib.estimate_ultimate_bound(EULER_U, 2, 0.0, [0.02, 0.01, 0.005], trials=5, K=100,
                                       horizon_factor=100)
        assert t.monotone and all(r["b"] < 1e-9 for r in t.rows)

    def test_cubic_with_error_nonincreasing(self):
        t = ib.estimate_ultimate_bound(EULER_U, 2, 0.1, [0.02, 0.01, 0.005], trials=10, K=100)
        bs = [r["b"] for r in t.rows]
        assert t.monotone and bs[0] > bs[-1] > 0

    def test_linear_contraction_to_zero(self):
        t = ib.estimate_ultimate_bound(LINEAR, 1, 0.0, [0.5, 0.2], trials=5, K=2000)
        assert all(r["b"] < 1e-6 for r in t.rows)

    def test_w_adversarial_infinity(self):
        t = ib.estimate_ultimate_bound(EULER_W, 2, 1.0, [0.05], trials=3, K=100,
                                       error_spec={"kind": "adversarial_sign", "E": 1.0},
                                       x0=np.full((3, 1), 1.5))
        assert math.isinf(t.rows[0]["b"]) and t.rows[0]["escapes"] == 3
        assert "inf" in t.to_csv()

    def test_csv_columns(self):
        t = ib.estimate_ultimate_bound(LINEAR, 1, 0.0, [0.5], trials=2, K=10)
        lines = t.to_csv("hdr").splitlines()
        assert lines[0] == "# hdr" and lines[1] == "T_star,b,trials,escapes,K"

    def test_tail_fraction_validated(self):
        with pytest.raises(ValueError):
            ib.estimate_ultimate_bound(LINEAR, 1, 0.0, [0.5], tail_fraction=0.0)


class TestDivergence:
    def sched(self, K=300):
        return cl.make_schedule({"kind": "uniform", "T": 0.05},
                                {"kind": "constant", "e": [-1.0]}, K, 1, 0)

    def test_crossing_and_rate(self):
        traj = cl.simulate(EULER_W, [1.0], self.sched())
        v = ib.detect_divergence(traj, 1e6)
        assert v.diverged and v.k_cross <= 284 and v.growth_rate >= 1.05

    @given(st.floats(1.0, 1e3), st.floats(1e-3, 0.5))
    def test_lower_bound_on_map(self, x, T):
        F = EULER_W([x], [-1.0], T)[0]
        assert F == pytest.approx(w_map(x, -1.0, T), rel=1e-12)
        assert F >= x * (1 + T) - 1e-12 * x * x * (1 + T)

    def test_lower_bound_along_trajectory(self):
        traj = cl.simulate(EULER_W, [1.0], self.sched())
        x = traj.states[:, 0]
        k = np.flatnonzero(x[:-1] >= 1)
        k = k[np.isfinite(x[k + 1])]
        assert np.all(x[k + 1] >= x[k] * 1.05 * (1 - 1e-12))

    def test_zero_trajectory_none(self):
        traj = cl.simulate(EULER_U, [0.0], cl.make_schedule({"kind": "uniform", "T": 0.05},
                                                            {"kind": "zero"}, 50, 1, 0))
        v = ib.detect_divergence(traj, 1e6)
        assert not v.diverged and v.k_cross is None and v.growth_rate is None

    def test_stable_u_law(self):
        traj = cl.simulate(EULER_U, [1.0], cl.make_schedule({"kind": "uniform", "T": 0.05},
                                                            {"kind": "zero"}, 200, 1, 0))
        v = ib.detect_divergence(traj, 1e6)
        assert not v.diverged and v.growth_rate < 1

    def test_threshold_positive(self):
        traj = cl.simulate(EULER_U, [1.0], self.sched(5))
        with pytest.raises(ValueError):
            ib.detect_divergence(traj, 0.0)


class TestGains:
    def test_exact_gain_is_3s(self):
        g = ib.construct_exact_gain(SeparableKL(Power(1, 1), 1.0), identity())
        s = np.random.default_rng(0).uniform(0, 100, 100)
        assert np.all(np.asarray(g(s)) == 3 * s)

    def test_exact_gain_square(self):
        g = ib.construct_exact_gain(SeparableKL(Power(1, 2), 1.0), identity())
        assert g(1.0) == 5.0 and g(0.0) == 0.0

    @given(st.lists(st.floats(0, 50), min_size=2, max_size=20, unique=True))
    def test_exact_gain_class_k(self, pts):
        g = ib.construct_exact_gain(SeparableKL(Power(1, 2), 0.3), Power(2, 1))
        s = np.sort(pts)
        v = np.asarray(g(s))
        assert np.all(np.diff(v) > 0)

    def test_vsr_gain_gamma(self):
        _, gamma = ib.construct_theorem2_gains(Power(1, 2), Power(1, 2), identity(), identity())
        for s in (0.1, 1.0, 3.0):
            assert gamma(s) == pytest.approx(2 * math.sqrt(3) * s, rel=1e-9)

    def test_vsr_gain_beta(self):
        beta, _ = ib.construct_theorem2_gains(Power(1, 2), Power(1, 2), identity(), identity())
        s = np.linspace(0.01, 3, 20)
        assert np.all(np.asarray(beta(s, 0.0)) >= s * (1 - 1e-9))
        assert beta(0.0, 1.0) == 0.0
        # alpha = id: beta1(r, t) = r e^{-t}, so beta(s, t) = sqrt(3) s e^{-t/2}
        assert beta(2.0, 1.0) == pytest.approx(math.sqrt(3) * 2 * math.exp(-0.5), rel=1e-6)

    def test_decay_rate(self):
        a = ib.decay_rate(Power(2.194, 4), Power(1, 2))
        assert a(4.0) == pytest.approx(2.194 * 16, rel=1e-9)
