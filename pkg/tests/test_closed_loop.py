import numpy as np
import pytest
from hypothesis import given, strategies as st

from vsriss import closed_loop as cl
from vsriss.dynamics import builtin_plant, euler, exact_oracle, exact_step

cubic = builtin_plant("cubic")
U, W = cl.builtin_law("U"), cl.builtin_law("W")
euler_U = cl.ClosedLoopSystem(euler(cubic), U)
euler_W = cl.ClosedLoopSystem(euler(cubic), W)


def u_loop(x, e, T):
    return x - T * (2 * x ** 3 + 9 * e * x ** 2 + (9 * e ** 2 + 1) * x + 3 * e ** 3 + e)


class TestStep:
    def test_u_loop_value(self):
        assert cl.closed_loop_step(euler_U, [1.0], [0.0], 0.1).state[0] == pytest.approx(0.7, abs=1e-15)

    def test_origin(self):
        for T in (1e-3, 0.1, 0.5):
            assert euler_U([0.0], [0.0], T)[0] == 0

    def test_w_loop_value(self):
        assert euler_W([1.0], [-1.0], 0.1)[0] == pytest.approx(1.1, abs=1e-14)

    def test_rejects_nonpositive_period(self):
        with pytest.raises(ValueError):
            cl.closed_loop_step(euler_U, [1.0], [0.0], 0.0)

    @given(x=st.floats(-3, 3), e=st.floats(-0.5, 0.5), T=st.floats(1e-4, 0.2))
    def test_composition_identity(self, x, e, T):
        manual = x + T * (x ** 3 + U([x + e], T)[0])
        assert euler_U([x], [e], T)[0] == manual

    @given(x=st.floats(-3, 3), e=st.floats(-0.5, 0.5), T=st.floats(1e-4, 0.2))
    def test_expanded_maps_agree(self, x, e, T):
        assert euler_U([x], [e], T)[0] == pytest.approx(u_loop(x, e, T), rel=1e-12, abs=1e-12)
        direct = cl.direct_euler_cubic_w()([x], [e], T)[0]
        assert euler_W([x], [e], T)[0] == pytest.approx(direct, rel=1e-12, abs=1e-12)

    def test_exact_escape_passthrough(self):
        sys = cl.ClosedLoopSystem(exact_oracle(cubic), cl.builtin_law("zero"))
        assert not sys.step([1.0], [0.0], 0.6).all_ok


class TestSchedules:
    def test_uniform(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.1, "T_star": 0.2}, {"kind": "zero"}, 6)
        assert np.all(s.periods == 0.1) and s.T_star == 0.2

    def test_constant_error(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.1}, {"kind": "constant", "e": -1}, 5)
        assert np.all(s.errors == -1) and s.E == 1

    def test_random_vsr_deterministic(self):
        a = cl.make_schedule({"kind": "random_vsr", "T_star": 0.01}, {"kind": "zero"}, 50, seed=42)
        b = cl.make_schedule({"kind": "random_vsr", "T_star": 0.01}, {"kind": "zero"}, 50, seed=42)
        np.testing.assert_array_equal(a.periods, b.periods)

    @given(T_star=st.floats(1e-4, 1.0), E=st.floats(0, 2), seed=st.integers(0, 2 ** 31),
           kind=st.sampled_from(["random_vsr", "sawtooth"]))
    def test_membership(self, T_star, E, seed, kind):
        s = cl.make_schedule({"kind": kind, "T_star": T_star}, {"kind": "random", "E": E}, 30, 2, seed)
        assert np.all((s.periods > 0) & (s.periods < T_star))
        assert np.all(np.linalg.norm(s.errors, axis=1) <= E * (1 + 1e-12))

    def test_error_stream_independent_of_period_spec(self):
        a = cl.make_schedule({"kind": "random_vsr", "T_star": 0.1}, {"kind": "random", "E": 1}, 20, seed=3)
        b = cl.make_schedule({"kind": "sawtooth", "T_star": 0.5}, {"kind": "random", "E": 1}, 20, seed=3)
        np.testing.assert_array_equal(a.errors, b.errors)

    @pytest.mark.parametrize("bad", [({"kind": "uniform", "T": 0.3, "T_star": 0.2}, {"kind": "zero"}, 3),
                                     ({"kind": "random_vsr", "T_star": -1}, {"kind": "zero"}, 3),
                                     ({"kind": "uniform", "T": 0.1}, {"kind": "random", "E": -1}, 3),
                                     ({"kind": "uniform", "T": 0.1}, {"kind": "zero"}, 0),
                                     ({"kind": "nope"}, {"kind": "zero"}, 3)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            cl.make_schedule(*bad)


class TestSimulate:
    def test_two_steps(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.1}, {"kind": "zero"}, 2)
        tr = cl.simulate(euler_U, [1.0], s)
        np.testing.assert_allclose(tr.states[:, 0], [1.0, 0.7, 0.5614], atol=1e-15)
        np.testing.assert_allclose(tr.times, [0.0, 0.1, 0.2])
        assert tr.status == "complete"

    def test_zero_stays_zero(self):
        s = cl.make_schedule({"kind": "random_vsr", "T_star": 0.1}, {"kind": "zero"}, 50, seed=1)
        tr = cl.simulate(euler_U, [0.0], s)
        assert np.all(tr.states == 0)

    def test_w_law_growth(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.05}, {"kind": "constant", "e": -1}, 15)
        tr = cl.simulate(euler_W, [1.0], s)
        x = tr.states[:, 0]
        k = np.arange(len(x))
        assert np.all(x >= 1.05 ** k * (1 - 1e-12))

    def test_escape_truncates(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.05}, {"kind": "constant", "e": -1}, 100)
        tr = cl.simulate(euler_W, [1.0], s)
        assert tr.status == "escaped" and tr.escape_index == len(tr.states)
        assert np.all(np.isfinite(tr.states))

    @given(seed=st.integers(0, 1000), k=st.integers(1, 20))
    def test_causality(self, seed, k):
        s = cl.make_schedule({"kind": "random_vsr", "T_star": 0.05}, {"kind": "random", "E": 0.3}, 20, seed=seed)
        a = cl.simulate(euler_U, [1.2], s)
        s.errors[k:] = 0.0
        b = cl.simulate(euler_U, [1.2], s)
        np.testing.assert_array_equal(a.states[:k + 1], b.states[:k + 1])

    def test_times_strictly_increasing_and_lengths(self):
        s = cl.make_schedule({"kind": "sawtooth", "T_star": 0.1}, {"kind": "random", "E": 0.1}, 25, seed=0)
        tr = cl.simulate(euler_U, [0.5], s)
        assert np.all(np.diff(tr.times) > 0)
        assert len(tr.states) == len(tr.inputs) + 1 == len(tr.errors) + 1 == len(tr.periods) + 1

    def test_adversarial_errors(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.05}, {"kind": "adversarial_sign", "E": 1}, 5)
        tr = cl.simulate(euler_W, [1.0], s)
        assert np.all(tr.errors == -1)

    def test_csv_columns(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.1}, {"kind": "zero"}, 2)
        text = cl.simulate(euler_U, [1.0], s).to_csv("hdr")
        lines = text.splitlines()
        assert lines[0] == "# hdr" and lines[1] == "k,t_k,x0,u0,e0,T_k"
        assert lines[-1].startswith("2,") and lines[-1].endswith(",,,")


class TestIntersample:
    def test_matches_sampled_exact_loop(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.1}, {"kind": "zero"}, 5)
        dense = cl.simulate_intersample(cubic, U, [1.0], s, dt_out=0.025)
        sampled = cl.simulate(cl.ClosedLoopSystem(exact_oracle(cubic), U), [1.0], s)
        np.testing.assert_allclose(dense.sample_states, sampled.states, atol=1e-8)
        assert np.any(np.isclose(dense.times, 0.05))

    def test_zero(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.1}, {"kind": "zero"}, 3)
        assert np.all(cl.simulate_intersample(cubic, U, [0.0], s, 0.01).states == 0)

    def test_open_loop_escape(self):
        s = cl.make_schedule({"kind": "uniform", "T": 0.2}, {"kind": "zero"}, 3)
        d = cl.simulate_intersample(cubic, cl.builtin_law("zero"), [1.0], s, 0.05)
        assert d.status == "escaped" and d.escape_interval == 2
        assert abs(d.escape_time - 0.5) < 0.01

    def test_zoh_holds_input(self):
        # between samples the state follows the open-loop flow with u frozen
        s = cl.make_schedule({"kind": "uniform", "T": 0.1}, {"kind": "constant", "e": 0.05}, 1)
        d = cl.simulate_intersample(cubic, U, [0.8], s, 0.05)
        u0 = U([0.85], 0.1)
        mid = exact_step(cubic, [0.8], u0, 0.05).state
        i = int(np.argmin(np.abs(d.times - 0.05)))
        np.testing.assert_allclose(d.states[i], mid, atol=1e-12)


class TestBoundedLaw:
    def test_u_law(self):
        assert cl.check_locally_uniformly_bounded(U, 2.0, 0.1).C_est == 26

    def test_w_law(self):
        assert cl.check_locally_uniformly_bounded(W, 1.0, 0.1).C_est == 2

    def test_shrinks_with_M(self):
        r = cl.check_locally_uniformly_bounded(U, 1e-6, 0.1)
        assert r.C_est < 1e-5 and not r.suspected_unbounded

    def test_unbounded_flag(self):
        blow = cl.ControlLaw("blow", 1, 1, lambda x, T: x / T[:, None] ** 8)
        assert cl.check_locally_uniformly_bounded(blow, 1.0, 0.1).suspected_unbounded
