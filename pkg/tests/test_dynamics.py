import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from vsriss import ode
from vsriss.dynamics import (DimensionError, FlowStatus, builtin_plant, closed_form, euler,
                             euler_step, eval_field, exact_oracle, exact_step, plant_from_dict,
                             rk4, rk4_step)

cubic = builtin_plant("cubic")


def closed_form_cubic(x0, t):
    return x0 / np.sqrt(1 - 2 * x0 ** 2 * t)


def scipy_flow(plant, x, u, T):
    sol = solve_ivp(lambda t, y: plant.field(y[None, :], np.atleast_2d(u))[0], (0, T),
                    np.atleast_1d(x).astype(float), method="DOP853", rtol=1e-13, atol=1e-14)
    return sol.y[:, -1]


class TestField:
    def test_values(self):
        assert eval_field(cubic, [2.0], [1.0])[0] == 9
        assert eval_field(cubic, [0.0], [0.0])[0] == 0
        assert eval_field(cubic, [-1.0], [0.0])[0] == -1

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            eval_field(cubic, [1.0, 2.0], [0.0])

    def test_polynomial_plant_matches_builtin(self):
        p = plant_from_dict({"name": "c", "state_dim": 1, "input_dim": 1, "polynomial": [[
            {"coef": 1, "x": [3], "u": [0]}, {"coef": 1, "x": [0], "u": [1]}]]})
        x, u = np.linspace(-2, 2, 9)[:, None], np.linspace(-1, 1, 9)[:, None]
        np.testing.assert_array_equal(eval_field(p, x, u), eval_field(cubic, x, u))

    def test_builtins_vanish_at_origin(self):
        for name in ("cubic", "integrator", "stable_linear"):
            assert eval_field(builtin_plant(name), [0.0], [0.0])[0] == 0


class TestExactStep:
    def test_closed_form(self):
        r = exact_step(cubic, [1.0], [0.0], 0.1)
        assert r.status == FlowStatus.OK
        assert abs(r.state[0] - 1 / np.sqrt(0.8)) <= 1e-8

    def test_equilibrium(self):
        for T in (0.01, 1.0, 10.0):
            assert exact_step(cubic, [0.0], [0.0], T).state[0] == 0

    def test_finite_escape(self):
        r = exact_step(cubic, [1.0], [0.0], 0.6)
        assert r.status == FlowStatus.FINITE_ESCAPE
        assert 0.49 <= float(r.t_escape) <= 0.51
        assert np.isnan(r.state[0])

    def test_nonpositive_period_rejected(self):
        with pytest.raises(ValueError):
            exact_step(cubic, [1.0], [0.0], 0.0)

    def test_against_scipy_with_input(self):
        for x, u, T in [(0.7, -2.0, 0.3), (-1.2, 3.0, 0.05), (0.2, 0.5, 1.0)]:
            mine = exact_step(cubic, [x], [u], T).state
            np.testing.assert_allclose(mine, scipy_flow(cubic, [x], [u], T), rtol=1e-10)

    @given(x0=st.floats(-2, 2), frac=st.floats(0.01, 0.9))
    def test_closed_form_property(self, x0, frac):
        tol = 1e-12
        T = frac / (2 * max(x0 * x0, 1e-3))
        T = min(T, 50.0)
        r = exact_step(cubic, [x0], [0.0], T, tol=tol)
        expected = closed_form_cubic(x0, T)
        assert abs(r.state[0] - expected) <= 10 * tol * max(1.0, abs(expected))

    def test_tolerance_halving_self_consistent(self):
        x = np.linspace(-1.5, 1.5, 13)[:, None]
        u = np.linspace(-3, 3, 13)[:, None]
        coarse = exact_step(cubic, x, u, 0.1, tol=1e-9).state
        fine = exact_step(cubic, x, u, 0.1, tol=5e-10).state
        assert np.max(np.abs(coarse - fine)) < 1e-9 * np.max(np.abs(fine))

    def test_deterministic(self):
        a = exact_step(cubic, [0.9], [-1.0], 0.2).state
        b = exact_step(cubic, [0.9], [-1.0], 0.2).state
        assert a[0] == b[0]

    def test_batch_mixed_status(self):
        r = exact_step(cubic, np.array([[1.0], [0.1]]), np.zeros((2, 1)), 0.6)
        assert list(r.status) == [FlowStatus.FINITE_ESCAPE, FlowStatus.OK]
        assert abs(r.state[1, 0] - closed_form_cubic(0.1, 0.6)) < 1e-11


class TestApproximateSteps:
    def test_euler(self):
        assert euler_step(cubic, [1.0], [0.0], 0.1)[0] == pytest.approx(1.1, abs=1e-15)
        assert euler_step(cubic, [1.0], [-4.0], 0.1)[0] == pytest.approx(0.7, abs=1e-15)

    @given(x=st.floats(-5, 5), u=st.floats(-5, 5), T=st.floats(0, 1))
    def test_euler_formula(self, x, u, T):
        assert euler_step(cubic, [x], [u], T)[0] == x + T * (x ** 3 + u)

    def test_zero_period_is_identity(self):
        for step in (euler_step, rk4_step):
            assert step(cubic, [1.3], [2.0], 0.0)[0] == 1.3

    def test_rk4_close_to_closed_form(self):
        assert abs(rk4_step(cubic, [1.0], [0.0], 0.1)[0] - 1.1180340) < 1e-5

    def test_rk4_exact_for_constant_field(self):
        p = builtin_plant("integrator")
        assert rk4_step(p, [0.0], [1.0], 0.5)[0] == 0.5

    def test_convergence_as_T_shrinks(self):
        Ts = np.array([1e-1, 1e-2, 1e-3])
        for step in (euler, rk4):
            m = step(cubic)
            err = np.array([abs(m([0.8], [-1.0], T)[0] - exact_step(cubic, [0.8], [-1.0], T).state[0])
                            for T in Ts])
            assert np.all(np.diff(err / Ts) < 0)

    def test_closed_form_map(self):
        m = closed_form(lambda x, u, T: x + T[:, None] * u, 1, 1)
        assert m([1.0], [2.0], 0.25)[0] == 1.5
        np.testing.assert_array_equal(m(np.ones((3, 1)), np.ones((3, 1)), 0.5), 1.5 * np.ones((3, 1)))

    def test_guard_marks_escape(self):
        r = euler(cubic).step([1e4], [0.0], 1.0)
        assert r.status == FlowStatus.FINITE_ESCAPE

    def test_oracle_map_kind(self):
        m = exact_oracle(cubic)
        assert m.kind == "exact" and m.tol == 1e-12


class TestIntegrator:
    def test_batched_linear(self):
        y0 = np.array([[1.0], [2.0], [-3.0]])
        sol = ode.integrate(lambda y, idx: -y, y0, rtol=1e-12)
        np.testing.assert_allclose(sol.y, y0 * np.exp(-1), rtol=1e-11)
        assert np.all(sol.status == ode.OK)
