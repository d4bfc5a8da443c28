import time
import warnings

import numpy as np
import pytest

from quasiflow.drift import MollifiedSequence, ProblemSpec, make_drift
from quasiflow.errors import ConfigError, InstabilityError
from quasiflow.pde import (GridSpec, ParabolicSolution, gradient_sup,
                           manufactured_case, select_lambda,
                           sobolev_surrogate_report, solve_backward)

SPEC = ProblemSpec(1, 1.0, 3, 8)
ZERO = lambda t, x: np.zeros_like(x)

pytestmark = pytest.mark.filterwarnings(
    "ignore::quasiflow.pde.BoundaryContaminationWarning")


class TestSolver:
    def test_zero_data(self):
        grid = GridSpec(half_width=2.0, h=1 / 32, dt=1e-2, store_stride=10)
        sol = solve_backward(ZERO, ZERO, 1.0, grid, SPEC)
        assert np.max(np.abs(sol.u)) == 0.0
        assert gradient_sup(sol) == 0.0

    def test_terminal_condition_exact(self):
        grid = GridSpec(half_width=2.0, h=1 / 32, dt=1e-2, store_stride=10)
        f = lambda t, x: np.sin(x)
        sol = solve_backward(ZERO, f, 1.0, grid, SPEC)
        assert np.max(np.abs(sol.u[-1])) == 0.0

    def test_constant_source_closed_form(self):
        lam, c = 8.0, 0.7
        grid = GridSpec(half_width=4.0, h=1 / 64, dt=2.5e-4, store_stride=40)
        sol = solve_backward(ZERO, lambda t, x: np.full_like(x, c), lam, grid, SPEC)
        inner = np.abs(grid.nodes()) <= 1.0
        worst = 0.0
        for k, t in enumerate(sol.times):
            exact = c * (1.0 - np.exp(-lam * (1.0 - t))) / lam
            worst = max(worst, np.max(np.abs(sol.u[k][inner] - exact)))
        assert worst < 1e-6

    def test_linearity(self):
        grid = GridSpec(half_width=2.0, h=1 / 32, dt=1e-2, store_stride=5)
        b = make_drift("bump", SPEC, amplitude=0.5, radius=1.0)
        f1 = lambda t, x: np.sin(x) * np.exp(-x * x)
        f2 = lambda t, x: np.cos(2 * x) * np.exp(-x * x / 2)
        f12 = lambda t, x: f1(t, x) + f2(t, x)
        s1 = solve_backward(b, f1, 2.0, grid, SPEC)
        s2 = solve_backward(b, f2, 2.0, grid, SPEC)
        s12 = solve_backward(b, f12, 2.0, grid, SPEC)
        assert np.max(np.abs(s12.u - s1.u - s2.u)) < 1e-10

    def test_cfl_error(self):
        grid = GridSpec(half_width=2.0, h=1 / 32, dt=0.05, store_stride=1)
        fast = lambda t, x: np.full_like(x, 10.0)
        with pytest.raises(InstabilityError):
            solve_backward(fast, ZERO, 1.0, grid, SPEC)

    def test_dt_must_divide_horizon(self):
        grid = GridSpec(half_width=2.0, h=1 / 32, dt=0.3, store_stride=1)
        with pytest.raises(ConfigError):
            solve_backward(ZERO, ZERO, 1.0, grid, SPEC)

    def test_manufactured_convergence_order(self):
        lam = 2.0
        u_star, f = manufactured_case(SPEC, lam)
        errs = []
        for h in (1 / 16, 1 / 32, 1 / 64):
            grid = GridSpec(half_width=4.0, h=h, dt=h / 8, store_stride=10 ** 9)
            sol = solve_backward(ZERO, f, lam, grid, SPEC, f_time_dependent=True)
            pts = grid.nodes()[:, None]
            errs.append(np.max(np.abs(sol.u[0] - u_star(0.0, pts))))
        orders = [np.log2(a / b) for a, b in zip(errs, errs[1:])]
        assert min(orders) > 1.9

    def test_d2_zero_and_constant(self):
        spec2 = ProblemSpec(2, 1.0, 5, 8)
        grid = GridSpec(half_width=2.0, h=1 / 8, dt=5e-3, padding=0.25,
                        store_stride=20)
        sol = solve_backward(ZERO, ZERO, 1.0, grid, spec2)
        assert np.max(np.abs(sol.u)) == 0.0
        lam, c = 4.0, np.array([0.3, -0.2])
        f = lambda t, x: np.broadcast_to(c, x.shape).copy()
        sol = solve_backward(ZERO, f, lam, grid, spec2)
        nodes = grid.nodes()
        inner = np.abs(nodes) <= 0.75
        k0 = 0  # t = 0
        exact = c * (1.0 - np.exp(-lam)) / lam
        got = sol.u[k0][np.ix_(inner, inner)]
        assert np.max(np.abs(got - exact)) < 5e-3


class TestGradientSup:
    def test_constant_source_interior_flat(self):
        grid = GridSpec(half_width=4.0, h=1 / 64, dt=1e-3, store_stride=100)
        sol = solve_backward(ZERO, lambda t, x: np.full_like(x, 0.25), 4.0,
                             grid, SPEC)
        inner = np.abs(grid.nodes()) <= 1.0
        assert np.max(np.abs(sol.grad_u[:, inner])) < 5e-5

    def test_manufactured_analytic_value(self):
        lam = 2.0
        u_star, f = manufactured_case(SPEC, lam)
        grid = GridSpec(half_width=4.0, h=1 / 64, dt=1 / 512, store_stride=64)
        sol = solve_backward(ZERO, f, lam, grid, SPEC, f_time_dependent=True)
        pts = grid.nodes()[:, None]
        delta = 1e-6
        du = (u_star(0.0, pts + delta) - u_star(0.0, pts - delta)) / (2 * delta)
        assert gradient_sup(sol) == pytest.approx(np.max(np.abs(du)), rel=2e-3)


class TestSelectLambda:
    def test_zero_drift(self):
        seq = MollifiedSequence(make_drift("zero", SPEC), [3])
        grid = GridSpec(half_width=2.0, h=1 / 32, dt=5e-3, store_stride=20)
        sel = select_lambda(seq, [3], grid, SPEC)
        assert sel.lam == 1.0

    def test_constant_drift(self):
        seq = MollifiedSequence(make_drift("constant", SPEC, value=[0.25]), [3])
        grid = GridSpec(half_width=4.0, h=1 / 64, dt=1e-3, store_stride=100)
        sel = select_lambda(seq, [3], grid, SPEC)
        assert sel.lam == 1.0

    def test_power_trace_monotone(self):
        seq = MollifiedSequence(make_drift("power", SPEC, alpha=0.3, radius=1.0),
                                [4])
        grid = GridSpec(half_width=4.0, h=1 / 128, dt=5e-4, store_stride=50)
        sel = select_lambda(seq, [4], grid, SPEC)
        sups = [g for (_, _, g) in sel.trace]
        assert all(a >= b for a, b in zip(sups, sups[1:]))
        assert sups[-1] <= 0.5
        assert gradient_sup(sel.solutions[4]) <= 0.5


class TestPersistence:
    def test_roundtrip_bit_exact(self, tmp_path):
        grid = GridSpec(half_width=2.0, h=1 / 16, dt=1e-2, store_stride=20)
        b = make_drift("bump", SPEC, amplitude=0.5, radius=1.0)
        sol = solve_backward(b, b, 2.0, grid, SPEC, level=3)
        sol.save(tmp_path / "sol")
        back = ParabolicSolution.load(tmp_path / "sol")
        for name in ("u", "grad_u", "hess_u", "dt_u"):
            assert np.array_equal(getattr(sol, name), getattr(back, name))
        assert np.array_equal(sol.times, back.times)
        assert back.lam == sol.lam and back.level == 3


class TestSobolevReport:
    def test_zero_source_sentinel(self):
        grid = GridSpec(half_width=2.0, h=1 / 16, dt=1e-2, store_stride=10)
        sol = solve_backward(ZERO, ZERO, 1.0, grid, SPEC)
        rep = sobolev_surrogate_report(sol, ZERO)
        assert rep["zero_source"] and np.isnan(rep["ratio"])

    def test_constant_source_ratio(self):
        lam, c = 4.0, 0.5
        grid = GridSpec(half_width=4.0, h=1 / 32, dt=1e-3, store_stride=50)
        f = lambda t, x: np.full_like(x, c)
        sol = solve_backward(ZERO, f, lam, grid, SPEC)
        rep = sobolev_surrogate_report(sol, f)
        assert np.isfinite(rep["ratio"]) and rep["ratio"] > 0
