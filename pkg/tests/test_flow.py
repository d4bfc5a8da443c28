import numpy as np
import pytest

from quasiflow.drift import ProblemSpec, make_drift
from quasiflow.errors import ConfigError, DriverMismatchError, ExtrapolationError
from quasiflow.flow import (BrownianDriver, conjugate_flow, exp_moment,
                            fd_jacobian, inverse_flow_1d, simulate_x_flow,
                            simulate_y_flow, uniform_grid_1d)
from quasiflow.zvonkin import CallableCoefficients, ZvonkinMap

from conftest import synthetic_solution

SPEC = ProblemSpec(1, 1.0, 3, 8)
ZERO = lambda t, x: np.zeros_like(x)
IDENTITY_COEFFS = CallableCoefficients(
    1, sigma=lambda t, y: np.ones(y.shape[:-1] + (1, 1)),
    b=lambda t, y: np.zeros_like(y))


def driver(paths=32, dt=1e-3, steps=1000, seed=42, d=1):
    return BrownianDriver(master_seed=seed, n_paths=paths, dt=dt,
                          n_steps=steps, d=d)


def brownian_path(drv, lo, hi):
    return np.cumsum(drv.path_increments(lo, hi)[:, :, 0], axis=1)


class TestDriver:
    def test_regeneration_bit_identical(self):
        drv = driver()
        assert np.array_equal(drv.path_increments(0, 8), drv.path_increments(0, 8))

    def test_chunking_consistent(self):
        drv = driver()
        whole = drv.path_increments(0, 8)
        assert np.array_equal(whole[5:], drv.path_increments(5, 8))

    def test_stride_aggregates_same_path(self):
        drv = driver()
        fine = drv.path_increments(0, 4)
        coarse = drv.path_increments(0, 4, stride=4)
        assert np.allclose(fine.reshape(4, 250, 4, 1).sum(axis=2), coarse)

    def test_stride_must_divide(self):
        with pytest.raises(ConfigError):
            driver().check_stride(3)

    def test_gaussian_moments(self):
        drv = driver(paths=512, steps=200)
        inc = drv.path_increments(0, 512)
        z = inc / np.sqrt(drv.dt)
        assert abs(np.mean(z)) < 0.02
        assert abs(np.std(z) - 1.0) < 0.01


class TestExactness:
    def test_zero_drift(self):
        drv = driver()
        grid = uniform_grid_1d(0.5, 1e-3, 5)
        ens = simulate_x_flow(ZERO, grid, drv, report_every=100)
        W = brownian_path(drv, 0, drv.n_paths)
        for r, s in enumerate(ens.report_steps):
            if s == 0:
                continue
            expect = grid[None, :, 0] + W[:, s - 1][:, None]
            assert np.max(np.abs(ens.traj[:, :, r, 0] - expect)) < 1e-12

    def test_constant_drift(self):
        c = 0.25
        drv = driver()
        grid = uniform_grid_1d(0.0, 1e-3, 5)
        ens = simulate_x_flow(lambda t, x: np.full_like(x, c), grid, drv,
                              report_every=250)
        W = brownian_path(drv, 0, drv.n_paths)
        r = ens.report_index(1.0)
        expect = grid[None, :, 0] + c * 1.0 + W[:, -1][:, None]
        assert np.max(np.abs(ens.traj[:, :, r, 0] - expect)) < 1e-12

    def test_y_identity_coefficients(self):
        drv = driver()
        grid = uniform_grid_1d(0.5, 1e-3, 3)
        ens = simulate_y_flow(IDENTITY_COEFFS, grid, drv, report_every=500)
        W = brownian_path(drv, 0, drv.n_paths)
        r = ens.report_index(1.0)
        expect = grid[None, :, 0] + W[:, -1][:, None]
        assert np.max(np.abs(ens.traj[:, :, r, 0] - expect)) < 1e-12
        for name in ("ito", "div_b", "grad_sq"):
            assert np.max(np.abs(ens.accums[name])) == 0.0

    def test_zero_drift_2d(self):
        drv = driver(d=2, steps=200, dt=5e-3)
        grid = np.array([[0.0, 0.0], [0.1, -0.1]])
        ens = simulate_x_flow(ZERO, grid, drv, report_every=50)
        inc = drv.path_increments(0, drv.n_paths)
        W = np.cumsum(inc, axis=1)
        r = ens.report_index(1.0)
        expect = grid[None] + W[:, -1][:, None, :]
        assert np.max(np.abs(ens.traj[:, :, r, :] - expect)) < 1e-12


class TestFDJacobian:
    def test_zero_and_constant_are_one(self):
        drv = driver(paths=16)
        grid = uniform_grid_1d(0.0, 1e-3, 5)
        for b in (ZERO, lambda t, x: np.full_like(x, 0.7)):
            ens = simulate_x_flow(b, grid, drv, report_every=500)
            fd = fd_jacobian(ens, 1.0)
            assert np.max(np.abs(fd.dets[fd.valid] - 1.0)) < 1e-9
            assert fd.n_nonpositive == 0

    def test_truncated_linear_matches_exponential(self):
        drv = driver(paths=64)
        lin = make_drift("linear", SPEC, rate=1.0, r_flat=2.5, r_zero=3.25)
        grid = uniform_grid_1d(0.0, 1e-3, 5)
        ens = simulate_x_flow(lambda t, x: lin(t, x), grid, drv, report_every=250)
        fd = fd_jacobian(ens, 1.0)
        med = np.median(fd.dets[fd.valid])
        assert abs(med - np.exp(-1.0)) / np.exp(-1.0) < 0.02

    def test_d2_product_grid(self):
        drv = driver(paths=8, d=2, steps=100, dt=1e-2)
        axis = np.linspace(-0.01, 0.01, 5)
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        grid = np.stack([X, Y], axis=-1).reshape(-1, 2)
        meta = {"shape": [5, 5], "spacing": axis[1] - axis[0], "uniform": True}
        ens = simulate_x_flow(ZERO, grid, drv, report_every=50, grid_meta=meta)
        fd = fd_jacobian(ens, 1.0)
        assert np.max(np.abs(fd.dets[fd.valid] - 1.0)) < 1e-9


class TestStrongOrder:
    def test_em_order_against_linear_oracle(self):
        # oracle: exact OU solution with the stochastic integral accumulated
        # on the fine grid; EM runs at stride 8 and 4 share the same path
        drv = driver(paths=256, dt=1.25e-4, steps=8000, seed=11)
        lin = make_drift("linear", SPEC, rate=1.0, r_flat=2.5, r_zero=3.25)
        grid = uniform_grid_1d(0.4, 1e-3, 3)
        T = drv.horizon
        inc = drv.path_increments(0, drv.n_paths)[:, :, 0]
        s = (np.arange(drv.n_steps) + 1) * drv.dt
        oracle = (grid[None, :, 0] * np.exp(-T)
                  + np.sum(np.exp(-(T - s))[None, :] * inc, axis=1)[:, None])
        errs = []
        for stride in (8, 4):
            ens = simulate_x_flow(lambda t, x: lin(t, x), grid, drv,
                                  stride=stride, report_every=drv.n_steps // stride)
            r = ens.report_index(T)
            errs.append(np.mean(np.abs(ens.traj[:, :, r, 0] - oracle)))
        order = np.log2(errs[0] / errs[1])
        assert order > 0.9


class TestMonotonicityAndInverse:
    def test_census_zero_drift(self):
        drv = driver(paths=32)
        ens = simulate_x_flow(ZERO, uniform_grid_1d(0.0, 1e-3, 9), drv,
                              report_every=100)
        census = ens.monotonicity_census()
        assert census["fraction_nonmonotone"] == 0.0

    def test_inverse_node_roundtrip(self):
        drv = driver(paths=16)
        grid = uniform_grid_1d(0.0, 0.05, 9)
        ens = simulate_x_flow(lambda t, x: np.full_like(x, 0.3), grid, drv,
                              report_every=250)
        inv = inverse_flow_1d(ens, 1.0)
        r = ens.report_index(1.0)
        for p in range(4):
            ys = ens.traj[p, :, r, 0]
            back = inv.eval(p, ys)
            assert np.max(np.abs(back - grid[:, 0])) < 1e-9

    def test_inverse_nodes_of_zero_drift(self):
        drv = driver(paths=8)
        grid = uniform_grid_1d(0.0, 0.05, 5)
        ens = simulate_x_flow(ZERO, grid, drv, report_every=500)
        inv = inverse_flow_1d(ens, 1.0)
        W = brownian_path(drv, 0, 8)[:, -1]
        for p in range(8):
            got = inv.eval(p, np.array([W[p]]))[0]  # y = 0 + W maps back to 0
            assert got == pytest.approx(0.0, abs=1e-12)

    def test_extrapolation_error(self):
        drv = driver(paths=4)
        ens = simulate_x_flow(ZERO, uniform_grid_1d(0.0, 0.05, 5), drv,
                              report_every=500)
        inv = inverse_flow_1d(ens, 1.0)
        lo, hi = inv.image_interval(0)
        with pytest.raises(ExtrapolationError):
            inv.eval(0, np.array([hi + 1.0]))


class TestConjugation:
    def test_identity_map_is_identity(self):
        zm = ZvonkinMap(synthetic_solution(amplitude=0.0))
        drv = driver(paths=8)
        ens = simulate_y_flow(IDENTITY_COEFFS, uniform_grid_1d(0.2, 0.01, 5),
                              drv, report_every=250)
        conj = conjugate_flow(ens, zm, "Y->X")
        assert np.max(np.abs(conj.traj - ens.traj)) < 1e-12

    def test_roundtrip(self):
        zm = ZvonkinMap(synthetic_solution(amplitude=0.3))
        drv = driver(paths=8, steps=200, dt=5e-3)
        ens = simulate_y_flow(IDENTITY_COEFFS, uniform_grid_1d(0.2, 0.01, 5),
                              drv, report_every=50)
        back = conjugate_flow(conjugate_flow(ens, zm, "Y->X"), zm, "X->Y")
        assert np.max(np.abs(back.traj - ens.traj)) <= 1e-9

    def test_constant_shift_algebra(self):
        # phi_t(x) = x + s(t): conjugation subtracts the shift pathwise
        spec = ProblemSpec(1, 1.0, 3, 8)
        import warnings

        from quasiflow.pde import GridSpec, solve_backward
        lam, c = 4.0, 0.25
        grid = GridSpec(half_width=4.0, h=1 / 64, dt=1e-3, store_stride=20)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = solve_backward(ZERO, lambda t, x: np.full_like(x, c), lam,
                                 grid, spec)
        zm = ZvonkinMap(sol)
        drv = driver(paths=8, steps=200, dt=5e-3)
        y0 = uniform_grid_1d(0.2, 0.01, 3)
        ens = simulate_y_flow(IDENTITY_COEFFS, y0, drv, report_every=50)
        conj = conjugate_flow(ens, zm, "Y->X")
        for r, t in enumerate(ens.times):
            shift = c * (1.0 - np.exp(-lam * (1.0 - t))) / lam
            expect = ens.traj[:, :, r, 0] - shift
            assert np.max(np.abs(conj.traj[:, :, r, 0] - expect)) < 5e-5


class TestCensoring:
    def test_exit_recorded_and_frozen(self):
        drv = driver(paths=64, steps=500, dt=2e-3)
        box = (np.array([-0.5]), np.array([0.5]))
        ens = simulate_x_flow(ZERO, uniform_grid_1d(0.0, 0.01, 3), drv,
                              report_every=100, box=box)
        assert ens.censored_fraction > 0.5
        dead = ~ens.alive()
        assert np.all(ens.censored_step[dead] > 0)
        final = ens.traj[:, :, -1, :]
        assert np.all(final >= -0.5 - 1e-12) and np.all(final <= 0.5 + 1e-12)


class TestExpMoment:
    def test_trivial_and_constant(self):
        drv = driver(paths=32)
        fields = {"zero": ZERO, "one": lambda t, x: np.ones_like(x)}
        ens = simulate_x_flow(ZERO, uniform_grid_1d(0.0, 1e-3, 3), drv,
                              report_every=250, l2_fields=fields)
        assert exp_moment(ens, "zero", 1.0).sup == pytest.approx(1.0, abs=1e-12)
        assert exp_moment(ens, "one", 1.0).sup == pytest.approx(np.e, rel=1e-9)

    def test_unregistered_field_error(self):
        drv = driver(paths=4)
        ens = simulate_x_flow(ZERO, uniform_grid_1d(0.0, 1e-3, 3), drv,
                              report_every=250)
        with pytest.raises(DriverMismatchError):
            exp_moment(ens, "missing", 1.0)

    def test_callable_on_full_resolution(self):
        drv = driver(paths=8, steps=50, dt=0.02)
        ens = simulate_x_flow(ZERO, uniform_grid_1d(0.0, 1e-3, 3), drv,
                              report_every=1)
        est = exp_moment(ens, lambda t, x: np.ones_like(x), 1.0, name="one")
        assert est.sup == pytest.approx(np.e, rel=1e-9)


class TestDeterminism:
    def test_workers_do_not_change_results(self):
        drv = driver(paths=300, steps=100, dt=1e-2)
        grid = uniform_grid_1d(0.0, 1e-3, 3)
        a = simulate_x_flow(ZERO, grid, drv, report_every=20, workers=1)
        b = simulate_x_flow(ZERO, grid, drv, report_every=20, workers=4)
        assert np.array_equal(a.traj, b.traj)
