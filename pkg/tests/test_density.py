import warnings

import numpy as np
import pytest

from quasiflow.density import (MOMENT_ORDERS, build_density_records,
                               integral_convergence, k_along_trajectory,
                               positivity_scan, rho_bar_along_path,
                               rho_bar_from_accums, rho_from_rho_bar)
from quasiflow.drift import ProblemSpec, make_drift, MollifiedSequence
from quasiflow.errors import DriverMismatchError
from quasiflow.flow import (BrownianDriver, fd_jacobian, simulate_x_flow,
                            simulate_y_flow, uniform_grid_1d)
from quasiflow.pde import GridSpec, solve_backward
from quasiflow.zvonkin import (CallableCoefficients, ZvonkinMap,
                               transformed_coefficients)

SPEC = ProblemSpec(1, 1.0, 3, 8)
ZERO = lambda t, x: np.zeros_like(x)

pytestmark = pytest.mark.filterwarnings(
    "ignore::quasiflow.pde.BoundaryContaminationWarning")


def linear_coeffs(beta=0.5):
    return CallableCoefficients(
        1, sigma=lambda t, y: np.ones(y.shape[:-1] + (1, 1)),
        b=lambda t, y: -beta * y,
        div_b=lambda t, y: np.full(y.shape[:-1], -beta))


def driver(paths=32, dt=1e-3, steps=1000, seed=11):
    return BrownianDriver(master_seed=seed, n_paths=paths, dt=dt,
                          n_steps=steps, d=1)


class TestRhoBar:
    def test_constant_coefficients_give_one(self):
        co = CallableCoefficients(
            1, sigma=lambda t, y: np.ones(y.shape[:-1] + (1, 1)),
            b=lambda t, y: np.full_like(y, 0.3))
        ens = simulate_y_flow(co, uniform_grid_1d(0.0, 0.01, 3), driver(),
                              report_every=250)
        assert np.max(np.abs(rho_bar_from_accums(ens))) == 0.0

    def test_linear_coefficient_closed_form(self):
        beta = 0.5
        ens = simulate_y_flow(linear_coeffs(beta), uniform_grid_1d(0.0, 1e-3, 7),
                              driver(), report_every=250)
        lr = rho_bar_from_accums(ens)
        for r, t in enumerate(ens.times):
            assert np.max(np.abs(lr[:, :, r] + beta * t)) < 1e-12

    def test_matches_fd_jacobian(self):
        beta = 0.5
        ens = simulate_y_flow(linear_coeffs(beta), uniform_grid_1d(0.0, 1e-3, 7),
                              driver(), report_every=250)
        lr = rho_bar_from_accums(ens)
        fd = fd_jacobian(ens, 1.0)
        gap = np.abs(np.exp(lr[:, 1:-1, -1]) / fd.dets - 1.0)
        assert np.median(gap[fd.valid]) < 0.02

    def test_initial_normalization(self):
        ens = simulate_y_flow(linear_coeffs(), uniform_grid_1d(0.0, 1e-3, 5),
                              driver(), report_every=250)
        lr = rho_bar_from_accums(ens)
        assert np.max(np.abs(lr[:, :, 0])) == 0.0

    def test_replay_equals_accumulators(self):
        drv = driver(paths=16, steps=200, dt=5e-3)
        co = linear_coeffs()
        ens = simulate_y_flow(co, uniform_grid_1d(0.0, 1e-3, 5), drv,
                              report_every=1)
        lr_acc = rho_bar_from_accums(ens)
        lr_replay = rho_bar_along_path(co, ens, drv)
        assert np.max(np.abs(lr_acc - lr_replay)) == 0.0

    def test_driver_mismatch_rejected(self):
        drv = driver(paths=8, steps=100, dt=1e-2)
        other = driver(paths=8, steps=100, dt=1e-2, seed=999)
        ens = simulate_y_flow(linear_coeffs(), uniform_grid_1d(0.0, 1e-3, 3),
                              drv, report_every=1)
        with pytest.raises(DriverMismatchError):
            rho_bar_along_path(linear_coeffs(), ens, other)


class TestRhoFromRhoBar:
    def test_trivial_reciprocal(self):
        co = CallableCoefficients(
            1, sigma=lambda t, y: np.ones(y.shape[:-1] + (1, 1)),
            b=lambda t, y: np.zeros_like(y))
        ens = simulate_y_flow(co, uniform_grid_1d(0.0, 0.05, 7), driver(paths=8),
                              report_every=250)
        r = ens.report_index(1.0)
        x = float(ens.traj[0, 3, r, 0])
        rho = rho_from_rho_bar(ens, 1.0, x)
        assert rho[0] == pytest.approx(1.0, abs=1e-12)

    def test_linear_reciprocal_value(self):
        beta = 0.5
        ens = simulate_y_flow(linear_coeffs(beta), uniform_grid_1d(0.0, 0.02, 9),
                              driver(paths=8), report_every=250)
        r = ens.report_index(1.0)
        x = float(ens.traj[2, 4, r, 0])
        rho = rho_from_rho_bar(ens, 1.0, x)
        assert rho[2] == pytest.approx(np.exp(beta), rel=1e-10)

    def test_node_reciprocity(self):
        ens = simulate_y_flow(linear_coeffs(0.7), uniform_grid_1d(0.0, 0.02, 9),
                              driver(paths=8), report_every=250)
        lr = rho_bar_from_accums(ens)
        r = ens.report_index(1.0)
        worst = 0.0
        for p in range(ens.n_paths):
            for i in range(1, ens.n_points - 1):
                x = float(ens.traj[p, i, r, 0])
                rho = rho_from_rho_bar(ens, 1.0, x, log_rho_bar=lr)
                if np.isfinite(rho[p]):
                    worst = max(worst, abs(rho[p] * np.exp(lr[p, i, r]) - 1.0))
        assert worst <= 1e-9


def _pipeline_pair(drift_name, drift_params, lam=4.0, paths=24, center=0.0):
    """Small end-to-end pair of conjugate ensembles for K tests."""
    b = make_drift(drift_name, SPEC, **drift_params) if drift_params else \
        make_drift(drift_name, SPEC)
    seq = MollifiedSequence(b, [3])
    bn = seq.mollify(3)
    grid = GridSpec(half_width=4.0, h=1 / 64, dt=1e-3, store_stride=20)
    sol = solve_backward(bn.value, bn.value, lam, grid, SPEC, level=3)
    zmap = ZvonkinMap(sol)
    coeffs = transformed_coefficients(zmap)
    drv = driver(paths=paths, steps=500, dt=2e-3, seed=5)
    x0 = uniform_grid_1d(center, 1e-3, 9)
    xe = simulate_x_flow(bn.value, x0, drv, report_every=125,
                         box=(sol.box_min + 0.1, sol.box_max - 0.1))
    ye = simulate_y_flow(coeffs, zmap.phi(0.0, x0), drv, report_every=125)
    return zmap, xe, ye


class TestKDensity:
    def test_zero_drift_k_is_one(self):
        zmap, xe, ye = _pipeline_pair("zero", None)
        rec = build_density_records(ye, xe, zmap)
        assert np.max(np.abs(rec.log_k[rec.alive])) < 1e-9
        assert rec.n_nonpositive == 0
        valid = np.isfinite(rec.rel_gap)
        assert np.nanmax(rec.rel_gap[valid]) < 1e-9

    def test_constant_drift_k_is_one(self):
        zmap, xe, ye = _pipeline_pair("constant", {"value": [0.25]})
        rec = build_density_records(ye, xe, zmap)
        assert np.nanmax(np.abs(np.exp(rec.log_k[rec.alive]) - 1.0)) < 1e-4
        assert rec.n_nonpositive == 0

    def test_requires_conjugate_initials(self):
        zmap, xe, ye = _pipeline_pair("constant", {"value": [0.25]})
        from quasiflow.errors import ConfigError
        bad = simulate_y_flow(
            transformed_coefficients(zmap), xe.initials,
            BrownianDriver(master_seed=5, n_paths=xe.n_paths, dt=2e-3,
                           n_steps=500, d=1),
            report_every=125)
        with pytest.raises(ConfigError):
            build_density_records(bad, xe, zmap)


class TestScansAndGaps:
    def test_positivity_scan_all_ones(self):
        co = CallableCoefficients(
            1, sigma=lambda t, y: np.ones(y.shape[:-1] + (1, 1)),
            b=lambda t, y: np.zeros_like(y))
        zmap, xe, ye = _pipeline_pair("zero", None)
        rec = build_density_records(ye, xe, zmap)
        scan = positivity_scan(rec, n_bootstrap=10)
        assert scan["strictly_positive"]
        assert scan["rho_bar"]["q000"] == pytest.approx(1.0, abs=1e-9)
        for entry in scan["moments_log"].values():
            assert abs(entry["sup_log"]) < 1e-8

    def test_linear_moments_closed_form(self):
        beta = 0.4
        ens = simulate_y_flow(linear_coeffs(beta), uniform_grid_1d(0.0, 0.01, 5),
                              driver(paths=16), report_every=500)
        lr = rho_bar_from_accums(ens)
        from quasiflow.density import _moment_table
        tab = _moment_table(lr, ens.alive())
        # deterministic rho_bar = e^{-beta t}: E[rho^k] = e^{-k beta t}
        for i, k in enumerate(MOMENT_ORDERS):
            expect = max(-k * beta * 0.0, -k * beta * 1.0)  # sup over t
            assert np.max(tab[:, :, i]) == pytest.approx(expect, abs=1e-10)

    def test_integral_gaps_zero_for_identical_levels(self):
        ens = simulate_y_flow(linear_coeffs(), uniform_grid_1d(0.0, 0.01, 5),
                              driver(paths=8), report_every=250)
        out = integral_convergence(ens, ens)
        assert out["ito"] == 0.0 and out["div_b"] == 0.0 and out["grad_sq"] == 0.0

    def test_integral_gap_driver_mismatch(self):
        a = simulate_y_flow(linear_coeffs(), uniform_grid_1d(0.0, 0.01, 5),
                            driver(paths=8), report_every=250)
        b = simulate_y_flow(linear_coeffs(), uniform_grid_1d(0.0, 0.01, 5),
                            driver(paths=8, seed=99), report_every=250)
        with pytest.raises(DriverMismatchError):
            integral_convergence(a, b)
