"""Radon-Nikodym densities along simulated trajectories.

log rho_bar accumulates the Ito integral of div sigma plus the Lebesgue
integral of div b - (1/2) <grad sigma, (grad sigma)*> with strictly
left-endpoint evaluation; rho and K are assembled from rho_bar by the
inverse-flow relation and the conjugation identity.  Everything is kept in
log space until the moment a value is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import logsumexp

from .errors import (ConfigError, DriverMismatchError, ExtrapolationError,
                     NonFiniteIntegrandError)
from .flow import BrownianDriver, FlowEnsemble, fd_jacobian, inverse_flow_1d
from .zvonkin import ZvonkinMap

__all__ = [
    "rho_bar_from_accums", "rho_bar_along_path", "rho_from_rho_bar",
    "k_along_trajectory", "DensityRecordSet", "build_density_records",
    "positivity_scan", "integral_convergence", "MOMENT_ORDERS",
]

MOMENT_ORDERS = (-2.0, -1.0, 1.0, 2.0, 4.0)


def rho_bar_from_accums(ens: FlowEnsemble) -> np.ndarray:
    """log rho_bar at every report node from the online accumulators."""
    for key in ("ito", "div_b", "grad_sq"):
        if key not in ens.accums:
            raise DriverMismatchError(
                "ensemble lacks density accumulators; simulate a Y-flow")
    out = ens.accums["ito"] + ens.accums["div_b"] - 0.5 * ens.accums["grad_sq"]
    if not np.all(np.isfinite(out[ens.alive()])):
        bad = np.argwhere(~np.isfinite(out) & ens.alive()[:, :, None])[0]
        raise NonFiniteIntegrandError(
            f"non-finite density accumulator at (path, point, report)={tuple(bad)}")
    return out


def rho_bar_along_path(coeffs, ens: FlowEnsemble, driver: BrownianDriver) -> np.ndarray:
    """Recompute log rho_bar by walking a full-resolution trajectory with the
    driver's own increments (left-endpoint rule).  The driver must be the one
    that produced the ensemble."""
    if driver.fingerprint() != ens.driver_fp:
        raise DriverMismatchError(
            f"driver {driver.fingerprint()} did not produce this ensemble "
            f"(expected {ens.driver_fp})")
    if not ens.full_resolution():
        raise ConfigError("rho_bar_along_path needs a full-resolution ensemble")
    M, P, R, d = ens.traj.shape
    log_rho = np.zeros((M, P, R))
    for c0 in range(0, M, 256):
        c1 = min(c0 + 256, M)
        inc = driver.path_increments(c0, c1, ens.stride)
        acc = np.zeros((c1 - c0, P))
        warm = None
        for r in range(R - 1):
            t = float(ens.times[r])
            y = ens.traj[c0:c1, :, r, :]
            vals = coeffs.at_points(t, y, warm=warm)
            warm = vals.x
            dw = inc[:, r, :][:, None, :]
            cens = ens.censored_step[c0:c1]
            live = (cens < 0) | (cens > r)
            step = (np.sum(vals.div_sigma * dw, axis=-1)
                    + (vals.div_b - 0.5 * vals.grad_sigma_sq) * ens.dt)
            if not np.all(np.isfinite(step[live])):
                bad = np.argwhere(~np.isfinite(step) & live)[0]
                raise NonFiniteIntegrandError(
                    f"integrand blew up at path {c0 + bad[0]}, point {bad[1]}, "
                    f"step {r}")
            acc += np.where(live, step, 0.0)
            log_rho[c0:c1, :, r + 1] = acc
    return log_rho


def rho_from_rho_bar(y_ens: FlowEnsemble, t: float, x,
                     log_rho_bar: np.ndarray | None = None,
                     strict: bool = False) -> np.ndarray:
    """Push-forward density rho_t(x) = [rho_bar_t(Y_t^{-1}(x))]^{-1} per path,
    d=1.  rho_bar is interpolated monotone-cubically along the initial grid."""
    if y_ens.d != 1:
        raise ConfigError("rho_from_rho_bar is implemented for d=1")
    if log_rho_bar is None:
        log_rho_bar = rho_bar_from_accums(y_ens)
    r = y_ens.report_index(t)
    inv = inverse_flow_1d(y_ens, t)
    xg = y_ens.initials[:, 0]
    x = float(x)
    out = np.full(y_ens.n_paths, np.nan)
    for p in range(y_ens.n_paths):
        if not inv.path_ok[p]:
            continue
        lo, hi = inv.image_interval(p)
        if not (lo <= x <= hi):
            if strict:
                raise ExtrapolationError(
                    f"x={x} outside image [{lo:.6g},{hi:.6g}] of path {p}")
            continue
        xstar = float(inv.eval(p, x)[0])
        log_interp = PchipInterpolator(xg, log_rho_bar[p, :, r])
        out[p] = float(np.exp(-log_interp(xstar)))
    return out


def k_along_trajectory(log_rho_bar: np.ndarray, zmap: ZvonkinMap,
                       x_ens: FlowEnsemble, t: float,
                       x_initials: np.ndarray | None = None) -> np.ndarray:
    """log K_t at the image points X_t(x0), via the conjugation identity
    Y_t^{-1}(phi_t(X_t(x0))) = phi_0(x0): no numerical flow inversion.

    log_rho_bar rows must correspond to the Y-flow started at phi_0(x0)
    under the same driver.
    """
    r = x_ens.report_index(t)
    x0 = x_ens.initials if x_initials is None else x_initials
    d = x_ens.d
    eye = np.eye(d)
    g_t = eye + zmap.sol.eval_grad(float(t), x_ens.traj[:, :, r, :], check=False)
    g_0 = eye + zmap.sol.eval_grad(0.0, x0, check=False)
    if d == 1:
        logdet_t = np.log(np.abs(g_t[..., 0, 0]))
        logdet_0 = np.log(np.abs(g_0[..., 0, 0]))
    else:
        logdet_t = np.log(np.abs(np.linalg.det(g_t)))
        logdet_0 = np.log(np.abs(np.linalg.det(g_0)))
    return -log_rho_bar[:, :, r] + logdet_t - logdet_0[None, :]


@dataclass
class DensityRecordSet:
    """Per (path, initial point, report time) density values with the
    finite-difference Jacobian oracle of the X-flow."""

    times: np.ndarray               # (R,)
    x_initials: np.ndarray          # (P, d)
    log_rho_bar: np.ndarray         # (M, P, R)  Y-flow Jacobian density
    log_k: np.ndarray               # (M, P, R)  X push-forward density at image pts
    oracle_det: np.ndarray          # (M, P, R)  FD det grad X, NaN at boundary pts
    rel_gap: np.ndarray             # (M, P, R)  |K * det - 1|
    alive: np.ndarray               # (M, P)
    level: int | None
    lam: float | None
    driver_fp: tuple
    y_alive: np.ndarray | None = None
    y_oracle_det: np.ndarray | None = None   # FD det grad Y at y-grid
    y_rel_gap: np.ndarray | None = None      # |rho_bar / det grad Y - 1|
    meta: dict = dc_field(default_factory=dict)

    @property
    def rho_bar(self) -> np.ndarray:
        return np.exp(self.log_rho_bar)

    @property
    def k(self) -> np.ndarray:
        return np.exp(self.log_k)

    @property
    def n_nonpositive(self) -> int:
        fin_rho = np.isfinite(self.log_rho_bar[self.alive]).all()
        fin_k = np.isfinite(self.log_k[self.alive]).all()
        return 0 if (fin_rho and fin_k) else int(
            np.sum(~np.isfinite(self.log_rho_bar[self.alive]))
            + np.sum(~np.isfinite(self.log_k[self.alive])))


def build_density_records(y_ens: FlowEnsemble, x_ens: FlowEnsemble,
                          zmap: ZvonkinMap, atol_conjugation: float = 1e-9
                          ) -> DensityRecordSet:
    """Assemble rho_bar, K, and the FD oracle from a conjugate ensemble pair.

    The Y-flow must have been started at phi_0 of the X-flow's initial grid
    under the same driver and level.
    """
    if y_ens.driver_fp != x_ens.driver_fp:
        raise DriverMismatchError("X and Y ensembles come from different drivers")
    if not np.array_equal(y_ens.report_steps, x_ens.report_steps):
        raise ConfigError("X and Y ensembles report at different steps")
    y0_expect = zmap.phi(0.0, x_ens.initials)
    if np.max(np.abs(y0_expect - y_ens.initials)) > atol_conjugation:
        raise ConfigError(
            "Y-flow initials are not phi_0 of the X-flow initials")
    log_rho = rho_bar_from_accums(y_ens)
    M, P, R = log_rho.shape
    log_k = np.empty((M, P, R))
    for r, t in enumerate(y_ens.times):
        log_k[:, :, r] = k_along_trajectory(log_rho, zmap, x_ens, float(t))
    alive = x_ens.alive() & y_ens.alive()

    oracle = np.full((M, P, R), np.nan)
    rel_gap = np.full((M, P, R), np.nan)
    y_oracle = np.full((M, P, R), np.nan)
    y_gap = np.full((M, P, R), np.nan)
    y_meta_ok = y_ens.d == 1 or (y_ens.grid_meta or {}).get("uniform", False)
    for r, t in enumerate(x_ens.times):
        fd = fd_jacobian(x_ens, float(t))
        dets = np.where(fd.valid, fd.dets, np.nan)
        if x_ens.d == 1:
            oracle[:, 1:-1, r] = dets
        else:
            oracle[:, fd.interior, r] = dets.reshape(M, -1)
        if not y_meta_ok:
            continue          # warped d=2 initial grid: no y-side FD oracle
        fdy = fd_jacobian(y_ens, float(t))
        dyv = np.where(fdy.valid, fdy.dets, np.nan)
        if y_ens.d == 1:
            y_oracle[:, 1:-1, r] = dyv
        else:
            y_oracle[:, fdy.interior, r] = dyv.reshape(M, -1)
    with np.errstate(invalid="ignore"):
        rel_gap = np.abs(np.exp(log_k) * oracle - 1.0)
        y_gap = np.abs(np.exp(log_rho) / y_oracle - 1.0)
    return DensityRecordSet(
        times=y_ens.times.copy(), x_initials=x_ens.initials.copy(),
        log_rho_bar=log_rho, log_k=log_k, oracle_det=oracle, rel_gap=rel_gap,
        alive=alive, level=y_ens.level, lam=y_ens.lam, driver_fp=y_ens.driver_fp,
        y_alive=y_ens.alive(), y_oracle_det=y_oracle, y_rel_gap=y_gap,
        meta={"dt": y_ens.dt, "stride": y_ens.stride})


def _moment_table(log_vals: np.ndarray, alive: np.ndarray,
                  orders=MOMENT_ORDERS) -> np.ndarray:
    """log E[v^k] per (point, report, k) with censored paths excluded."""
    M, P, R = log_vals.shape
    out = np.empty((P, R, len(orders)))
    masked = np.where(alive[:, :, None], log_vals, np.nan)
    counts = np.maximum(np.sum(alive, axis=0), 1)          # (P,)
    ok = np.isfinite(masked)
    flat = np.where(ok, masked, 0.0)
    with np.errstate(divide="ignore"):
        for i, k in enumerate(orders):
            out[:, :, i] = logsumexp(k * flat, axis=0, b=ok.astype(float)) \
                - np.log(counts)[:, None]
    return out


def positivity_scan(records: DensityRecordSet, n_bootstrap: int = 200,
                    bootstrap_seed: int = 1307) -> dict:
    """Positivity census plus moment estimates E[rho_bar^k], k in MOMENT_ORDERS,
    per (t, x) with their sup; negative orders carry bootstrap intervals."""
    alive = records.alive
    lr = records.log_rho_bar[alive]
    lk = records.log_k[alive]
    qs = [0.0, 0.01, 0.25, 0.5, 0.75, 0.99, 1.0]
    scan = {
        "n_alive": int(np.sum(alive)),
        "n_nonpositive": records.n_nonpositive,
        "rho_bar": {f"q{int(100 * q):03d}": float(np.quantile(np.exp(lr), q)) for q in qs},
        "k_density": {f"q{int(100 * q):03d}": float(np.quantile(np.exp(lk), q)) for q in qs},
        "strictly_positive": bool(records.n_nonpositive == 0),
    }
    table = _moment_table(records.log_rho_bar, alive)
    sup_log = np.max(table, axis=(0, 1))                   # (n_orders,)
    moments = {}
    M = records.log_rho_bar.shape[0]
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=bootstrap_seed)))
    for i, k in enumerate(MOMENT_ORDERS):
        entry = {"k": k, "sup_log": float(sup_log[i]),
                 "sup": float(np.exp(min(sup_log[i], 700.0)))}
        if k < 0:
            boots = np.empty(n_bootstrap)
            for j in range(n_bootstrap):
                idx = rng.integers(0, M, size=M)
                tb = _moment_table(records.log_rho_bar[idx], alive[idx], (k,))
                boots[j] = float(np.max(tb))
            entry["ci_log"] = [float(np.quantile(boots, 0.025)),
                               float(np.quantile(boots, 0.975))]
        moments[f"k={k:g}"] = entry
    scan["moments_log"] = moments
    return scan


def integral_convergence(ens_a: FlowEnsemble, ens_b: FlowEnsemble,
                         radius: float | None = None) -> dict:
    """Gap statistics between the three density integrals of two levels run
    under the same driver: grid average over initial points in B_R and Monte
    Carlo over paths of sup_t |I_a(t) - I_b(t)|."""
    if ens_a.driver_fp != ens_b.driver_fp:
        raise DriverMismatchError("level pair must share one driver")
    if not np.array_equal(ens_a.report_steps, ens_b.report_steps):
        raise ConfigError("level pair must share report steps")
    if radius is None:
        sel = np.ones(ens_a.n_points, dtype=bool)
    else:
        sel = np.linalg.norm(ens_a.initials, axis=-1) <= radius
        if not np.any(sel):
            raise ConfigError(f"no initial points inside B_{radius}")
    alive = ens_a.alive() & ens_b.alive()
    out = {"levels": (ens_a.level, ens_b.level), "n_points": int(np.sum(sel))}
    for name in ("ito", "div_b", "grad_sq"):
        gap = np.abs(ens_a.accums[name][:, sel, :] - ens_b.accums[name][:, sel, :])
        sup_t = np.max(gap, axis=-1)
        sup_t = np.where(alive[:, sel], sup_t, np.nan)
        out[name] = float(np.nanmean(sup_t))
    return out
