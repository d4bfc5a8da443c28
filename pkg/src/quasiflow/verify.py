"""Verification suites: every check runs, reports its threshold, and never
aborts the suite; the CLI exit code reflects the aggregate outcome."""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .density import (DensityRecordSet, MOMENT_ORDERS, _moment_table,
                      integral_convergence, rho_bar_from_accums,
                      rho_from_rho_bar)
from .drift import MollifiedSequence, SpaceQuadrature, mollification_error
from .flow import FlowEnsemble, exp_moment, fd_jacobian
from .pde import GridSpec, ParabolicSolution, gradient_sup, manufactured_case, solve_backward

__all__ = [
    "CheckRecord", "VerificationReport", "jacobian_moment_suite",
    "density_moment_suite", "flow_convergence_suite", "headline_suite",
    "mollification_suite", "pde_order_study", "change_of_variables_check",
]


@dataclass
class CheckRecord:
    name: str
    observed: float
    threshold: float
    relation: str           # "<=", "<", ">", ">=", "==", "finite", "decreasing"
    passed: bool
    details: dict = dc_field(default_factory=dict)

    def as_dict(self):
        return {"name": self.name, "observed": self.observed,
                "threshold": self.threshold, "relation": self.relation,
                "passed": bool(self.passed), "details": self.details}


@dataclass
class VerificationReport:
    suite: str
    checks: list
    manifest: dict = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self):
        return {"suite": self.suite, "passed": self.passed,
                "manifest": self.manifest,
                "checks": [c.as_dict() for c in self.checks]}

    def text_table(self) -> str:
        rows = [f"suite: {self.suite}  ->  {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            mark = "ok " if c.passed else "FAIL"
            rows.append(f"  [{mark}] {c.name}: observed {c.observed:.6g} "
                        f"{c.relation} {c.threshold:.6g}")
        return "\n".join(rows)


def _check(checks, name, observed, threshold, relation, details=None):
    observed = float(observed)
    ok = {
        "<=": observed <= threshold,
        "<": observed < threshold,
        ">=": observed >= threshold,
        ">": observed > threshold,
        "==": observed == threshold,
    }[relation]
    checks.append(CheckRecord(name, observed, float(threshold), relation,
                              bool(ok), details or {}))
    return ok


def _rel_drift(a: float, b: float) -> float:
    """Relative change from a to b in natural space, from log-space inputs."""
    return abs(float(np.exp(b - a)) - 1.0)


def _nearest_index(times: np.ndarray, t: float) -> int:
    k = int(np.argmin(np.abs(np.asarray(times) - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"time {t} not among report times {times}")
    return k


# ---------------------------------------------------------------------------

def jacobian_moment_suite(x_ensembles: dict[int, FlowEnsemble],
                          k_set=(1.0, 2.0, 4.0), drift_tol: float = 0.25,
                          rc_max: float = 0.5, assert_stability: bool = True,
                          manifest: dict | None = None) -> VerificationReport:
    """Moments of the inverse-flow gradient, estimated by differencing the
    inverse map across the image of the initial window (d=1: reciprocal of
    the forward FD Jacobian at matching points).

    Stencils whose curvature ratio exceeds rc_max carry no derivative
    information (the map bends more across the stencil than it moves) and
    are excluded; the excluded fraction is reported per level.
    """
    checks = []
    levels = sorted(x_ensembles)
    sup_log = {}
    excluded = {}
    for n in levels:
        ens = x_ensembles[n]
        per_k = []
        n_exc = n_tot = 0
        for k in k_set:
            best = -np.inf
            for t in ens.times[1:]:
                fd = fd_jacobian(ens, float(t))
                use = fd.resolvable(rc_max) & (fd.dets > 0)
                if k == k_set[0]:
                    n_exc += int(np.sum(fd.valid & ~use))
                    n_tot += int(np.sum(fd.valid))
                with np.errstate(divide="ignore", invalid="ignore"):
                    logj = np.where(use, -np.log(fd.dets), np.nan)
                vals = k * logj
                cnt = np.maximum(np.sum(np.isfinite(vals), axis=0), 1)
                mom = np.log(np.nansum(np.where(np.isfinite(vals),
                                                np.exp(vals), 0.0), axis=0)) \
                    - np.log(cnt)
                best = max(best, float(np.nanmax(mom)))
            per_k.append(best)
        sup_log[n] = per_k
        excluded[n] = n_exc / max(1, n_tot)
        _check(checks, f"level{n}_inverse_grad_moments_finite",
               0.0 if np.all(np.isfinite(per_k)) else 1.0, 0.5, "<=",
               {"sup_log_per_k": dict(zip(map(str, k_set), per_k)),
                "unresolved_fraction": excluded[n]})
    if len(levels) >= 2:
        a, b = levels[-2], levels[-1]
        drifts = {f"k={k:g}": _rel_drift(sup_log[a][i], sup_log[b][i])
                  for i, k in enumerate(k_set)}
        if assert_stability:
            for i, k in enumerate(k_set):
                _check(checks, f"drift_k{k:g}_levels({a},{b})",
                       drifts[f"k={k:g}"], drift_tol, "<=",
                       {"unresolved_fraction": {str(a): excluded[a],
                                                str(b): excluded[b]}})
        else:
            # the fixed-window reciprocal-Jacobian moment grows along the
            # mollification sequence for contracting singular drifts; the
            # drift is reported here but not asserted (see config)
            _check(checks, f"drift_reported_not_asserted_levels({a},{b})",
                   max(drifts.values()), float("inf"), "<=", drifts)
    return VerificationReport("jacobian_moments", checks, manifest or {})


def density_moment_suite(y_ensembles: dict[int, FlowEnsemble],
                         orders=MOMENT_ORDERS, drift_tol: float = 0.25,
                         manifest: dict | None = None) -> VerificationReport:
    """Per-level sup over (t, x) of E[rho_bar^k] with stability across the
    two largest levels."""
    checks = []
    levels = sorted(y_ensembles)
    sups = {}
    for n in levels:
        ens = y_ensembles[n]
        table = _moment_table(rho_bar_from_accums(ens), ens.alive(), orders)
        sups[n] = np.max(table, axis=(0, 1))
        _check(checks, f"level{n}_rho_moments_finite",
               0.0 if np.all(np.isfinite(sups[n])) else 1.0, 0.5, "<=",
               {"sup_log_per_k": {f"{k:g}": float(v)
                                  for k, v in zip(orders, sups[n])}})
    if len(levels) >= 2:
        a, b = levels[-2], levels[-1]
        for i, k in enumerate(orders):
            _check(checks, f"rho_moment_drift_k{k:g}_levels({a},{b})",
                   _rel_drift(float(sups[a][i]), float(sups[b][i])),
                   drift_tol, "<=")
    return VerificationReport("density_moments", checks, manifest or {})


def exp_moment_suite(y_ensembles: dict[int, FlowEnsemble], field_name: str,
                     k: float = 2.0, drift_tol: float = 0.25,
                     manifest: dict | None = None) -> VerificationReport:
    checks = []
    levels = sorted(y_ensembles)
    sups = {}
    for n in levels:
        est = exp_moment(y_ensembles[n], field_name, k)
        sups[n] = est.sup_log
        _check(checks, f"level{n}_exp_moment_finite",
               0.0 if np.isfinite(est.sup_log) else 1.0, 0.5, "<=",
               {"sup_log": est.sup_log, "ci_log": list(est.ci_log)})
    if len(levels) >= 2:
        a, b = levels[-2], levels[-1]
        _check(checks, f"exp_moment_drift_levels({a},{b})",
               _rel_drift(sups[a], sups[b]), drift_tol, "<=")
    return VerificationReport("exp_moments", checks, manifest or {})


def flow_convergence_suite(y_ensembles: dict[int, FlowEnsemble], k: float = 2.0,
                           growth_headroom: float = 2.0,
                           manifest: dict | None = None) -> VerificationReport:
    """Successive-level flow gaps (decreasing) and the moment growth bound
    E[sup_t |Y^n_t(x)|^k] <= C_k (1 + |x|^k) fitted at the smallest level."""
    checks = []
    levels = sorted(y_ensembles)
    gaps = []
    for a, b in zip(levels[:-1], levels[1:]):
        ya, yb = y_ensembles[a], y_ensembles[b]
        alive = ya.alive() & yb.alive()
        d2 = np.sum((ya.traj - yb.traj) ** 2, axis=-1) ** (k / 2.0)
        masked = np.where(alive[:, :, None], d2, np.nan)
        gap = float(np.nanmax(np.nanmean(masked, axis=0)))
        gaps.append(((a, b), gap))
    for (pair, g), (pair2, g2) in zip(gaps[:-1], gaps[1:]):
        _check(checks, f"flow_gap_decreasing_{pair}->{pair2}", g2, g, "<",
               {"gap_coarse": g, "gap_fine": g2})
    if len(gaps) == 1:
        _check(checks, f"flow_gap_finite_{gaps[0][0]}", gaps[0][1], np.inf, "<=")

    n0 = levels[0]
    e0 = y_ensembles[n0]
    xnorm = np.linalg.norm(e0.initials, axis=-1)

    def growth_constant(ens):
        sup_traj = np.max(np.linalg.norm(ens.traj, axis=-1), axis=-1) ** k
        m = np.where(ens.alive(), sup_traj, np.nan)
        e_sup = np.nanmean(m, axis=0)
        return float(np.nanmax(e_sup / (1.0 + xnorm ** k)))

    c0 = growth_constant(e0)
    for n in levels[1:]:
        _check(checks, f"growth_bound_level{n}", growth_constant(y_ensembles[n]),
               growth_headroom * c0, "<=", {"c_fit": c0})
    rep = VerificationReport("flow_convergence", checks, manifest or {})
    rep.manifest["gaps"] = [{"pair": list(p), "gap": g} for p, g in gaps]
    return rep


def mollification_suite(seq: MollifiedSequence, quad: SpaceQuadrature,
                        manifest: dict | None = None) -> VerificationReport:
    checks = []
    errors = [(n, mollification_error(seq, n, quad)) for n in seq.levels]
    for (na, ea), (nb, eb) in zip(errors[:-1], errors[1:]):
        _check(checks, f"mollification_error_decreasing_{na}->{nb}", eb, ea, "<",
               {"coarse": ea, "fine": eb})
    rep = VerificationReport("mollification", checks, manifest or {})
    rep.manifest["errors"] = [{"level": n, "error_lqp": e} for n, e in errors]
    return rep


def change_of_variables_check(records: DensityRecordSet, t: float,
                              x_ens: FlowEnsemble) -> dict:
    """Per path: | int psi(X_t(x)) dx - int psi(y) K_t(y) dy | / lhs with a
    per-path bump psi supported inside the path's image region; both sides
    by trajectory quadrature over the initial window."""
    r = x_ens.report_index(t)
    d = x_ens.d
    v = x_ens.traj[:, :, r, :]
    meta = x_ens.grid_meta or {}
    h = meta.get("spacing")
    if h is None:
        h = float(np.diff(x_ens.initials[:, 0]).mean())
    cell = float(h) ** d
    K = np.exp(records.log_k[:, :, r])
    fd = fd_jacobian(x_ens, t)
    J = np.full(K.shape, np.nan)
    use = fd.resolvable() & (fd.dets > 0)
    if d == 1:
        J[:, 1:-1] = np.where(use, fd.dets, np.nan)
    else:
        J[:, fd.interior] = np.where(use, fd.dets, np.nan).reshape(K.shape[0], -1)
    alive = records.alive
    gaps = np.full(x_ens.n_paths, np.nan)
    for p in range(x_ens.n_paths):
        if not np.all(alive[p]):
            continue
        lo = v[p].min(axis=0)
        hi = v[p].max(axis=0)
        c = 0.5 * (lo + hi)
        w = 0.3 * float(np.min(hi - lo))
        if w <= 0:
            continue
        s2 = np.sum(((v[p] - c) / w) ** 2, axis=-1)
        psi = np.where(s2 < 1.0, (1.0 - np.minimum(s2, 1.0)) ** 4, 0.0)
        sel = np.isfinite(J[p])
        lhs = float(np.sum(psi[sel]) * cell)
        rhs = float(np.sum(psi[sel] * K[p, sel] * J[p, sel]) * cell)
        if lhs > 0:
            gaps[p] = abs(lhs - rhs) / lhs
    ok = np.isfinite(gaps)
    return {"t": t, "median": float(np.nanmedian(gaps)) if ok.any() else np.nan,
            "p95": float(np.nanquantile(gaps, 0.95)) if ok.any() else np.nan,
            "max": float(np.nanmax(gaps)) if ok.any() else np.nan,
            "n_paths": int(np.sum(ok))}


def headline_suite(records: DensityRecordSet, x_ens: FlowEnsemble,
                   refined: DensityRecordSet | None = None,
                   y_ensembles: dict[int, FlowEnsemble] | None = None,
                   times=(0.25, 0.5, 1.0), median_tol: float = 0.05,
                   cov_median_tol: float = 0.05, cov_p95_tol: float = 0.15,
                   manifest: dict | None = None) -> VerificationReport:
    """Positivity, the K-vs-oracle gap at the stated times with refinement
    improvement, the change-of-variables identity, and the three integral
    gaps across consecutive levels, in one pass/fail report."""
    checks = []
    _check(checks, "no_nonpositive_densities", records.n_nonpositive, 0, "==")
    base_medians = {}
    for t in times:
        r = _nearest_index(records.times, t)
        g = records.rel_gap[:, :, r]
        med = float(np.nanmedian(g))
        base_medians[t] = med
        _check(checks, f"k_oracle_median_t{t:g}", med, median_tol, "<=",
               {"p90": float(np.nanquantile(g, 0.90))})
    if refined is not None:
        for t in times:
            r = _nearest_index(refined.times, t)
            med_ref = float(np.nanmedian(refined.rel_gap[:, :, r]))
            # below the floor both medians sit in noise and improvement is
            # vacuous; above it refinement must strictly shrink the gap
            floor = 0.02 * median_tol
            _check(checks, f"k_oracle_median_improves_t{t:g}", med_ref,
                   max(base_medians[t] + 1e-12, floor), "<",
                   {"base": base_medians[t], "floor": floor})
    for t in times:
        cov = change_of_variables_check(records, t, x_ens)
        _check(checks, f"change_of_variables_median_t{t:g}", cov["median"],
               cov_median_tol, "<=", cov)
        _check(checks, f"change_of_variables_p95_t{t:g}", cov["p95"],
               cov_p95_tol, "<=")
    if y_ensembles:
        levels = sorted(y_ensembles)
        gaps = [integral_convergence(y_ensembles[a], y_ensembles[b])
                for a, b in zip(levels[:-1], levels[1:])]
        for name in ("ito", "div_b", "grad_sq"):
            series = [g[name] for g in gaps]
            for i in range(len(series) - 1):
                _check(checks,
                       f"integral_gap_{name}_decreasing_{levels[i]}..{levels[i+2]}",
                       series[i + 1], series[i], "<")
    return VerificationReport("headline", checks, manifest or {})


def reciprocity_suite(y_ens: FlowEnsemble, t: float, tol: float = 1e-9,
                      n_paths_check: int = 64,
                      manifest: dict | None = None) -> VerificationReport:
    """rho_t(Y_t(x_i)) * rho_bar_t(x_i) = 1 at interior nodes, d=1."""
    from scipy.interpolate import PchipInterpolator

    from .flow import inverse_flow_1d

    checks = []
    log_rho = rho_bar_from_accums(y_ens)
    r = y_ens.report_index(t)
    inv = inverse_flow_1d(y_ens, t)
    xg = y_ens.initials[:, 0]
    worst = 0.0
    n_paths = min(n_paths_check, y_ens.n_paths)
    n_used = 0
    for p in range(n_paths):
        if not inv.path_ok[p]:
            continue
        n_used += 1
        nodes = y_ens.traj[p, 1:-1, r, 0]
        xstar = inv.eval(p, nodes)
        log_interp = PchipInterpolator(xg, log_rho[p, :, r])
        prod = np.exp(-log_interp(xstar)) * np.exp(log_rho[p, 1:-1, r])
        worst = max(worst, float(np.max(np.abs(prod - 1.0))))
    _check(checks, f"reciprocity_t{t:g}", worst, tol, "<=",
           {"n_paths": n_used})
    return VerificationReport("reciprocity", checks, manifest or {})


def pde_order_study(spec, lam: float = 2.0, hs=(1 / 32, 1 / 64, 1 / 128),
                    dt_ratio: float = 8.0, half_width: float = 4.0) -> dict:
    """Manufactured-solution refinement study; returns rows and fitted order."""
    import warnings

    rows = []
    zero = lambda t, x: np.zeros_like(x)
    u_star, f = manufactured_case(spec, lam)
    for h in hs:
        grid = GridSpec(half_width=half_width, h=h, dt=h / dt_ratio,
                        store_stride=10 ** 9)
        t0 = time.time()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sol = solve_backward(zero, f, lam, grid, spec, f_time_dependent=True)
        pts = grid.nodes()[:, None]
        err = float(np.max(np.abs(sol.u[0] - u_star(0.0, pts))))
        rows.append({"h": h, "dt": grid.dt, "linf_error": err,
                     "seconds": time.time() - t0})
    logs_h = np.log([r["h"] for r in rows])
    logs_e = np.log([r["linf_error"] for r in rows])
    order = float(np.polyfit(logs_h, logs_e, 1)[0])
    return {"rows": rows, "order": order, "lam": lam}
