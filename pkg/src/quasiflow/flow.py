"""SDE flow simulation with common random numbers.

Both flows march Euler-Maruyama on a shared Brownian driver: every initial
point of a path sees the same increments, so pathwise spatial differences
(finite-difference Jacobians, monotonicity, level-to-level gaps) are well
defined.  Y-flow runs accumulate the three density integrals online with the
left-endpoint rule, using exactly the increments that drive the step.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import logsumexp

from .errors import ConfigError, DriverMismatchError, ExtrapolationError
from .zvonkin import ZvonkinMap

__all__ = [
    "BrownianDriver", "FlowEnsemble", "simulate_y_flow", "simulate_x_flow",
    "conjugate_flow", "fd_jacobian", "FDJacobian", "inverse_flow_1d",
    "InverseFlow1D", "exp_moment", "ExpMomentEstimate", "uniform_grid_1d",
]

_CHUNK = 256


@dataclass(frozen=True)
class BrownianDriver:
    """Deterministic per-path increment streams from one master seed.

    Increments are generated at the base step dt; coarser runs aggregate
    stride consecutive increments, so runs at different strides share the
    same underlying Brownian path.
    """

    master_seed: int
    n_paths: int
    dt: float
    n_steps: int
    d: int

    def __post_init__(self):
        if self.n_paths < 1 or self.n_steps < 1 or self.dt <= 0:
            raise ConfigError("driver needs n_paths, n_steps >= 1 and dt > 0")

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def fingerprint(self) -> tuple:
        return (int(self.master_seed), self.n_paths, float(self.dt),
                self.n_steps, self.d)

    def check_stride(self, stride: int):
        if stride < 1 or self.n_steps % stride != 0:
            raise ConfigError(
                f"stride {stride} must divide the base step count {self.n_steps}")

    def path_increments(self, lo: int, hi: int, stride: int = 1) -> np.ndarray:
        """Increments for paths [lo, hi) aggregated to dt*stride; regeneration
        from the same seed is bit-identical for any chunking."""
        self.check_stride(stride)
        steps = self.n_steps // stride
        out = np.empty((hi - lo, steps, self.d))
        root = math.sqrt(self.dt)
        for i, p in enumerate(range(lo, hi)):
            ss = np.random.SeedSequence(entropy=self.master_seed, spawn_key=(p,))
            gen = np.random.Generator(np.random.PCG64(ss))
            inc = gen.standard_normal((self.n_steps, self.d)) * root
            if stride > 1:
                inc = inc.reshape(steps, stride, self.d).sum(axis=1)
            out[i] = inc
        return out


def uniform_grid_1d(center: float, spacing: float, n: int) -> np.ndarray:
    """Uniform initial grid of n points centered at center, as (n, 1)."""
    offs = (np.arange(n) - (n - 1) / 2.0) * spacing
    return (center + offs)[:, None]


@dataclass
class FlowEnsemble:
    """Common-noise trajectories of one flow flavor over a grid of initials."""

    flavor: str                      # "X" or "Y"
    initials: np.ndarray             # (P, d)
    times: np.ndarray                # (R,) report times
    report_steps: np.ndarray         # (R,) run-step indices
    traj: np.ndarray                 # (M, P, R, d)
    censored_step: np.ndarray        # (M, P); -1 while alive
    accums: dict                     # name -> (M, P, R)
    driver_fp: tuple
    dt: float                        # run step (driver.dt * stride)
    stride: int
    level: int | None = None
    lam: float | None = None
    grid_meta: dict | None = None    # {"shape": [...], "spacing": ..., "uniform": bool}

    @property
    def n_paths(self) -> int:
        return self.traj.shape[0]

    @property
    def n_points(self) -> int:
        return self.traj.shape[1]

    @property
    def d(self) -> int:
        return self.traj.shape[3]

    def alive(self) -> np.ndarray:
        return self.censored_step < 0

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(~self.alive()))

    def full_resolution(self) -> bool:
        return len(self.report_steps) == int(self.report_steps[-1]) + 1

    def report_index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigError(
                f"time {t} is not a report time; available: {self.times}")
        return k

    def monotonicity_census(self) -> dict:
        """d=1: fraction of adjacent initial-point pairs out of order."""
        if self.d != 1:
            raise ConfigError("monotonicity census is one-dimensional")
        v = self.traj[:, :, 1:, 0]
        both = self.alive()[:, :-1] & self.alive()[:, 1:]
        bad = (v[:, 1:, :] <= v[:, :-1, :]) & both[:, :, None]
        frac = float(np.sum(bad)) / max(1, int(np.sum(both) * v.shape[2]))
        return {"fraction_nonmonotone": frac, "n_bad": int(np.sum(bad))}


def _report_steps(steps: int, report_every: int | None,
                  report_steps=None) -> np.ndarray:
    if report_steps is not None:
        rs = sorted(set(int(s) for s in report_steps) | {0, steps})
        if rs[0] < 0 or rs[-1] > steps:
            raise ConfigError("report steps out of range")
        return np.asarray(rs)
    every = report_every or max(1, steps // 20)
    rs = sorted(set(range(0, steps + 1, every)) | {steps})
    return np.asarray(rs)


def _simulate(flavor: str, step_fields, initials: np.ndarray,
              driver: BrownianDriver, stride: int, report: np.ndarray,
              l2_fields: dict | None, box, accum_names: tuple,
              level, lam, grid_meta, workers: int) -> FlowEnsemble:
    initials = np.asarray(initials, dtype=float)
    P, d = initials.shape
    if d != driver.d:
        raise ConfigError(f"initials have d={d}, driver d={driver.d}")
    driver.check_stride(stride)
    steps = driver.n_steps // stride
    dt = driver.dt * stride
    M = driver.n_paths
    R = len(report)
    l2_fields = l2_fields or {}
    names = list(accum_names) + [f"l2:{k}" for k in l2_fields]

    traj = np.empty((M, P, R, d))
    censored = np.full((M, P), -1, dtype=np.int64)
    accums = {n: np.zeros((M, P, R)) for n in names}
    lo_box, hi_box = box
    report_pos = {int(s): i for i, s in enumerate(report)}

    def run_chunk(c0: int, c1: int):
        inc = driver.path_increments(c0, c1, stride)
        mc = c1 - c0
        y = np.broadcast_to(initials, (mc, P, d)).copy()
        alive = np.ones((mc, P), dtype=bool)
        cens = np.full((mc, P), -1, dtype=np.int64)
        acc = {n: np.zeros((mc, P)) for n in names}
        warm = None
        traj[c0:c1, :, 0] = y
        for k in range(steps):
            t = k * dt
            dw = inc[:, k, :]
            dwb = np.broadcast_to(dw[:, None, :], (mc, P, d))
            vals, dy = step_fields(t, y, warm, dwb, dt, acc, alive)
            warm = vals
            ynew = y + np.where(alive[..., None], dy, 0.0)
            out = np.any((ynew < lo_box) | (ynew > hi_box), axis=-1)
            newly = alive & out
            cens[newly] = k + 1
            y = np.where((alive & ~out)[..., None], ynew, y)
            alive &= ~out
            pos = report_pos.get(k + 1)
            if pos is not None:
                traj[c0:c1, :, pos] = y
                for n in names:
                    accums[n][c0:c1, :, pos] = acc[n]
        censored[c0:c1] = cens

    bounds = [(c, min(c + _CHUNK, M)) for c in range(0, M, _CHUNK)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(lambda b: run_chunk(*b), bounds))
    else:
        for b in bounds:
            run_chunk(*b)

    return FlowEnsemble(
        flavor=flavor, initials=initials, times=dt * report.astype(float),
        report_steps=report, traj=traj, censored_step=censored, accums=accums,
        driver_fp=driver.fingerprint(), dt=dt, stride=stride, level=level,
        lam=lam, grid_meta=grid_meta)


def _l2_increment(l2_fields, acc, t, pts, dt, alive):
    for name, f in l2_fields.items():
        v = np.asarray(f(t, pts), dtype=float)
        acc[f"l2:{name}"] += np.where(alive, np.sum(v * v, axis=-1) * dt, 0.0)


def simulate_y_flow(coeffs, initials, driver: BrownianDriver, *, stride: int = 1,
                    report_every: int | None = None, report_steps=None,
                    l2_fields: dict | None = None, box_margin: float = 0.25,
                    level: int | None = None, grid_meta: dict | None = None,
                    scheme: str = "auto", workers: int = 1) -> FlowEnsemble:
    """Maruyama step for dY = sigma(t,Y) dW + b(t,Y) dt with online
    accumulation of the density integrals (left-endpoint rule).

    scheme: "euler" (default), or "milstein" (d=1) which adds the diagonal
    correction (1/2) sigma sigma' (dW^2 - dt).  The density integrands are
    unchanged either way.
    """
    report = _report_steps(driver.n_steps // stride, report_every, report_steps)
    box = (coeffs.box_min + box_margin, coeffs.box_max - box_margin)
    l2 = l2_fields or {}
    d = np.asarray(initials).shape[-1]
    if scheme == "auto":
        scheme = "euler"
    if scheme not in ("euler", "milstein"):
        raise ConfigError(f"unknown scheme {scheme!r}")
    if scheme == "milstein" and d != 1:
        raise ConfigError("milstein correction is implemented for d=1")
    use_milstein = scheme == "milstein"

    def step(t, y, warm_vals, dwb, dt, acc, alive):
        warm = warm_vals.x if warm_vals is not None else None
        vals = coeffs.at_points(t, y, warm=warm)
        acc["ito"] += np.where(alive, np.sum(vals.div_sigma * dwb, axis=-1), 0.0)
        acc["div_b"] += np.where(alive, vals.div_b * dt, 0.0)
        acc["grad_sq"] += np.where(alive, vals.grad_sigma_sq * dt, 0.0)
        _l2_increment(l2, acc, t, y, dt, alive)
        dy = np.einsum("...ab,...b->...a", vals.sigma, dwb) + vals.b * dt
        if use_milstein:
            # d=1: div_sigma coincides with the full derivative of sigma
            corr = 0.5 * vals.sigma[..., 0, 0] * vals.div_sigma[..., 0] \
                * (dwb[..., 0] ** 2 - dt)
            dy = dy + corr[..., None]
        return vals, dy

    return _simulate("Y", step, initials, driver, stride, report, l2, box,
                     ("ito", "div_b", "grad_sq"), level,
                     getattr(coeffs, "lam", None), grid_meta, workers)


def simulate_x_flow(b_smooth, initials, driver: BrownianDriver, *, stride: int = 1,
                    report_every: int | None = None, report_steps=None,
                    l2_fields: dict | None = None, box=None,
                    level: int | None = None, grid_meta: dict | None = None,
                    workers: int = 1) -> FlowEnsemble:
    """Euler-Maruyama for dX = dW + b(t,X) dt under the same driver contract."""
    report = _report_steps(driver.n_steps // stride, report_every, report_steps)
    d = np.asarray(initials).shape[-1]
    if box is None:
        box = (np.full(d, -np.inf), np.full(d, np.inf))
    l2 = l2_fields or {}

    class _V:
        x = None

    def step(t, x, warm_vals, dwb, dt, acc, alive):
        _l2_increment(l2, acc, t, x, dt, alive)
        dy = dwb + np.asarray(b_smooth(t, x), dtype=float) * dt
        return _V(), dy

    return _simulate("X", step, initials, driver, stride, report, l2, box,
                     (), level, None, grid_meta, workers)


def conjugate_flow(ens: FlowEnsemble, zmap: ZvonkinMap, direction: str) -> FlowEnsemble:
    """Transport an ensemble through the coordinate change, pathwise per
    report time: Y->X applies x = phi_t^{-1}(y); X->Y applies y = phi_t(x).
    Inversion failures censor the affected (path, point) pairs."""
    if direction not in ("Y->X", "X->Y"):
        raise ConfigError("direction must be 'Y->X' or 'X->Y'")
    M, P, R, d = ens.traj.shape
    new_traj = np.empty_like(ens.traj)
    censored = ens.censored_step.copy()
    if direction == "Y->X":
        new_init = zmap.phi_inverse(0.0, ens.initials)
        for r, t in enumerate(ens.times):
            x, ok = zmap.phi_inverse_masked(float(t), ens.traj[:, :, r, :])
            new_traj[:, :, r, :] = x
            bad = ~ok & (censored < 0)
            censored[bad] = int(ens.report_steps[r])
    else:
        new_init = zmap.phi(0.0, ens.initials)
        for r, t in enumerate(ens.times):
            new_traj[:, :, r, :] = zmap.phi(float(t), ens.traj[:, :, r, :])
    meta = dict(ens.grid_meta or {})
    if meta:
        meta["uniform"] = False
    return FlowEnsemble(
        flavor="X" if direction == "Y->X" else "Y", initials=new_init,
        times=ens.times.copy(), report_steps=ens.report_steps.copy(),
        traj=new_traj, censored_step=censored, accums={},
        driver_fp=ens.driver_fp, dt=ens.dt, stride=ens.stride,
        level=ens.level, lam=ens.lam, grid_meta=meta or None)


@dataclass
class FDJacobian:
    """Central-difference flow Jacobian determinants at interior initials.

    curvature_ratio measures |second difference| / |central difference| per
    stencil: when it approaches 1 the map bends so sharply across the stencil
    that the central difference no longer estimates a derivative.
    """

    dets: np.ndarray            # d=1: (M, P-2); d=2: (M, n1-2, n2-2)
    valid: np.ndarray           # same shape, False where a stencil arm is censored
    interior: np.ndarray        # indices of interior initial points
    n_nonpositive: int
    curvature_ratio: np.ndarray | None = None

    @property
    def sign_flip(self) -> bool:
        return self.n_nonpositive > 0

    def resolvable(self, rc_max: float = 0.5) -> np.ndarray:
        """valid stencils whose curvature does not drown the difference signal."""
        if self.curvature_ratio is None:
            return self.valid
        return self.valid & (self.curvature_ratio < rc_max)


def fd_jacobian(ens: FlowEnsemble, t: float) -> FDJacobian:
    """det of the central-difference Jacobian across neighboring initial
    points, per path, at report time t.  Boundary points are skipped."""
    r = ens.report_index(t)
    alive = ens.alive()
    d = ens.d
    rc = None
    if d == 1:
        x = ens.initials[:, 0]
        v = ens.traj[:, :, r, 0]
        denom = x[2:] - x[:-2]
        dets = (v[:, 2:] - v[:, :-2]) / denom
        with np.errstate(divide="ignore", invalid="ignore"):
            rc = np.abs(v[:, 2:] - 2.0 * v[:, 1:-1] + v[:, :-2]) \
                / np.maximum(np.abs(v[:, 2:] - v[:, :-2]), 1e-300)
        valid = alive[:, 2:] & alive[:, :-2] & alive[:, 1:-1]
        interior = np.arange(1, ens.n_points - 1)
    elif d == 2:
        meta = ens.grid_meta or {}
        shape = tuple(meta.get("shape", ()))
        if len(shape) != 2 or not meta.get("uniform", False):
            raise ConfigError("d=2 fd_jacobian needs a uniform product initial grid")
        n1, n2 = shape
        h = meta["spacing"]
        v = ens.traj[:, :, r, :].reshape(ens.n_paths, n1, n2, 2)
        a = ens.alive().reshape(ens.n_paths, n1, n2)
        j11 = (v[:, 2:, 1:-1, 0] - v[:, :-2, 1:-1, 0]) / (2 * h)
        j21 = (v[:, 2:, 1:-1, 1] - v[:, :-2, 1:-1, 1]) / (2 * h)
        j12 = (v[:, 1:-1, 2:, 0] - v[:, 1:-1, :-2, 0]) / (2 * h)
        j22 = (v[:, 1:-1, 2:, 1] - v[:, 1:-1, :-2, 1]) / (2 * h)
        dets = j11 * j22 - j12 * j21
        with np.errstate(divide="ignore", invalid="ignore"):
            rc = np.zeros_like(dets)
            for comp in (0, 1):
                s1 = np.abs(v[:, 2:, 1:-1, comp] - 2 * v[:, 1:-1, 1:-1, comp]
                            + v[:, :-2, 1:-1, comp]) \
                    / np.maximum(np.abs(v[:, 2:, 1:-1, comp]
                                        - v[:, :-2, 1:-1, comp]), 1e-300)
                s2 = np.abs(v[:, 1:-1, 2:, comp] - 2 * v[:, 1:-1, 1:-1, comp]
                            + v[:, 1:-1, :-2, comp]) \
                    / np.maximum(np.abs(v[:, 1:-1, 2:, comp]
                                        - v[:, 1:-1, :-2, comp]), 1e-300)
                rc = np.maximum(rc, np.maximum(s1, s2))
        valid = (a[:, 1:-1, 1:-1] & a[:, 2:, 1:-1] & a[:, :-2, 1:-1]
                 & a[:, 1:-1, 2:] & a[:, 1:-1, :-2])
        interior = np.arange(ens.n_points).reshape(n1, n2)[1:-1, 1:-1].ravel()
    else:
        raise NotImplementedError("fd_jacobian supports d in {1, 2}")
    n_nonpos = int(np.sum(valid & ~(dets > 0.0)))
    return FDJacobian(dets=dets, valid=valid, interior=interior,
                      n_nonpositive=n_nonpos, curvature_ratio=rc)


class InverseFlow1D:
    """Per-path monotone inverse of the sampled flow map at one time."""

    def __init__(self, ens: FlowEnsemble, t: float):
        if ens.d != 1:
            raise ConfigError("inverse flows are built in d=1 only")
        r = ens.report_index(t)
        self.x = ens.initials[:, 0]
        self.values = ens.traj[:, :, r, 0]           # (M, P)
        self.alive = ens.alive()
        inc = np.diff(self.values, axis=1) > 0
        self.path_ok = np.all(inc | ~ (self.alive[:, 1:] & self.alive[:, :-1]), axis=1) \
            & np.all(self.alive, axis=1)
        self.t = t
        self._interps: dict[int, PchipInterpolator] = {}

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def image_interval(self, path: int) -> tuple[float, float]:
        return float(self.values[path, 0]), float(self.values[path, -1])

    def _interp(self, path: int) -> PchipInterpolator:
        if path not in self._interps:
            if not self.path_ok[path]:
                raise ExtrapolationError(
                    f"path {path} is censored or non-monotone at t={self.t}")
            self._interps[path] = PchipInterpolator(self.values[path], self.x)
        return self._interps[path]

    def eval(self, path: int, y, strict: bool = True) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        lo, hi = self.image_interval(path)
        outside = (y < lo) | (y > hi)
        if strict and np.any(outside):
            raise ExtrapolationError(
                f"query outside image interval [{lo:.6g}, {hi:.6g}] of path {path}")
        out = self._interp(path)(np.clip(y, lo, hi))
        if not strict:
            out = np.where(outside, np.nan, out)
        return out

    def eval_paths(self, y: float, strict: bool = False) -> np.ndarray:
        """Evaluate every valid path at a common query; NaN where not covered."""
        out = np.full(self.n_paths, np.nan)
        for p in range(self.n_paths):
            if not self.path_ok[p]:
                continue
            lo, hi = self.image_interval(p)
            if lo <= y <= hi:
                out[p] = float(self._interp(p)(y))
            elif strict:
                raise ExtrapolationError(f"query {y} outside image of path {p}")
        return out


def inverse_flow_1d(ens: FlowEnsemble, t: float) -> InverseFlow1D:
    return InverseFlow1D(ens, t)


@dataclass
class ExpMomentEstimate:
    name: str
    k: float
    log_per_point: np.ndarray      # (P,) log E exp(k * int |f|^2)
    sup_log: float
    sup: float
    ci_log: tuple[float, float]    # bootstrap interval for the sup, in log space
    n_paths: int

    def as_dict(self):
        return {"name": self.name, "k": self.k,
                "log_per_point": self.log_per_point.tolist(),
                "sup_log": self.sup_log, "sup": self.sup,
                "ci_log": list(self.ci_log), "n_paths": self.n_paths}


def exp_moment(ens: FlowEnsemble, field, k: float, *, name: str | None = None,
               n_bootstrap: int = 200, bootstrap_seed: int = 905) -> ExpMomentEstimate:
    """sup over the initial grid of E[exp(k int_0^T |f(t,Z_t)|^2 dt)], from the
    online left-point quadrature accumulator; log-sum-exp aggregation guards
    overflow.  field is an accumulator name registered at simulation time, or
    a callable (full-resolution ensembles only)."""
    if isinstance(field, str):
        key = f"l2:{field}"
        if key not in ens.accums:
            raise DriverMismatchError(
                f"ensemble has no |f|^2 accumulator {field!r}; "
                f"register it via l2_fields at simulation time")
        amounts = ens.accums[key][:, :, -1]
        label = field
    else:
        if not ens.full_resolution():
            raise ConfigError(
                "callable exp_moment needs a full-resolution ensemble; "
                "register the field via l2_fields instead")
        vals = np.stack([np.sum(np.asarray(field(float(t), ens.traj[:, :, r, :])) ** 2,
                                axis=-1)
                         for r, t in enumerate(ens.times[:-1])], axis=-1)
        amounts = np.sum(vals * ens.dt, axis=-1)
        label = name or getattr(field, "__name__", "field")
    alive = ens.alive()
    M = ens.n_paths
    big_neg = -1e300
    logw = np.where(alive, k * amounts, big_neg)
    counts = np.maximum(np.sum(alive, axis=0), 1)
    log_per_point = logsumexp(logw, axis=0) - np.log(counts)
    sup_idx = int(np.argmax(log_per_point))
    sup_log = float(log_per_point[sup_idx])

    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=bootstrap_seed,
                               spawn_key=(zlib.crc32(label.encode()),))))
    boots = np.empty(n_bootstrap)
    for i in range(n_bootstrap):
        idx = rng.integers(0, M, size=M)
        lw = logw[idx]
        cnt = np.maximum(np.sum(alive[idx], axis=0), 1)
        boots[i] = float(np.max(logsumexp(lw, axis=0) - np.log(cnt)))
    ci = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))
    return ExpMomentEstimate(name=label, k=k, log_per_point=log_per_point,
                             sup_log=sup_log,
                             sup=float(np.exp(min(sup_log, 700.0))),
                             ci_log=ci, n_paths=M)
