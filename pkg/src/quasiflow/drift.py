"""Drift fields, integrability norms, and mollification.

A drift field evaluates (t, x) -> R^d.  Fields declare their singular points
so the norm quadrature can grade its mesh toward them, and so mollified
evaluators can split convolution windows that straddle a kink or singularity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DivergentIntegralError

__all__ = [
    "ProblemSpec", "kr_condition", "Singularity", "DriftField",
    "ZeroDrift", "ConstantDrift", "PowerDrift", "IndicatorDrift",
    "TruncatedLinearDrift", "BumpDrift", "GridSampledDrift", "make_drift",
    "SpaceQuadrature", "lqp_norm", "MollifiedDrift", "MollifiedSequence",
    "mollification_error",
]


@dataclass(frozen=True)
class ProblemSpec:
    """Mathematical identity of an experiment: dimension, horizon, exponents."""

    d: int
    T: float
    p: float
    q: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"dimension d must be a positive integer, got {self.d}")
        if not (self.T > 0):
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if not (self.p > 0 and self.q > 0):
            raise ConfigError(f"exponents must be positive, got p={self.p}, q={self.q}")


def kr_condition(spec: ProblemSpec) -> bool:
    """Integrability gate: p >= 2, q > 2 and d/p + 2/q < 1."""
    if spec.d <= 0 or spec.T <= 0:
        raise ConfigError("kr_condition requires positive d and T")
    return spec.p >= 2.0 and spec.q > 2.0 and spec.d / spec.p + 2.0 / spec.q < 1.0


@dataclass(frozen=True)
class Singularity:
    """Power-type singular point |x - center|^(-alpha) of a drift field."""

    center: tuple[float, ...]
    alpha: float


class DriftField:
    """Base drift evaluator.  Subclasses override _eval (and closed forms)."""

    kind = "analytic-closure"
    time_dependent = False

    def __init__(self, spec: ProblemSpec, name: str, params: dict | None = None):
        self.spec = spec
        self.name = name
        self.params = dict(params or {})
        self.singularities: list[Singularity] = []

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.spec.d:
            raise ValueError(f"points must have last axis {self.spec.d}, got {x.shape}")
        return self._eval(t, x)

    def _eval(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self) -> list[float]:
        """Locations (d=1) where the field kinks, jumps, or blows up."""
        return []

    def lp_space_norm_closed(self, p: float) -> float | None:
        """Closed-form ||b(t,.)||_{L^p}, when an antiderivative is known."""
        return None

    def support_radius(self) -> float | None:
        """Radius R with b = 0 outside |x| <= R, if compactly supported."""
        return None


class ZeroDrift(DriftField):
    def __init__(self, spec: ProblemSpec):
        super().__init__(spec, "zero")

    def _eval(self, t, x):
        return np.zeros_like(x)

    def lp_space_norm_closed(self, p):
        return 0.0

    def support_radius(self):
        return 0.0


class ConstantDrift(DriftField):
    """Spatially constant vector drift (not integrable on R^d; box norms only)."""

    def __init__(self, spec: ProblemSpec, value):
        value = np.broadcast_to(np.asarray(value, dtype=float), (spec.d,)).copy()
        super().__init__(spec, "constant", {"value": value.tolist()})
        self.value = value

    def _eval(self, t, x):
        return np.broadcast_to(self.value, x.shape).copy()


class PowerDrift(DriftField):
    """b(x) = |x - c|^(-alpha) * 1_{|x - c| <= R} * direction."""

    def __init__(self, spec: ProblemSpec, alpha: float, radius: float = 1.0,
                 center=None, direction=None):
        center = np.zeros(spec.d) if center is None else np.asarray(center, float)
        if direction is None:
            direction = np.zeros(spec.d)
            direction[0] = 1.0
        direction = np.asarray(direction, dtype=float)
        super().__init__(spec, "power", {
            "alpha": alpha, "radius": radius,
            "center": center.tolist(), "direction": direction.tolist()})
        if not (0.0 < alpha):
            raise ConfigError("power drift needs alpha > 0")
        self.alpha = float(alpha)
        self.radius = float(radius)
        self.center = center
        self.direction = direction
        self.singularities = [Singularity(tuple(center.tolist()), self.alpha)]

    def _eval(self, t, x):
        r = np.linalg.norm(x - self.center, axis=-1)
        with np.errstate(divide="ignore"):
            mag = np.where(r <= self.radius, r ** (-self.alpha), 0.0)
        mag = np.where(r == 0.0, np.inf, mag)
        return mag[..., None] * self.direction

    def breakpoints(self):
        if self.spec.d != 1:
            return []
        c = self.center[0]
        return [c - self.radius, c, c + self.radius]

    def lp_space_norm_closed(self, p):
        d, a = self.spec.d, self.alpha
        if a * p >= d:
            raise DivergentIntegralError(
                f"|x|^(-{a}) is not in L^{p}(R^{d}): alpha*p = {a * p} >= d = {d}")
        surf = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}.get(d)
        if surf is None:
            return None
        scale = float(np.linalg.norm(self.direction))
        integral = surf * self.radius ** (d - a * p) / (d - a * p)
        return scale * integral ** (1.0 / p)

    def support_radius(self):
        return float(np.linalg.norm(self.center)) + self.radius


class IndicatorDrift(DriftField):
    """d=1 box indicator drift b(x) = value * 1_{[lo, hi]}(x)."""

    def __init__(self, spec: ProblemSpec, lo: float, hi: float, value: float = 1.0):
        if spec.d != 1:
            raise ConfigError("indicator drift is one-dimensional")
        super().__init__(spec, "indicator", {"lo": lo, "hi": hi, "value": value})
        self.lo, self.hi, self.value = float(lo), float(hi), float(value)

    def _eval(self, t, x):
        inside = (x[..., 0] >= self.lo) & (x[..., 0] <= self.hi)
        return np.where(inside, self.value, 0.0)[..., None]

    def breakpoints(self):
        return [self.lo, self.hi]

    def lp_space_norm_closed(self, p):
        return abs(self.value) * (self.hi - self.lo) ** (1.0 / p)

    def support_radius(self):
        return max(abs(self.lo), abs(self.hi))


class TruncatedLinearDrift(DriftField):
    """b(x) = -rate * x inside |x| <= r_flat, tapered smoothly to 0 by r_zero."""

    def __init__(self, spec: ProblemSpec, rate: float = 1.0,
                 r_flat: float = 3.0, r_zero: float = 4.0):
        super().__init__(spec, "linear", {
            "rate": rate, "r_flat": r_flat, "r_zero": r_zero})
        if not (0 < r_flat < r_zero):
            raise ConfigError("need 0 < r_flat < r_zero")
        self.rate, self.r_flat, self.r_zero = float(rate), float(r_flat), float(r_zero)

    def _taper(self, r):
        s = np.clip((r - self.r_flat) / (self.r_zero - self.r_flat), 0.0, 1.0)
        return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)

    def _eval(self, t, x):
        r = np.linalg.norm(x, axis=-1)
        return -self.rate * x * self._taper(r)[..., None]

    def breakpoints(self):
        if self.spec.d != 1:
            return []
        return [-self.r_zero, -self.r_flat, self.r_flat, self.r_zero]

    def support_radius(self):
        return self.r_zero


class BumpDrift(DriftField):
    """Smooth compactly supported bump: amp * (1 - (|x|/R)^2)^4 * direction."""

    def __init__(self, spec: ProblemSpec, amplitude: float = 1.0,
                 radius: float = 1.0, direction=None, center=None):
        center = np.zeros(spec.d) if center is None else np.asarray(center, float)
        if direction is None:
            direction = np.zeros(spec.d)
            direction[0] = 1.0
        direction = np.asarray(direction, dtype=float)
        super().__init__(spec, "bump", {
            "amplitude": amplitude, "radius": radius,
            "direction": direction.tolist(), "center": center.tolist()})
        self.amplitude, self.radius = float(amplitude), float(radius)
        self.direction, self.center = direction, center

    def _eval(self, t, x):
        s2 = np.sum(((x - self.center) / self.radius) ** 2, axis=-1)
        prof = np.where(s2 < 1.0, (1.0 - np.minimum(s2, 1.0)) ** 4, 0.0)
        return self.amplitude * prof[..., None] * self.direction

    def breakpoints(self):
        if self.spec.d != 1:
            return []
        c = self.center[0]
        return [c - self.radius, c + self.radius]

    def support_radius(self):
        return float(np.linalg.norm(self.center)) + self.radius


class GridSampledDrift(DriftField):
    """d=1 drift loaded from CSV rows (t, x, b); zero outside the sampled range."""

    kind = "grid-sampled"

    def __init__(self, spec: ProblemSpec, path: str):
        if spec.d != 1:
            raise ConfigError("grid-sampled drift currently supports d=1")
        super().__init__(spec, "grid", {"path": str(path)})
        xs, bs = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#") or row[0] == "t":
                    continue
                _, x, b = (float(v) for v in row[:3])
                xs.append(x)
                bs.append(b)
        order = np.argsort(xs)
        self.xs = np.asarray(xs, float)[order]
        self.bs = np.asarray(bs, float)[order]
        if self.xs.size < 2:
            raise ConfigError(f"grid drift file {path} has fewer than 2 samples")
        if not np.all(np.isfinite(self.bs)):
            raise ConfigError(f"grid drift file {path} contains non-finite values")

    def _eval(self, t, x):
        v = np.interp(x[..., 0], self.xs, self.bs, left=0.0, right=0.0)
        return v[..., None]

    def breakpoints(self):
        return [float(self.xs[0]), float(self.xs[-1])]

    def support_radius(self):
        return float(max(abs(self.xs[0]), abs(self.xs[-1])))


_DRIFT_REGISTRY = {
    "zero": ZeroDrift,
    "constant": ConstantDrift,
    "power": PowerDrift,
    "indicator": IndicatorDrift,
    "linear": TruncatedLinearDrift,
    "bump": BumpDrift,
    "grid": GridSampledDrift,
}


def make_drift(name: str, spec: ProblemSpec, **params) -> DriftField:
    """Construct a drift field from its config name and parameters."""
    try:
        cls = _DRIFT_REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"unknown drift kind {name!r}; known: {sorted(_DRIFT_REGISTRY)}") from None
    return cls(spec, **params)


# ---------------------------------------------------------------------------
# quadrature for L^q_p norms
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _leggauss(n: int):
    return np.polynomial.legendre.leggauss(n)


@dataclass(frozen=True)
class SpaceQuadrature:
    """Graded panel quadrature on [-L, L]^d.

    Panels are split at declared breakpoints; panels abutting a singular
    point use the grading substitution x = x0 +/- w*v^m which removes the
    power singularity from the transformed integrand.
    """

    half_width: float = 4.0
    base_panels: int = 64
    gl_order: int = 12
    time_nodes: int = 16

    def panels_1d(self, breakpoints) -> np.ndarray:
        lo, hi = -self.half_width, self.half_width
        cuts = sorted({lo, hi, *(b for b in breakpoints if lo < b < hi)})
        maxw = (hi - lo) / self.base_panels
        edges = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            k = max(1, int(math.ceil((b - a) / maxw)))
            edges.append(np.linspace(a, b, k + 1))
        out = []
        for e in edges:
            out.extend(zip(e[:-1], e[1:]))
        return np.asarray(out)

    def integrate_1d(self, g, breakpoints, singular: dict[float, float]) -> float:
        """Integral of g >= 0 over [-L, L]; singular maps x0 -> integrand exponent."""
        nodes, weights = _leggauss(self.gl_order)
        half = 0.5 * (nodes + 1.0)  # nodes on (0, 1)
        whalf = 0.5 * weights
        total = 0.0
        for a, b in self.panels_1d(breakpoints):
            w = b - a
            beta_lo = singular.get(a)
            beta_hi = singular.get(b)
            if beta_lo is not None and beta_lo > 0:
                m = max(2, int(math.ceil(4.0 / max(1e-9, 1.0 - beta_lo))))
                v = half
                x = a + w * v ** m
                total += w * m * float(np.sum(whalf * v ** (m - 1) * g(x)))
            elif beta_hi is not None and beta_hi > 0:
                m = max(2, int(math.ceil(4.0 / max(1e-9, 1.0 - beta_hi))))
                v = half
                x = b - w * v ** m
                total += w * m * float(np.sum(whalf * v ** (m - 1) * g(x)))
            else:
                x = a + w * half
                total += w * float(np.sum(whalf * g(x)))
        return total

    def integrate_2d(self, g) -> float:
        """Tensor Gauss integral of g(x) over the box (smooth integrands only)."""
        nodes, weights = _leggauss(self.gl_order)
        L = self.half_width
        k = max(8, self.base_panels // 4)
        edges = np.linspace(-L, L, k + 1)
        xs, ws = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            xs.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
            ws.append(0.5 * (b - a) * weights)
        xs = np.concatenate(xs)
        ws = np.concatenate(ws)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([X, Y], axis=-1)
        W = ws[:, None] * ws[None, :]
        return float(np.sum(W * g(pts)))


def _space_lp(field_eval, p: float, quad: SpaceQuadrature, d: int,
              breakpoints, singular: dict[float, float], t: float) -> float:
    """Discrete ||g(t,.)||_{L^p} with graded handling of declared singularities."""
    if d == 1:
        def gp(x):
            v = field_eval(t, x[:, None])
            return np.linalg.norm(v, axis=-1) ** p
        integral = quad.integrate_1d(gp, breakpoints, singular)
    elif d == 2:
        if singular:
            raise NotImplementedError(
                "graded quadrature for singular fields is implemented for d=1")
        def gp(x):
            v = field_eval(t, x)
            return np.linalg.norm(v, axis=-1) ** p
        integral = quad.integrate_2d(gp)
    else:
        raise NotImplementedError("norm quadrature supports d in {1, 2}")
    return integral ** (1.0 / p)


def _check_divergence(field: DriftField, p: float):
    d = field.spec.d
    for s in field.singularities:
        if s.alpha * p >= d:
            raise DivergentIntegralError(
                f"declared singularity alpha={s.alpha} gives alpha*p={s.alpha * p}"
                f" >= d={d}; the L^p space integral diverges")


def _singular_map(field: DriftField, p: float) -> dict[float, float]:
    out = {}
    if field.spec.d == 1:
        for s in field.singularities:
            out[s.center[0]] = s.alpha * p
    return out


def lqp_norm(field: DriftField, quad: SpaceQuadrature | None = None,
             use_closed_form: bool = True) -> float:
    """Discrete (int_0^T ||b(t,.)||_p^q dt)^(1/q); closed form when available."""
    spec = field.spec
    _check_divergence(field, spec.p)
    quad = quad or SpaceQuadrature()
    if use_closed_form and not field.time_dependent:
        closed = field.lp_space_norm_closed(spec.p)
        if closed is not None:
            return closed * spec.T ** (1.0 / spec.q)
    singular = _singular_map(field, spec.p)
    bps = field.breakpoints()
    if not field.time_dependent:
        s = _space_lp(field, spec.p, quad, spec.d, bps, singular, 0.0)
        return s * spec.T ** (1.0 / spec.q)
    ts = np.linspace(0.0, spec.T, quad.time_nodes)
    vals = np.array([_space_lp(field, spec.p, quad, spec.d, bps, singular, t) ** spec.q
                     for t in ts])
    return float(np.trapezoid(vals, ts)) ** (1.0 / spec.q)


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

_KERNEL_MASS = {1: 256.0 / 315.0}  # int of (1-u^2)^4 over the unit ball, d=1
_KERNEL_MASS[2] = math.pi / 5.0


def _kernel_profile(u2: np.ndarray) -> np.ndarray:
    """Unnormalized bump (1 - |u|^2)^4 on |u| < 1, as a function of |u|^2."""
    return np.where(u2 < 1.0, (1.0 - np.minimum(u2, 1.0)) ** 4, 0.0)


class MollifiedDrift:
    """Smooth compactly supported approximation of a drift field.

    Value and spatial gradient are computed as convolutions of the cut-off
    base field with a polynomial bump of width eps; the gradient applies the
    kernel's own derivative.  Convolution windows that straddle a breakpoint
    of the base field are integrated on split (and, at singular points,
    graded) panels.
    """

    time_dependent = False

    def __init__(self, base: DriftField, eps: float, cutoff: float,
                 level: int, gl_order: int = 16):
        self.base = base
        self.eps = float(eps)
        self.cutoff = float(cutoff)
        self.level = int(level)
        self.spec = base.spec
        d = self.spec.d
        nodes, weights = _leggauss(gl_order)
        if d == 1:
            u = nodes[None, :]
            w = weights
            prof = _kernel_profile(nodes ** 2)
            self._u = nodes
            self._wv = w * prof / np.sum(w * prof)          # unit discrete mass
            dprof = -8.0 * nodes * (1.0 - nodes ** 2) ** 3
            dprof = np.where(np.abs(nodes) < 1.0, dprof, 0.0)
            c = _KERNEL_MASS[1]
            wd = w * dprof / c
            self._wg = (wd - np.sum(wd) / wd.size)[:, None]  # annihilate constants
        elif d == 2:
            U1, U2 = np.meshgrid(nodes, nodes, indexing="ij")
            W = np.outer(weights, weights)
            u2 = U1 ** 2 + U2 ** 2
            prof = _kernel_profile(u2)
            self._u = np.stack([U1.ravel(), U2.ravel()], axis=-1)
            wv = (W * prof).ravel()
            self._wv = wv / np.sum(wv)
            dprof = np.where(u2 < 1.0, -8.0 * (1.0 - np.minimum(u2, 1.0)) ** 3, 0.0)
            wg = (W * dprof).ravel()[:, None] * self._u / _KERNEL_MASS[2]
            self._wg = wg - np.mean(wg, axis=0)
        else:
            raise NotImplementedError("mollification supports d in {1, 2}")
        self._breaks = np.asarray(sorted(set(base.breakpoints())), dtype=float)
        self._sing = {s.center[0]: s.alpha for s in base.singularities} if d == 1 else {}
        if d == 2 and base.singularities:
            raise NotImplementedError("singular mollification is implemented for d=1")

    def _cut_base(self, t: float, y: np.ndarray) -> np.ndarray:
        v = self.base(t, y)
        r = np.linalg.norm(y, axis=-1)
        v = np.where((r <= self.cutoff)[..., None], v, 0.0)
        return np.where(np.isfinite(v), v, 0.0)

    def _near_mask(self, x1: np.ndarray) -> np.ndarray:
        if self._breaks.size == 0:
            return np.zeros(x1.shape, dtype=bool)
        dist = np.min(np.abs(x1[:, None] - self._breaks[None, :]), axis=1)
        return dist < self.eps * 1.5

    def _far_convolve(self, t, x, kernel_weights, scale):
        # x: (N, d); y_k = x - eps*u_k
        y = x[:, None, :] - self.eps * np.atleast_2d(self._u).reshape(1, -1, self.spec.d)
        v = self._cut_base(t, y)                        # (N, K, d)
        if kernel_weights.ndim == 1:                    # value: scalar weights
            out = np.einsum("k,nkd->nd", kernel_weights, v)
        else:                                           # gradient: (K, d) weights
            out = np.einsum("ki,nka->nai", kernel_weights, v)
        return out * scale

    def _near_convolve_1d(self, t, x, deriv: bool):
        """Per-point panel quadrature for windows containing a breakpoint."""
        eps = self.eps
        nodes, weights = _leggauss(24)
        half = 0.5 * (nodes + 1.0)
        whalf = 0.5 * weights
        out = np.zeros((x.size, 1))
        prof = (lambda u: -8.0 * u * np.where(np.abs(u) < 1, (1 - u * u) ** 3, 0.0) /
                (_KERNEL_MASS[1] * eps * eps)) if deriv else \
               (lambda u: _kernel_profile(u * u) / (_KERNEL_MASS[1] * eps))
        for i, xi in enumerate(np.asarray(x, float).ravel()):
            lo, hi = xi - eps, xi + eps
            cuts = [lo] + [b for b in self._breaks if lo < b < hi] + [hi]
            acc = 0.0
            for a, b in zip(cuts[:-1], cuts[1:]):
                w = b - a
                if w <= 0:
                    continue
                beta_lo = self._sing.get(a)
                beta_hi = self._sing.get(b)
                if beta_lo is not None:
                    m = max(2, int(math.ceil(4.0 / max(1e-9, 1.0 - beta_lo))))
                    y = a + w * half ** m
                    jac = w * m * half ** (m - 1)
                elif beta_hi is not None:
                    m = max(2, int(math.ceil(4.0 / max(1e-9, 1.0 - beta_hi))))
                    y = b - w * half ** m
                    jac = w * m * half ** (m - 1)
                else:
                    y = a + w * half
                    jac = np.full_like(half, w)
                bv = self._cut_base(t, y[:, None])[:, 0]
                acc += float(np.sum(whalf * jac * bv * prof((xi - y) / eps)))
            out[i, 0] = acc
        return out

    def value(self, t: float, x: np.ndarray) -> np.ndarray:
        """Mollified field at points x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.spec.d)
        out = self._far_convolve(t, flat, self._wv, 1.0)
        if self.spec.d == 1:
            near = self._near_mask(flat[:, 0])
            if np.any(near):
                out[near] = self._near_convolve_1d(t, flat[near, 0], deriv=False)
        return out.reshape(x.shape)

    def grad(self, t: float, x: np.ndarray) -> np.ndarray:
        """Spatial Jacobian, entries [a, b] = d b_a / d x_b, shape (..., d, d)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.spec.d)
        out = self._far_convolve(t, flat, self._wg, 1.0 / self.eps)
        if self.spec.d == 1:
            near = self._near_mask(flat[:, 0])
            if np.any(near):
                out[near, 0, :] = self._near_convolve_1d(t, flat[near, 0], deriv=True)
        return out.reshape(x.shape + (self.spec.d,))

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return self.value(t, x)

    def breakpoints(self) -> list[float]:
        return []

    def support_radius(self) -> float:
        base = self.base.support_radius()
        r = self.cutoff if base is None else min(self.cutoff, base)
        return r + self.eps


@dataclass
class MollifiedSequence:
    """Smoothing levels eps_n decreasing with cutoff radii R_n increasing."""

    base: DriftField
    levels: list[int]
    eps_scale: float = 1.0
    cutoff_base: float = 2.0
    gl_order: int = 16
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.levels or sorted(self.levels) != list(self.levels):
            raise ConfigError("levels must be a non-empty increasing list")

    def eps_for(self, n: int) -> float:
        return self.eps_scale * 2.0 ** (-n)

    def cutoff_for(self, n: int) -> float:
        return self.cutoff_base + n

    def mollify(self, n: int) -> MollifiedDrift:
        """Return b^n with its gradient; levels outside the sequence are rejected."""
        if n not in self.levels:
            raise ConfigError(f"level {n} not in configured levels {self.levels}")
        if n not in self._cache:
            self._cache[n] = MollifiedDrift(
                self.base, self.eps_for(n), self.cutoff_for(n), n, self.gl_order)
        return self._cache[n]


def mollification_error(seq: MollifiedSequence, n: int,
                        quad: SpaceQuadrature | None = None) -> float:
    """Discrete ||b^n - b||_{L^q_p(T)} on the declared quadrature grid."""
    base = seq.base
    spec = base.spec
    _check_divergence(base, spec.p)
    quad = quad or SpaceQuadrature()
    bn = seq.mollify(n)

    def diff(t, x):
        raw = base(t, x)
        raw = np.where(np.isfinite(raw), raw, 0.0)  # singular point has measure zero
        return bn.value(t, x) - raw

    singular = _singular_map(base, spec.p)
    bps = sorted(set(base.breakpoints())
                 | {b + s * bn.eps for b in base.breakpoints() for s in (-1.0, 1.0)})
    s = _space_lp(diff, spec.p, quad, spec.d, bps, singular, 0.0)
    return s * spec.T ** (1.0 / spec.q)
