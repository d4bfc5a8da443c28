"""Backward parabolic solver for the regularizing vector field u.

Solves  du/dt + (1/2) Lap u + b . grad u - lam u + f = 0,  u(T, .) = 0
componentwise on a padded box with homogeneous Dirichlet data, marching in
reversed time with Crank-Nicolson diffusion/reaction and explicit
second-order centered advection.  Derivative grids are differenced once at
store time; evaluators interpolate each stored grid directly (cubic in
space, linear in time).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .drift import ProblemSpec
from .errors import ConfigError, InstabilityError, LambdaSearchError
from .interp import UniformGridField

__all__ = [
    "GridSpec", "ParabolicSolution", "solve_backward", "gradient_sup",
    "select_lambda", "LambdaSelection", "sobolev_surrogate_report",
    "manufactured_case", "BoundaryContaminationWarning",
]


class BoundaryContaminationWarning(UserWarning):
    """Solution mass reached the padded Dirichlet shell."""


@dataclass(frozen=True)
class GridSpec:
    """Discretization of the space-time box [0,T] x [-L, L]^d."""

    half_width: float = 4.0
    h: float = 1.0 / 256.0
    dt: float = 2.5e-4
    padding: float = 0.5
    store_stride: int = 4

    def __post_init__(self):
        if self.half_width <= 0 or self.h <= 0 or self.dt <= 0:
            raise ConfigError("grid dimensions must be positive")
        n = 2.0 * self.half_width / self.h
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(
                f"2L/h = {n} must be an integer (L={self.half_width}, h={self.h})")
        if self.store_stride < 1:
            raise ConfigError("store_stride must be >= 1")

    @property
    def npts(self) -> int:
        return int(round(2.0 * self.half_width / self.h)) + 1

    def nodes(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.npts)

    def check_support(self, support_radius: float | None):
        if support_radius is None:
            return
        if self.half_width <= support_radius + self.padding:
            raise ConfigError(
                f"grid half-width {self.half_width} must exceed drift support "
                f"{support_radius} plus padding {self.padding}")


@dataclass
class ParabolicSolution:
    """Grid solution with value/derivative fields and space-time evaluators."""

    lam: float
    grid: GridSpec
    spec: ProblemSpec
    times: np.ndarray                  # ascending, includes 0 and T
    u: np.ndarray                      # (K, N[, N], d)
    grad_u: np.ndarray                 # (K, N[, N], d, d); [a, b] = d u_a / d x_b
    hess_u: np.ndarray                 # (K, N[, N], d, d, d)
    dt_u: np.ndarray                   # (K, N[, N], d)
    level: int | None = None
    diagnostics: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        d = self.spec.d
        origin = np.full(d, -self.grid.half_width)
        h = self.grid.h
        self._fu = UniformGridField(self.times, origin, h, self.u, 1)
        self._fg = UniformGridField(self.times, origin, h, self.grad_u, 2)
        self._fh = UniformGridField(self.times, origin, h, self.hess_u, 3)

    def eval_u(self, t, pts, check=True):
        return self._fu.at(t, pts, check)

    def eval_grad(self, t, pts, check=True):
        return self._fg.at(t, pts, check)

    def eval_hess(self, t, pts, check=True):
        return self._fh.at(t, pts, check)

    @property
    def box_min(self):
        return self._fu.box_min

    @property
    def box_max(self):
        return self._fu.box_max

    # -- persistence: one CSV per field plus a JSON header -----------------

    _FIELDS = ("u", "grad_u", "hess_u", "dt_u")

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {
            "lam": self.lam,
            "level": self.level,
            "spec": {"d": self.spec.d, "T": self.spec.T,
                     "p": self.spec.p, "q": self.spec.q},
            "grid": {"half_width": self.grid.half_width, "h": self.grid.h,
                     "dt": self.grid.dt, "padding": self.grid.padding,
                     "store_stride": self.grid.store_stride},
            "n_times": len(self.times),
            "shapes": {name: list(getattr(self, name).shape) for name in self._FIELDS},
            "diagnostics": self.diagnostics,
        }
        (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
        for name in self._FIELDS:
            arr = getattr(self, name)
            flat = arr.reshape(len(self.times), -1)
            with open(out / f"{name}.csv", "w", newline="") as fh:
                fh.write(",".join(f"{v:.17g}" for v in self.times) + "\n")
                for row in flat:
                    fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def load(cls, in_dir) -> "ParabolicSolution":
        src = Path(in_dir)
        header = json.loads((src / "header.json").read_text())
        spec = ProblemSpec(**header["spec"])
        grid = GridSpec(**header["grid"])
        fields = {}
        times = None
        for name in cls._FIELDS:
            shape = tuple(header["shapes"][name])
            with open(src / f"{name}.csv") as fh:
                times = np.array([float(v) for v in fh.readline().split(",")])
                flat = np.loadtxt(fh, delimiter=",", ndmin=2)
            fields[name] = flat.reshape(shape)
        return cls(lam=header["lam"], grid=grid, spec=spec, times=times,
                   level=header.get("level"), diagnostics=header.get("diagnostics", {}),
                   **fields)


def _diffusion_matrix(n_int: int, h: float, lam: float, d: int) -> sp.csr_matrix:
    """(1/2) Lap - lam on the interior nodes with Dirichlet exterior."""
    main = np.full(n_int, -2.0)
    off = np.ones(n_int - 1)
    d2 = sp.diags([off, main, off], [-1, 0, 1]) / (h * h)
    if d == 1:
        lap = d2
    else:
        eye = sp.identity(n_int)
        lap = sp.kron(d2, eye) + sp.kron(eye, d2)
    return (0.5 * lap - lam * sp.identity(lap.shape[0])).tocsr()


def _advection(v_full: np.ndarray, b_nodes: np.ndarray, h: float, d: int) -> np.ndarray:
    """Centered b . grad applied to each component; returns interior values."""
    if d == 1:
        dv = (v_full[2:] - v_full[:-2]) / (2.0 * h)        # (N-2, d)
        return b_nodes[1:-1, 0:1] * dv
    dvx = (v_full[2:, 1:-1] - v_full[:-2, 1:-1]) / (2.0 * h)
    dvy = (v_full[1:-1, 2:] - v_full[1:-1, :-2]) / (2.0 * h)
    b_int = b_nodes[1:-1, 1:-1]
    return b_int[..., 0:1] * dvx + b_int[..., 1:2] * dvy


def solve_backward(b_smooth, f, lam: float, grid: GridSpec,
                   spec: ProblemSpec, level: int | None = None,
                   f_time_dependent: bool = False) -> ParabolicSolution:
    """March the terminal-value problem in reversed time on the padded box.

    b_smooth and f map (t, pts(..., d)) -> (..., d); b must be bounded on the
    grid (mollified levels only, never the raw singular field).
    """
    if lam <= 0:
        raise ConfigError("lam must be positive")
    d = spec.d
    if d not in (1, 2):
        raise NotImplementedError("solver supports d in {1, 2}")
    N = grid.npts
    nodes1 = grid.nodes()
    if d == 1:
        pts = nodes1[:, None]
        grid_shape = (N,)
    else:
        X, Y = np.meshgrid(nodes1, nodes1, indexing="ij")
        pts = np.stack([X, Y], axis=-1)
        grid_shape = (N, N)

    b_nodes = np.asarray(b_smooth(0.0, pts), dtype=float)
    if not np.all(np.isfinite(b_nodes)):
        raise ConfigError("drift evaluator returned non-finite values on the grid")
    max_speed = float(np.max(np.abs(b_nodes)))
    cfl = grid.dt * max_speed / grid.h
    if cfl > 1.0:
        raise InstabilityError(
            f"advection CFL dt*|b|/h = {cfl:.3f} > 1; shrink dt or coarsen h")

    K = int(round(spec.T / grid.dt))
    if abs(K * grid.dt - spec.T) > 1e-9 * spec.T:
        raise ConfigError(f"T={spec.T} must be a multiple of dt={grid.dt}")

    A = _diffusion_matrix(N - 2, grid.h, lam, d)
    n_int = A.shape[0]
    eye = sp.identity(n_int, format="csr")
    m_plus = (eye + (grid.dt / 2.0) * A).tocsr()
    lu = splu((eye - (grid.dt / 2.0) * A).tocsc())

    def f_at(t):
        return np.asarray(f(t, pts), dtype=float)

    f_cur = f_at(spec.T)
    interior = (slice(1, -1),) * d
    v_full = np.zeros(grid_shape + (d,))
    stored_idx = [0]
    stored = [v_full.copy()]
    for k in range(K):
        t_k = spec.T - k * grid.dt
        t_next = spec.T - (k + 1) * grid.dt
        f_next = f_at(t_next) if (f_time_dependent or k == 0) else f_cur
        adv = _advection(v_full, b_nodes, grid.h, d)
        rhs = (m_plus @ v_full[interior].reshape(n_int, d)
               + grid.dt * (adv.reshape(n_int, d)
                            + 0.5 * (f_cur[interior] + f_next[interior]).reshape(n_int, d)))
        v_int = lu.solve(rhs)
        v_full = np.zeros_like(v_full)
        v_full[interior] = v_int.reshape(v_full[interior].shape)
        f_cur = f_next
        if (k + 1) % grid.store_stride == 0 or k + 1 == K:
            stored_idx.append(k + 1)
            stored.append(v_full.copy())

    # reversed-time index k corresponds to t = T - k dt; flip ascending in t
    times = spec.T - grid.dt * np.asarray(stored_idx[::-1], dtype=float)
    u = np.asarray(stored[::-1])

    h = grid.h
    axes = tuple(range(1, 1 + d))
    grad = np.stack([np.stack([np.gradient(u[..., a], h, axis=ax)
                               for ax in axes], axis=-1)
                     for a in range(d)], axis=-2)
    hess = np.stack([np.stack([np.stack([np.gradient(grad[..., a, b], h, axis=ax)
                                         for ax in axes], axis=-1)
                               for b in range(d)], axis=-2)
                     for a in range(d)], axis=-3)
    dt_u = np.gradient(u, times, axis=0) if len(times) > 1 else np.zeros_like(u)

    sup_u = float(np.max(np.abs(u)))
    shell_width = max(grid.padding, 2 * h)
    shell = np.abs(nodes1) >= grid.half_width - shell_width
    if d == 1:
        shell_sup = float(np.max(np.abs(u[:, shell]))) if np.any(shell) else 0.0
    else:
        mask = shell[:, None] | shell[None, :]
        shell_sup = float(np.max(np.abs(u[:, mask]))) if np.any(mask) else 0.0
    contaminated = sup_u > 0 and shell_sup > 1e-6 * sup_u
    if contaminated:
        warnings.warn(
            f"solution on the outer shell reaches {shell_sup:.3e} "
            f"(> 1e-6 of sup {sup_u:.3e}); box truncation may be felt",
            BoundaryContaminationWarning, stacklevel=2)

    sol = ParabolicSolution(
        lam=lam, grid=grid, spec=spec, times=times, u=u, grad_u=grad,
        hess_u=hess, dt_u=dt_u, level=level,
        diagnostics={"cfl": cfl, "max_drift": max_speed, "sup_u": sup_u,
                     "shell_sup": shell_sup, "contaminated": bool(contaminated)})
    return sol


def _opnorm(g: np.ndarray, d: int) -> np.ndarray:
    """Spectral norm of the trailing (d, d) matrices."""
    if d == 1:
        return np.abs(g[..., 0, 0])
    gtg_tr = np.einsum("...ab,...ab->...", g, g)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    disc = np.sqrt(np.maximum(gtg_tr ** 2 - 4.0 * det ** 2, 0.0))
    return np.sqrt(np.maximum(0.5 * (gtg_tr + disc), 0.0))


def gradient_sup(sol: ParabolicSolution) -> float:
    """Sup over stored time and space nodes of the operator norm of grad u."""
    return float(np.max(_opnorm(sol.grad_u, sol.spec.d)))


@dataclass
class LambdaSelection:
    lam: float
    solutions: dict
    trace: list            # rows (level, lam, gradient_sup)


def select_lambda(seq, levels, grid: GridSpec, spec: ProblemSpec,
                  target: float = 0.5, lam_start: float = 1.0,
                  lam_cap: float = 2.0 ** 20) -> LambdaSelection:
    """Doubling search for the smallest tested lam certifying gradient smallness
    simultaneously at every requested mollification level."""
    if not levels:
        raise ConfigError("levels must be non-empty")
    trace = []
    lam = lam_start
    while lam <= lam_cap:
        sols = {}
        ok = True
        for n in levels:
            bn = seq.mollify(n)
            sol = solve_backward(bn.value, bn.value, lam, grid, spec, level=n)
            gs = gradient_sup(sol)
            trace.append((n, lam, gs))
            sols[n] = sol
            if gs > target:
                ok = False
        if ok:
            return LambdaSelection(lam=lam, solutions=sols, trace=trace)
        lam *= 2.0
    raise LambdaSearchError(
        f"no lam <= {lam_cap} certified gradient_sup <= {target} on this grid")


def _discrete_lqp(values: np.ndarray, times: np.ndarray, h: float,
                  d: int, p: float, q: float) -> float:
    """Discrete L^q(dt; L^p(dx)) norm of per-node magnitudes (K, nodes...)."""
    mags = values.reshape(values.shape[0], -1, *values.shape[1 + d:])
    mags = np.sqrt(np.sum(mags.reshape(mags.shape[0], mags.shape[1], -1) ** 2, axis=-1))
    space = (h ** d * np.sum(mags ** p, axis=1)) ** (1.0 / p)
    if len(times) < 2:
        return float(space[0])
    return float(np.trapezoid(space ** q, times) ** (1.0 / q))


def sobolev_surrogate_report(sol: ParabolicSolution, f,
                             f_time_dependent: bool = False) -> dict:
    """Ratio of the discrete solution norm to the source norm on the same grid."""
    spec, grid = sol.spec, sol.grid
    d, p, q = spec.d, spec.p, spec.q
    nodes1 = grid.nodes()
    if d == 1:
        pts = nodes1[:, None]
    else:
        X, Y = np.meshgrid(nodes1, nodes1, indexing="ij")
        pts = np.stack([X, Y], axis=-1)
    if f_time_dependent:
        f_vals = np.stack([np.asarray(f(t, pts), float) for t in sol.times])
    else:
        f_vals = np.broadcast_to(np.asarray(f(0.0, pts), float),
                                 (len(sol.times),) + pts.shape).copy()
    h = grid.h
    norms = {
        "dt_u": _discrete_lqp(sol.dt_u, sol.times, h, d, p, q),
        "u": _discrete_lqp(sol.u, sol.times, h, d, p, q),
        "grad_u": _discrete_lqp(sol.grad_u, sol.times, h, d, p, q),
        "hess_u": _discrete_lqp(sol.hess_u, sol.times, h, d, p, q),
        "f": _discrete_lqp(f_vals, sol.times, h, d, p, q),
    }
    solution_norm = norms["dt_u"] + norms["u"] + norms["grad_u"] + norms["hess_u"]
    zero_source = norms["f"] == 0.0
    ratio = float("nan") if zero_source else solution_norm / norms["f"]
    return {"norms": norms, "solution_norm": solution_norm,
            "ratio": ratio, "zero_source": zero_source, "lam": sol.lam,
            "h": h, "dt": grid.dt}


# ---------------------------------------------------------------------------
# manufactured solution for convergence-order studies (d=1)
# ---------------------------------------------------------------------------

def _smoothstep4(s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """C^4 unit step on [0,1] with first/second derivatives."""
    s = np.clip(s, 0.0, 1.0)
    v = s ** 5 * (126.0 + s * (-420.0 + s * (540.0 + s * (-315.0 + 70.0 * s))))
    dv = 630.0 * s ** 4 * (1.0 - s) ** 4
    d2v = 2520.0 * s ** 3 * (1.0 - s) ** 3 * (1.0 - 2.0 * s)
    return v, dv, d2v


def _cutoff(x: np.ndarray, inner: float = 2.0, outer: float = 3.0):
    """chi smooth, 1 on |x|<=inner, 0 on |x|>=outer; returns chi, chi', chi''."""
    a = np.abs(x)
    s = (a - inner) / (outer - inner)
    v, dv, d2v = _smoothstep4(s)
    chi = 1.0 - v
    dchi = -dv / (outer - inner) * np.sign(x)
    d2chi = -d2v / (outer - inner) ** 2
    return chi, dchi, d2chi


def manufactured_case(spec: ProblemSpec, lam: float):
    """Target u*(t,x) = (T-t) sin(x) chi(x) and the source f that produces it
    with b = 0.  Returns (u_star(t, pts), f(t, pts)); d must be 1."""
    if spec.d != 1:
        raise ConfigError("manufactured case is one-dimensional")
    T = spec.T

    def parts(x):
        chi, dchi, d2chi = _cutoff(x)
        g = np.sin(x) * chi
        gxx = -np.sin(x) * chi + 2.0 * np.cos(x) * dchi + np.sin(x) * d2chi
        return g, gxx

    def u_star(t, pts):
        g, _ = parts(pts[..., 0])
        return ((T - t) * g)[..., None]

    def f(t, pts):
        g, gxx = parts(pts[..., 0])
        val = lam * (T - t) * g + g - 0.5 * (T - t) * gxx
        return val[..., None]

    return u_star, f
