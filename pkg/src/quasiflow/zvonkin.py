"""Coordinate change phi_t(x) = x + u(t,x) and the transformed SDE coefficients.

All derivative fields are evaluated in x-coordinates on the stored solution
grids and transported through the inverse map by the chain rule; nothing is
re-differenced in y.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonConvergenceError, SingularMatrixError
from .pde import ParabolicSolution, _opnorm

__all__ = ["ZvonkinMap", "CoeffValues", "TransformedCoefficients",
           "CallableCoefficients", "transformed_coefficients", "regularity_probe"]


def _inv_small(mat: np.ndarray, d: int) -> np.ndarray:
    """Inverse of the trailing (d, d) matrices, closed form for d <= 2."""
    if d == 1:
        a = mat[..., 0, 0]
        if np.any(np.abs(a) < 1e-14):
            raise SingularMatrixError("1x1 coordinate Jacobian vanished")
        return (1.0 / a)[..., None, None]
    a, b = mat[..., 0, 0], mat[..., 0, 1]
    c, e = mat[..., 1, 0], mat[..., 1, 1]
    det = a * e - b * c
    if np.any(np.abs(det) < 1e-14):
        raise SingularMatrixError("2x2 coordinate Jacobian is singular")
    out = np.empty_like(mat)
    out[..., 0, 0] = e / det
    out[..., 0, 1] = -b / det
    out[..., 1, 0] = -c / det
    out[..., 1, 1] = a / det
    return out


class ZvonkinMap:
    """Forward map, gradient, and inverse built on a certified solution."""

    def __init__(self, sol: ParabolicSolution):
        self.sol = sol
        self.d = sol.spec.d
        self.lam = sol.lam
        self._eye = np.eye(self.d)

    def phi(self, t: float, x: np.ndarray, check: bool = True) -> np.ndarray:
        return np.asarray(x, float) + self.sol.eval_u(t, x, check)

    def grad_phi(self, t: float, x: np.ndarray, check: bool = True) -> np.ndarray:
        return self._eye + self.sol.eval_grad(t, x, check)

    def phi_inverse(self, t: float, y: np.ndarray, tol: float = 1e-12,
                    max_iter: int = 100) -> np.ndarray:
        """Unique x with x + u(t,x) = y via the contraction x <- y - u(t,x)."""
        x, ok = self.phi_inverse_masked(t, y, tol, max_iter)
        if not np.all(ok):
            raise NonConvergenceError(
                f"{int(np.sum(~ok))} inverse point(s) failed to contract within "
                f"{max_iter} iterations; gradient certificate may be violated")
        return x

    def phi_inverse_masked(self, t: float, y: np.ndarray, tol: float = 1e-12,
                           max_iter: int = 100):
        """Fixed-point inverse returning (x, converged_mask); never raises on
        stagnation, and marks points whose iterates leave the box."""
        y = np.asarray(y, dtype=float)
        x = y.copy()
        flat = x.reshape(-1, self.d)
        yf = y.reshape(-1, self.d)
        lo, hi = self.sol.box_min, self.sol.box_max
        ok = np.ones(flat.shape[0], dtype=bool)
        active = np.arange(flat.shape[0])
        for _ in range(max_iter):
            inside = np.all((flat[active] >= lo) & (flat[active] <= hi), axis=-1)
            ok[active[~inside]] = False
            active = active[inside]
            if active.size == 0:
                break
            u = self.sol.eval_u(t, flat[active], check=False)
            new = yf[active] - u
            step = np.max(np.abs(new - flat[active]), axis=-1)
            flat[active] = new
            active = active[step >= tol]
            if active.size == 0:
                break
        else:
            ok[active] = False
        return flat.reshape(y.shape), ok.reshape(y.shape[:-1])

    def newton_inverse(self, t: float, y: np.ndarray, warm: np.ndarray | None = None,
                       tol: float = 1e-12, max_iter: int = 30) -> np.ndarray:
        """Warm-startable Newton inverse; same fixed point as phi_inverse,
        used on the per-step hot path of the Y-flow simulator."""
        y = np.asarray(y, dtype=float)
        x = (y if warm is None else np.asarray(warm, float)).copy()
        flat = x.reshape(-1, self.d)
        yf = y.reshape(-1, self.d)
        for _ in range(max_iter):
            u = self.sol.eval_u(t, flat, check=False)
            r = flat + u - yf
            if np.max(np.abs(r)) < tol:
                break
            grad = self.sol.eval_grad(t, flat, check=False)
            m = _inv_small(self._eye + grad, self.d)
            flat -= np.einsum("...ab,...b->...a", m, r)
        else:
            raise NonConvergenceError("Newton inversion stalled; certificate violated?")
        return flat.reshape(y.shape)


class CoeffValues(NamedTuple):
    """Coefficient bundle at a batch of (t, y) points."""

    sigma: np.ndarray          # (..., d, d)
    b: np.ndarray              # (..., d)
    div_sigma: np.ndarray      # (..., d)
    div_b: np.ndarray          # (...,)
    grad_sigma_sq: np.ndarray  # (...,)  <grad sigma, (grad sigma)*>
    x: np.ndarray              # (..., d) preimage, reusable as warm start


class TransformedCoefficients:
    """sigma(t,y) = Id + grad_u at the preimage, b(t,y) = lam * u there,
    with the divergence fields required by the density formula."""

    def __init__(self, zmap: ZvonkinMap, lam: float | None = None):
        self.map = zmap
        self.sol = zmap.sol
        self.d = zmap.d
        self.lam = zmap.lam if lam is None else float(lam)
        self._eye = np.eye(self.d)
        gs = float(np.max(_opnorm(self.sol.grad_u, self.d)))
        if gs >= 1.0:
            raise SingularMatrixError(
                f"gradient sup {gs:.3f} >= 1; transformed coefficients undefined")
        self.gradient_sup = gs

    @property
    def box_min(self):
        return self.sol.box_min

    @property
    def box_max(self):
        return self.sol.box_max

    def at_x(self, t: float, x: np.ndarray) -> CoeffValues:
        """Coefficient bundle at preimage points x (y = phi_t(x) implied)."""
        x = np.asarray(x, dtype=float)
        u = self.sol.eval_u(t, x, check=False)
        G = self.sol.eval_grad(t, x, check=False)
        H = self.sol.eval_hess(t, x, check=False)
        M = _inv_small(self._eye + G, self.d)
        sigma = self._eye + G
        b = self.lam * u
        # d(yi) sigma_{jk} = sum_m H[j,k,m] M[m,i]
        T = np.einsum("...jkm,...mi->...ijk", H, M)
        div_sigma = np.einsum("...jjk->...k", T)
        div_b = self.lam * np.einsum("...jm,...mj->...", G, M)
        grad_sq = np.einsum("...ijk,...jik->...", T, T)
        return CoeffValues(sigma, b, div_sigma, div_b, grad_sq, x)

    def at_points(self, t: float, y: np.ndarray,
                  warm: np.ndarray | None = None) -> CoeffValues:
        """Coefficient bundle at (t, y); warm is a previous preimage guess."""
        x = self.map.newton_inverse(t, y, warm=warm)
        return self.at_x(t, x)

    # spec-facing single evaluators -----------------------------------------

    def sigma(self, t, y):
        return self.at_points(t, y).sigma

    def b(self, t, y):
        return self.at_points(t, y).b

    def div_sigma(self, t, y):
        return self.at_points(t, y).div_sigma

    def div_b(self, t, y):
        return self.at_points(t, y).div_b

    def grad_sigma_sq(self, t, y):
        return self.at_points(t, y).grad_sigma_sq


class CallableCoefficients:
    """Synthetic coefficient bundle from closed-form callables (tests, oracles).

    Each callable maps (t, y) with y of shape (..., d) to the shapes used by
    CoeffValues; omitted derivative fields default to zero.
    """

    def __init__(self, d: int, sigma, b, div_sigma=None, div_b=None,
                 grad_sigma_sq=None, box=(-1e18, 1e18)):
        self.d = d
        self.lam = None
        self._sigma, self._b = sigma, b
        self._div_sigma, self._div_b = div_sigma, div_b
        self._grad_sq = grad_sigma_sq
        self.box_min = np.full(d, box[0], dtype=float)
        self.box_max = np.full(d, box[1], dtype=float)

    def at_points(self, t: float, y: np.ndarray,
                  warm: np.ndarray | None = None) -> CoeffValues:
        y = np.asarray(y, dtype=float)
        base = y.shape[:-1]
        sigma = np.broadcast_to(np.asarray(self._sigma(t, y), float),
                                base + (self.d, self.d)).copy()
        b = np.broadcast_to(np.asarray(self._b(t, y), float), base + (self.d,)).copy()
        div_sigma = (np.zeros(base + (self.d,)) if self._div_sigma is None
                     else np.broadcast_to(np.asarray(self._div_sigma(t, y), float),
                                          base + (self.d,)).copy())
        div_b = (np.zeros(base) if self._div_b is None
                 else np.broadcast_to(np.asarray(self._div_b(t, y), float), base).copy())
        grad_sq = (np.zeros(base) if self._grad_sq is None
                   else np.broadcast_to(np.asarray(self._grad_sq(t, y), float), base).copy())
        return CoeffValues(sigma, b, div_sigma, div_b, grad_sq, y.copy())


def transformed_coefficients(zmap: ZvonkinMap, lam: float | None = None) -> TransformedCoefficients:
    return TransformedCoefficients(zmap, lam)


@dataclass
class RegularityProbe:
    sup_norms: dict
    modulus_t: dict
    modulus_t_fine: dict
    bounded: bool

    def as_dict(self):
        return {"sup_norms": self.sup_norms, "modulus_t": self.modulus_t,
                "modulus_t_fine": self.modulus_t_fine, "bounded": self.bounded}


def regularity_probe(coeffs: TransformedCoefficients, n_space: int = 201,
                     margin: float = 0.25) -> RegularityProbe:
    """Sample the transformed fields over the box and report sup norms plus a
    discrete modulus of continuity in t at two time resolutions."""
    sol = coeffs.sol
    d = coeffs.d
    lo = sol.box_min + margin
    hi = sol.box_max - margin
    if d == 1:
        pts = np.linspace(lo[0], hi[0], n_space)[:, None]
    else:
        n_side = int(max(9, round(np.sqrt(n_space))))
        g = [np.linspace(lo[i], hi[i], n_side) for i in range(d)]
        X, Y = np.meshgrid(*g, indexing="ij")
        pts = np.stack([X, Y], axis=-1).reshape(-1, d)

    times = sol.times

    def snapshot(t):
        v = coeffs.at_x(t, pts)
        return {
            "sigma": v.sigma, "b": v.b, "div_sigma": v.div_sigma,
            "div_b": v.div_b[..., None], "grad_sigma_sq": v.grad_sigma_sq[..., None],
        }

    def moduli(sample_times):
        snaps = [snapshot(t) for t in sample_times]
        sups = {k: max(float(np.max(np.abs(s[k]))) for s in snaps) for k in snaps[0]}
        mods = {k: 0.0 for k in snaps[0]}
        for a, b in zip(snaps[:-1], snaps[1:]):
            for k in mods:
                mods[k] = max(mods[k], float(np.max(np.abs(b[k] - a[k]))))
        return sups, mods

    coarse = times[:: max(1, (len(times) - 1) // 8)]
    fine = times[:: max(1, (len(times) - 1) // 16)]
    sups, mods = moduli(coarse)
    _, mods_fine = moduli(fine)
    bounded = all(np.isfinite(v) for v in sups.values())
    return RegularityProbe(sup_norms=sups, modulus_t=mods,
                           modulus_t_fine=mods_fine, bounded=bounded)
