"""Fast interpolation on uniform space-time grids.

Space interpolation is 4-point (cubic) Lagrange per axis, tensorized in d=2;
time interpolation is linear between stored nodes.  Derivative fields are
interpolated from their own node arrays, never re-differenced from
interpolated values.
"""

from __future__ import annotations

import numpy as np

from .errors import OutOfDomainError


def cubic_weights(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Lagrange weights for nodes {-1, 0, 1, 2} at local coordinate xi in [0, 1]."""
    wm1 = -xi * (xi - 1.0) * (xi - 2.0) / 6.0
    w0 = (xi * xi - 1.0) * (xi - 2.0) / 2.0
    w1 = -xi * (xi + 1.0) * (xi - 2.0) / 2.0
    w2 = xi * (xi * xi - 1.0) / 6.0
    return wm1, w0, w1, w2


class UniformGridField:
    """Scalar/tensor-valued field sampled on a uniform box grid at stored times.

    values has shape (n_times, n, ..., n  [d axes], *comp) where comp is the
    per-node component shape (e.g. (d,) for a vector field).
    """

    def __init__(self, times: np.ndarray, origin: np.ndarray, h: float,
                 values: np.ndarray, ncomp_dims: int):
        self.times = np.asarray(times, dtype=float)
        self.origin = np.atleast_1d(np.asarray(origin, dtype=float))
        self.h = float(h)
        self.values = values
        self.ncomp_dims = ncomp_dims
        self.d = self.origin.size
        self.npts = values.shape[1]
        if self.d not in (1, 2):
            raise NotImplementedError("uniform grid interpolation supports d in {1, 2}")

    @property
    def box_min(self) -> np.ndarray:
        return self.origin

    @property
    def box_max(self) -> np.ndarray:
        return self.origin + (self.npts - 1) * self.h

    def time_bracket(self, t: float) -> tuple[int, int, float]:
        """Locate t between stored nodes; returns (k0, k1, weight on k1)."""
        times = self.times
        if t <= times[0]:
            return 0, 0, 0.0
        if t >= times[-1]:
            n = len(times) - 1
            return n, n, 0.0
        k = int(np.searchsorted(times, t, side="right")) - 1
        dt = times[k + 1] - times[k]
        w = (t - times[k]) / dt
        if w < 1e-12:
            return k, k, 0.0
        if w > 1.0 - 1e-12:
            return k + 1, k + 1, 0.0
        return k, k + 1, w

    def _space_indices(self, pts: np.ndarray, check: bool) -> tuple[np.ndarray, np.ndarray]:
        rel = (pts - self.origin) / self.h
        if check:
            lo, hi = -1e-9, self.npts - 1 + 1e-9
            if np.any(rel < lo) or np.any(rel > hi):
                bad = pts[np.any((rel < lo) | (rel > hi), axis=-1)]
                raise OutOfDomainError(
                    f"{bad.shape[0]} point(s) outside grid box, first: {bad.reshape(-1, self.d)[0]}"
                )
        j = np.clip(np.floor(rel).astype(np.int64), 1, self.npts - 3)
        xi = rel - j
        return j, xi

    def _interp_slice(self, k: int, j: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Cubic interpolation of the time-slice k at prelocated points."""
        v = self.values
        comp_pad = (np.newaxis,) * self.ncomp_dims
        if self.d == 1:
            jx, xix = j[..., 0], xi[..., 0]
            ws = cubic_weights(xix)
            out = None
            for m, w in zip((-1, 0, 1, 2), ws):
                term = v[k, jx + m] * w[(...,) + comp_pad]
                out = term if out is None else out + term
            return out
        jx, jy = j[..., 0], j[..., 1]
        wxs = cubic_weights(xi[..., 0])
        wys = cubic_weights(xi[..., 1])
        out = None
        for m, wx in zip((-1, 0, 1, 2), wxs):
            row = None
            for l, wy in zip((-1, 0, 1, 2), wys):
                term = v[k, jx + m, jy + l] * wy[(...,) + comp_pad]
                row = term if row is None else row + term
            term = row * wx[(...,) + comp_pad]
            out = term if out is None else out + term
        return out

    def at(self, t: float, pts: np.ndarray, check: bool = True) -> np.ndarray:
        """Evaluate at time t and points pts of shape (..., d)."""
        pts = np.asarray(pts, dtype=float)
        j, xi = self._space_indices(pts, check)
        k0, k1, w = self.time_bracket(t)
        a = self._interp_slice(k0, j, xi)
        if k1 == k0:
            return a
        b = self._interp_slice(k1, j, xi)
        return a * (1.0 - w) + b * w
