"""Weighted particle measures, Gaussian mollification and Wasserstein-1.

Measures are finite weighted clouds, so every integral against ``f_t(dx)``
is an exact finite sum.  Ratios of Gaussians are formed from log-weights
with the row maximum subtracted, which keeps the tilt well defined even far
from the cloud where every kernel value underflows.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .model import CoefficientSet, DomainError, as_batch

Array = np.ndarray

WEIGHT_TOL = 1e-12
_CHUNK = 8192
_CELLS = 1 << 18  # tilt block size (rows x atoms) kept cache friendly


class UnsupportedDimension(DomainError):
    pass


class ProbCloud:
    """Weighted empirical probability measure on R^d (immutable)."""

    __slots__ = ("points", "weights", "n_samples")

    def __init__(self, points, weights=None, n_samples: Optional[int] = None):
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise DomainError("points must be a nonempty (n, d) array")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.array(weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise DomainError("one weight per point required")
        if np.any(w <= 0):
            raise DomainError("weights must be positive")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise DomainError(f"weights sum to {w.sum():.16g}, not 1")
        if not np.all(np.isfinite(pts)):
            raise DomainError("points must be finite")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        # number of iid samples behind an equal-weight cloud, when known
        object.__setattr__(self, "n_samples", n_samples)

    def __setattr__(self, name, value):
        raise AttributeError("ProbCloud is immutable")

    @classmethod
    def from_samples(cls, samples) -> "ProbCloud":
        pts = np.asarray(samples, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, None, n_samples=pts.shape[0])

    @classmethod
    def from_masses(cls, points, masses) -> "ProbCloud":
        """Renormalize nonnegative masses, dropping empty atoms."""
        masses = np.asarray(masses, dtype=float)
        pts = np.asarray(points, dtype=float)
        keep = masses > 0
        m = masses[keep]
        return cls(pts[keep], m / m.sum())

    @classmethod
    def dirac(cls, x) -> "ProbCloud":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"ProbCloud(size={self.size}, dim={self.dim})"

    def expect(self, values) -> Array:
        """Weighted sum of per-atom values along the first axis."""
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def mean(self) -> Array:
        return self.expect(self.points)

    def first_moment(self) -> float:
        return first_moment(self)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"x_{k + 1}" for k in range(self.dim)] + ["weight"])
            for p, w in zip(self.points, self.weights):
                wr.writerow([repr(float(v)) for v in p] + [repr(float(w))])

    @classmethod
    def from_csv(cls, path) -> "ProbCloud":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1])


def first_moment(cloud: ProbCloud) -> float:
    return float(cloud.weights @ np.linalg.norm(cloud.points, axis=1))


class MarginalFlow:
    """Clouds on a strictly increasing time grid, read as a left-continuous step function."""

    def __init__(self, grid, clouds: Sequence[ProbCloud], path_states: Optional[Array] = None):
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size != len(clouds):
            raise DomainError("need one cloud per grid time")
        if np.any(np.diff(grid) <= 0):
            raise DomainError("grid must be strictly increasing")
        self.grid = grid
        self.clouds = list(clouds)
        # (N, K+1, d) path states when the clouds are Monte Carlo marginals of one ensemble
        self.path_states = path_states

    @classmethod
    def from_function(cls, grid, marginal) -> "MarginalFlow":
        return cls(grid, [marginal(float(t)) for t in grid])

    @classmethod
    def from_ensemble(cls, ens) -> "MarginalFlow":
        clouds = [ProbCloud.from_samples(ens.states[:, k]) for k in range(ens.grid.size)]
        return cls(ens.grid, clouds, path_states=ens.states)

    @property
    def dim(self) -> int:
        return self.clouds[0].dim

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def index(self, t) -> Array:
        """Index of the largest grid time <= t (with a 1e-12 snap to grid points)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.grid, t + 1e-12, side="right") - 1
        if np.any(idx < 0):
            raise DomainError("time precedes the flow grid")
        return idx

    def on_grid(self, t) -> int:
        k = int(self.index(t))
        if abs(self.grid[k] - t) > 1e-9:
            raise DomainError(f"t={t} is not a grid time")
        return k

    def at(self, t) -> ProbCloud:
        return self.clouds[int(self.index(t))]

    def sup_first_moment(self) -> float:
        return max(first_moment(c) for c in self.clouds)


def gaussian_kernel(eps: float, v) -> Array:
    """Centered Gaussian density with covariance eps*I evaluated at v (last axis = coordinates)."""
    if not eps > 0:
        raise DomainError("eps must be positive")
    v = np.atleast_1d(np.asarray(v, dtype=float))
    d = v.shape[-1]
    return (2 * np.pi * eps) ** (-d / 2) * np.exp(-np.sum(v * v, axis=-1) / (2 * eps))


def _log_kernel_rows(points: Array, log_w: Array, eps: float, y: Array) -> Array:
    """log(w_i) - |x_i - y|^2 / (2 eps) for each row of y; shape (n_y, M)."""
    sq = np.zeros((y.shape[0], points.shape[0]))
    for k in range(points.shape[1]):
        diff = y[:, k : k + 1] - points[None, :, k]
        sq += diff * diff
    return log_w[None, :] - sq / (2.0 * eps)


def _tilt_logits(alpha: Array, beta: Array, y: Array) -> Array:
    """alpha_i + <beta_i, y>: the log tilt up to a per-row constant.

    Expanding |x_i - y|^2 leaves -|y|^2/(2 eps), which is the same for every
    atom and cancels when rows are normalized.
    """
    return y @ beta.T + alpha[None, :]


class MollifiedView:
    """The Gaussian smoothing of a cloud together with its tilt kernel.

    ``tilt(y)`` row ``i`` equals ``w_i F^eps(x_i, y)``, a probability vector.
    """

    def __init__(self, base: ProbCloud, eps: float):
        if not eps > 0:
            raise DomainError("eps must be positive")
        self.base = base
        self.eps = float(eps)
        self._log_w = np.log(base.weights)
        pts = base.points
        self._alpha = self._log_w - np.sum(pts * pts, axis=1) / (2.0 * self.eps)
        self._beta = pts / self.eps

    @property
    def dim(self) -> int:
        return self.base.dim

    def _rows(self, y):
        yb, single = as_batch(y, self.dim)
        return yb, single

    def log_density(self, y) -> Array:
        yb, single = self._rows(y)
        d = self.dim
        out = np.empty(yb.shape[0])
        for s in range(0, yb.shape[0], _CHUNK):
            lk = _log_kernel_rows(self.base.points, self._log_w, self.eps, yb[s : s + _CHUNK])
            out[s : s + _CHUNK] = logsumexp(lk, axis=1)
        out -= 0.5 * d * np.log(2 * np.pi * self.eps)
        return out[0] if single else out

    def density(self, y) -> Array:
        return np.exp(self.log_density(y))

    def _kernel_block(self, yb: Array) -> Array:
        """Row-rescaled tilt weights exp(logit - row max) for a block of states."""
        lk = _tilt_logits(self._alpha, self._beta, yb)
        lk -= lk.max(axis=1, keepdims=True)
        # clamp so exp never produces subnormals; such weights are < 1e-260 anyway
        np.maximum(lk, -600.0, out=lk)
        return np.exp(lk, out=lk)

    def _blocks(self, n: int):
        step = max(1, _CELLS // self.base.size)
        return range(0, n, step), step

    def tilt(self, y) -> Array:
        """(n_y, M) matrix of tilt probabilities; each row sums to 1."""
        yb, single = self._rows(y)
        out = np.empty((yb.shape[0], self.base.size))
        starts, step = self._blocks(yb.shape[0])
        for s in starts:
            e = self._kernel_block(yb[s : s + step])
            e /= e.sum(axis=1, keepdims=True)
            out[s : s + step] = e
        return out[0] if single else out

    def tilt_F(self, y) -> Array:
        """F^eps(x_i, y) = phi_eps(x_i - y) / f^eps(y) (without the cloud weight)."""
        return self.tilt(y) / self.base.weights

    def averaged(self, y, values: Array) -> Array:
        """Tilt average of per-atom values (first axis = atoms)."""
        yb, single = self._rows(y)
        values = np.asarray(values, dtype=float)
        flat = values.reshape(values.shape[0], -1)
        aug = np.column_stack([flat, np.ones(flat.shape[0])])
        out = np.empty((yb.shape[0], flat.shape[1]))
        starts, step = self._blocks(yb.shape[0])
        for s in starts:
            r = self._kernel_block(yb[s : s + step]) @ aug
            out[s : s + step] = r[:, :-1] / r[:, -1:]
        out = out.reshape((yb.shape[0],) + values.shape[1:])
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        """n draws from the smoothed measure: atom ~ weights, plus sqrt(eps) N(0, I)."""
        idx = rng.choice(self.base.size, size=n, p=self.base.weights)
        return self.base.points[idx] + np.sqrt(self.eps) * rng.standard_normal((n, self.dim))

    def cdf(self, y) -> Array:
        """Distribution function of the smoothed measure (d = 1 only)."""
        if self.dim != 1:
            raise UnsupportedDimension("cdf is defined for d = 1")
        y = np.asarray(y, dtype=float).reshape(-1)
        x = self.base.points[:, 0]
        out = np.empty(y.size)
        s = np.sqrt(self.eps)
        for i in range(0, y.size, _CHUNK):
            out[i : i + _CHUNK] = ndtr((y[i : i + _CHUNK, None] - x[None, :]) / s) @ self.base.weights
        return out


def mollified_density(view: MollifiedView, y):
    return view.density(y)


def mollified_drift(view: MollifiedView, coeffs: CoefficientSet, t: float, y):
    """Tilt-weighted average of the drift over the cloud atoms."""
    coeffs.check_time(t)
    return view.averaged(y, coeffs.b(t, view.base.points))


def psd_sqrt(a: Array) -> Array:
    """Symmetric PSD square root of a batch of symmetric matrices (n, d, d)."""
    if a.shape[-1] == 1:
        return np.sqrt(np.maximum(a, 0.0))
    try:
        vals, vecs = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError(f"eigendecomposition failed for {a!r}") from exc
    root = np.sqrt(np.maximum(vals, 0.0))
    return (vecs * root[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def mollified_diffusion(view: MollifiedView, coeffs: CoefficientSet, t: float, y):
    """(a_eps, sigma_eps) with sigma_eps the PSD square root of a_eps."""
    coeffs.check_time(t)
    a_pts = coeffs.a(t, view.base.points)
    a_eps = view.averaged(y, a_pts)
    a_eps = 0.5 * (a_eps + np.swapaxes(a_eps, -1, -2))
    return a_eps, psd_sqrt(a_eps)


def tilt_distribution(view: MollifiedView, y) -> Array:
    return view.tilt(np.asarray(y, dtype=float))


def categorical(probs: Array, u: Array) -> Array:
    """Row-wise inverse-CDF draw: probs (n, M), u (n,) -> indices (n,)."""
    cum = np.cumsum(probs, axis=1)
    idx = (cum < (u * cum[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_tilted(view: MollifiedView, y, rng: np.random.Generator) -> Array:
    """Exact draw of a cloud atom from the tilt at y."""
    p = view.tilt(np.atleast_1d(np.asarray(y, dtype=float)))
    i = categorical(p[None, :], np.array([rng.random()]))[0]
    return view.base.points[i]


def _w1_sorted(xa, wa, xb, wb) -> float:
    xs = np.concatenate([xa, xb])
    order = np.argsort(xs, kind="mergesort")
    xs = xs[order]
    dw = np.concatenate([wa, -wb])[order]
    cdf_diff = np.cumsum(dw)[:-1]
    return float(np.sum(np.abs(cdf_diff) * np.diff(xs)))


def wasserstein1_1d(A: ProbCloud, B: ProbCloud) -> float:
    """Exact W1 between weighted 1-D clouds: integral of |F_A - F_B|."""
    if A.dim != 1 or B.dim != 1:
        raise UnsupportedDimension("wasserstein1_1d needs d = 1; use wasserstein1_marginals")
    return _w1_sorted(A.points[:, 0], A.weights, B.points[:, 0], B.weights)


def wasserstein1_marginals(A: ProbCloud, B: ProbCloud) -> float:
    """Max over coordinates of the exact 1-D W1 between coordinate marginals."""
    if A.dim != B.dim:
        raise DomainError("dimension mismatch")
    return max(
        _w1_sorted(A.points[:, k], A.weights, B.points[:, k], B.weights) for k in range(A.dim)
    )


def wasserstein1_to_mollified(A: ProbCloud, view: MollifiedView, n_grid: int = 40001) -> float:
    """W1 between a 1-D cloud and a smoothed cloud, by quadrature of |F_A - F_view|."""
    if A.dim != 1 or view.dim != 1:
        raise UnsupportedDimension("d = 1 only")
    s = np.sqrt(view.eps)
    lo = min(A.points.min(), view.base.points.min() - 12 * s)
    hi = max(A.points.max(), view.base.points.max() + 12 * s)
    grid = np.linspace(lo, hi, n_grid)
    order = np.argsort(A.points[:, 0])
    xa, cw = A.points[order, 0], np.cumsum(A.weights[order])
    k = np.searchsorted(xa, grid, side="right")
    fa = np.where(k > 0, cw[np.maximum(k - 1, 0)], 0.0)
    diff = np.abs(fa - view.cdf(grid))
    # step CDF: the integrand jumps at atoms, so trapezoid error is O(grid step)
    return float(np.trapezoid(diff, grid))
