"""Coefficient fields, thinned jump kernels and growth audits.

Coefficient callables are vectorized over a batch of states:

* ``drift(t, x)``: ``x`` of shape (n, d) -> (n, d)
* ``diffusion(t, x)``: (n, d) -> (n, d, d), the matrix sigma (not sigma sigma*)
* ``jump_map(t, w, x)``: mark labels ``w`` of shape (n, ...) -> (n, d)
* ``rate(t, w, x)``: -> (n,), with ``0 <= rate <= rate_majorant``

``t`` is either a float or an array broadcastable against the batch.  No
continuity is assumed anywhere: the coefficients may be merely measurable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .rng import PathStreams, Tag

Array = np.ndarray


class DomainError(ValueError):
    """Raised for arguments outside the domain of an operation."""


def as_batch(x, dim: int) -> tuple[Array, bool]:
    """Return ``x`` as an (n, dim) float array and whether it was a single state."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[-1] != dim:
        raise DomainError(f"expected states of dimension {dim}, got shape {np.shape(x)}")
    return arr, single


@dataclass(frozen=True)
class CoefficientSet:
    dim: int
    drift: Callable
    diffusion: Callable
    horizon: float

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("dim must be a positive integer")
        if not self.horizon > 0:
            raise DomainError("horizon must be positive")

    def check_time(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.horizon + 1e-12) or np.any(~np.isfinite(t)):
            raise DomainError(f"time outside [0, {self.horizon}]")

    def b(self, t, x: Array) -> Array:
        return np.asarray(self.drift(t, x), dtype=float).reshape(x.shape[0], self.dim)

    def sigma(self, t, x: Array) -> Array:
        return np.asarray(self.diffusion(t, x), dtype=float).reshape(x.shape[0], self.dim, self.dim)

    def a(self, t, x: Array) -> Array:
        s = self.sigma(t, x)
        return s @ np.swapaxes(s, -1, -2)


@dataclass(frozen=True)
class JumpKernel:
    """Jump measure in thinned form: at rate ``rate(t,w,x) nu(dw)`` jump by ``jump_map(t,w,x)``.

    With ``sampler=None`` the mark measure is the finite atomic measure
    ``sum_j weights[j] delta_{labels[j]}``.  For a continuous mark measure,
    ``sampler(u)`` maps uniforms to exact draws from ``nu / total_mass`` and
    ``labels``/``weights`` are a quadrature rule used by the operators.
    """

    dim: int
    weights: Array
    labels: Array
    jump_map: Callable
    rate: Callable
    rate_majorant: float
    sampler: Optional[Callable] = None
    total_mass: Optional[float] = None
    _cum: Array = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        labels = np.asarray(self.labels)
        if labels.shape[:1] != w.shape:
            raise DomainError("labels and weights must have the same leading length")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise DomainError("mark weights must be positive and finite")
        if not (np.isfinite(self.rate_majorant) and self.rate_majorant >= 0):
            raise DomainError("rate majorant must be finite and nonnegative")
        mass = float(w.sum()) if self.total_mass is None else float(self.total_mass)
        if not np.isfinite(mass) or mass < 0:
            raise DomainError("total mark mass must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "total_mass", mass)
        cum = np.cumsum(w) / w.sum() if w.size else w
        object.__setattr__(self, "_cum", cum)

    @property
    def n_marks(self) -> int:
        return self.weights.size

    @property
    def candidate_rate(self) -> float:
        """nu(F) * rate majorant: the dominating Poisson rate used for thinning."""
        return self.total_mass * self.rate_majorant

    def mark_batch(self, j: int, n: int) -> Array:
        return np.repeat(self.labels[j : j + 1], n, axis=0)

    def draw_marks(self, u: Array) -> tuple[Array, Array]:
        """Map uniforms to (mark index, mark label); index is -1 for sampled continuous marks."""
        u = np.asarray(u, dtype=float)
        if self.sampler is not None:
            return np.full(u.shape, -1, dtype=np.int64), np.asarray(self.sampler(u))
        idx = np.minimum(np.searchsorted(self._cum, u, side="right"), self.n_marks - 1)
        return idx, self.labels[idx]

    def g(self, t, w, x: Array) -> Array:
        return np.asarray(self.jump_map(t, w, x), dtype=float).reshape(x.shape[0], self.dim)

    def kappa(self, t, w, x: Array) -> Array:
        return np.broadcast_to(np.asarray(self.rate(t, w, x), dtype=float), (x.shape[0],))


def no_jumps(dim: int) -> JumpKernel:
    """Kernel with zero candidate intensity."""
    return JumpKernel(
        dim=dim,
        weights=np.ones(1),
        labels=np.zeros(1),
        jump_map=lambda t, w, x: np.zeros_like(x),
        rate=lambda t, w, x: np.zeros(x.shape[0]),
        rate_majorant=0.0,
    )


def eval_generator_coeffs(coeffs: CoefficientSet, t: float, x):
    """Drift vector and diffusion matrix ``a = sigma sigma*`` at (t, x)."""
    coeffs.check_time(t)
    xb, single = as_batch(x, coeffs.dim)
    b, a = coeffs.b(t, xb), coeffs.a(t, xb)
    return (b[0], a[0]) if single else (b, a)


def jump_intensity(kernel: JumpKernel, t: float, x, horizon: Optional[float] = None):
    """Total accepted jump rate ``sum_j nu_j kappa(t, w_j, x)``."""
    if horizon is not None and not (0 <= t <= horizon):
        raise DomainError(f"time outside [0, {horizon}]")
    xb, single = as_batch(x, kernel.dim)
    lam = np.zeros(xb.shape[0])
    for j in range(kernel.n_marks):
        lam += kernel.weights[j] * kernel.kappa(t, kernel.mark_batch(j, xb.shape[0]), xb)
    return lam[0] if single else lam


def mean_jump_magnitude(kernel: JumpKernel, t: float, x, horizon: Optional[float] = None):
    """``sum_j nu_j |g(t,w_j,x)| kappa(t,w_j,x)``, i.e. the integral of |h| against mu."""
    if horizon is not None and not (0 <= t <= horizon):
        raise DomainError(f"time outside [0, {horizon}]")
    xb, single = as_batch(x, kernel.dim)
    total = np.zeros(xb.shape[0])
    for j in range(kernel.n_marks):
        w = kernel.mark_batch(j, xb.shape[0])
        total += kernel.weights[j] * np.linalg.norm(kernel.g(t, w, xb), axis=1) * kernel.kappa(t, w, xb)
    return total[0] if single else total


@dataclass(frozen=True)
class ProbeSpec:
    times: tuple
    radii: tuple
    samples_per_radius: int
    seed: int = 0

    def __post_init__(self):
        if not self.times or not self.radii or self.samples_per_radius < 1:
            raise DomainError("probe spec must be nonempty")


def probe_points(spec: ProbeSpec, dim: int) -> tuple[Array, Array]:
    """Probe (t, x) pairs: uniform-in-ball states per radius times the t-grid.

    Sample ``i`` of radius ``r`` depends only on (seed, i, r), so a larger
    ``samples_per_radius`` extends the same probe set.
    """
    streams = PathStreams(spec.seed)
    idx = np.arange(spec.samples_per_radius)
    ts, xs = [], []
    for r_i, radius in enumerate(spec.radii):
        direction = streams.normal_vectors(idx, r_i, Tag.PROBE, dim, sub=0)
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        direction = direction / np.where(norms > 0, norms, 1.0)
        scale = streams.uniform(idx, r_i, Tag.PROBE, sub=dim) ** (1.0 / dim)
        pts = radius * scale[:, None] * direction
        for t in spec.times:
            ts.append(np.full(pts.shape[0], float(t)))
            xs.append(pts)
    return np.concatenate(ts), np.concatenate(xs)


@dataclass
class GrowthReport:
    constant_estimate: float
    probe_count: int
    worst_point: tuple
    components: dict
    nonfinite_points: list

    @property
    def passed(self) -> bool:
        return bool(not self.nonfinite_points and np.isfinite(self.constant_estimate))

    def to_dict(self) -> dict:
        t, x = self.worst_point
        return {
            "constant_estimate": self.constant_estimate,
            "probe_count": self.probe_count,
            "worst_point": {"t": t, "x": list(map(float, np.atleast_1d(x)))},
            "components": self.components,
            "nonfinite_points": [
                {"t": float(pt), "x": list(map(float, np.atleast_1d(px)))} for pt, px in self.nonfinite_points
            ],
            "passed": self.passed,
        }


def growth_terms(coeffs: CoefficientSet, kernel: JumpKernel, t: float, x: Array) -> tuple[Array, Array, Array]:
    """|sigma|_F, |b| and the jump magnitude at a batch of states."""
    sig = np.linalg.norm(coeffs.sigma(t, x).reshape(x.shape[0], -1), axis=1)
    drift = np.linalg.norm(coeffs.b(t, x), axis=1)
    jump = mean_jump_magnitude(kernel, t, x)
    return sig, drift, np.atleast_1d(jump)


def audit_linear_growth(coeffs: CoefficientSet, kernel: JumpKernel, probe_spec: ProbeSpec) -> GrowthReport:
    """Estimate the smallest C with |sigma| + |b| + int|h| dmu <= C (1 + |x|) on the probes."""
    ts, xs = probe_points(probe_spec, coeffs.dim)
    best, worst = 0.0, (float(ts[0]), xs[0].copy())
    comp = {"sigma": 0.0, "drift": 0.0, "jump": 0.0}
    bad = []
    for t in np.unique(ts):
        sel = ts == t
        x = xs[sel]
        sig, drift, jump = growth_terms(coeffs, kernel, float(t), x)
        total = sig + drift + jump
        finite = np.isfinite(total)
        for i in np.flatnonzero(~finite):
            bad.append((float(t), x[i].copy()))
        if not finite.any():
            continue
        denom = 1.0 + np.linalg.norm(x, axis=1)
        ratio = np.where(finite, total / denom, -np.inf)
        i = int(np.argmax(ratio))
        if ratio[i] > best:
            best, worst = float(ratio[i]), (float(t), x[i].copy())
        for name, term in (("sigma", sig), ("drift", drift), ("jump", jump)):
            vals = np.where(finite, term / denom, 0.0)
            comp[name] = max(comp[name], float(vals.max()))
    return GrowthReport(best, int(ts.size), worst, comp, bad)
