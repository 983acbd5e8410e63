"""Reference problems with known marginals and a 1-D finite-volume solver.

Scenarios bundle coefficients, a jump kernel and an initial law.  Exact
marginals, where available, are returned as clouds: atoms for the ODE and
compound-Poisson cases, and a fine lattice law for the Ornstein-Uhlenbeck
process driven by unit jumps (compound Poisson with exponentially damped
marks, computed by FFT and convolved with the Gaussian part).

The grid solver discretizes the forward equation for cell masses: upwind
drift with cell-centre velocities, a central flux for the diffusion term
``(1/2) d^2/dx^2 (a f)``, no-flux walls, and jump mass leaving cell i at
rate ``nu_j kappa(t, w_j, x_i)`` and landing linearly split between the two
cells around ``x_i + g(t, w_j, x_i)``.  Landings outside [-L, L] leak.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr
from scipy.stats import poisson

from .empirical import MarginalFlow, ProbCloud
from .model import CoefficientSet, DomainError, JumpKernel, no_jumps

Array = np.ndarray


class UnknownScenario(KeyError):
    def __init__(self, name):
        super().__init__(f"unknown scenario {name!r}; registered: {', '.join(list_scenarios())}")


class StabilityError(ValueError):
    def __init__(self, dt: float, suggested: float):
        super().__init__(f"explicit step dt={dt:g} violates the stability bound; use dt <= {suggested:.6g}")
        self.dt, self.suggested = dt, suggested


@dataclass
class Scenario:
    name: str
    coeffs: CoefficientSet
    kernel: JumpKernel
    initial: ProbCloud
    exact_marginal: Optional[Callable[[float], ProbCloud]] = None
    exact_mean: Optional[Callable[[float], float]] = None
    notes: str = ""
    # discretization budgets per unit grid step and unit test-function scale
    residual_bias: float = 0.0
    martingale_bias: float = 0.0
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.coeffs.dim

    @property
    def horizon(self) -> float:
        return self.coeffs.horizon

    def exact_flow(self, grid) -> MarginalFlow:
        if self.exact_marginal is None:
            raise DomainError(f"scenario {self.name!r} has no exact marginal")
        return MarginalFlow.from_function(grid, self.exact_marginal)


# --- kernels -------------------------------------------------------------------------


def _mark_shift(t, w, x):
    return np.broadcast_to(np.asarray(w, dtype=float).reshape(-1, 1), x.shape)


def _unit_rate(t, w, x):
    return np.ones(x.shape[0])


def unit_jumps(rate: float) -> JumpKernel:
    """+1 jumps at constant rate."""
    return JumpKernel(1, np.array([rate]), np.array([1.0]), _mark_shift, _unit_rate, 1.0)


def _lorentz_rate(t, w, x):
    return 1.0 / (1.0 + x[:, 0] ** 2)


def _zero_drift(t, x):
    return np.zeros_like(x)


def _neg_drift(t, x):
    return -x


def _rough_drift(t, x):
    return np.sign(x) - x


def _const_diffusion(level: float):
    def sigma(t, x):
        return np.full((x.shape[0], 1, 1), level)

    return sigma


# --- exact marginals ---------------------------------------------------------------


def poisson_cloud(mean: float, shift: float = 0.0, step: float = 1.0, tail: float = 1e-12) -> ProbCloud:
    """Atoms shift + k*step with Poisson(mean) weights, truncated where the tail is < ``tail``."""
    if mean <= 0:
        return ProbCloud.dirac([shift])
    kmax = int(poisson.isf(tail, mean)) + 1
    k = np.arange(kmax + 1)
    p = poisson.pmf(k, mean)
    keep = p > 0
    p = p[keep] / p[keep].sum()
    return ProbCloud((shift + step * k[keep])[:, None], p)


def _hat_masses(values: Array, weights: Array, origin: float, h: float, size: int) -> Array:
    """Mean-preserving linear split of weighted points onto a lattice origin + h*k."""
    pos = (values - origin) / h
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    out = np.bincount(np.clip(lo, 0, size - 1), weights * (1 - frac), minlength=size)
    out += np.bincount(np.clip(lo + 1, 0, size - 1), weights * frac, minlength=size)
    return out[:size]


def coarsen(points: Array, masses: Array, width: float, drop_below: float = 0.0) -> ProbCloud:
    """Bin 1-D masses into cells of ``width`` placed at their barycentres."""
    keep = masses > drop_below
    points, masses = points[keep], masses[keep]
    b = np.floor(points / width).astype(np.int64)
    uniq, inv = np.unique(b, return_inverse=True)
    m = np.bincount(inv, masses)
    bary = np.bincount(inv, masses * points) / m
    ok = m > 0
    return ProbCloud(bary[ok][:, None], m[ok] / m[ok].sum())


def ou_jump_lattice(t: float, rate: float, x0: ProbCloud, h: float = 1e-3, n_quantiles: int = 200_000):
    """Law of X_t for dX = -X dt + dB + dN (N Poisson of ``rate``, unit jumps) on a lattice of step h.

    Returns (lattice points, masses).  The jump part sum_i exp(-(t - tau_i))
    is compound Poisson with marks exp(-U), U ~ Uniform[0, t]; its lattice law
    comes from the FFT of the hat-discretized mark law.  The Gaussian part has
    variance (1 - e^{-2t})/2.
    """
    lam = rate * t
    var = 0.5 * (1.0 - np.exp(-2.0 * t))
    s = np.sqrt(var)
    nmax = int(poisson.isf(1e-14, lam)) + 2 if lam > 0 else 0
    n_jump = int(np.ceil(nmax / h)) + 2
    pad = int(np.ceil(9.0 * s / h)) + 2
    size = 1 << int(np.ceil(np.log2(n_jump + 2 * pad + 8)))
    if lam > 0:
        q = (np.arange(n_quantiles) + 0.5) / n_quantiles
        marks = np.exp(-t * q)
        mark_law = _hat_masses(marks, np.full(n_quantiles, 1.0 / n_quantiles), 0.0, h, size)
        jump = np.fft.irfft(np.exp(lam * (np.fft.rfft(mark_law) - 1.0)), n=size)
    else:
        jump = np.zeros(size)
        jump[0] = 1.0
    if s > 0:
        # Gaussian lattice masses centred at index `pad` (cell integrals of the density)
        k = np.arange(-pad, pad + 1)
        gm = ndtr((k + 0.5) * h / s) - ndtr((k - 0.5) * h / s)
        gauss = np.zeros(size)
        gauss[: gm.size] = gm / gm.sum()
        law = np.fft.irfft(np.fft.rfft(jump) * np.fft.rfft(gauss), n=size)
        origin = -pad * h
    else:
        law, origin = jump, 0.0
    law = np.where(law > 1e-300, law, 0.0)
    law /= law.sum()
    pts = origin + h * np.arange(size)
    decay = np.exp(-t)
    all_pts, all_m = [], []
    for x, w in zip(x0.points[:, 0], x0.weights):
        all_pts.append(pts + decay * x)
        all_m.append(w * law)
    return np.concatenate(all_pts), np.concatenate(all_m)


# --- registry -----------------------------------------------------------------------


def _pure_drift(horizon: float = 1.0) -> Scenario:
    x0 = 2.0
    return Scenario(
        "pure-drift",
        CoefficientSet(1, _neg_drift, _const_diffusion(0.0), horizon),
        no_jumps(1),
        ProbCloud.dirac([x0]),
        exact_marginal=lambda t: ProbCloud.dirac([x0 * np.exp(-t)]),
        exact_mean=lambda t: x0 * np.exp(-t),
        notes="ODE flow; deterministic paths; checks drift discretization order",
        residual_bias=0.5,
        martingale_bias=0.5,
    )


def _compound_poisson(horizon: float = 1.0) -> Scenario:
    return Scenario(
        "compound-poisson",
        CoefficientSet(1, _zero_drift, _const_diffusion(0.0), horizon),
        unit_jumps(1.0),
        ProbCloud.dirac([0.0]),
        exact_marginal=lambda t: poisson_cloud(t),
        exact_mean=lambda t: t,
        notes="pure jump chain; exact thinning; Poisson pmf marginals",
        residual_bias=0.5,
        martingale_bias=0.5,
    )


def _ou_jump(horizon: float = 1.0, rate: float = 1.0, resolution: float = 0.05) -> Scenario:
    init = ProbCloud.dirac([0.0])

    @lru_cache(maxsize=4096)
    def marginal(t: float) -> ProbCloud:
        if t <= 0:
            return init
        pts, m = ou_jump_lattice(t, rate, init)
        return coarsen(pts, m, resolution, drop_below=1e-15)

    return Scenario(
        "ou-jump",
        CoefficientSet(1, _neg_drift, _const_diffusion(1.0), horizon),
        unit_jumps(rate),
        init,
        exact_marginal=lambda t: marginal(float(t)),
        exact_mean=lambda t: rate * (1.0 - np.exp(-t)),
        notes="linear drift, unit diffusion and unit jumps; lattice-exact marginals",
        residual_bias=0.5,
        martingale_bias=0.5,
        params={"rate": rate, "resolution": resolution},
    )


def _rough(horizon: float = 1.0) -> Scenario:
    kernel = JumpKernel(1, np.array([0.25, 0.25]), np.array([1.0, -1.0]), _mark_shift, _unit_rate, 1.0)
    return Scenario(
        "rough-drift",
        CoefficientSet(1, _rough_drift, _const_diffusion(1.0), horizon),
        kernel,
        ProbCloud.dirac([0.25]),
        notes="discontinuous drift sign(x) - x; symmetric +-1 jumps; no closed form",
        residual_bias=0.5,
        martingale_bias=0.5,
    )


def _two_sided(horizon: float = 1.0) -> Scenario:
    kernel = JumpKernel(1, np.array([1.0, 1.0]), np.array([1.0, -1.0]), _mark_shift, _lorentz_rate, 1.0)
    return Scenario(
        "two-sided-jumps",
        CoefficientSet(1, _zero_drift, _const_diffusion(0.5), horizon),
        kernel,
        ProbCloud.dirac([0.0]),
        notes="+-1 jumps at state-dependent rate 1/(1+x^2); exercises thinning",
        residual_bias=0.5,
        martingale_bias=0.5,
    )


_REGISTRY: dict[str, Callable[..., Scenario]] = {
    "pure-drift": _pure_drift,
    "compound-poisson": _compound_poisson,
    "ou-jump": _ou_jump,
    "rough-drift": _rough,
    "two-sided-jumps": _two_sided,
}


def list_scenarios() -> list[str]:
    return list(_REGISTRY)


def scenario(name: str, **params) -> Scenario:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UnknownScenario(name) from None
    return factory(**params)


def fit_bias_constant(residuals_by_dt: dict, scale: float = 1.0) -> tuple[float, float]:
    """(C, halving ratio) from |residual| at successive step sizes.

    C = max |R| / (dt * scale); the ratio compares the two finest steps.
    """
    dts = sorted(residuals_by_dt, reverse=True)
    vals = [abs(residuals_by_dt[d]) for d in dts]
    C = max(v / (d * scale) for v, d in zip(vals, dts))
    ratio = vals[-1] / vals[-2] if len(vals) > 1 and vals[-2] > 0 else float("nan")
    return float(C), float(ratio)


# --- grid solver ----------------------------------------------------------------------


@dataclass
class GridDensity:
    L: float
    M: int
    density: Array  # cell averages
    leaked_mass: float = 0.0
    clipped_mass: float = 0.0
    t: float = 0.0

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.M

    @property
    def centers(self) -> Array:
        return -self.L + self.dx * (np.arange(self.M) + 0.5)

    @property
    def masses(self) -> Array:
        return self.density * self.dx

    def mass_defect(self) -> float:
        return float(abs(self.masses.sum() + self.leaked_mass - 1.0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["cell_center", "density"])
            for c, v in zip(self.centers, self.density):
                wr.writerow([repr(float(c)), repr(float(v))])


@dataclass
class GridFlow:
    times: Array
    densities: list

    def to_flow(self, coarsen_width: Optional[float] = None, drop_below: float = 0.0) -> MarginalFlow:
        return MarginalFlow(self.times, [grid_to_cloud(g, coarsen_width, drop_below) for g in self.densities])

    def at(self, t: float) -> GridDensity:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise DomainError(f"t={t} is not an output time")
        return self.densities[k]


def _deposit(masses: Array, y: Array, L: float, M: int) -> tuple[Array, float]:
    """Linear two-cell split of point masses at y; mass landing outside [-L, L] leaks."""
    dx = 2.0 * L / M
    inside = (y >= -L) & (y <= L)
    leaked = float(masses[~inside].sum())
    pos = np.clip((y[inside] + L) / dx - 0.5, 0.0, M - 1.0)
    lo = np.minimum(np.floor(pos).astype(np.int64), M - 2) if M > 1 else np.zeros(pos.size, np.int64)
    frac = pos - lo
    mi = masses[inside]
    out = np.bincount(lo, mi * (1.0 - frac), minlength=M)
    if M > 1:
        out += np.bincount(lo + 1, mi * frac, minlength=M)
    return out, leaked


def initial_grid(cloud: ProbCloud, L: float, M: int) -> GridDensity:
    if cloud.dim != 1:
        raise DomainError("the grid solver is one-dimensional")
    m, leaked = _deposit(cloud.weights.copy(), cloud.points[:, 0], L, M)
    dx = 2.0 * L / M
    return GridDensity(L, M, m / dx, leaked, 0.0, 0.0)


def stable_dt(sc: Scenario, L: float, M: int, t: float = 0.0, safety: float = 0.9) -> float:
    """Largest dt with dt (max Lambda + 2 max a / dx^2 + max |b| / dx) <= safety."""
    g = GridDensity(L, M, np.zeros(M))
    x = g.centers[:, None]
    dx = g.dx
    ts = np.linspace(0.0, sc.horizon, 5) if t is None else [t]
    worst = 0.0
    for tt in ts:
        b = sc.coeffs.b(tt, x)[:, 0]
        a = sc.coeffs.a(tt, x)[:, 0, 0]
        lam = np.zeros(M)
        for j in range(sc.kernel.n_marks):
            lam += sc.kernel.weights[j] * sc.kernel.kappa(tt, sc.kernel.mark_batch(j, M), x)
        worst = max(worst, lam.max() + 2.0 * a.max() / dx**2 + np.abs(b).max() / dx)
    return safety / worst if worst > 0 else np.inf


def fp_grid_solve(sc: Scenario, L: float, M: int, t_end: float, dt: float, output_times=None, initial=None) -> GridFlow:
    """Explicit finite-volume solution of the forward equation on [-L, L] with M cells.

    ``output_times`` (default: 0 and t_end) are hit exactly by shortening the
    step inside each output interval.  Raises :class:`StabilityError` with a
    suggested step if ``dt`` breaks the explicit stability bound.
    """
    if sc.dim != 1:
        raise DomainError("the grid solver is one-dimensional")
    if not (0 < t_end <= sc.horizon + 1e-12):
        raise DomainError("t_end must lie in (0, T]")
    limit = min(stable_dt(sc, L, M, t) for t in np.linspace(0.0, t_end, 5))
    if dt > limit * (1 + 1e-12):
        raise StabilityError(dt, limit)
    times = np.array(sorted({0.0, float(t_end)} | set(map(float, output_times or []))))
    if times[0] < 0 or times[-1] > t_end + 1e-12:
        raise DomainError("output times must lie in [0, t_end]")
    g = initial_grid(sc.initial if initial is None else initial, L, M)
    dx = g.dx
    x = g.centers[:, None]
    m = g.masses
    leaked, clipped = g.leaked_mass, 0.0
    kernel, coeffs = sc.kernel, sc.coeffs
    out = [GridDensity(L, M, m / dx, leaked, clipped, 0.0)]
    t = 0.0
    for t_next in times[1:]:
        n = max(1, int(np.ceil((t_next - t) / dt - 1e-9)))
        h = (t_next - t) / n
        for _ in range(n):
            b = coeffs.b(t, x)[:, 0]
            a = coeffs.a(t, x)[:, 0, 0]
            f = m / dx
            flux = np.zeros(M + 1)  # mass flux through faces, left to right; walls stay zero
            flux[1:-1] = np.maximum(b[:-1], 0.0) * f[:-1] - np.maximum(-b[1:], 0.0) * f[1:]
            af = a * f
            flux[1:-1] -= 0.5 * (af[1:] - af[:-1]) / dx
            new = m - h * (flux[1:] - flux[:-1])
            for j in range(kernel.n_marks):
                w = kernel.mark_batch(j, M)
                rate = kernel.weights[j] * kernel.kappa(t, w, x)
                if not np.any(rate):
                    continue
                move = h * rate * m
                new -= move
                dep, lost = _deposit(move, x[:, 0] + kernel.g(t, w, x)[:, 0], L, M)
                new += dep
                leaked += lost
            neg = new < 0
            if neg.any():
                clipped += float(-new[neg].sum())
                new[neg] = 0.0
            m = new
            t += h
        t = float(t_next)
        out.append(GridDensity(L, M, m / dx, leaked, clipped, t))
    if clipped >= 1e-8:
        warnings.warn(f"grid solver clipped {clipped:.3g} mass", RuntimeWarning, stacklevel=2)
    return GridFlow(times, out)


def grid_to_cloud(g: GridDensity, coarsen_width: Optional[float] = None, drop_below: float = 0.0) -> ProbCloud:
    """Atoms at cell centres weighted by renormalized cell masses (optionally binned)."""
    if g.leaked_mass >= 0.01:
        warnings.warn(f"leaked mass {g.leaked_mass:.3g} >= 0.01", RuntimeWarning, stacklevel=2)
    m = g.masses
    if coarsen_width is not None:
        return coarsen(g.centers, m, coarsen_width, drop_below)
    keep = m > drop_below
    if not keep.any():
        raise DomainError("grid density carries no mass")
    return ProbCloud(g.centers[keep][:, None], m[keep] / m[keep].sum())


def write_grid_flow(flow: GridFlow, directory, stem: str = "density") -> list:
    """One CSV per output time; returns the written paths."""
    import os

    paths = []
    for t, g in zip(flow.times, flow.densities):
        p = os.path.join(directory, f"{stem}_t{t:.6g}.csv")
        g.to_csv(p)
        paths.append(p)
    return paths
