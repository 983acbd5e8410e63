"""Monte Carlo paths for the jump SDE and its mollified counterpart.

Drift and diffusion use Euler-Maruyama.  Candidate jumps arrive on exact
exponential clocks at the dominating rate ``nu(F) * kappa_max`` and are
thinned, so the jump skeleton carries no time-discretization bias.  Between
recording times a path is advanced piecewise: up to each candidate time,
through the jump, then on to the next grid time, with coefficients frozen
at the left grid time and the current state.
"""
from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .empirical import MarginalFlow, MollifiedView, ProbCloud, categorical, psd_sqrt
from .model import CoefficientSet, DomainError, JumpKernel
from .rng import STREAM_RULE, PathStreams, Tag

Array = np.ndarray

DIVERGENCE_BOUND = 1e12
DEFAULT_CHUNK = 1 << 15


class ConfigurationError(ValueError):
    pass


class SimulationDiverged(RuntimeError):
    def __init__(self, count: int):
        super().__init__(f"{count} path(s) diverged (non-finite or |X| > {DIVERGENCE_BOUND:g})")
        self.count = count


def time_grid(horizon: float, dt: float) -> Array:
    k = int(round(horizon / dt))
    if k < 1 or abs(k * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigurationError(f"dt={dt} does not divide T={horizon}")
    return np.linspace(0.0, horizon, k + 1)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("JUMPFLOW_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PathEnsemble:
    grid: Array
    states: Array  # (N, K+1, d)
    seed: int
    n_jumps: Array  # accepted jumps per path
    diverged: Array  # bool per path
    epsilon: Optional[float] = None
    jump_log: Optional[dict] = None
    path_streams: str = STREAM_RULE
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def diverged_count(self) -> int:
        return int(self.diverged.sum())

    def time_index(self, t: float) -> int:
        k = int(np.searchsorted(self.grid, t + 1e-12, side="right") - 1)
        if k < 0 or t > self.grid[-1] + 1e-12:
            raise DomainError(f"t={t} outside the ensemble grid")
        return k

    def summary(self) -> dict:
        out = {
            "n_paths": self.n_paths,
            "grid": {"t0": float(self.grid[0]), "T": float(self.grid[-1]), "steps": int(self.grid.size - 1)},
            "sup_norm_moment": sup_norm_moment(self),
            "diverged_count": self.diverged_count,
            "seed": self.seed,
            "path_streams": self.path_streams,
        }
        if self.epsilon is not None:
            out["epsilon"] = self.epsilon
        out.update(self.meta)
        return out

    def to_csv(self, path, times=None) -> None:
        """Write ``path_id, t, x_1..x_d`` rows, optionally at a subset of grid times."""
        ks = range(self.grid.size) if times is None else sorted({self.time_index(t) for t in times})
        ks = list(ks)
        n, d = self.n_paths, self.dim
        with open(path, "w") as fh:
            fh.write(",".join(["path_id", "t"] + [f"x_{i + 1}" for i in range(d)]) + "\n")
            ids = np.arange(n)
            for k in ks:
                block = np.column_stack([ids, np.full(n, self.grid[k]), self.states[:, k, :]])
                fmt = ["%d"] + ["%.17g"] * (d + 1)
                np.savetxt(fh, block, delimiter=",", fmt=fmt)

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- shared engine -----------------------------------------------------------


class _Dynamics:
    """Interface used by the engine: Euler coefficients and jump execution."""

    dim: int
    candidate_rate: float

    def coefficients(self, t: float, x: Array, k: int) -> tuple[Array, Optional[Array]]:
        raise NotImplementedError

    def jump(self, tau: Array, x: Array, paths: Array, uniforms):
        """Given (mark, thinning, tilt) uniforms return (displacement, accepted mask, mark index)."""
        raise NotImplementedError


class _BaseDynamics(_Dynamics):
    def __init__(self, coeffs: CoefficientSet, kernel: JumpKernel):
        self.coeffs, self.kernel = coeffs, kernel
        self.dim = coeffs.dim
        self.candidate_rate = kernel.candidate_rate

    def coefficients(self, t, x, k):
        sig = self.coeffs.sigma(t, x)
        return self.coeffs.b(t, x), (sig if np.any(sig) else None)

    def jump(self, tau, x, paths, uniforms):
        kern = self.kernel
        u_mark, u, _ = uniforms
        idx, w = kern.draw_marks(u_mark)
        u = u * kern.rate_majorant
        accept = u <= kern.kappa(tau, w, x)
        disp = np.zeros_like(x)
        if accept.any():
            disp[accept] = kern.g(tau[accept], w[accept], x[accept])
        return disp, accept, idx


class _RegularizedDynamics(_Dynamics):
    def __init__(self, coeffs: CoefficientSet, kernel: JumpKernel, flow: MarginalFlow, eps: float):
        self.coeffs, self.kernel, self.flow, self.eps = coeffs, kernel, flow, eps
        self.dim = coeffs.dim
        self.candidate_rate = kernel.candidate_rate
        self._views = {}
        self._cache_key = None

    def view(self, j: int) -> MollifiedView:
        v = self._views.get(j)
        if v is None:
            v = self._views[j] = MollifiedView(self.flow.clouds[j], self.eps)
        return v

    def _atom_coeffs(self, t: float, j: int):
        if self._cache_key != (t, j):
            pts = self.flow.clouds[j].points
            b = self.coeffs.b(t, pts)
            a = self.coeffs.a(t, pts)
            self._atoms = (
                b,
                a.reshape(a.shape[0], -1),
                not np.any(b),
                bool(np.all(b == b[:1])),
                bool(np.all(a == a[:1])),
            )
            self._cache_key = (t, j)
        return self._atoms

    def coefficients(self, t, x, k):
        j = int(self.flow.index(t))
        b_pts, a_pts, b_zero, b_const, a_const = self._atom_coeffs(t, j)
        n, d = x.shape
        if b_const and a_const:
            b = np.broadcast_to(b_pts[0], (n, d)).copy()
            a = np.broadcast_to(a_pts[0], (n, d * d)).reshape(n, d, d)
        else:
            cols = ([] if b_const else [b_pts]) + ([] if a_const else [a_pts])
            avg = self.view(j).averaged(x, np.column_stack(cols))
            b = np.broadcast_to(b_pts[0], (n, d)).copy() if b_const else avg[:, :d]
            if a_const:
                a = np.broadcast_to(a_pts[0], (n, d * d)).reshape(n, d, d)
            else:
                a = avg[:, -d * d :].reshape(n, d, d)
                a = 0.5 * (a + np.swapaxes(a, -1, -2))
        if not np.any(a):
            return b, None
        return b, psd_sqrt(a)

    def jump(self, tau, x, paths, uniforms):
        kern = self.kernel
        u_mark, u, u_tilt = uniforms
        idx, w = kern.draw_marks(u_mark)
        anchors = np.empty_like(x)
        cloud_idx = self.flow.index(tau)
        for j in np.unique(cloud_idx):
            sel = cloud_idx == j
            view = self.view(int(j))
            pick = categorical(view.tilt(x[sel]), u_tilt[sel])
            anchors[sel] = view.base.points[pick]
        u = u * kern.rate_majorant
        accept = u <= kern.kappa(tau, w, anchors)
        disp = np.zeros_like(x)
        if accept.any():
            disp[accept] = kern.g(tau[accept], w[accept], anchors[accept])
        return disp, accept, idx


def _euler(dyn: _Dynamics, streams, t0, k, x, h, paths, xi_patch=None):
    """Euler step of length h (per path); ``xi_patch`` maps row mask -> normals for sub-stepped rows."""
    b, sig = dyn.coefficients(t0, x, k)
    out = x + b * h[:, None]
    if sig is not None:
        d = x.shape[1]
        if xi_patch is None:
            xi = streams.normal_vectors(paths, k, Tag.GAUSSIAN, d, 0)
        else:
            mask, values = xi_patch
            if mask.all():
                xi = values
            else:
                xi = streams.normal_vectors(paths, k, Tag.GAUSSIAN, d, 0)
                xi[mask] = values[mask]
        if d == 1:
            out += sig[:, 0, :] * xi * np.sqrt(h)[:, None]
        else:
            out += np.einsum("nij,nj->ni", sig, xi) * np.sqrt(h)[:, None]
    return out


def _run_chunk(dyn: _Dynamics, streams, grid, x0, paths, record_jumps, stride, out):
    n, d = x0.shape
    K = grid.size - 1
    x = x0.copy()
    out[:, 0] = x
    events = np.zeros(n, dtype=np.int64)
    n_jumps = np.zeros(n, dtype=np.int64)
    diverged = np.zeros(n, dtype=bool)
    log = {"path": [], "time": [], "mark": [], "displacement": []} if record_jumps else None
    rate = dyn.candidate_rate
    if rate > 0:
        clock = grid[0] + streams.exponential(paths, 0, Tag.CLOCK) / rate
    else:
        clock = np.full(n, np.inf)
    xi_next = np.zeros((n, d))
    for k in range(K):
        t0, t1 = grid[k], grid[k + 1]
        x_prev = x
        tcur = np.full(n, t0)
        sub = np.zeros(n, dtype=np.int64)
        hit = np.flatnonzero(clock <= t1)
        if hit.size:
            x = x.copy()
        while hit.size:
            tau, p, ev, sb = clock[hit], paths[hit], events[hit], sub[hit]
            # one cipher call per pass: normals for this piece and the next, jump draws, next clock
            reqs = [(p, k, Tag.GAUSSIAN, sb * d + c) for c in range(d)]
            reqs += [(p, k, Tag.GAUSSIAN, (sb + 1) * d + c) for c in range(d)]
            reqs += [(p, ev, Tag.MARK), (p, ev, Tag.THINNING), (p, ev, Tag.TILT), (p, ev + 1, Tag.CLOCK)]
            draws = streams.uniform_many(reqs)
            xi_now = ndtri(np.stack(draws[:d], axis=1))
            xi_next[hit] = ndtri(np.stack(draws[d : 2 * d], axis=1))
            u_mark, u_thin, u_tilt, u_clock = draws[2 * d :]
            xs = _euler(dyn, streams, t0, k, x[hit], tau - tcur[hit], p, (np.ones(hit.size, bool), xi_now))
            disp, acc, mark = dyn.jump(tau, xs, p, (u_mark, u_thin, u_tilt))
            x[hit] = xs + disp
            n_jumps[hit] += acc
            if log is not None and acc.any():
                log["path"].append(p[acc])
                log["time"].append(tau[acc])
                log["mark"].append(mark[acc])
                log["displacement"].append(disp[acc])
            tcur[hit] = tau
            sub[hit] += 1
            events[hit] += 1
            clock[hit] = tau - np.log(u_clock) / rate
            hit = hit[clock[hit] <= t1]
        moved = sub > 0
        x = _euler(dyn, streams, t0, k, x, t1 - tcur, paths, (moved, xi_next) if moved.any() else None)
        bad = ~np.all(np.isfinite(x), axis=1) | (np.abs(x).max(axis=1) > DIVERGENCE_BOUND)
        if bad.any():
            diverged |= bad
            # freeze diverged paths so they cannot poison vectorized evaluations
            x[bad] = x_prev[bad]
            clock[bad] = np.inf
        if (k + 1) % stride == 0:
            out[:, (k + 1) // stride] = x
    if log is not None:
        log = {
            key: (np.concatenate(v) if v else (np.empty((0, d)) if key == "displacement" else np.empty(0)))
            for key, v in log.items()
        }
    return n_jumps, diverged, log


def _initial_states(init, n, d, streams, paths):
    if isinstance(init, ProbCloud):
        if init.dim != d:
            raise ConfigurationError("initial cloud dimension mismatch")
        u = streams.uniform(paths, 0, Tag.INIT)
        cum = np.cumsum(init.weights)
        idx = np.minimum(np.searchsorted(cum, u * cum[-1], side="left"), init.size - 1)
        return init.points[idx].copy()
    if callable(init):
        x = np.asarray(init(streams.uniform_vectors(paths, 0, Tag.INIT, d)), dtype=float)
        return x.reshape(n, d)
    x = np.asarray(init, dtype=float)
    if x.ndim == 1 and x.size == d:
        return np.broadcast_to(x, (n, d)).copy()
    raise ConfigurationError("init must be a ProbCloud, a sampler or a single state")


def _simulate(dyn, init_fn, grid, n_paths, seed, opts, meta):
    grid = np.asarray(grid, dtype=float)
    if n_paths < 1:
        raise ConfigurationError("need at least one path")
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ConfigurationError("grid must be strictly increasing with at least two times")
    if not np.isfinite(dyn.candidate_rate):
        raise ConfigurationError("kernel must have a finite candidate intensity")
    stride = int(opts.get("record_stride", 1))
    if stride < 1 or (grid.size - 1) % stride:
        raise ConfigurationError("record_stride must divide the number of steps")
    chunk_size = int(opts.get("chunk_size", DEFAULT_CHUNK))
    record_jumps = bool(opts.get("record_jumps", False))
    streams = PathStreams(seed)
    rec_grid = grid[::stride]
    states = np.empty((n_paths, rec_grid.size, dyn.dim))
    bounds = [(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]

    def work(bound):
        paths = np.arange(*bound, dtype=np.int64)
        x0 = init_fn(paths, streams)
        return _run_chunk(dyn, streams, grid, x0, paths, record_jumps, stride, states[bound[0] : bound[1]])

    threads = opts.get("threads") or default_threads()
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]
    n_jumps = np.concatenate([p[0] for p in parts])
    diverged = np.concatenate([p[1] for p in parts])
    log = None
    if record_jumps:
        log = {key: np.concatenate([p[2][key] for p in parts]) for key in parts[0][2]}
    meta = dict(meta, step_dt=float(grid[1] - grid[0]), record_stride=stride)
    ens = PathEnsemble(rec_grid, states, int(seed), n_jumps, diverged, jump_log=log, meta=meta)
    if ens.diverged_count:
        if not opts.get("allow_divergence", False):
            raise SimulationDiverged(ens.diverged_count)
        warnings.warn(f"{ens.diverged_count} diverged path(s) excluded", RuntimeWarning, stacklevel=3)
        keep = ~diverged
        ens = PathEnsemble(rec_grid, states[keep], int(seed), n_jumps[keep], diverged, jump_log=log, meta=meta)
    return ens


def simulate_base_paths(
    coeffs: CoefficientSet,
    kernel: JumpKernel,
    init,
    grid,
    n_paths: int,
    seed: int,
    *,
    record_jumps: bool = False,
    record_stride: int = 1,
    allow_divergence: bool = False,
    threads: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> PathEnsemble:
    """Simulate ``n_paths`` paths of the jump SDE recorded on ``grid``.

    ``init`` is a ProbCloud, a single state, or a callable mapping an (n, d)
    array of uniforms to initial states.  States are kept every
    ``record_stride`` steps; the ensemble grid is the recorded sub-grid.
    """
    grid = np.asarray(grid, dtype=float)
    if grid[-1] > coeffs.horizon + 1e-12 or grid[0] < 0:
        raise ConfigurationError("grid exceeds the coefficient horizon")
    dyn = _BaseDynamics(coeffs, kernel)
    d = coeffs.dim

    def init_fn(paths, streams):
        return _initial_states(init, paths.size, d, streams, paths)

    opts = dict(
        record_jumps=record_jumps,
        record_stride=record_stride,
        allow_divergence=allow_divergence,
        threads=threads,
        chunk_size=chunk_size,
    )
    return _simulate(dyn, init_fn, grid, n_paths, seed, opts, {})


def simulate_regularized_paths(
    coeffs: CoefficientSet,
    kernel: JumpKernel,
    flow: MarginalFlow,
    eps: float,
    grid,
    n_paths: int,
    seed: int,
    *,
    record_jumps: bool = False,
    record_stride: int = 1,
    allow_divergence: bool = False,
    threads: Optional[int] = None,
    chunk_size: int = DEFAULT_CHUNK,
) -> PathEnsemble:
    """Simulate the SDE with mollified coefficients built from ``flow``.

    Drift and diffusion are the tilt averages of b and a over the flow cloud
    at the current time; each accepted jump is anchored at a cloud atom drawn
    from the tilt at the pre-jump state.  ``X_0 = x + sqrt(eps) N(0, I)`` with
    ``x`` drawn from the cloud at time 0.
    """
    grid = np.asarray(grid, dtype=float)
    if not 0 < eps < 1:
        raise ConfigurationError("eps must lie in (0, 1)")
    if flow.dim != coeffs.dim:
        raise ConfigurationError("flow dimension mismatch")
    k = flow.index(grid)
    if np.any(np.abs(flow.grid[k] - grid) > 1e-9) or flow.grid[0] > grid[0] + 1e-12:
        raise ConfigurationError("flow grid must contain every simulation grid time")
    dyn = _RegularizedDynamics(coeffs, kernel, flow, eps)
    d = coeffs.dim
    cloud0 = flow.at(grid[0])

    def init_fn(paths, streams):
        x = _initial_states(cloud0, paths.size, d, streams, paths)
        return x + np.sqrt(eps) * streams.normal_vectors(paths, 0, Tag.INIT_SMOOTH, d)

    opts = dict(
        record_jumps=record_jumps,
        record_stride=record_stride,
        allow_divergence=allow_divergence,
        threads=threads,
        chunk_size=chunk_size,
    )
    ens = _simulate(dyn, init_fn, grid, n_paths, seed, opts, {"epsilon": eps})
    ens.epsilon = float(eps)
    return ens


def marginal_at(ens: PathEnsemble, t: float) -> ProbCloud:
    """Equal-weight cloud of path states at the largest grid time <= t."""
    return ProbCloud.from_samples(ens.states[:, ens.time_index(t)])


def sup_norm_moment(ens: PathEnsemble) -> float:
    """Sample mean of max_k |X_{t_k}| over paths."""
    norms = np.linalg.norm(ens.states, axis=2)
    return float(np.mean(norms.max(axis=1)))


@dataclass
class AldousTable:
    table: dict  # (S, beta) -> E|X_{S+beta} - X_S|
    se: dict
    constant: float

    def rows(self):
        items = sorted(self.table.items(), key=lambda kv: (str(kv[0][0]), kv[0][1]))
        return [(s, b, v, self.se[(s, b)]) for (s, b), v in items]


def first_jump_anchors(ens: PathEnsemble, beta: float) -> Array:
    """Per-path anchor index: first accepted jump rounded up to the grid, capped at T - beta.

    Rounding a stopping time up to the next grid point keeps it a stopping
    time for the recorded filtration.
    """
    if ens.jump_log is None:
        raise ConfigurationError("first-jump anchors need record_jumps=True")
    T = ens.grid[-1]
    cap = ens.time_index(T - beta + 1e-12)
    first = np.full(ens.n_paths, np.inf)
    np.minimum.at(first, ens.jump_log["path"], ens.jump_log["time"])
    k = np.searchsorted(ens.grid, first - 1e-12, side="left")
    return np.minimum(k, cap)


def aldous_modulus(ens: PathEnsemble, betas, anchors, first_jump: bool = False) -> AldousTable:
    """Table of E|X_{S+beta} - X_S| and the fitted constant max value / (beta + sqrt(beta))."""
    table, se = {}, {}
    X = ens.states
    rows = np.arange(ens.n_paths)
    for beta in betas:
        if beta <= 0:
            raise DomainError("beta must be positive")
        for s in anchors:
            if s + beta > ens.grid[-1] + 1e-12:
                raise DomainError(f"anchor {s} + beta {beta} exceeds T")
            i, j = ens.time_index(s), ens.time_index(s + beta)
            inc = np.linalg.norm(X[:, j] - X[:, i], axis=1)
            table[(float(s), float(beta))] = float(inc.mean())
            se[(float(s), float(beta))] = float(inc.std(ddof=1) / np.sqrt(inc.size)) if inc.size > 1 else 0.0
        if first_jump:
            i = first_jump_anchors(ens, beta)
            j = np.searchsorted(ens.grid, ens.grid[i] + beta + 1e-12, side="right") - 1
            inc = np.linalg.norm(X[rows, j] - X[rows, i], axis=1)
            table[("first-jump", float(beta))] = float(inc.mean())
            se[("first-jump", float(beta))] = float(inc.std(ddof=1) / np.sqrt(inc.size)) if inc.size > 1 else 0.0
    const = max(v / (b + np.sqrt(b)) for (_, b), v in table.items())
    return AldousTable(table, se, float(const))
