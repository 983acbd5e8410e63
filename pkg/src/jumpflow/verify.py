"""Generators, weak residuals, martingale functionals and operator probes.

Operators act on :class:`TestFunction` objects, which carry closed-form
gradients and Hessians.  The jump part integrates the thinning coordinate
``u`` analytically: for a finite mark list the nonlocal operator is

    B psi(x) = sum_j nu_j kappa(t, w_j, x) [psi(x + g(t, w_j, x)) - psi(x)].

Two quadratures are available for the time integral of a weak residual:
``"left"`` integrates the left-continuous step interpolation of the flow
exactly (the default; it is first order in the grid step, like the Euler
simulator) and ``"trapezoid"``.
"""
from __future__ import annotations

import csv
import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .empirical import MarginalFlow, MollifiedView, psd_sqrt
from .model import CoefficientSet, DomainError, JumpKernel, as_batch, mean_jump_magnitude
from .rng import PathStreams, Tag
from .simulate import PathEnsemble

Array = np.ndarray

COMPACT = "compact_c2"
EXTENDED = "extended_c2"


class UnauditedGrowthWarning(UserWarning):
    """An extended test function was applied without a passing growth audit."""


# --- test functions -------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """C^2 function with analytic gradient and Hessian, vectorized over (n, d) batches.

    ``support_radius`` is M with ``value - offset`` vanishing (with its
    derivatives) for |x| >= M.  Compact functions have ``offset = 0``;
    extended ones such as psi_n are constant (= ``offset``) outside a ball.
    ``scale`` bounds |psi - offset| + |grad| + |Hess| and sets the size of
    discretization budgets.
    """

    __test__ = False  # not a pytest class

    id: str
    dim: int
    value_fn: Callable = field(repr=False)
    gradient_fn: Callable = field(repr=False)
    hessian_fn: Callable = field(repr=False)
    support_radius: float = np.inf
    class_tag: str = COMPACT
    offset: float = 0.0
    scale: float = 1.0

    def value(self, x):
        xb, single = as_batch(x, self.dim)
        v = np.asarray(self.value_fn(xb), dtype=float)
        return v[0] if single else v

    __call__ = value

    def gradient(self, x):
        xb, single = as_batch(x, self.dim)
        g = np.asarray(self.gradient_fn(xb), dtype=float).reshape(xb.shape)
        return g[0] if single else g

    def hessian(self, x):
        xb, single = as_batch(x, self.dim)
        h = np.asarray(self.hessian_fn(xb), dtype=float).reshape(xb.shape[0], self.dim, self.dim)
        return h[0] if single else h


def _estimate_scale(dim, value, grad, hess, center, radius, offset=0.0) -> float:
    if dim == 1:
        pts = center + np.linspace(-radius, radius, 4001)[:, None]
    else:
        rng = np.random.default_rng(12345)
        v = rng.standard_normal((6000, dim))
        v *= (radius * rng.random(6000) ** (1 / dim) / np.linalg.norm(v, axis=1))[:, None]
        pts = center + v
    return float(
        np.max(np.abs(value(pts) - offset))
        + np.max(np.linalg.norm(grad(pts), axis=1))
        + np.max(np.linalg.norm(hess(pts), axis=(1, 2)))
    )


def bump(center, radius: float, poly=(1.0, None, None), fid: Optional[str] = None) -> TestFunction:
    """psi(x) = p(x) (1 - |x-c|^2/R^2)^3 on |x-c| <= R, zero outside.

    ``poly = (c0, g, Q)`` gives p(x) = c0 + g.x + x'Qx (Q symmetrized; None = 0).
    """
    c = np.atleast_1d(np.asarray(center, dtype=float))
    d = c.size
    R = float(radius)
    if not R > 0:
        raise DomainError("bump radius must be positive")
    c0 = float(poly[0])
    g = np.zeros(d) if poly[1] is None else np.atleast_1d(np.asarray(poly[1], dtype=float))
    Q = np.zeros((d, d)) if poly[2] is None else np.asarray(poly[2], dtype=float).reshape(d, d)
    Q = 0.5 * (Q + Q.T)

    has_g, has_q = bool(np.any(g)), bool(np.any(Q))

    def parts(x):
        """Restrict to the support: (rows, z, u, p, dp) for rows with |x - c| < R."""
        z = x - c
        u = 1.0 - np.einsum("ni,ni->n", z, z) / R**2
        rows = np.flatnonzero(u > 0)
        xs, z, u = x[rows], z[rows], u[rows]
        p = np.full(rows.size, c0)
        dp = np.zeros_like(xs)
        if has_g:
            p = p + xs @ g
            dp = dp + g[None, :]
        if has_q:
            xq = xs @ Q
            p = p + np.einsum("ni,ni->n", xq, xs)
            dp = dp + 2.0 * xq
        return rows, z, u, p, dp

    def value(x):
        rows, _, u, p, _ = parts(x)
        out = np.zeros(x.shape[0])
        out[rows] = p * u**3
        return out

    def gradient(x):
        rows, z, u, p, dp = parts(x)
        out = np.zeros_like(x)
        dq = -6.0 * (u**2)[:, None] * z / R**2
        out[rows] = p[:, None] * dq + (u**3)[:, None] * dp
        return out

    def hessian(x):
        rows, z, u, p, dp = parts(x)
        out = np.zeros((x.shape[0], d, d))
        eye = np.eye(d)
        dq = -6.0 * (u**2)[:, None] * z / R**2
        hq = (-6.0 * u**2 / R**2)[:, None, None] * eye + (24.0 * u / R**4)[:, None, None] * np.einsum(
            "ni,nj->nij", z, z
        )
        cross = np.einsum("ni,nj->nij", dp, dq)
        out[rows] = p[:, None, None] * hq + cross + np.swapaxes(cross, 1, 2) + (u**3)[:, None, None] * 2.0 * Q
        return out

    if fid is None:
        fid = f"bump[c={c.tolist()},R={R:g},p=({c0:g},{g.tolist()},{Q.tolist()})]"
    scale = _estimate_scale(d, value, gradient, hessian, c, R)
    return TestFunction(fid, d, value, gradient, hessian, float(np.linalg.norm(c) + R), COMPACT, 0.0, scale)


def _smoothstep_down(s):
    """1 for s <= 0, 0 for s >= 1, quintic C^2 transition; returns (S, S', S'')."""
    s = np.clip(s, 0.0, 1.0)
    S = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)
    dS = -30.0 * s**2 * (1.0 - s) ** 2
    d2S = -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return S, dS, d2S


def cutoff(radius: float, dim: int = 1, fid: Optional[str] = None) -> TestFunction:
    """chi_r with 1{|x| <= r} <= chi_r <= 1{|x| <= r + 1}; radial quintic transition."""
    r = float(radius)
    if not r > 0:
        raise DomainError("cutoff radius must be positive")

    def radial(x):
        rho = np.linalg.norm(x, axis=1)
        return rho, _smoothstep_down(rho - r)

    def value(x):
        return radial(x)[1][0]

    def gradient(x):
        rho, (_, dS, _) = radial(x)
        safe = np.where(rho > 0, rho, 1.0)
        return (dS / safe)[:, None] * x

    def hessian(x):
        rho, (_, dS, d2S) = radial(x)
        safe = np.where(rho > 0, rho, 1.0)
        e = x / safe[:, None]
        ee = np.einsum("ni,nj->nij", e, e)
        eye = np.eye(x.shape[1])[None]
        return d2S[:, None, None] * ee + (dS / safe)[:, None, None] * (eye - ee)

    fid = fid or f"cutoff[r={r:g}]"
    zero = np.zeros(dim)
    scale = _estimate_scale(dim, value, gradient, hessian, zero, r + 1.0)
    return TestFunction(fid, dim, value, gradient, hessian, r + 1.0, COMPACT, 0.0, scale)


def chi(r):
    """Increasing C^2 profile: chi(r) = r on [0,1], 2 on [2, inf), quintic in between."""
    return _chi_parts(r)[0]


def _chi_parts(r):
    r = np.asarray(r, dtype=float)
    s = np.clip(r - 1.0, 0.0, 1.0)
    mid = 1.0 + s + 4 * s**3 - 7 * s**4 + 3 * s**5
    dmid = (1.0 - s) ** 2 * (15 * s**2 + 2 * s + 1)
    d2mid = 24 * s - 84 * s**2 + 60 * s**3
    low = r <= 1.0
    val = np.where(low, r, mid)
    d1 = np.where(low, 1.0, dmid)
    d2 = np.where(low, 0.0, d2mid)
    return val, d1, d2


def phi(x):
    """(1 + |x|^2)^{1/2} on a batch."""
    x = np.asarray(x, dtype=float)
    return np.sqrt(1.0 + np.sum(x * x, axis=-1))


def truncation_family(n: float, dim: int = 1) -> TestFunction:
    """psi_n(x) = n chi(phi(x)/n): equals phi while phi <= n and 2n once phi >= 2n."""
    n = float(n)
    if not n >= 1:
        raise DomainError("n must be >= 1")

    def value(x):
        f = phi(x)
        # on the identity branch return phi itself, not n * (phi / n), so psi_n >= phi holds exactly
        return np.where(f <= n, f, n * chi(f / n))

    def gradient(x):
        f = phi(x)
        _, d1, _ = _chi_parts(f / n)
        return (d1 / f)[:, None] * x

    def hessian(x):
        f = phi(x)
        _, d1, d2 = _chi_parts(f / n)
        e = x / f[:, None]
        ee = np.einsum("ni,nj->nij", e, e)
        eye = np.eye(x.shape[1])[None]
        # Hess phi = I/phi - x x'/phi^3
        return (d2 / n)[:, None, None] * ee + (d1 / f)[:, None, None] * (eye - ee)

    radius = float(np.sqrt(max(4 * n * n - 1.0, 0.0)))
    scale = _estimate_scale(dim, value, gradient, hessian, np.zeros(dim), radius + 1.0, offset=2 * n)
    return TestFunction(f"psi_n[n={n:g}]", dim, value, gradient, hessian, radius, EXTENDED, 2 * n, scale)


def standard_bank(dim: int = 1) -> list[TestFunction]:
    """Twelve compact test functions: plain, linear and quadratic bumps plus cutoffs."""
    e1 = np.eye(dim)[0]
    q11 = np.outer(e1, e1)
    bank = [
        bump(0.0 * e1, 1.0),
        bump(0.0 * e1, 3.0),
        bump(1.0 * e1, 2.0),
        bump(2.0 * e1, 2.5),
        bump(3.0 * e1, 4.0),
        bump(0.0 * e1, 4.0, (0.0, e1, None)),
        bump(1.0 * e1, 3.0, (0.5, e1, None)),
        bump(0.0 * e1, 5.0, (0.0, None, q11)),
        bump(2.0 * e1, 3.0, (1.0, e1, -0.25 * q11)),
        bump(-1.0 * e1, 3.5, (1.0, -0.5 * e1, 0.1 * np.eye(dim))),
        cutoff(0.5, dim),
        cutoff(1.5, dim),
    ]
    return bank


# --- operators ---------------------------------------------------------------------


def _plain_jump(kernel: JumpKernel, psi: TestFunction, t, x: Array, psi_x: Array) -> Array:
    out = np.zeros(x.shape[0])
    for j in range(kernel.n_marks):
        w = kernel.mark_batch(j, x.shape[0])
        k = kernel.kappa(t, w, x)
        if not np.any(k):
            continue
        g = kernel.g(t, w, x)
        out += kernel.weights[j] * k * (psi.value(x + g) - psi_x)
    return out


def _diffusion_term(a: Array, hess: Array) -> Array:
    return 0.5 * np.einsum("nij,nji->n", a, hess)


class PlainOperator:
    """The generator pair (A_t, B_t) of the jump SDE."""

    def __init__(self, coeffs: CoefficientSet, kernel: JumpKernel, growth_report=None):
        if coeffs.dim != kernel.dim:
            raise DomainError("coefficient and kernel dimensions differ")
        self.coeffs, self.kernel = coeffs, kernel
        self.growth_report = growth_report
        self._warned = False
        self.dim = coeffs.dim

    def _flag(self, psi: TestFunction):
        if psi.class_tag == EXTENDED and not self._warned:
            if self.growth_report is None or not self.growth_report.passed:
                warnings.warn(
                    f"{psi.id} applied without a passing linear-growth audit", UnauditedGrowthWarning, stacklevel=3
                )
                self._warned = True

    def parts(self, psi: TestFunction, t: float, x):
        """(A psi, B psi) at the states ``x`` (batch or single)."""
        self.coeffs.check_time(t)
        self._flag(psi)
        xb, single = as_batch(x, self.dim)
        b = self.coeffs.b(t, xb)
        a = self.coeffs.a(t, xb)
        A = np.einsum("ni,ni->n", b, psi.gradient(xb)) + _diffusion_term(a, psi.hessian(xb))
        B = _plain_jump(self.kernel, psi, t, xb, psi.value(xb))
        return (A[0], B[0]) if single else (A, B)

    def total(self, psi, t, x):
        A, B = self.parts(psi, t, x)
        return A + B

    def local_coeffs(self, t, x):
        xb, _ = as_batch(x, self.dim)
        return self.coeffs.b(t, xb), self.coeffs.a(t, xb)

    def jump_rate(self, t, x):
        xb, _ = as_batch(x, self.dim)
        lam = np.zeros(xb.shape[0])
        for j in range(self.kernel.n_marks):
            lam += self.kernel.weights[j] * self.kernel.kappa(t, self.kernel.mark_batch(j, xb.shape[0]), xb)
        return lam


_Y_CHUNK = 2048


class MollifiedOperator(PlainOperator):
    """(A_{t,eps}, B_{t,eps}) built from a flow: coefficients and jump anchors are tilt averages."""

    def __init__(self, coeffs, kernel, flow: MarginalFlow, eps: float, growth_report=None):
        super().__init__(coeffs, kernel, growth_report)
        if flow.dim != coeffs.dim:
            raise DomainError("flow dimension mismatch")
        self.flow, self.eps = flow, float(eps)
        self._views: dict = {}

    def view(self, t) -> MollifiedView:
        j = int(self.flow.index(t))
        v = self._views.get(j)
        if v is None:
            v = self._views[j] = MollifiedView(self.flow.clouds[j], self.eps)
        return v

    def parts(self, psi, t, y):
        self.coeffs.check_time(t)
        self._flag(psi)
        return apply_mollified_generator(self.view(t), self.coeffs, self.kernel, psi, t, y)

    def local_coeffs(self, t, y):
        view = self.view(t)
        pts = view.base.points
        T = view.tilt(as_batch(y, self.dim)[0])
        b = T @ self.coeffs.b(t, pts)
        a = (T @ self.coeffs.a(t, pts).reshape(pts.shape[0], -1)).reshape(-1, self.dim, self.dim)
        return b, 0.5 * (a + np.swapaxes(a, 1, 2))

    def jump_rate(self, t, y):
        view = self.view(t)
        pts = view.base.points
        T = view.tilt(as_batch(y, self.dim)[0])
        lam = np.zeros(pts.shape[0])
        for j in range(self.kernel.n_marks):
            lam += self.kernel.weights[j] * self.kernel.kappa(t, self.kernel.mark_batch(j, pts.shape[0]), pts)
        return T @ lam


def apply_generator(coeffs: CoefficientSet, kernel: JumpKernel, psi: TestFunction, t: float, x):
    """(A psi, B psi) with A = b.grad + (1/2) tr(a Hess) and B the thinned jump operator."""
    return PlainOperator(coeffs, kernel, growth_report=_TRUSTED).parts(psi, t, x)


class _Trusted:
    passed = True


_TRUSTED = _Trusted()


def apply_mollified_generator(view: MollifiedView, coeffs: CoefficientSet, kernel: JumpKernel, psi, t, y):
    """(A_eps psi, B_eps psi) at y for the mollification of ``view.base``.

    B_eps psi(y) = sum_i T_i(y) sum_j nu_j kappa(t,w_j,x_i) [psi(y + g(t,w_j,x_i)) - psi(y)]
    with T the tilt probabilities: jumps are evaluated at the atom x_i but applied at y.
    """
    coeffs.check_time(t)
    yb, single = as_batch(y, view.dim)
    pts = view.base.points
    M, d = pts.shape
    b_pts = coeffs.b(t, pts)
    a_pts = coeffs.a(t, pts).reshape(M, -1)
    marks = []
    for j in range(kernel.n_marks):
        w = kernel.mark_batch(j, M)
        k = kernel.kappa(t, w, pts)
        if not np.any(k):
            continue
        g = kernel.g(t, w, pts)
        marks.append((kernel.weights[j] * k, g, bool(np.all(g == g[:1]))))
    A = np.empty(yb.shape[0])
    B = np.zeros(yb.shape[0])
    for s in range(0, yb.shape[0], _Y_CHUNK):
        ys = yb[s : s + _Y_CHUNK]
        T = view.tilt(ys)
        if T.ndim == 1:
            T = T[None, :]
        b = T @ b_pts
        a = (T @ a_pts).reshape(-1, d, d)
        a = 0.5 * (a + np.swapaxes(a, 1, 2))
        A[s : s + _Y_CHUNK] = np.einsum("ni,ni->n", b, psi.gradient(ys)) + _diffusion_term(a, psi.hessian(ys))
        psi_y = psi.value(ys)
        for rate, g, shared in marks:
            if shared:
                # displacement does not depend on the atom: one evaluation per y
                B[s : s + _Y_CHUNK] += (T @ rate) * (psi.value(ys + g[0]) - psi_y)
            else:
                land = (ys[:, None, :] + g[None, :, :]).reshape(-1, d)
                vals = psi.value(land).reshape(ys.shape[0], M)
                B[s : s + _Y_CHUNK] += np.einsum("nm,m,nm->n", T, rate, vals - psi_y[:, None])
    return (A[0], B[0]) if single else (A, B)


# --- weak residuals -------------------------------------------------------------------


@dataclass
class ResidualReport:
    test_fn_id: str
    t: float
    value: float
    dt: float
    se: float
    bias_budget: float
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def row(self) -> dict:
        return {
            "test_fn_id": self.test_fn_id,
            "t": self.t,
            "value": self.value,
            "se": self.se,
            "bias_budget": self.bias_budget,
            "verdict": self.verdict,
        }


def _verdict(value: float, budget: float, se: float) -> str:
    return "pass" if abs(value) <= budget + 3.0 * se + 1e-13 else "fail"


_GH_CACHE: dict = {}


def _smoothed_expectation(view: MollifiedView, fn: Callable[[Array], Array], n_quad: int = 4001) -> float:
    """Integral of fn against the mollified measure."""
    d = view.dim
    pts, w = view.base.points, view.base.weights
    s = np.sqrt(view.eps)
    if d == 1:
        # dense trapezoid on the effective support of f^eps
        lo, hi = pts.min() - 10 * s, pts.max() + 10 * s
        n = max(n_quad, int((hi - lo) / (0.05 * s)) + 1)
        y = np.linspace(lo, hi, n)[:, None]
        return float(np.trapezoid(fn(y) * view.density(y), y[:, 0]))
    key = (d, 12)
    if key not in _GH_CACHE:
        z, gw = np.polynomial.hermite_e.hermegauss(12)
        grids = np.meshgrid(*([z] * d), indexing="ij")
        nodes = np.stack([g.ravel() for g in grids], axis=1)
        weights = np.prod(np.meshgrid(*([gw] * d), indexing="ij"), axis=0).ravel() / (2 * np.pi) ** (d / 2)
        _GH_CACHE[key] = (nodes, weights)
    nodes, gw = _GH_CACHE[key]
    y = (pts[:, None, :] + s * nodes[None, :, :]).reshape(-1, d)
    vals = fn(y).reshape(pts.shape[0], nodes.shape[0])
    return float(w @ (vals @ gw))


def _quadrature_weights(grid: Array, quadrature: str) -> Array:
    """Weights w_k with int_0^{t_K} g ~ sum_k w_k g(t_k) on the grid prefix."""
    h = np.diff(grid)
    if quadrature == "left":
        return np.append(h, 0.0)
    if quadrature == "trapezoid":
        qw = np.zeros(grid.size)
        qw[:-1] += 0.5 * h
        qw[1:] += 0.5 * h
        return qw
    raise DomainError("quadrature must be 'left' or 'trapezoid'")


def _plain_residuals(flow, op, psi, ks, quadrature):
    """Residual values and SEs at grid indices ``ks`` (plain operators), sharing generator work."""
    kmax = max(ks)
    paths = flow.path_states is not None
    gen = []
    for k in range(kmax + 1):
        if paths:
            gen.append(op.total(psi, flow.grid[k], flow.path_states[:, k]))
        else:
            c = flow.clouds[k]
            gen.append(float(c.weights @ op.total(psi, flow.grid[k], c.points)))
    out = []
    for k_end in ks:
        qw = _quadrature_weights(flow.grid[: k_end + 1], quadrature)
        if paths:
            X = flow.path_states
            per_path = psi.value(X[:, k_end]) - psi.value(X[:, 0])
            for k in range(k_end + 1):
                if qw[k]:
                    per_path = per_path - qw[k] * gen[k]
            value = float(per_path.mean())
            se = float(per_path.std(ddof=1) / np.sqrt(per_path.size)) if per_path.size > 1 else 0.0
        else:
            c_end, c0 = flow.clouds[k_end], flow.clouds[0]
            value = float(c_end.weights @ psi.value(c_end.points)) - float(c0.weights @ psi.value(c0.points))
            value -= float(np.dot(qw, gen[: k_end + 1]))
            se = 0.0
        out.append((value, se))
    return out


def weak_residual(
    flow: MarginalFlow,
    coeffs: CoefficientSet,
    kernel: JumpKernel,
    psi: TestFunction,
    t: float,
    mode: str = "plain",
    eps: Optional[float] = None,
    quadrature: str = "left",
    bias_constant: float = 0.0,
) -> ResidualReport:
    """R = <psi, f_t> - <psi, f_0> - int_0^t <(A+B) psi, f_s> ds on the flow grid.

    In ``mode="mollified"`` measures are replaced by their eps-smoothings and
    the operators by the mollified ones.  When the flow carries the path
    states behind its clouds, R is a mean of per-path terms and its standard
    error is reported.  Verdict: |R| <= bias_constant * dt * psi.scale + 3 SE.
    """
    return residual_sweep(flow, coeffs, kernel, [psi], [t], mode=mode, eps=eps, quadrature=quadrature,
                          bias_constant=bias_constant)[0]


def residual_sweep(
    flow: MarginalFlow,
    coeffs: CoefficientSet,
    kernel: JumpKernel,
    psis: Sequence[TestFunction],
    times,
    mode: str = "plain",
    eps: Optional[float] = None,
    quadrature: str = "left",
    bias_constant: float = 0.0,
) -> list[ResidualReport]:
    """Weak residuals for every (psi, t) pair, ordered psi-major."""
    ks = [flow.on_grid(t) for t in times]
    _quadrature_weights(flow.grid[:2], quadrature)
    if any(p.class_tag == EXTENDED for p in psis) and not np.isfinite(flow.sup_first_moment()):
        raise DomainError("extended test functions need clouds with finite first moment")
    reports = []
    for psi in psis:
        if mode == "plain":
            op = PlainOperator(coeffs, kernel, growth_report=_TRUSTED)
            vals = _plain_residuals(flow, op, psi, ks, quadrature)
        elif mode == "mollified":
            if eps is None:
                raise DomainError("mollified mode needs eps")
            op = MollifiedOperator(coeffs, kernel, flow, eps, growth_report=_TRUSTED)

            def smooth(k, fn):
                return _smoothed_expectation(op.view(flow.grid[k]), fn)

            gen = [
                smooth(k, lambda y, tk=flow.grid[k]: op.total(psi, tk, y)) for k in range(max(ks) + 1)
            ]
            v0 = smooth(0, psi.value)
            vals = []
            for k_end in ks:
                qw = _quadrature_weights(flow.grid[: k_end + 1], quadrature)
                vals.append((smooth(k_end, psi.value) - v0 - float(np.dot(qw, gen[: k_end + 1])), 0.0))
        else:
            raise DomainError(f"unknown mode {mode!r}")
        for (value, se), t, k_end in zip(vals, times, ks):
            h = np.diff(flow.grid[: k_end + 1])
            dt = float(h.max()) if h.size else 0.0
            budget = float(bias_constant * dt * psi.scale)
            reports.append(ResidualReport(psi.id, float(t), value, dt, se, budget, _verdict(value, budget, se)))
    return reports


# --- martingale functional ---------------------------------------------------------


@dataclass(frozen=True)
class Window:
    """Anchor times s_1..s_k <= s <= t with bounded weights psi_i applied at s_i."""

    s: float
    t: float
    anchors: tuple = ()
    weights: tuple = ()

    def __post_init__(self):
        if len(self.anchors) != len(self.weights):
            raise DomainError("one weight function per anchor")
        if any(a > self.s + 1e-12 for a in self.anchors) or self.s > self.t:
            raise DomainError("window needs s_i <= s <= t")


def default_windows() -> list[Window]:
    return [
        Window(0.25, 0.75, (0.25,), (lambda x: np.cos(x[:, 0]),)),
        Window(
            0.5,
            1.0,
            (0.25, 0.5),
            (lambda x: 1.0 / (1.0 + np.sum(x * x, axis=1)), lambda x: 0.5 * (1.0 + np.tanh(x[:, 0]))),
        ),
    ]


def default_battery(dim: int = 1) -> list[TestFunction]:
    e1 = np.eye(dim)[0]
    return [bump(0.0 * e1, 2.0), bump(1.0 * e1, 2.0), bump(0.0 * e1, 3.0, (0.0, e1, None))]


@dataclass
class MartingaleReport:
    test_fn_id: str
    s: float
    t: float
    value: float
    se: float
    bias_budget: float
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def row(self) -> dict:
        return {
            "test_fn_id": f"{self.test_fn_id}@[{self.s:g},{self.t:g}]",
            "t": self.t,
            "value": self.value,
            "se": self.se,
            "bias_budget": self.bias_budget,
            "verdict": self.verdict,
        }


def _grid_index(grid: Array, t: float) -> int:
    k = int(np.argmin(np.abs(grid - t)))
    if abs(grid[k] - t) > 1e-9:
        raise DomainError(f"window time {t} is not on the ensemble grid")
    return k


def martingale_statistic(
    ens: PathEnsemble,
    operator: PlainOperator,
    window: Window,
    psi: TestFunction,
    bias_constant: float = 0.0,
) -> MartingaleReport:
    """Sample mean and SE of K = prod_i psi_i(X_{s_i}) (psi(X_t) - psi(X_s) - int_s^t L psi(X_r) dr).

    The time integral uses the trapezoid rule on the ensemble grid; ``operator``
    is a :class:`PlainOperator` (base SDE) or :class:`MollifiedOperator`.
    """
    grid, X = ens.grid, ens.states
    i, j = _grid_index(grid, window.s), _grid_index(grid, window.t)
    factor = np.ones(ens.n_paths)
    for s_i, fn in zip(window.anchors, window.weights):
        factor *= np.asarray(fn(X[:, _grid_index(grid, s_i)]), dtype=float)
    inc = psi.value(X[:, j]) - psi.value(X[:, i])
    if j > i:
        vals = np.stack([operator.total(psi, grid[k], X[:, k]) for k in range(i, j + 1)], axis=1)
        inc -= np.trapezoid(vals, grid[i : j + 1], axis=1)
    K = factor * inc
    value = float(np.mean(K))
    se = float(np.std(K, ddof=1) / np.sqrt(K.size)) if K.size > 1 else 0.0
    dt = float(np.max(np.diff(grid)))
    budget = float(bias_constant * dt * psi.scale)
    return MartingaleReport(psi.id, window.s, window.t, value, se, budget, _verdict(value, budget, se))


def martingale_battery(ens, operator, windows=None, psis=None, bias_constant: float = 0.0):
    windows = default_windows() if windows is None else windows
    psis = default_battery(ens.dim) if psis is None else psis
    return [martingale_statistic(ens, operator, w, p, bias_constant) for w in windows for p in psis]


# --- appendix machinery -------------------------------------------------------------


@dataclass
class IncrementBoundReport:
    n: float
    max_ratio: float
    probe_count: int
    worst: Optional[tuple]

    def to_dict(self):
        return asdict(self)


def jump_increment_bound_check(kernel: JumpKernel, n: float, t, x) -> IncrementBoundReport:
    """Max over probes and marks of |psi_n(x+h) - psi_n(x)| / (|h| psi_n(x) / phi(x)).

    Probes with h = 0 contribute ratio 0.  ``t`` is scalar or per-probe.
    """
    psi = truncation_family(n, kernel.dim)
    xb, _ = as_batch(x, kernel.dim)
    tt = np.broadcast_to(np.asarray(t, dtype=float), (xb.shape[0],))
    base = psi.value(xb)
    scale = base / phi(xb)
    best, worst = 0.0, None
    for j in range(kernel.n_marks):
        w = kernel.mark_batch(j, xb.shape[0])
        h = kernel.g(tt, w, xb)
        active = kernel.kappa(tt, w, xb) > 0
        hn = np.linalg.norm(h, axis=1)
        delta = np.abs(psi.value(xb + h) - base)
        ratio = np.zeros(xb.shape[0])
        ok = active & (hn > 0)
        ratio[ok] = delta[ok] / (hn[ok] * scale[ok])
        k = int(np.argmax(ratio))
        if ratio[k] > best:
            best, worst = float(ratio[k]), (float(tt[k]), xb[k].tolist(), j)
    return IncrementBoundReport(float(n), best, int(xb.shape[0] * kernel.n_marks), worst)


def gronwall_constant(operator: PlainOperator, psi: TestFunction, t_grid, probes) -> float:
    """sup over (t, x) probes of (A+B) psi / psi (signed)."""
    xb, _ = as_batch(probes, operator.dim)
    best = -np.inf
    for t in np.atleast_1d(t_grid):
        ratio = operator.total(psi, float(t), xb) / psi.value(xb)
        best = max(best, float(np.max(ratio)))
    return best


@dataclass
class MomentPropagation:
    n: float
    constant: float
    times: list
    lhs: list
    rhs: list

    @property
    def passed(self) -> bool:
        return all(l <= r + 1e-12 for l, r in zip(self.lhs, self.rhs))


def moment_propagation_check(flow: MarginalFlow, operator: PlainOperator, n: float, probes=None):
    """Check <psi_n, f_t> <= <psi_n, f_0> exp(C t) with C the Gronwall constant of psi_n.

    The probe set always includes every atom of every cloud in the flow.
    """
    psi = truncation_family(n, flow.dim)
    atoms = np.concatenate([c.points for c in flow.clouds])
    pts = atoms if probes is None else np.concatenate([atoms, as_batch(probes, flow.dim)[0]])
    pts = np.unique(pts, axis=0)
    C = gronwall_constant(operator, psi, flow.grid, pts)
    m0 = float(flow.clouds[0].weights @ psi.value(flow.clouds[0].points))
    lhs = [float(c.weights @ psi.value(c.points)) for c in flow.clouds]
    rhs = [m0 * float(np.exp(C * t)) for t in flow.grid]
    return MomentPropagation(float(n), C, flow.grid.tolist(), lhs, rhs)


# --- maximum principle and operator probes ---------------------------------------------


@dataclass
class MaxPrincipleReport:
    test_fn_id: str
    t: float
    argmax: list
    jump_part: float
    second_order: float
    first_order: float
    tolerance: float
    verdict: str  # pass | fail | inconclusive

    def to_dict(self):
        return asdict(self)


def maximum_principle_check(
    operator: PlainOperator, psi: TestFunction, t: float, search_grid, polish: bool = True
) -> MaxPrincipleReport:
    """At the maximizer y0 of psi: B psi(y0) <= tol and (1/2) tr(a Hess psi)(y0) <= tol.

    ``search_grid`` is an (m, d) array.  The grid argmax is refined by a
    bounded quasi-Newton search; a maximizer on the grid boundary gives an
    inconclusive verdict.  tol = 1e-8 + h |grad psi(y0)| (1 + |b(y0)|) with h
    the grid resolution.
    """
    grid, _ = as_batch(search_grid, operator.dim)
    vals = psi.value(grid)
    k = int(np.argmax(vals))
    lo, hi = grid.min(axis=0), grid.max(axis=0)
    spacing = np.array([np.diff(np.unique(grid[:, i])).min() if np.unique(grid[:, i]).size > 1 else 0.0
                        for i in range(grid.shape[1])])
    h = float(np.max(spacing))
    y0 = grid[k].copy()
    on_edge = np.any(np.abs(y0 - lo) < 0.5 * spacing) or np.any(np.abs(y0 - hi) < 0.5 * spacing)
    if polish and not on_edge:
        res = optimize.minimize(
            lambda y: -psi.value(y),
            y0,
            jac=lambda y: -psi.gradient(y),
            method="L-BFGS-B",
            bounds=list(zip(np.maximum(lo, y0 - h), np.minimum(hi, y0 + h))),
            options={"gtol": 1e-14, "ftol": 1e-16},
        )
        if res.success and psi.value(res.x) >= vals[k]:
            y0 = res.x
    A, B = operator.parts(psi, t, y0[None, :])
    b, a = operator.local_coeffs(t, y0[None, :])
    grad = psi.gradient(y0)
    second = float(_diffusion_term(a, psi.hessian(y0[None, :]))[0])
    first = float(b[0] @ grad)
    tol = 1e-8 + h * float(np.linalg.norm(grad)) * (1.0 + float(np.linalg.norm(b[0])))
    if on_edge:
        verdict = "inconclusive"
    else:
        verdict = "pass" if (B[0] <= tol and second <= tol) else "fail"
    return MaxPrincipleReport(psi.id, float(t), y0.tolist(), float(B[0]), second, first, tol, verdict)


@dataclass
class OperatorBound:
    test_fn_id: str
    sup: float
    near_max: float
    far_max: float
    radii: list
    per_radius: list

    def to_dict(self):
        return asdict(self)


def operator_bound_probe(
    operator: PlainOperator,
    psi: TestFunction,
    t_grid,
    radii=None,
    samples_per_radius: int = 64,
    seed: int = 0,
) -> OperatorBound:
    """max |A psi| + |B psi| over probes on spheres of the given radii.

    Default radii run from well inside the support to 100 support radii, so
    the far-field behaviour of the jump term is exercised.  "near" collects
    radii <= 2M, "far" the rest.
    """
    if psi.class_tag != COMPACT:
        raise DomainError("operator_bound_probe expects a compactly supported function")
    M = psi.support_radius
    if radii is None:
        radii = [0.25 * M, 0.5 * M, M, 1.5 * M, 2 * M, 4 * M, 10 * M, 50 * M, 100 * M]
    d = operator.dim
    streams = PathStreams(seed)
    per = []
    for ri, r in enumerate(radii):
        ids = np.arange(samples_per_radius, dtype=np.int64)
        if d == 1:
            pts = r * np.where(streams.uniform(ids, ri, Tag.PROBE) < 0.5, -1.0, 1.0)[:, None]
            # include both signs deterministically
            pts = np.concatenate([pts, [[r], [-r]]])
        else:
            v = streams.normal_vectors(ids, ri, Tag.PROBE, d)
            pts = r * v / np.linalg.norm(v, axis=1)[:, None]
        best = 0.0
        for t in np.atleast_1d(t_grid):
            A, B = operator.parts(psi, float(t), pts)
            best = max(best, float(np.max(np.abs(A) + np.abs(B))))
        per.append(best)
    per = np.asarray(per)
    radii = np.asarray(radii, dtype=float)
    near = float(per[radii <= 2 * M].max()) if np.any(radii <= 2 * M) else 0.0
    far = float(per[radii > 2 * M].max()) if np.any(radii > 2 * M) else 0.0
    return OperatorBound(psi.id, float(per.max()), near, far, radii.tolist(), per.tolist())


def growth_probe(view: MollifiedView, coeffs: CoefficientSet, kernel: JumpKernel, t: float, y) -> Array:
    """(|b^eps| + |a^eps|^{1/2} + sum_i T_i(y) mean_jump_magnitude(t, x_i)) / (1 + |y|) per y."""
    coeffs.check_time(t)
    yb, _ = as_batch(y, view.dim)
    pts = view.base.points
    T = view.tilt(yb)
    if T.ndim == 1:
        T = T[None, :]
    b = T @ coeffs.b(t, pts)
    a = (T @ coeffs.a(t, pts).reshape(pts.shape[0], -1)).reshape(-1, view.dim, view.dim)
    jump = T @ np.atleast_1d(mean_jump_magnitude(kernel, t, pts))
    num = np.linalg.norm(b, axis=1) + np.sqrt(np.linalg.norm(a, axis=(1, 2))) + jump
    return num / (1.0 + np.linalg.norm(yb, axis=1))


def lipschitz_probe(
    view: MollifiedView, coeffs: CoefficientSet, t: float, radius: float, n_pairs: int = 1000,
    scales=(1e-2, 1e-4), seed: int = 0,
) -> dict:
    """Max difference quotient of b^eps over random pairs in B(0, R), per pair scale."""
    d = view.dim
    streams = PathStreams(seed)
    ids = np.arange(n_pairs, dtype=np.int64)
    dirs = streams.normal_vectors(ids, 0, Tag.PROBE, d)
    rad = radius * streams.uniform(ids, 1, Tag.PROBE) ** (1.0 / d)
    y1 = dirs / np.linalg.norm(dirs, axis=1)[:, None] * rad[:, None]
    step = streams.normal_vectors(ids, 2, Tag.PROBE, d)
    step /= np.linalg.norm(step, axis=1)[:, None]
    out = {}
    b_pts = coeffs.b(t, view.base.points)
    for sc in scales:
        y2 = y1 + sc * step
        # keep pairs inside the ball
        norms = np.linalg.norm(y2, axis=1)
        y2 = np.where((norms > radius)[:, None], y1 - sc * step, y2)
        q = np.linalg.norm(view.averaged(y1, b_pts) - view.averaged(y2, b_pts), axis=1) / np.linalg.norm(
            y1 - y2, axis=1
        )
        out[float(sc)] = float(q.max())
    return out


# --- report output ---------------------------------------------------------------------

REPORT_COLUMNS = ["test_fn_id", "t", "value", "se", "bias_budget", "verdict"]


def write_report_csv(reports: Sequence, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        wr.writeheader()
        for r in reports:
            row = r.row()
            wr.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})


def verdict_counts(reports: Sequence) -> dict:
    counts = Counter(r.verdict for r in reports)
    return {"pass": counts.get("pass", 0), "fail": counts.get("fail", 0), "total": len(reports)}


def write_summary_json(reports: Sequence, path, extra: Optional[dict] = None) -> None:
    out = verdict_counts(reports)
    if extra:
        out.update(extra)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
