"""Acceptance criteria 1-10 at their stated tolerances.

Each test prints one ``PASS``/``FAIL`` line (also repeated in the pytest
terminal summary).  Heavy ensembles are built once and shared.  Run this file
directly with ``python tests/test_acceptance.py`` for the lines alone.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from jumpflow.empirical import MarginalFlow, MollifiedView, ProbCloud, first_moment, wasserstein1_1d
from jumpflow.empirical import wasserstein1_to_mollified
from jumpflow.model import CoefficientSet
from jumpflow.oracle import fit_bias_constant, fp_grid_solve, grid_to_cloud, list_scenarios, scenario, stable_dt
from jumpflow.simulate import (
    aldous_modulus,
    marginal_at,
    simulate_base_paths,
    simulate_regularized_paths,
    sup_norm_moment,
    time_grid,
)
from jumpflow.verify import (
    MollifiedOperator,
    PlainOperator,
    bump,
    growth_probe,
    jump_increment_bound_check,
    martingale_battery,
    maximum_principle_check,
    moment_propagation_check,
    phi,
    residual_sweep,
    standard_bank,
    truncation_family,
)

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []

EPS_GRID = (0.5, 0.1, 0.02)


def report(label: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {label}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


class _Audited:
    passed = True


# --- shared artefacts -----------------------------------------------------------------


@lru_cache(maxsize=None)
def exact_flow(name: str, dt: float) -> MarginalFlow:
    return scenario(name).exact_flow(time_grid(1.0, dt))


@lru_cache(maxsize=None)
def grid_flow(name: str) -> MarginalFlow:
    """Grid-solver flow on the 0.01 grid, binned to width 0.05, for scenarios with no closed form."""
    sc = scenario(name)
    L, M = 15.0, 1500
    out = fp_grid_solve(sc, L, M, 1.0, stable_dt(sc, L, M, None), output_times=list(time_grid(1.0, 0.01)))
    flow = out.to_flow(coarsen_width=0.05, drop_below=1e-12)
    return MarginalFlow(time_grid(1.0, 0.01), flow.clouds)


def flow_for(name: str, dt: float = 0.01) -> MarginalFlow:
    if scenario(name).exact_marginal is not None:
        return exact_flow(name, dt)
    assert dt == 0.01
    return grid_flow(name)


@lru_cache(maxsize=None)
def chain_run(name: str, eps: float):
    sc = scenario(name)
    flow = exact_flow(name, 0.01)
    t0 = time.perf_counter()
    ens = simulate_regularized_paths(sc.coeffs, sc.kernel, flow, eps, flow.grid, 100_000, 31, record_stride=10)
    elapsed = time.perf_counter() - t0
    w1 = wasserstein1_to_mollified(marginal_at(ens, 1.0), MollifiedView(flow.at(1.0), eps))
    return w1, sup_norm_moment(ens), elapsed


# --- criteria ---------------------------------------------------------------------------


def test_criterion_1_marginal_law_identity():
    sc = scenario("compound-poisson")
    t0 = time.perf_counter()
    ens = simulate_base_paths(sc.coeffs, sc.kernel, sc.initial, time_grid(1.0, 1e-3), 100_000, 1, record_stride=100)
    elapsed = time.perf_counter() - t0
    d = {t: wasserstein1_1d(marginal_at(ens, t), sc.exact_marginal(t)) for t in (0.5, 1.0)}
    ok = all(v <= 0.02 for v in d.values()) and elapsed < 60
    report("1", ok, f"W1(t=0.5)={d[0.5]:.4f}, W1(t=1)={d[1.0]:.4f} (tol 0.02), runtime {elapsed:.1f}s (< 60s)")


def test_criterion_2_weak_residual_first_order():
    dts = (1e-2, 5e-3, 2.5e-3)
    bank = standard_bank()
    worst_ratio, n_rows, n_exact, msgs = [], 0, 0, []
    fits = {}
    ok = len(bank) >= 10
    for name in ("pure-drift", "compound-poisson"):
        sc = scenario(name)
        res = {dt: residual_sweep(exact_flow(name, dt), sc.coeffs, sc.kernel, bank, [0.5, 1.0]) for dt in dts}
        C_fit = 0.0
        for i in range(len(res[dts[0]])):
            psi = bank[i // 2]
            vals = {dt: res[dt][i].value for dt in dts}
            n_rows += 1
            if all(v == 0.0 for v in vals.values()):
                # the flow never meets the support: the identity holds exactly at every step
                n_exact += 1
                continue
            C, _ = fit_bias_constant(vals, psi.scale)
            C_fit = max(C_fit, C)
            ratios = [abs(vals[b]) / abs(vals[a]) for a, b in zip(dts, dts[1:])]
            worst_ratio += ratios
            if not all(0.35 <= r <= 0.65 for r in ratios):
                ok = False
                msgs.append(f"{name} {res[dts[0]][i].test_fn_id} t={res[dts[0]][i].t}: ratios {ratios}")
        # the frozen registry budget must cover the fitted constant
        fits[name] = C_fit
        ok &= C_fit <= sc.residual_bias
        for dt in dts:
            for i, r in enumerate(res[dt]):
                ok &= abs(r.value) <= C_fit * dt * bank[i // 2].scale + 1e-15
    detail = (
        f"{n_rows} residual rows ({n_exact} exactly zero), halving ratios in "
        f"[{min(worst_ratio):.3f}, {max(worst_ratio):.3f}] (need [0.35, 0.65]); "
        + ", ".join(f"C_fit[{k}]={v:.3g}" for k, v in fits.items())
    )
    report("2", ok, detail + ("; " + "; ".join(msgs[:3]) if msgs else ""))


def test_criterion_3_regularized_chain_identity():
    rows, ok, total = [], True, 0.0
    for name in ("compound-poisson", "ou-jump"):
        for eps in EPS_GRID:
            w1, _, elapsed = chain_run(name, eps)
            total += elapsed
            ok &= w1 <= 0.03
            rows.append(f"{name} eps={eps:g}: {w1:.4f}")
    ok &= total < 300
    report("3", ok, "W1 to smoothed flow (tol 0.03): " + "; ".join(rows) + f"; simulation time {total:.0f}s (< 300s)")


def test_criterion_4_uniform_moment_bound():
    ok, rows = True, []
    for name in ("compound-poisson", "ou-jump"):
        vals = [chain_run(name, eps)[1] for eps in EPS_GRID]
        bound = 10 * (1 + first_moment(scenario(name).initial))
        ratio = max(vals) / min(vals)
        ok &= ratio <= 1.5 and max(vals) <= bound
        rows.append(f"{name}: " + ", ".join(f"{v:.3f}" for v in vals) + f" (max/min {ratio:.3f}, bound {bound:g})")
    report("4", ok, "sup-norm moments over eps " + "; ".join(rows))


def test_criterion_5_aldous_modulus():
    sc = scenario("ou-jump")
    flow = exact_flow("ou-jump", 1e-3)
    betas = [1e-3, 1e-2, 0.05, 0.1, 0.25]
    anchors = [0.0, 0.25, 0.5, 0.75]
    consts = []
    for eps in EPS_GRID:
        ens = simulate_regularized_paths(sc.coeffs, sc.kernel, flow, eps, flow.grid, 5000, 41)
        consts.append(aldous_modulus(ens, betas, anchors).constant)
    ratio = max(consts) / min(consts)
    ok = all(np.isfinite(consts)) and ratio <= 2
    report("5", ok, "C_hat over eps " + ", ".join(f"{c:.3f}" for c in consts) + f" (max/min {ratio:.3f} <= 2)")


def test_criterion_6_martingale_functional():
    ok, rows = True, []
    g = time_grid(1.0, 0.01)
    for name in list_scenarios():
        sc = scenario(name)
        base = simulate_base_paths(sc.coeffs, sc.kernel, sc.initial, g, 20_000, 51)
        reps = martingale_battery(base, PlainOperator(sc.coeffs, sc.kernel), bias_constant=sc.martingale_bias)
        flow = flow_for(name)
        reg = simulate_regularized_paths(sc.coeffs, sc.kernel, flow, 0.1, g, 20_000, 52)
        reg_reps = martingale_battery(reg, MollifiedOperator(sc.coeffs, sc.kernel, flow, 0.1),
                                      bias_constant=sc.martingale_bias)
        good = sum(r.passed for r in reps + reg_reps)
        ok &= good == len(reps) + len(reg_reps)
        rows.append(f"{name} {good}/{len(reps) + len(reg_reps)}")
        if name in ("ou-jump", "pure-drift"):
            c = sc.coeffs
            twice = CoefficientSet(c.dim, lambda t, x, c=c: 2 * c.drift(t, x), c.diffusion, c.horizon)
            bad = martingale_battery(base, PlainOperator(twice, sc.kernel), bias_constant=sc.martingale_bias)
            n_fail = sum(not r.passed for r in bad)
            ok &= n_fail > 0
            rows.append(f"{name} double-drift control fails {n_fail}/{len(bad)}")
    report("6", ok, "battery passes (base + eps=0.1): " + "; ".join(rows))


def test_criterion_7_mollification_algebra():
    rng = np.random.default_rng(7)
    clouds = {
        "compound-poisson": scenario("compound-poisson").exact_marginal(1.0),
        "ou-jump": scenario("ou-jump").exact_marginal(1.0),
        "rough-drift": grid_flow("rough-drift").at(1.0),
        "two-sided-jumps": grid_flow("two-sided-jumps").at(1.0),
    }
    worst_norm, growth_rows, ok = 0.0, [], True
    y_rand = rng.uniform(-50, 50, size=(100, 1))
    y_grid = np.linspace(-50, 50, 1001)[:, None]
    for name, cloud in clouds.items():
        sc = scenario(name)
        maxima = []
        for eps in EPS_GRID:
            view = MollifiedView(cloud, eps)
            worst_norm = max(worst_norm, float(np.max(np.abs(view.tilt(y_rand).sum(axis=1) - 1))))
            maxima.append(float(growth_probe(view, sc.coeffs, sc.kernel, 1.0, y_grid).max()))
        spread = max(maxima) / min(maxima)
        ok &= spread <= 2 and max(maxima) <= 2 * maxima[0]
        growth_rows.append(f"{name} {spread:.3f}")
    ok &= worst_norm <= 1e-10
    # single particle: the tilt is a point mass and every average returns the atom's value
    exact = True
    sc = scenario("rough-drift")
    for eps in EPS_GRID:
        view = MollifiedView(ProbCloud.dirac([0.3]), eps)
        T = view.tilt(y_grid)
        b = view.averaged(y_grid, sc.coeffs.b(0.5, np.array([[0.3]])))
        exact &= bool(np.all(T == 1.0) and np.all(b == sc.coeffs.b(0.5, np.array([[0.3]]))[0, 0]))
    ok &= exact
    report("7", ok, f"max |sum tilt - 1| = {worst_norm:.1e} (<= 1e-10); single-particle exact: {exact}; "
                    "growth max/min over eps: " + ", ".join(growth_rows) + " (<= 2)")


def test_criterion_8_appendix_machinery():
    rng = np.random.default_rng(8)
    ok = True
    sandwich = True
    for n in (1, 5, 50):
        x = rng.standard_cauchy(size=(1000, 1)) * n
        v, lo = truncation_family(n).value(x), np.minimum(phi(x), n)
        sandwich &= bool(np.all(lo <= v) and np.all(v <= 2 * lo))
    ok &= sandwich
    probes = np.concatenate([np.linspace(-60, 60, 2401)[:, None], rng.standard_cauchy((1000, 1)) * 20])
    worst = 0.0
    for name in list_scenarios():
        for n in (1, 10):
            for t in (0.0, 0.5, 1.0):
                worst = max(worst, jump_increment_bound_check(scenario(name).kernel, n, t, probes).max_ratio)
    ok &= worst <= 20
    gron = []
    for name in list_scenarios():
        sc = scenario(name)
        op = PlainOperator(sc.coeffs, sc.kernel, growth_report=_Audited())
        for n in (1, 5, 20):
            rep = moment_propagation_check(flow_for(name), op, n, probes=probes)
            ok &= rep.passed
            gron.append(rep.passed)
    report("8", ok, f"sandwich at 3x1000 probes: {sandwich}; max increment ratio {worst:.3f} (<= 20); "
                    f"Gronwall propagation holds on {sum(gron)}/{len(gron)} (scenario, n) flows")


def test_criterion_9_rough_cross_oracle():
    sc = scenario("rough-drift")
    N, dt = 100_000, 1e-3
    ens = simulate_base_paths(sc.coeffs, sc.kernel, sc.initial, time_grid(1.0, dt), N, 61, record_stride=50)
    L, M = 30.0, 6000
    out = fp_grid_solve(sc, L, M, 1.0, stable_dt(sc, L, M, None), output_times=[0.5])
    ok, rows = True, []
    for t in (0.5, 1.0):
        g = out.at(t)
        grid_cloud = grid_to_cloud(g)
        F = np.cumsum(g.masses) / g.masses.sum()
        spread = float(np.sum(np.sqrt(F * (1 - F))) * g.dx)
        mc_tol = 3 * spread / np.sqrt(N) + dt
        grid_tol = 2 * g.dx + g.leaked_mass
        d = wasserstein1_1d(marginal_at(ens, t), grid_cloud)
        tol = 2 * (mc_tol + grid_tol)
        ok &= d <= tol
        rows.append(f"t={t:g}: W1={d:.4f} <= {tol:.4f}")
    report("9", ok, "; ".join(rows))


def test_criterion_10_maximum_principle():
    rng = np.random.default_rng(10)
    names = list_scenarios()
    verdicts = []
    for trial in range(100):
        name = names[trial % len(names)]
        sc = scenario(name)
        t = float(np.round(rng.uniform(0, 1), 2))
        c, R = rng.uniform(-3, 3), rng.uniform(0.5, 3)
        slope = rng.uniform(-0.5, 0.5) / (abs(c) + R)
        psi = bump(c, R, (1.0, slope, None))  # p > 0 on the support
        if trial % 2:
            op = MollifiedOperator(sc.coeffs, sc.kernel, flow_for(name), float(rng.choice(EPS_GRID)))
        else:
            op = PlainOperator(sc.coeffs, sc.kernel)
        grid = np.linspace(c - R - 1, c + R + 1, 2001)[:, None]
        verdicts.append(maximum_principle_check(op, psi, t, grid).verdict)
    n_pass = verdicts.count("pass")
    report("10", n_pass == 100, f"{n_pass}/100 randomized trials pass (plain and mollified operators)")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                fn()
            except AssertionError:
                pass
