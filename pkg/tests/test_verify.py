import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jumpflow.empirical import MarginalFlow, MollifiedView, ProbCloud
from jumpflow.model import CoefficientSet, DomainError, JumpKernel, no_jumps
from jumpflow.oracle import fit_bias_constant, scenario
from jumpflow.simulate import simulate_base_paths, time_grid
from jumpflow.verify import (
    COMPACT,
    EXTENDED,
    MollifiedOperator,
    PlainOperator,
    TestFunction,
    UnauditedGrowthWarning,
    Window,
    apply_generator,
    apply_mollified_generator,
    bump,
    chi,
    cutoff,
    default_battery,
    default_windows,
    gronwall_constant,
    growth_probe,
    jump_increment_bound_check,
    lipschitz_probe,
    martingale_battery,
    martingale_statistic,
    maximum_principle_check,
    moment_propagation_check,
    operator_bound_probe,
    phi,
    residual_sweep,
    standard_bank,
    truncation_family,
    verdict_counts,
    weak_residual,
    write_report_csv,
    write_summary_json,
)


def zero(t, x):
    return np.zeros_like(x)


def sig(level):
    return lambda t, x: np.full((x.shape[0], 1, 1), level)


def shift(t, w, x):
    return np.broadcast_to(np.asarray(w, dtype=float).reshape(-1, 1), x.shape)


def still(dim=1):
    return CoefficientSet(dim, zero, lambda t, x: np.zeros((x.shape[0], dim, dim)), 1.0)


def linear_fn(dim=1):
    return TestFunction(
        "linear", dim, lambda x: x[:, 0], lambda x: np.eye(dim)[0] + 0 * x, lambda x: np.zeros((x.shape[0], dim, dim))
    )


def combo(a, p, b, q):
    return TestFunction(
        "combo",
        p.dim,
        lambda x: a * p.value(x) + b * q.value(x),
        lambda x: a * p.gradient(x) + b * q.gradient(x),
        lambda x: a * p.hessian(x) + b * q.hessian(x),
    )


def all_functions(dim):
    return standard_bank(dim) + [truncation_family(n, dim) for n in (1, 3)] + [cutoff(2.0, dim)]


# --- test functions -----------------------------------------------------------


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_derivatives_match_finite_differences(dim):
    rng = np.random.default_rng(dim)
    h = 1e-5
    for psi in all_functions(dim):
        r = min(psi.support_radius, 8.0)
        x = rng.uniform(-r, r, size=(100, dim))
        g, H = psi.gradient(x), psi.hessian(x)
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = h
            fd_g = (psi.value(x + e) - psi.value(x - e)) / (2 * h)
            fd_h = (psi.gradient(x + e) - psi.gradient(x - e)) / (2 * h)
            assert np.all(np.abs(fd_g - g[:, k]) <= 1e-5 * (1 + np.abs(g[:, k]))), psi.id
            assert np.all(np.abs(fd_h - H[:, :, k]) <= 1e-5 * (1 + np.abs(H[:, :, k]))), psi.id
        assert np.allclose(H, np.swapaxes(H, 1, 2), atol=1e-12)


def test_bank_shape_and_compact_support():
    bank = standard_bank(1)
    assert len(bank) >= 10 and all(p.class_tag == COMPACT for p in bank)
    assert len({p.id for p in bank}) == len(bank)
    rng = np.random.default_rng(0)
    for psi in standard_bank(2):
        d = rng.normal(size=(200, 2))
        x = d / np.linalg.norm(d, axis=1)[:, None] * (psi.support_radius * rng.uniform(1, 5, size=(200, 1)))
        assert np.all(psi.value(x) == 0) and np.all(psi.gradient(x) == 0) and np.all(psi.hessian(x) == 0)


def test_cutoff_bracket():
    c = cutoff(1.5)
    x = np.linspace(-4, 4, 2001)[:, None]
    v = c.value(x)
    inner = (np.abs(x[:, 0]) <= 1.5).astype(float)
    outer = (np.abs(x[:, 0]) <= 2.5).astype(float)
    assert np.all(inner <= v) and np.all(v <= outer)


def test_truncation_family_examples():
    for n in (1.0, 5.0, 50.0):
        psi = truncation_family(n)
        small = np.linspace(-np.sqrt(n * n - 1), np.sqrt(n * n - 1), 101)[:, None]
        assert np.array_equal(psi.value(small), phi(small))
        far = np.array([[np.sqrt(4 * n * n - 1) + 1e-9], [-1e6], [1e12]])
        assert np.all(psi.value(far) == 2 * n) and np.all(psi.gradient(far) == 0)
        assert psi.class_tag == EXTENDED


def test_chi_profile():
    r = np.linspace(0, 3, 3001)
    v = chi(r)
    assert np.all(np.diff(v) >= 0)
    assert np.array_equal(v[r <= 1], r[r <= 1])
    assert np.all(v[r >= 2] == 2.0)


@pytest.mark.parametrize("n", [1, 5, 50])
def test_sandwich(n):
    rng = np.random.default_rng(n)
    x = rng.standard_cauchy(size=(1000, 2)) * n
    psi, ph = truncation_family(n, 2), phi(x)
    lo = np.minimum(ph, n)
    v = psi.value(x)
    assert np.all(lo <= v) and np.all(v <= 2 * lo)


def test_extended_functions_have_bounded_derivative_growth():
    psi = truncation_family(3)
    x = np.linspace(-1e4, 1e4, 20001)[:, None]
    g = np.abs(psi.gradient(x)[:, 0])
    H = np.abs(psi.hessian(x)[:, 0, 0])
    assert np.all((1 + np.abs(x[:, 0])) * (g + H) <= 20)
    assert np.all(np.abs(psi.value(x)) <= 2 * 3 * (1 + np.abs(x[:, 0])))


# --- operators ---------------------------------------------------------------


def test_generator_hand_example():
    c = CoefficientSet(1, lambda t, x: -x, sig(0.0), 1.0)
    k = JumpKernel(1, [1.0], np.array([1.0]), shift, lambda t, w, x: np.ones(x.shape[0]), 1.0)
    A, B = apply_generator(c, k, linear_fn(), 0.0, [2.0])
    assert A == pytest.approx(-2.0, abs=1e-15) and B == pytest.approx(1.0, abs=1e-15)


def test_generator_vanishes_on_plateau():
    c = CoefficientSet(1, lambda t, x: np.sin(x) * 4, sig(2.0), 1.0)
    k = JumpKernel(1, [1.0, 2.0], np.array([0.5, -0.5]), shift, lambda t, w, x: np.ones(x.shape[0]), 1.0)
    psi = cutoff(5.0)
    x = np.linspace(-4.4, 4.4, 50)[:, None]
    A, B = apply_generator(c, k, psi, 0.5, x)
    assert np.all(A == 0) and np.all(B == 0)


def test_jump_part_matches_mark_u_grid():
    rng = np.random.default_rng(7)
    psi = bump(0.5, 3.0, (1.0, 0.3, None))
    for trial in range(5):
        m = rng.integers(1, 5)
        w = rng.uniform(0.1, 2, m)
        labels = rng.normal(size=m)
        # kappa on a dyadic lattice so the midpoint u-grid integrates the indicator exactly
        levels = rng.integers(0, 65, size=m) / 64

        def rate(t, ww, x, levels=levels, labels=labels):
            j = np.argmin(np.abs(np.asarray(ww).reshape(-1, 1) - labels[None, :]), axis=1)
            return levels[j] * (1 + 0 * x[:, 0])

        def gmap(t, ww, x):
            return np.asarray(ww, dtype=float).reshape(-1, 1) * (1 + 0.5 * np.tanh(x))

        k = JumpKernel(1, w, labels, gmap, rate, 1.0)
        x = rng.uniform(-3, 3, size=(20, 1))
        _, B = apply_generator(still(), k, psi, 0.0, x)
        u = (np.arange(64) + 0.5) / 64
        brute = np.zeros(x.shape[0])
        for j in range(m):
            wj = np.full(x.shape[0], labels[j])
            g = gmap(0.0, wj, x)
            kap = rate(0.0, wj, x)
            for uu in u:
                h = g * (uu <= kap)[:, None]
                brute += w[j] / 64 * (psi.value(x + h) - psi.value(x))
        assert np.allclose(B, brute, atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5), st.floats(0, 1))
def test_generator_is_linear(a, b, x, t):
    sc = scenario("two-sided-jumps")
    p, q = bump(0.0, 2.0), bump(1.0, 3.0, (0.0, 1.0, None))
    Ac, Bc = apply_generator(sc.coeffs, sc.kernel, combo(a, p, b, q), t, [x])
    Ap, Bp = apply_generator(sc.coeffs, sc.kernel, p, t, [x])
    Aq, Bq = apply_generator(sc.coeffs, sc.kernel, q, t, [x])
    assert Ac == pytest.approx(a * Ap + b * Aq, abs=1e-12)
    assert Bc == pytest.approx(a * Bp + b * Bq, abs=1e-12)


def test_unaudited_extended_function_is_flagged():
    sc = scenario("ou-jump")
    op = PlainOperator(sc.coeffs, sc.kernel)
    with pytest.warns(UnauditedGrowthWarning):
        op.parts(truncation_family(2), 0.0, [[0.0], [1.0]])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        op.parts(truncation_family(2), 0.0, [[0.0]])  # warned once only
        op.parts(bump(0.0, 1.0), 0.0, [[0.0]])


def test_mollified_single_particle():
    sc = scenario("two-sided-jumps")
    x0 = 0.7
    view = MollifiedView(ProbCloud.dirac([x0]), 0.1)
    psi = bump(0.0, 2.5, (1.0, 0.5, None))
    y = np.linspace(-3, 3, 41)[:, None]
    A, B = apply_mollified_generator(view, sc.coeffs, sc.kernel, psi, 0.3, y)
    xs = np.full_like(y, x0)
    b, a = sc.coeffs.b(0.3, xs), sc.coeffs.a(0.3, xs)
    A_ref = b[:, 0] * psi.gradient(y)[:, 0] + 0.5 * a[:, 0, 0] * psi.hessian(y)[:, 0, 0]
    rate = 1.0 / (1 + x0**2)
    B_ref = rate * (psi.value(y + 1) - psi.value(y)) + rate * (psi.value(y - 1) - psi.value(y))
    assert np.allclose(A, A_ref, atol=1e-13) and np.allclose(B, B_ref, atol=1e-13)
    _, B0 = apply_mollified_generator(view, sc.coeffs, no_jumps(1), psi, 0.3, y)
    assert np.all(B0 == 0)


def test_mollified_tight_cloud_matches_plain():
    sc = scenario("ou-jump")
    x0 = 0.4
    cloud = ProbCloud(x0 + 1e-6 * np.random.default_rng(0).uniform(-1, 1, size=(25, 1)))
    view = MollifiedView(cloud, 0.05)
    psi = bump(0.0, 2.0)
    A_e, B_e = apply_mollified_generator(view, sc.coeffs, sc.kernel, psi, 0.5, [x0])
    A, B = apply_generator(sc.coeffs, sc.kernel, psi, 0.5, [x0])
    assert abs(A_e - A) + abs(B_e - B) < 1e-4


def test_mollified_jump_uses_atom_rate_and_displacement():
    # atom-dependent displacement exercises the general branch; compare to a direct double sum
    def gmap(t, w, x):
        return np.asarray(w, dtype=float).reshape(-1, 1) * (1 + x**2)

    k = JumpKernel(1, [0.3, 0.7], np.array([1.0, -0.5]), gmap, lambda t, w, x: 1 / (1 + x[:, 0] ** 2), 1.0)
    cloud = ProbCloud([[-1.0], [0.0], [2.0]], [0.2, 0.5, 0.3])
    view = MollifiedView(cloud, 0.3)
    psi = bump(0.5, 4.0)
    y = np.array([[-0.5], [0.5], [1.5]])
    _, B = apply_mollified_generator(view, still(), k, psi, 0.0, y)
    T = view.tilt(y)
    ref = np.zeros(3)
    for n in range(3):
        for i, xi in enumerate(cloud.points[:, 0]):
            for wj, lab in zip(k.weights, k.labels):
                rate = 1 / (1 + xi**2)
                ref[n] += T[n, i] * wj * rate * (psi.value(y[n] + lab * (1 + xi**2)) - psi.value(y[n]))
    assert np.allclose(B, ref, atol=1e-14)


# --- weak residuals --------------------------------------------------------------


def test_static_flow_has_zero_residual():
    g = time_grid(1, 0.1)
    cloud = ProbCloud(np.random.default_rng(1).normal(size=(30, 1)))
    flow = MarginalFlow(g, [cloud] * g.size)
    for rep in residual_sweep(flow, still(), no_jumps(1), standard_bank(), [0.5, 1.0]):
        assert rep.value == 0.0 and rep.passed


def test_residual_requires_grid_time_and_mode():
    sc = scenario("compound-poisson")
    flow = sc.exact_flow(time_grid(1, 0.1))
    with pytest.raises(DomainError):
        weak_residual(flow, sc.coeffs, sc.kernel, bump(0.0, 2.0), 0.55)
    with pytest.raises(DomainError):
        weak_residual(flow, sc.coeffs, sc.kernel, bump(0.0, 2.0), 0.5, mode="mollified")


def test_compound_poisson_residual_is_first_order():
    sc = scenario("compound-poisson")
    psi = bump(5.0, 6.5)  # covers the atoms 0..10
    res = {}
    for dt in (1e-2, 5e-3, 2.5e-3):
        res[dt] = weak_residual(sc.exact_flow(time_grid(1, dt)), sc.coeffs, sc.kernel, psi, 1.0).value
    C, ratio = fit_bias_constant(res)
    assert 0.35 <= ratio <= 0.65
    assert 0.35 <= abs(res[5e-3]) / abs(res[1e-2]) <= 0.65
    assert all(abs(v) <= C * dt + 1e-15 for dt, v in res.items())


def test_wrong_flow_is_detected():
    sc = scenario("compound-poisson")
    flow = sc.exact_flow(time_grid(1, 2.5e-3))
    psi = bump(0.0, 3.0)
    matched = weak_residual(flow, sc.coeffs, sc.kernel, psi, 1.0).value
    doubled = JumpKernel(1, [2.0], np.array([1.0]), sc.kernel.jump_map, sc.kernel.rate, 1.0)
    wrong = weak_residual(flow, sc.coeffs, doubled, psi, 1.0).value
    assert abs(wrong) > 10 * abs(matched)


def test_mc_flow_residuals_pass():
    for name in ("compound-poisson", "ou-jump", "two-sided-jumps"):
        sc = scenario(name)
        ens = simulate_base_paths(sc.coeffs, sc.kernel, sc.initial, time_grid(1, 0.01), 20_000, 5)
        flow = MarginalFlow.from_ensemble(ens)
        reps = residual_sweep(flow, sc.coeffs, sc.kernel, standard_bank(), [0.25, 0.5, 1.0],
                              bias_constant=sc.residual_bias)
        assert all(r.se > 0 for r in reps)
        assert all(r.passed for r in reps), [r.row() for r in reps if not r.passed]


def test_mollified_residual_of_exact_flow_is_small():
    sc = scenario("compound-poisson")
    flow = sc.exact_flow(time_grid(1, 0.01))
    for eps in (0.5, 0.1):
        reps = residual_sweep(flow, sc.coeffs, sc.kernel, standard_bank()[:4], [1.0], mode="mollified", eps=eps,
                              bias_constant=sc.residual_bias)
        assert all(r.passed for r in reps)


# --- martingale functional -----------------------------------------------------------


def test_zero_dynamics_martingale_is_zero():
    ens = simulate_base_paths(still(), no_jumps(1), ProbCloud([[0.0], [1.0]]), time_grid(1, 0.05), 100, 0)
    op = PlainOperator(still(), no_jumps(1))
    for rep in martingale_battery(ens, op):
        assert rep.value == 0.0


def test_compound_poisson_martingale_passes_and_double_drift_fails():
    sc = scenario("compound-poisson")
    ens = simulate_base_paths(sc.coeffs, sc.kernel, sc.initial, time_grid(1, 0.01), 20_000, 3)
    reps = martingale_battery(ens, PlainOperator(sc.coeffs, sc.kernel), bias_constant=sc.martingale_bias)
    assert len(reps) == 6 and all(r.passed for r in reps)

    ou = scenario("ou-jump")
    ens = simulate_base_paths(ou.coeffs, ou.kernel, ou.initial, time_grid(1, 0.01), 20_000, 3)
    twice = CoefficientSet(1, lambda t, x: 2 * ou.coeffs.drift(t, x), ou.coeffs.diffusion, 1.0)
    bad = martingale_battery(ens, PlainOperator(twice, ou.kernel), bias_constant=ou.martingale_bias)
    assert any(abs(r.value) > 3 * r.se for r in bad)
    assert not all(r.passed for r in bad)


def test_window_validation():
    with pytest.raises(DomainError):
        Window(0.5, 0.25)
    with pytest.raises(DomainError):
        Window(0.5, 1.0, (0.75,), (np.cos,))
    assert len(default_windows()) == 2 and len(default_battery()) == 3


# --- appendix machinery ----------------------------------------------------------------


def test_increment_bound_examples():
    zero_k = JumpKernel(1, [1.0], np.array([0.0]), shift, lambda t, w, x: np.ones(x.shape[0]), 1.0)
    assert jump_increment_bound_check(zero_k, 3, 0.0, np.linspace(-10, 10, 11)[:, None]).max_ratio == 0.0
    unit = JumpKernel(1, [1.0], np.array([1.0]), shift, lambda t, w, x: np.ones(x.shape[0]), 1.0)
    plateau = np.array([[100.0], [-200.0]])
    assert jump_increment_bound_check(unit, 3, 0.0, plateau).max_ratio == 0.0
    rng = np.random.default_rng(0)
    probes = np.concatenate([rng.uniform(-30, 30, (2000, 1)), rng.standard_cauchy((2000, 1)) * 10])
    for n in (1, 10):
        for k in (unit, scenario("two-sided-jumps").kernel):
            big = JumpKernel(1, k.weights, k.labels * 7.5, k.jump_map, k.rate, k.rate_majorant)
            for kk in (k, big):
                rep = jump_increment_bound_check(kk, n, 0.0, probes)
                assert 0 < rep.max_ratio <= 20


def test_gronwall_moment_propagation():
    for name in ("compound-poisson", "ou-jump", "pure-drift"):
        sc = scenario(name)
        flow = sc.exact_flow(time_grid(1, 0.05))
        op = PlainOperator(sc.coeffs, sc.kernel, growth_report=True and _passing())
        for n in (1, 5, 20):
            rep = moment_propagation_check(flow, op, n)
            assert rep.passed and np.isfinite(rep.constant)


def _passing():
    class R:
        passed = True

    return R()


def test_gronwall_constant_of_ou():
    sc = scenario("ou-jump")
    op = PlainOperator(sc.coeffs, sc.kernel, growth_report=_passing())
    C = gronwall_constant(op, truncation_family(5), [0.0, 1.0], np.linspace(-20, 20, 401)[:, None])
    # A phi / phi <= 1/2 for b = -x, sigma = 1, and B phi / phi <= 1 for unit jumps
    assert 0 < C <= 1.5


def test_maximum_principle_examples():
    rng = np.random.default_rng(0)
    grid = np.linspace(-6, 6, 1201)[:, None]
    for name in ("ou-jump", "two-sided-jumps", "rough-drift"):
        sc = scenario(name)
        op = PlainOperator(sc.coeffs, sc.kernel)
        rep = maximum_principle_check(op, bump(0.0, 2.0), 0.5, grid)
        assert rep.verdict == "pass" and rep.jump_part <= 0 and rep.second_order <= 0
        assert rep.argmax == pytest.approx([0.0], abs=1e-6)
    edge = maximum_principle_check(PlainOperator(still(), no_jumps(1)), bump(7.0, 2.0), 0.0, grid)
    assert edge.verdict == "inconclusive"


def test_operator_bound_probe_examples():
    sc = scenario("two-sided-jumps")
    op = PlainOperator(sc.coeffs, sc.kernel)
    psi = bump(0.0, 2.0)
    rep = operator_bound_probe(op, psi, [0.0, 1.0])
    assert rep.far_max <= 2 * rep.near_max
    M = psi.support_radius
    wide = operator_bound_probe(op, psi, [0.0, 1.0], radii=rep.radii + [200 * M])
    assert wide.sup == pytest.approx(rep.sup, rel=0.1)
    zero_rep = operator_bound_probe(PlainOperator(still(), no_jumps(1)), psi, [0.0])
    assert zero_rep.sup == 0.0
    with pytest.raises(DomainError):
        operator_bound_probe(op, truncation_family(2), [0.0])


def test_growth_and_lipschitz_probes():
    sc = scenario("ou-jump")
    cloud = sc.exact_marginal(1.0)
    y = np.linspace(-50, 50, 401)[:, None]
    maxima = [growth_probe(MollifiedView(cloud, e), sc.coeffs, sc.kernel, 1.0, y).max() for e in (0.5, 0.1, 0.02)]
    assert np.all(np.isfinite(maxima)) and max(maxima) <= 2 * maxima[0]
    q = lipschitz_probe(MollifiedView(cloud, 0.1), sc.coeffs, 1.0, 5.0)
    assert np.isfinite(q[1e-2]) and q[1e-4] <= 2 * q[1e-2] + 1e-12


def test_report_files(tmp_path):
    sc = scenario("compound-poisson")
    flow = sc.exact_flow(time_grid(1, 0.1))
    reps = residual_sweep(flow, sc.coeffs, sc.kernel, standard_bank()[:2], [0.5, 1.0], bias_constant=0.5)
    write_report_csv(reps, tmp_path / "r.csv")
    write_summary_json(reps, tmp_path / "s.json", {"scenario": "compound-poisson"})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "test_fn_id,t,value,se,bias_budget,verdict" and len(lines) == 5
    assert verdict_counts(reps)["total"] == 4
