"""Command-line front end.

    jumpflow scenario list
    jumpflow simulate --scenario compound-poisson --n 100000 --dt 1e-3 --seed 7 --out run1
    jumpflow verify   --scenario ou-jump --n 20000 --dt 1e-2 --out check
    jumpflow chain    --scenario compound-poisson --epsilons 0.5,0.1,0.02 --out chain
    jumpflow fp-solve --scenario rough-drift --L 30 --M 6000 --t-end 1 --times 0.5,1 --out grid

Every run writes ``config.echo.json``, the fully resolved configuration;
``jumpflow <command> --config <dir>/config.echo.json`` repeats the run and
reproduces its CSV files byte for byte.  Exit codes: 0 all verdicts pass,
1 verification failure or diverged paths, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from typing import Optional

import numpy as np

from . import oracle
from .empirical import MarginalFlow, MollifiedView, ProbCloud, wasserstein1_to_mollified
from .model import CoefficientSet, DomainError, JumpKernel, ProbeSpec, audit_linear_growth, no_jumps
from .simulate import (
    ConfigurationError,
    PathEnsemble,
    SimulationDiverged,
    default_threads,
    marginal_at,
    simulate_base_paths,
    simulate_regularized_paths,
    time_grid,
)
from .verify import (
    MollifiedOperator,
    PlainOperator,
    martingale_battery,
    residual_sweep,
    standard_bank,
    verdict_counts,
    write_report_csv,
    write_summary_json,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "scenario": None,
    "problem": None,
    "grid": {"T": 1.0, "dt": 1e-3},
    "mc": {"n": 10000, "seed": 0},
    "mollify": {"epsilons": None, "flow": "auto"},
    "verify": {
        "times": [0.25, 0.5, 0.75, 1.0],
        "bank": "standard",
        "negative_control": None,
        "probe": [],
        "residual_bias": None,
        "martingale_bias": None,
        "w1_tol": 0.03,
        "record_stride": 1,
    },
    "fp": {"L": 30.0, "M": 6000, "t_end": 1.0, "dt": None, "times": [0.5, 1.0]},
    "output": {"directory": "jumpflow_out", "export_times": None, "svg": False},
    "allow_divergence": False,
}


class UsageError(Exception):
    pass


# --- configuration ------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _floats(text: Optional[str]):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _overrides(args) -> dict:
    """Config fragments for the flags that were actually given."""
    o: dict = {}

    def put(path, value):
        if value is None:
            return
        node = o
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("scenario",), getattr(args, "scenario", None))
    put(("grid", "T"), getattr(args, "T", None))
    put(("grid", "dt"), getattr(args, "dt", None))
    put(("mc", "n"), getattr(args, "n", None))
    put(("mc", "seed"), getattr(args, "seed", None))
    eps = getattr(args, "epsilon", None)
    if eps is not None:
        put(("mollify", "epsilons"), [eps])
    put(("mollify", "epsilons"), _floats(getattr(args, "epsilons", None)))
    put(("mollify", "flow"), getattr(args, "flow", None))
    put(("verify", "times"), _floats(getattr(args, "times_verify", None)))
    put(("verify", "negative_control"), getattr(args, "negative_control", None))
    if getattr(args, "probe", None):
        put(("verify", "probe"), list(args.probe))
    put(("verify", "w1_tol"), getattr(args, "w1_tol", None))
    put(("verify", "record_stride"), getattr(args, "record_stride", None))
    put(("fp", "L"), getattr(args, "L", None))
    put(("fp", "M"), getattr(args, "M", None))
    put(("fp", "t_end"), getattr(args, "t_end", None))
    put(("fp", "dt"), getattr(args, "fp_dt", None))
    put(("fp", "times"), _floats(getattr(args, "times_fp", None)))
    put(("output", "directory"), getattr(args, "out", None))
    put(("output", "export_times"), _floats(getattr(args, "export_times", None)))
    if getattr(args, "svg", False):
        put(("output", "svg"), True)
    if getattr(args, "allow_divergence", False):
        put(("allow_divergence",), True)
    return o


def resolve_config(command: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if loaded.get("command", command) != command:
            raise UsageError(f"config was written by '{loaded['command']}', not '{command}'")
        loaded.pop("command", None)
        cfg = _merge(cfg, loaded)
    cfg = _merge(cfg, _overrides(args))
    cfg["command"] = command
    if cfg["scenario"] is None and cfg["problem"] is None:
        raise UsageError("a scenario (--scenario) or an inline problem in --config is required")
    return cfg


# --- inline problems ------------------------------------------------------------------


def _drift_family(spec: dict, d: int):
    fam, p = spec.get("family", "zero"), spec.get("params", {})
    if fam == "zero":
        return lambda t, x: np.zeros_like(x)
    if fam == "linear":
        A = np.asarray(p.get("A", np.zeros((d, d))), dtype=float).reshape(d, d)
        c = np.asarray(p.get("c", np.zeros(d)), dtype=float).reshape(d)
        return lambda t, x: x @ A.T + c
    if fam == "sign":
        alpha = float(p.get("alpha", 1.0))
        A = np.asarray(p.get("A", -np.eye(d)), dtype=float).reshape(d, d)
        return lambda t, x: alpha * np.sign(x) + x @ A.T
    raise UsageError(f"unknown drift family {fam!r} (zero, linear, sign)")


def _diffusion_family(spec: dict, d: int):
    fam, p = spec.get("family", "zero"), spec.get("params", {})
    if fam == "zero":
        return lambda t, x: np.zeros((x.shape[0], d, d))
    if fam == "constant":
        S = np.asarray(p.get("sigma", np.eye(d)), dtype=float).reshape(d, d)
        return lambda t, x: np.broadcast_to(S, (x.shape[0], d, d))
    if fam == "affine-scalar":
        s0, s1 = float(p.get("s0", 1.0)), float(p.get("s1", 0.0))
        return lambda t, x: (s0 + s1 * np.linalg.norm(x, axis=1))[:, None, None] * np.eye(d)
    raise UsageError(f"unknown diffusion family {fam!r} (zero, constant, affine-scalar)")


def _rate_family(spec: dict):
    fam, p = spec.get("family", "constant"), spec.get("params", {})
    if fam == "constant":
        v = float(p.get("value", 1.0))
        return (lambda t, w, x: np.full(x.shape[0], v)), v
    if fam == "lorentz":
        v = float(p.get("value", 1.0))
        return (lambda t, w, x: v / (1.0 + np.sum(x * x, axis=1))), v
    raise UsageError(f"unknown rate family {fam!r} (constant, lorentz)")


def build_problem(problem: dict, horizon: float) -> oracle.Scenario:
    """Scenario from an inline JSON problem built from registered families."""
    try:
        d = int(problem.get("dim", 1))
        coeffs = CoefficientSet(
            d, _drift_family(problem.get("drift", {}), d), _diffusion_family(problem.get("diffusion", {}), d), horizon
        )
        jumps = problem.get("jumps")
        if not jumps:
            kernel = no_jumps(d)
        else:
            marks = jumps["marks"]
            weights = np.array([float(m["weight"]) for m in marks])
            shifts = np.array([np.asarray(m["shift"], dtype=float).reshape(d) for m in marks])
            labels = np.arange(len(marks))
            rate, bound = _rate_family(jumps.get("rate", {}))
            kernel = JumpKernel(d, weights, labels, lambda t, w, x: shifts[np.asarray(w, dtype=int)], rate, bound)
        init = problem.get("initial", {"points": [[0.0] * d]})
        cloud = ProbCloud(np.asarray(init["points"], dtype=float).reshape(-1, d), init.get("weights"))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid inline problem: {exc}") from exc
    return oracle.Scenario(problem.get("name", "inline"), coeffs, kernel, cloud, notes="inline problem")


def load_scenario(cfg: dict) -> oracle.Scenario:
    T = float(cfg["grid"]["T"])
    if cfg["problem"] is not None:
        return build_problem(cfg["problem"], T)
    try:
        return oracle.scenario(cfg["scenario"], horizon=T)
    except oracle.UnknownScenario as exc:
        raise UsageError(str(exc.args[0])) from exc


def _flow_for(sc: oracle.Scenario, grid, cfg) -> MarginalFlow:
    """Exact flow when available, else the grid-solver flow on the same time grid."""
    mode = cfg["mollify"]["flow"]
    if mode not in ("auto", "exact", "grid"):
        raise UsageError("mollify.flow must be auto, exact or grid")
    if sc.exact_marginal is not None and mode in ("auto", "exact"):
        return sc.exact_flow(grid)
    if mode == "exact":
        raise UsageError(f"scenario {sc.name!r} has no exact marginal")
    fp = cfg["fp"]
    L, M = float(fp["L"]), int(fp["M"])
    dt = fp["dt"] or oracle.stable_dt(sc, L, M, None)
    solved = oracle.fp_grid_solve(sc, L, M, float(grid[-1]), dt, output_times=list(grid))
    return solved.to_flow(coarsen_width=0.05, drop_below=1e-12)


# --- output helpers --------------------------------------------------------------------


def _outdir(cfg) -> str:
    d = cfg["output"]["directory"]
    os.makedirs(d, exist_ok=True)
    return d


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo(cfg, out: str) -> None:
    _write_json(os.path.join(out, "config.echo.json"), cfg)


def write_svg(path, xs, ys, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Minimal polyline plot, for eyeballing a report."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    W, H, pad = 480, 320, 40
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1
    px = pad + (xs - x0) / (x1 - x0) * (W - 2 * pad)
    py = H - pad - (ys - y0) / (y1 - y0) * (H - 2 * pad)
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">\n'
        f'<rect width="{W}" height="{H}" fill="white"/>\n'
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>\n'
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>\n'
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{xlabel} [{x0:.3g}, {x1:.3g}]</text>\n'
        f'<text x="8" y="{pad - 8}" font-size="11">{ylabel} [{y0:.3g}, {y1:.3g}]</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>\n'
        "</svg>\n"
    )
    with open(path, "w") as fh:
        fh.write(svg)


def _export_times(ens: PathEnsemble, cfg) -> list:
    """Requested export times, or at most 11 evenly spaced recorded times."""
    req = cfg["output"]["export_times"]
    if req is not None:
        return req
    K = ens.grid.size - 1
    step = max(1, int(np.ceil(K / 10)))
    ks = sorted(set(range(0, K + 1, step)) | {K})
    return [float(ens.grid[k]) for k in ks]


def _simulate(sc, cfg, eps=None, flow=None, record_stride=None, record_jumps=False):
    T, dt = float(cfg["grid"]["T"]), float(cfg["grid"]["dt"])
    grid = time_grid(T, dt)
    n, seed = int(cfg["mc"]["n"]), int(cfg["mc"]["seed"])
    if record_stride is None:
        K = grid.size - 1
        record_stride = max(1, K // 100) if K % max(1, K // 100) == 0 else 1
    kw = dict(record_stride=record_stride, allow_divergence=bool(cfg["allow_divergence"]),
              threads=cfg.get("threads"), record_jumps=record_jumps)
    if eps is None:
        return simulate_base_paths(sc.coeffs, sc.kernel, sc.initial, grid, n, seed, **kw)
    if flow is None:
        flow = _flow_for(sc, grid, cfg)
    return simulate_regularized_paths(sc.coeffs, sc.kernel, flow, eps, grid, n, seed, **kw)


# --- commands ---------------------------------------------------------------------------


def cmd_scenario_list(args) -> int:
    for name in oracle.list_scenarios():
        sc = oracle.scenario(name)
        exact = "exact marginal" if sc.exact_marginal is not None else "no closed form"
        print(f"{name:18s} {exact:16s} {sc.notes}")
    return EXIT_OK


def cmd_simulate(cfg) -> int:
    sc = load_scenario(cfg)
    eps_list = cfg["mollify"]["epsilons"]
    if eps_list is not None and len(eps_list) != 1:
        raise UsageError("simulate takes a single --epsilon")
    eps = None if not eps_list else float(eps_list[0])
    out = _outdir(cfg)
    _echo(cfg, out)
    try:
        ens = _simulate(sc, cfg, eps=eps)
    except SimulationDiverged as exc:
        _write_json(os.path.join(out, "summary.json"), {"diverged_count": exc.count, "error": str(exc)})
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    ens.meta["scenario"] = sc.name
    ens.to_csv(os.path.join(out, "ensemble.csv"), times=_export_times(ens, cfg))
    ens.write_summary(os.path.join(out, "summary.json"))
    if cfg["output"]["svg"]:
        m = np.mean(ens.states[:, :, 0], axis=0)
        write_svg(os.path.join(out, "mean.svg"), ens.grid, m, f"{sc.name}: mean of X_t", "t", "E X")
    print(f"wrote {ens.n_paths} paths to {out}")
    return EXIT_OK


def _double_drift(sc: oracle.Scenario) -> oracle.Scenario:
    c = sc.coeffs
    probe = np.linspace(-5, 5, 41)[:, None] * np.ones((1, c.dim))
    if not np.any(c.b(0.0, probe)):
        raise UsageError(f"double-drift control is vacuous for {sc.name!r}: its drift is zero")
    doubled = CoefficientSet(c.dim, lambda t, x: 2.0 * c.drift(t, x), c.diffusion, c.horizon)
    return oracle.Scenario(sc.name + "+double-drift", doubled, sc.kernel, sc.initial, notes="negative control")


def _load_ensemble_csv(path: str, seed: int) -> PathEnsemble:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ids = data[:, 0].astype(np.int64)
    times = np.unique(data[:, 1])
    n = int(ids.max()) + 1
    d = data.shape[1] - 2
    states = np.empty((n, times.size, d))
    k = np.searchsorted(times, data[:, 1])
    states[ids, k] = data[:, 2:]
    return PathEnsemble(times, states, seed, np.zeros(n, np.int64), np.zeros(n, bool))


def cmd_verify(cfg, ensemble_path: Optional[str] = None) -> int:
    sc = load_scenario(cfg)
    out = _outdir(cfg)
    _echo(cfg, out)
    vcfg = cfg["verify"]
    probes = set(vcfg["probe"])
    unknown = probes - {"growth", "lipschitz", "aldous"}
    if unknown:
        raise UsageError(f"unknown probe(s) {sorted(unknown)}; choose from growth, lipschitz, aldous")
    if "growth" in probes:
        spec = ProbeSpec(times=(0.0, 0.5 * sc.horizon, sc.horizon), radii=(1, 10, 100, 1000), samples_per_radius=64)
        report = audit_linear_growth(sc.coeffs, sc.kernel, spec)
        _write_json(os.path.join(out, "growth.json"), report.to_dict())
    if ensemble_path is not None:
        ens = _load_ensemble_csv(ensemble_path, int(cfg["mc"]["seed"]))
    else:
        ens = _simulate(sc, cfg, record_stride=int(vcfg["record_stride"]), record_jumps="aldous" in probes)
    # the statistics are computed with the (possibly perturbed) model under test
    model = _double_drift(sc) if vcfg["negative_control"] == "double-drift" else sc
    if vcfg["negative_control"] not in (None, "double-drift"):
        raise UsageError("the only negative control is double-drift")
    flow = MarginalFlow.from_ensemble(ens)
    rb = sc.residual_bias if vcfg["residual_bias"] is None else float(vcfg["residual_bias"])
    mb = sc.martingale_bias if vcfg["martingale_bias"] is None else float(vcfg["martingale_bias"])
    times = [t for t in vcfg["times"] if t <= ens.grid[-1] + 1e-12]
    bank = standard_bank(sc.dim)
    residuals = residual_sweep(flow, model.coeffs, model.kernel, bank, times, bias_constant=rb)
    op = PlainOperator(model.coeffs, model.kernel)
    mart = martingale_battery(ens, op, bias_constant=mb)
    write_report_csv(residuals, os.path.join(out, "residuals.csv"))
    write_report_csv(mart, os.path.join(out, "martingale.csv"))
    extra = {"residuals": verdict_counts(residuals), "martingale": verdict_counts(mart), "scenario": sc.name}
    if "aldous" in probes:
        from .simulate import aldous_modulus

        betas = [b for b in (1e-3, 1e-2, 0.05, 0.1, 0.25) if b >= ens.grid[1] - ens.grid[0] - 1e-12]
        anchors = [0.0, 0.25, 0.5, 0.75]
        tab = aldous_modulus(ens, betas, anchors, first_jump=ens.jump_log is not None)
        extra["aldous_constant"] = tab.constant
    if "lipschitz" in probes:
        from .verify import lipschitz_probe

        view = MollifiedView(flow.at(0.5 * sc.horizon), 0.1)
        extra["lipschitz"] = {str(k): v for k, v in lipschitz_probe(view, sc.coeffs, 0.5 * sc.horizon, 3.0).items()}
    reports = residuals + mart
    write_summary_json(reports, os.path.join(out, "summary.json"), extra)
    if cfg["output"]["svg"]:
        write_svg(os.path.join(out, "residuals.svg"), np.arange(len(residuals)),
                  [abs(r.value) for r in residuals], "|R| per residual row", "row", "|R|")
    failed = [r for r in reports if r.verdict != "pass"]
    for r in failed:
        print(f"FAIL {r.row()['test_fn_id']} t={r.row()['t']:g} value={r.value:.3e} se={r.se:.2e}", file=sys.stderr)
    print(f"{len(reports) - len(failed)}/{len(reports)} verdicts pass")
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_chain(cfg) -> int:
    sc = load_scenario(cfg)
    eps_list = cfg["mollify"]["epsilons"]
    if not eps_list:
        raise UsageError("chain needs --epsilons (comma-separated list of eps in (0,1))")
    if sc.dim != 1:
        raise UsageError("chain marginal comparison is implemented for d = 1")
    out = _outdir(cfg)
    _echo(cfg, out)
    T, dt = float(cfg["grid"]["T"]), float(cfg["grid"]["dt"])
    grid = time_grid(T, dt)
    flow = _flow_for(sc, grid, cfg)
    tol = float(cfg["verify"]["w1_tol"])
    rows, all_reports = [], []
    for eps in eps_list:
        ens = _simulate(sc, cfg, eps=float(eps), flow=flow, record_stride=1)
        w1 = wasserstein1_to_mollified(marginal_at(ens, T), MollifiedView(flow.at(T), float(eps)))
        op = MollifiedOperator(sc.coeffs, sc.kernel, flow, float(eps))
        mart = martingale_battery(ens, op, bias_constant=sc.martingale_bias)
        all_reports += mart
        mcount = verdict_counts(mart)
        rows.append(
            {
                "epsilon": float(eps),
                "w1": w1,
                "w1_tol": tol,
                "sup_norm_moment": float(ens.summary()["sup_norm_moment"]),
                "martingale_pass": mcount["pass"],
                "martingale_total": mcount["total"],
                "verdict": "pass" if (w1 <= tol and mcount["fail"] == 0) else "fail",
            }
        )
    with open(os.path.join(out, "chain.csv"), "w") as fh:
        cols = list(rows[0])
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    write_report_csv(all_reports, os.path.join(out, "martingale.csv"))
    _write_json(os.path.join(out, "summary.json"), {"scenario": sc.name, "per_epsilon": rows,
                                                     "pass": sum(r["verdict"] == "pass" for r in rows),
                                                     "fail": sum(r["verdict"] != "pass" for r in rows)})
    if cfg["output"]["svg"]:
        write_svg(os.path.join(out, "chain.svg"), [r["epsilon"] for r in rows], [r["w1"] for r in rows],
                  "W1 to smoothed flow", "eps", "W1")
    for r in rows:
        print(f"eps={r['epsilon']:g} W1={r['w1']:.4g} (tol {tol:g}) martingale {r['martingale_pass']}/"
              f"{r['martingale_total']} -> {r['verdict']}")
    return EXIT_OK if all(r["verdict"] == "pass" for r in rows) else EXIT_FAIL


def cmd_fp_solve(cfg) -> int:
    sc = load_scenario(cfg)
    fp = cfg["fp"]
    L, M, t_end = float(fp["L"]), int(fp["M"]), float(fp["t_end"])
    dt = fp["dt"] if fp["dt"] is not None else oracle.stable_dt(sc, L, M, None)
    out = _outdir(cfg)
    _echo(cfg, out)
    times = [t for t in fp["times"] if 0 <= t <= t_end]
    solved = oracle.fp_grid_solve(sc, L, M, t_end, float(dt), output_times=times)
    paths = oracle.write_grid_flow(solved, out)
    last = solved.densities[-1]
    _write_json(
        os.path.join(out, "summary.json"),
        {
            "scenario": sc.name,
            "L": L,
            "M": M,
            "dt": float(dt),
            "times": [float(t) for t in solved.times],
            "leaked_mass": last.leaked_mass,
            "clipped_mass": last.clipped_mass,
            "mass_defect": last.mass_defect(),
            "files": [os.path.basename(p) for p in paths],
        },
    )
    if cfg["output"]["svg"]:
        write_svg(os.path.join(out, "density.svg"), last.centers, last.density, f"{sc.name} at t={t_end:g}", "x", "f")
    print(f"wrote {len(paths)} density files to {out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, grid=True, mc=True) -> None:
    p.add_argument("--config", help="JSON config (e.g. a config.echo.json from an earlier run)")
    p.add_argument("--scenario", help="registered scenario name (see 'scenario list')")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker cap (fallback: JUMPFLOW_THREADS)")
    p.add_argument("--svg", action="store_true", help="also write a minimal SVG plot")
    if grid:
        p.add_argument("--T", type=float, help="horizon")
        p.add_argument("--dt", type=float, help="time step")
    if mc:
        p.add_argument("--n", type=int, help="number of paths")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--allow-divergence", action="store_true", help="exclude diverged paths with a warning")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jumpflow", description="Jump SDE / nonlocal Fokker-Planck verification")
    sub = ap.add_subparsers(dest="command", required=True)

    sl = sub.add_parser("scenario", help="scenario registry")
    sl_sub = sl.add_subparsers(dest="action", required=True)
    sl_sub.add_parser("list", help="list registered scenarios")

    s = sub.add_parser("simulate", help="simulate the base or (with --epsilon) the regularized SDE")
    _common(s)
    s.add_argument("--epsilon", type=float, help="mollification parameter; switches to the regularized SDE")
    s.add_argument("--flow", choices=["auto", "exact", "grid"], help="flow driving the regularized SDE")
    s.add_argument("--export-times", help="comma-separated times written to ensemble.csv")

    v = sub.add_parser("verify", help="weak residuals and martingale statistics")
    _common(v)
    v.add_argument("--ensemble", help="ensemble.csv from 'simulate' (default: simulate afresh)")
    v.add_argument("--times", dest="times_verify", help="comma-separated residual times")
    v.add_argument("--negative-control", choices=["double-drift"], help="verify against a perturbed model")
    v.add_argument("--probe", action="append", choices=["growth", "lipschitz", "aldous"], help="extra probes")
    v.add_argument("--record-stride", type=int, help="keep every k-th simulated step")

    c = sub.add_parser("chain", help="mollify -> regularized SDE -> marginal and martingale checks")
    _common(c)
    c.add_argument("--epsilons", required=True, help="comma-separated eps values in (0, 1)")
    c.add_argument("--flow", choices=["auto", "exact", "grid"], help="flow source")
    c.add_argument("--w1-tol", type=float, help="W1 tolerance per eps (default 0.03)")

    f = sub.add_parser("fp-solve", help="finite-volume solution of the forward equation (d = 1)")
    _common(f, grid=False, mc=False)
    f.add_argument("--L", type=float, help="half-width of the domain")
    f.add_argument("--M", type=int, help="number of cells")
    f.add_argument("--t-end", type=float, help="final time")
    f.add_argument("--fp-dt", "--step", dest="fp_dt", type=float, help="explicit time step (default: stable bound)")
    f.add_argument("--times", dest="times_fp", help="comma-separated output times")
    f.add_argument("--T", type=float, help="coefficient horizon")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    if args.command == "scenario":
        return cmd_scenario_list(args)
    try:
        cfg = resolve_config(args.command, args)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            cfg["threads"] = args.threads
        else:
            cfg.setdefault("threads", default_threads())
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "verify":
            return cmd_verify(cfg, getattr(args, "ensemble", None))
        if args.command == "chain":
            return cmd_chain(cfg)
        if args.command == "fp-solve":
            return cmd_fp_solve(cfg)
    except (UsageError, ConfigurationError, DomainError, oracle.StabilityError) as exc:
        print(f"jumpflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"jumpflow: error: missing input {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
