"""Command line entry point: ``mfchaos <subcommand> [options]``."""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .chaos import ExperimentPlan, assess, fit_rate, predictor_values, run_experiment
from .config import ConfigError, canonical_dump, config_hash, load_config
from .measures import RateTable
from .parametrix import (FrozenProxyContext, calibrate_kernel_constant, export_density_csv,
                         gaussian_bound_check, kolmogorov_residual, parametrix_series)
from .simulator import SimConfig, simulate_particle_system

SUBCOMMANDS = ("simulate", "chaos-path", "chaos-weak", "chaos-density", "parametrix-check", "pde-residual",
               "rates")

# plans used when no --config is given
DEFAULT_PLANS = {
    "simulate": dict(model="linear-mean-field", statistic="weak", N_list=[256], R=30, M=4096, dt=1e-2),
    "chaos-path": dict(model="linear-mean-field", statistic="path", N_list=[64, 256, 1024, 4096], R=50,
                       M=32768, dt=1 / 640, init={"kind": "rademacher", "loc": 0.0, "scale": 1.0},
                       predictor="log_epsN", expected_slope=1.0, slope_tol=0.25, require_decreasing=True),
    "chaos-weak": dict(model="linear-mean-field", statistic="weak", N_list=[16, 64, 256], R=2000, M=4096,
                       dt=1e-2, functional="mean-squared", expected_slope=-1.0, slope_tol=0.2),
    "chaos-density": dict(model="linear-mean-field", statistic="density", N_list=[16, 32, 64, 128, 256],
                          M=8192, dt=2e-3, total_draws=4_000_000, expected_slope=-1.0, slope_tol=0.3),
    "parametrix-check": dict(model="constant", statistic="weak", N_list=[16], R=30, M=4096, dt=1e-2),
    "pde-residual": dict(model="constant", statistic="weak", N_list=[16], R=30, M=4096, dt=1e-2,
                         init={"kind": "atoms", "atoms": [-0.5, 0.3, 1.0]}),
}
STAT_OF = {"chaos-path": "path", "chaos-weak": "weak", "chaos-density": "density"}


def _write_kv(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in pairs:
            fh.write(f"{k}: {v}\n")


def _plot_files(out, name, table: RateTable, fit):
    """Plot data (logN, logError, fit) and a matplotlib script stub."""
    data = os.path.join(out, f"{name}_plot.csv")
    with open(data, "w", encoding="utf-8") as fh:
        fh.write("logN,logError,fit\n")
        for n, e in zip(table.N, table.error):
            logn = math.log(n)
            line = ""
            if fit is not None:
                x = float(predictor_values([n], fit.predictor, int(table.meta.get("d", 1)))[0])
                line = repr(fit.intercept + fit.slope * x)
            fh.write(f"{logn!r},{(math.log(e) if e > 0 else float('-inf'))!r},{line}\n")
    script = os.path.join(out, f"plot_{name}.py")
    with open(script, "w", encoding="utf-8") as fh:
        fh.write(
            "import csv\n"
            "import matplotlib.pyplot as plt\n\n"
            f"rows = list(csv.DictReader(open({os.path.basename(data)!r})))\n"
            "x = [float(r['logN']) for r in rows]\n"
            "plt.plot(x, [float(r['logError']) for r in rows], 'o', label='measured')\n"
            "if rows and rows[0]['fit']:\n"
            "    plt.plot(x, [float(r['fit']) for r in rows], '-', label='fit')\n"
            "plt.xlabel('log N')\nplt.ylabel('log error')\nplt.legend()\n"
            f"plt.savefig({name + '.png'!r})\n")
    return [data, script]


def _experiment(args, plan: ExperimentPlan, out, name):
    table = run_experiment(plan)
    report = assess(table, plan, strict=args.strict)
    csv_path = os.path.join(out, f"{name}_table.csv")
    table.to_csv(csv_path)
    summ = os.path.join(out, f"{name}_summary.txt")
    with open(summ, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
        for key in sorted(table.meta):
            fh.write(f"meta_{key}: {table.meta[key]!r}\n")
    return report.verdict, [csv_path, summ] + _plot_files(out, name, table, report.fit)


def _simulate(args, plan, out, name):
    coeffs = plan.coefficients()
    cfg = SimConfig(N=plan.N_list[0], dt=plan.dt, T=plan.T, seed=plan.seed,
                    waive_ellipticity=plan.waive_ellipticity)
    bundle, flow = simulate_particle_system(coeffs, plan.init_spec(), cfg, R=1)
    fdir = os.path.join(out, f"{name}_flow")
    every = max(1, cfg.steps // 10)
    flow.to_csv(fdir, every=every)
    term = os.path.join(out, f"{name}_terminal.csv")
    flow.cloud(flow.times.size - 1).to_csv(term)
    ok = bool(np.all(np.isfinite(bundle.particle_paths)))
    return ("pass" if ok else "fail"), [fdir, term]


def _parametrix_check(args, plan, out, name):
    coeffs = plan.coefficients()
    if coeffs.dim != 1:
        raise ConfigError("parametrix-check runs in d=1")
    from .chaos import reference_flow

    flow = reference_flow(plan, coeffs) if coeffs.measure_dependent else None
    ctx = FrozenProxyContext(coeffs, flow, s=0.0, T=plan.T)
    zs = np.linspace(-3, 3, 41)
    lines = []
    if coeffs.name in ("constant", "constant-drift"):
        sig2 = float(coeffs.params.get("sigma", 1.0)) ** 2
        beta = float(coeffs.params.get("beta", 0.0))
        K = 0 if coeffs.name == "constant" else 12
        vals, tb = parametrix_series(ctx, K, 0.0, zs[:, None], plan.T)
        exact = np.exp(-0.5 * (zs - beta * plan.T) ** 2 / (sig2 * plan.T)) / math.sqrt(2 * math.pi * sig2 * plan.T)
        err = float(np.max(np.abs(vals - exact)))
        tol = 1e-10 if coeffs.name == "constant" else 1e-4
        verdict = "pass" if err < tol else "fail"
        lines += [("check", "closed form"), ("K", K), ("max_abs_error", repr(err)), ("tolerance", repr(tol))]
    else:
        K = 6
        calibrate_kernel_constant(ctx)
        bc = gaussian_bound_check(ctx, K, [-1.0, 0.0, 1.0], n_samples=100, seed=plan.seed)
        verdict = "pass" if bc.violations == 0 else "fail"
        lines += [("check", "gaussian upper bound"), ("K", K), ("C", repr(bc.C)),
                  ("violations", bc.violations), ("samples", bc.n_samples)]
    dens = os.path.join(out, f"{name}_density.csv")
    export_density_csv(dens, ctx, [0.0], zs, plan.T, K)
    summ = os.path.join(out, f"{name}_summary.txt")
    _write_kv(summ, [("verdict", verdict)] + lines)
    return verdict, [dens, summ]


def _pde_residual(args, plan, out, name):
    coeffs = plan.coefficients()
    init = plan.init_spec()
    mu0 = init.quadrature(coeffs.dim, n=8)
    if mu0.size > 64:
        raise ConfigError("pde-residual needs an initial law with at most 64 atoms")
    from .parametrix import FlowBuilder

    s, t = 0.2 * plan.T, plan.T
    builder = FlowBuilder(coeffs, M=min(plan.M, 2048), dt=0.02 * plan.T, seed=plan.seed)
    flow = builder(mu0, s, t)
    ctx = FrozenProxyContext(coeffs, flow, s=s, T=t)
    z = np.linspace(-2, 2, 9)[:, None] * np.ones((1, coeffs.dim))
    K = 0 if not coeffs.measure_dependent and coeffs.name == "constant" else args.K
    h = args.fd
    r1 = kolmogorov_residual(ctx, mu0, t, z, fd=(h, h), K=K, builder=builder)
    r2 = kolmogorov_residual(ctx, mu0, t, z, fd=(h / 2, h / 2), K=K, builder=builder)
    ratio = r1.value / r2.value if r2.value > 0 else math.inf
    tol = args.tol
    ok = r1.value < tol and (coeffs.measure_dependent or 3.2 <= ratio <= 4.8 or r1.value < 1e-12)
    verdict = "pass" if ok else "fail"
    rep = os.path.join(out, f"{name}_residual.txt")
    with open(rep, "w", encoding="utf-8") as fh:
        fh.write(f"verdict: {verdict}\ntolerance: {tol!r}\nhalving_ratio: {ratio!r}\n")
        fh.write(r1.to_text())
    return verdict, [rep]


def _rates(args, out, name):
    table = RateTable.from_csv(args.table, meta={"d": args.dim})
    fit = fit_rate(table, args.predictor)
    verdict = "pass"
    if args.expected is not None:
        verdict = "pass" if abs(fit.slope - args.expected) <= args.tol else "fail"
    summ = os.path.join(out, f"{name}_fit.txt")
    with open(summ, "w", encoding="utf-8") as fh:
        fh.write(f"verdict: {verdict}\n" + fit.to_text())
    return verdict, [summ] + _plot_files(out, name, table, fit)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfchaos", description="McKean-Vlasov propagation-of-chaos lab")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="unsigned 64-bit seed, overrides the config")
        sp.add_argument("--out", default="mfchaos-out", help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (0 = auto)")
        sp.add_argument("--strict", action="store_true", help="treat inconclusive rows as failures")
        if name == "rates":
            sp.add_argument("table", help="RateTable CSV")
            sp.add_argument("--predictor", default="logN", choices=["logN", "log_epsN"])
            sp.add_argument("--dim", type=int, default=1)
            sp.add_argument("--expected", type=float, default=None)
            sp.add_argument("--tol", type=float, default=0.25)
        if name == "pde-residual":
            sp.add_argument("--fd", type=float, default=1e-3, help="finite-difference step (time and space)")
            sp.add_argument("--K", type=int, default=8, help="series truncation for measure-dependent models")
            sp.add_argument("--tol", type=float, default=1e-5, help="residual tolerance")
    return p


def _plans(args):
    if args.config:
        plans = load_config(args.config)
    else:
        plans = [ExperimentPlan(**DEFAULT_PLANS[args.command])]
    out = []
    for p in plans:
        kw = {}
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            kw["seed"] = args.seed
        if args.threads is not None:
            kw["threads"] = args.threads
        stat = STAT_OF.get(args.command)
        if stat is not None and p.statistic != stat:
            if args.config:
                raise ConfigError(f"{args.command} needs statistic {stat!r}, config has {p.statistic!r}")
            kw["statistic"] = stat
        out.append(replace(p, **kw) if kw else p)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.time()
    out = args.out
    try:
        os.makedirs(out, exist_ok=True)
        name = args.command.replace("-", "_")
        results = []
        if args.command == "rates":
            results.append(_rates(args, out, name))
            plans = []
        else:
            plans = _plans(args)
            handler = {"simulate": _simulate, "parametrix-check": _parametrix_check,
                       "pde-residual": _pde_residual}.get(args.command, _experiment)
            for i, plan in enumerate(plans):
                tag = name if len(plans) == 1 else f"{name}_{i}"
                results.append(handler(args, plan, out, tag))
    except (ConfigError, ValueError, OSError) as exc:
        print(f"status: error\ncommand: {args.command}\nreason: {exc}", file=sys.stderr)
        return 2
    verdicts = [v for v, _ in results]
    pairs = [("tool", "mfchaos"), ("version", __version__), ("command", args.command)]
    if plans:
        pairs += [("config_hash", config_hash(plans)), ("seed", plans[0].seed)]
        with open(os.path.join(out, "config.canonical.yaml"), "w", encoding="utf-8") as fh:
            fh.write(canonical_dump(plans))
    pairs += [("wall_time_s", f"{time.time() - t0:.3f}")]
    for i, (v, paths) in enumerate(results):
        pairs.append((f"verdict_{i}", v))
        for j, pth in enumerate(paths):
            pairs.append((f"output_{i}_{j}", pth))
    _write_kv(os.path.join(out, "manifest.txt"), pairs)
    failed = [i for i, v in enumerate(verdicts) if v != "pass"]
    if failed:
        print(f"status: fail\ncommand: {args.command}\nfailed: {' '.join(map(str, failed))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
