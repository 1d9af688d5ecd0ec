"""Command-line interface.

Subcommands: sample (run a sampler and emit metrics), convergence (order
estimation), stability (lambda sweep of the eigenvalue predicate), equivalence
(DDIM / exponential-integrator checks, exit 0 iff pass), dump-coeffs
(coefficient-table CSV). Structured errors map to per-class exit codes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import splitting
from .config import load_config, serialize_config
from .conjugate import (BTChoice, BT_LAMBDA_I, BT_LAMBDA_ONES, BT_ZERO, build_table,
                        conjugate_euler_step, dump_table, run_conjugate, stability_report)
from .equivalence import ab_exp_integrator_step, ddim_step, exp_integrator_step
from .errors import PhasediffError
from .harness import (RunConfig, build_param, default_benchmark_mixture, lambda_sweep,
                      make_schedule, run, write_csv, convergence_order)
from .score import ScoreProvider, default_param, stationary_gaussian
from .sde import ProcessSpec, sample_prior


def _base_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig(spec=ProcessSpec(), mix=default_benchmark_mixture())
    over = {}
    if getattr(args, "sampler", None):
        over["sampler"] = args.sampler
    if getattr(args, "steps", None):
        over["steps"] = args.steps
    if getattr(args, "lam", None) is not None:
        over["lam"] = args.lam
    if getattr(args, "lambda_s", None) is not None:
        over["lambda_s"] = args.lambda_s
        over["churn_enabled"] = args.lambda_s > 0.0
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None):
        over["out"] = args.out
    if getattr(args, "denoise", None):
        over["denoise"] = args.denoise == "on"
    return dataclasses.replace(cfg, **over) if over else cfg


def _cmd_sample(args) -> int:
    cfg = _base_config(args)
    report = run(cfg)
    if cfg.out:
        write_csv(cfg.out, [report.csv_row])
        with open(cfg.out + ".json", "w") as fh:
            fh.write(report.to_json() + "\n")
        print(f"wrote {cfg.out} and {cfg.out}.json")
    else:
        print(report.to_json())
    return 0


def _cmd_sweep(args) -> int:
    cfg = _base_config(args)
    lambdas = [float(x) for x in args.lambdas.split(",")]
    rows = lambda_sweep(cfg, lambdas)
    if cfg.out:
        write_csv(cfg.out, rows)
        print(f"wrote {cfg.out}")
    for r in rows:
        print(f"lambda={r['lambda']:+.4f}  sliced_w1={r['sliced_w1']:.5f}")
    return 0


def _cmd_convergence(args) -> int:
    cfg = _base_config(args)
    h_grid = np.geomspace(args.h_min, args.h_max, args.h_points)
    mix = stationary_gaussian(cfg.spec, cfg.mix.d)
    for kind in args.kinds.split(","):
        res = convergence_order(kind, cfg.spec, mix, h_grid)
        print(f"{kind}: position slope {res['slope_x']:.3f}, momentum slope "
              f"{res['slope_m']:.3f}, momentum h^2 coefficient {res['coef_m']:.4g}")
    return 0


def _cmd_stability(args) -> int:
    cfg = _base_config(args)
    mix = stationary_gaussian(cfg.spec, cfg.mix.d)
    provider = ScoreProvider(mix, cfg.spec, build_param(cfg))
    kind = {"zero": BT_ZERO, "i": BT_LAMBDA_I, "ones": BT_LAMBDA_ONES}[args.bt]
    lambdas = [float(x) for x in args.lambdas.split(",")]
    print(f"t={args.t} h={args.h} bt={args.bt}")
    for lam in lambdas:
        rep = stability_report(provider, args.t, BTChoice(kind, lam), args.h)
        eig = ", ".join(f"{v:.4g}" for v in rep.lambda_tilde)
        print(f"lambda={lam:+.4f}  eig=[{eig}]  margins="
              f"[{', '.join(f'{m:.4f}' for m in rep.margins)}]  "
              f"{'stable' if rep.stable else 'UNSTABLE'}")
    return 0


def _cmd_equivalence(args) -> int:
    """Verify the DDIM and exponential-integrator equivalences; exit 0 iff both hold."""
    ok = True

    # DDIM route: VP process, single-Gaussian score, B = 0
    vp = ProcessSpec(kind="vp", beta=8.0, T=1.0)
    mix = stationary_gaussian(vp, 2)
    sched = make_schedule("quadratic", args.steps, vp.T, 1e-3)
    provider = ScoreProvider(mix, vp)
    table = build_table(vp, provider.param, BTChoice(BT_ZERO), sched.times, quad_tol=1e-13)
    oracle = ScoreProvider(mix, vp)
    z = sample_prior(vp, 4, 2, np.random.default_rng(args.seed))
    worst = 0.0
    for i in range(args.steps):
        t, t_next = float(sched.times[i]), float(sched.times[i + 1])
        z_conj = conjugate_euler_step(table, i, z, provider)
        z_ddim = ddim_step(vp, z, t, t_next, oracle.evaluate(z, t).eps)
        worst = max(worst, float(np.max(np.abs(z_conj - z_ddim))))
        z = z_conj
    print(f"DDIM equivalence (VP, B=0): max |diff| = {worst:.3e} (tol 1e-10)")
    ok &= worst < 1e-10

    # exponential-integrator route: PSLD defaults, B = 0
    psld = ProcessSpec()
    mixp = stationary_gaussian(psld, 2)
    sched = make_schedule("quadratic", max(args.steps // 2, 10), psld.T, 1e-3)
    provider = ScoreProvider(mixp, psld)
    table = build_table(psld, provider.param, BTChoice(BT_ZERO), sched.times, quad_tol=1e-13)
    oracle = ScoreProvider(mixp, psld)
    z = sample_prior(psld, 4, 2, np.random.default_rng(args.seed + 1))
    worst_e = 0.0
    n = len(sched.times) - 1
    for i in range(n):
        t, t_next = float(sched.times[i]), float(sched.times[i + 1])
        z_conj = conjugate_euler_step(table, i, z, provider)
        z_exp = exp_integrator_step(psld, oracle.param, z, t, t_next, oracle.evaluate(z, t).eps)
        worst_e = max(worst_e, float(np.max(np.abs(z_conj - z_exp))))
        z = z_conj
    print(f"exponential-integrator equivalence (PSLD, B=0): max |diff| = {worst_e:.3e} (tol 1e-8)")
    ok &= worst_e < 1e-8

    # polynomial extrapolation vs Adams-Bashforth at r=1
    provider.reset_nfe()
    z = sample_prior(psld, 4, 2, np.random.default_rng(args.seed + 2))
    z_ab = z.copy()
    hist = []
    eps_hist = []
    worst_ab = 0.0
    for i in range(n):
        t, t_next = float(sched.times[i]), float(sched.times[i + 1])
        ev = oracle.evaluate(z, t)
        if hist:
            nodes = np.array([t, float(sched.times[hist[-1]])])
            z_poly = ab_exp_integrator_step(psld, oracle.param, z, t, t_next, nodes,
                                            [ev.eps, eps_hist[-1]])
        else:
            z_poly = exp_integrator_step(psld, oracle.param, z, t, t_next, ev.eps)
        from .conjugate import conjugate_ab_step

        z_ab_next, eps_i = conjugate_ab_step(table, i, z_ab, provider,
                                             [(j, e) for j, e in zip(hist, eps_hist)],
                                             r=min(1, len(hist)))
        worst_ab = max(worst_ab, float(np.max(np.abs(z_ab_next - z_poly))))
        hist.append(i)
        eps_hist.append(eps_i)
        z, z_ab = z_poly, z_ab_next
    print(f"polynomial extrapolation vs Adams-Bashforth (r=1): max |diff| = {worst_ab:.3e} (tol 1e-6)")
    ok &= worst_ab < 1e-6

    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_dump_coeffs(args) -> int:
    cfg = _base_config(args)
    sched = make_schedule(cfg.schedule_kind, cfg.steps, cfg.spec.T, cfg.eps)
    kind = {"zero": BT_ZERO, "i": BT_LAMBDA_I, "ones": BT_LAMBDA_ONES}[args.bt]
    bt = BTChoice(kind, cfg.lam)
    mask = args.mask if args.mask != "none" else None
    table = build_table(cfg.spec, build_param(cfg), bt, sched.times, mask=mask,
                        quad_tol=cfg.quad_tol)
    dump_table(table, args.out or "coeffs.csv")
    print(f"wrote {args.out or 'coeffs.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phasediff",
                                description="conjugate/splitting samplers for phase-space diffusions")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, sampler=True):
        sp.add_argument("--config", help="TOML config path")
        if sampler:
            sp.add_argument("--sampler", choices=splitting.KINDS)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--lambda-s", dest="lambda_s", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--denoise", choices=["on", "off"])

    sp = sub.add_parser("sample", help="run a sampler to completion and emit metrics")
    common(sp)
    sp.set_defaults(func=_cmd_sample)

    sp = sub.add_parser("sweep", help="lambda sweep at fixed budget")
    common(sp)
    sp.add_argument("--lambdas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("convergence", help="one-step order estimation")
    common(sp, sampler=False)
    sp.add_argument("--kinds", default="rvv,nvv")
    sp.add_argument("--h-min", type=float, default=1e-3)
    sp.add_argument("--h-max", type=float, default=1e-1)
    sp.add_argument("--h-points", type=int, default=8)
    sp.set_defaults(func=_cmd_convergence)

    sp = sub.add_parser("stability", help="lambda sweep of the stability predicate")
    common(sp, sampler=False)
    sp.add_argument("--lambdas", default="0")
    sp.add_argument("--bt", choices=["zero", "i", "ones"], default="i")
    sp.add_argument("--t", type=float, default=0.5)
    sp.add_argument("--h", type=float, default=0.1)
    sp.set_defaults(func=_cmd_stability)

    sp = sub.add_parser("equivalence", help="DDIM / exponential-integrator checks (exit 0 iff pass)")
    sp.add_argument("--steps", type=int, default=40)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_equivalence)

    sp = sub.add_parser("dump-coeffs", help="write a coefficient table as CSV")
    common(sp, sampler=False)
    sp.add_argument("--bt", choices=["zero", "i", "ones"], default="zero")
    sp.add_argument("--mask", choices=["none", "det", "stoch"], default="none")
    sp.set_defaults(func=_cmd_dump_coeffs)

    sp = sub.add_parser("echo-config", help="print the parsed config back as TOML")
    common(sp)
    sp.set_defaults(func=lambda a: (print(serialize_config(_base_config(a)), end=""), 0)[1])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PhasediffError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
