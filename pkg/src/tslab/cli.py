"""Command-line entry point: ``tslab <experiment> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import verify
from .config import ConfigError, load_config
from .diagnostics import records_to_csv, write_dat_files
from .experiments import stability_sweep
from .fieldio import save_field
from .linear import spectrum_report
from .nonlinear import SimConfig, perturbed_state, simulate
from .spectral import FluidState, SpectralField, transform

log = logging.getLogger("tslab")

EXPERIMENTS = ("linear-verify", "simulate", "sweep", "spectrum", "lagrangian-check", "besov-certify", "picard")


class UsageError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=_seed, help="random seed (overrides the config)")
    common.add_argument("--out", type=Path, help="output directory (TSL_OUT takes precedence)")
    common.add_argument("--quiet", action="store_true", help="only report failures")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes for sweeps")

    parser = argparse.ArgumentParser(prog="tslab", description="Numerical experiments for the pressureless "
                                     "Navier-Stokes-Poisson system on the torus.")
    sub = parser.add_subparsers(dest="kind", metavar="experiment", required=True)

    sub.add_parser("linear-verify", parents=[common], help="closed-form linear solver against ODE oracles")

    p = sub.add_parser("simulate", parents=[common], help="nonlinear run with diagnostics")
    p.add_argument("--eps", type=float, default=1e-2, help="initial perturbation budget")
    p.add_argument("--init", choices=("perturbed", "cosine"), default="perturbed",
                   help="seeded random perturbation, or 1 + eps cos x1 at rest")

    p = sub.add_parser("sweep", parents=[common], help="stability budget against the perturbation size")
    p.add_argument("--eps", type=_positive, nargs="+", default=[1e-2, 3e-3, 1e-3])
    p.add_argument("--control-eps", type=_positive, default=1e-2, help="size of the attractive control run")
    p.add_argument("--no-control", action="store_true")

    p = sub.add_parser("spectrum", parents=[common], help="roots of the linear symbol over a lattice")
    p.add_argument("--nu", type=_positive, default=1.0)
    p.add_argument("--kmax", type=int, default=8)
    p.add_argument("--dim", type=int, default=None, help="lattice dimension (default: config d)")

    p = sub.add_parser("lagrangian-check", parents=[common], help="Eulerian run against the Lagrangian pair")
    p.add_argument("--amp", type=_positive, default=1e-4)

    p = sub.add_parser("besov-certify", parents=[common], help="empirical constants of the Besov inequalities")
    p.add_argument("--samples", type=int, default=100)

    p = sub.add_parser("picard", parents=[common], help="Picard iteration in Lagrangian form")
    p.add_argument("--eps", type=_positive, default=1e-3)
    p.add_argument("--horizon", type=_positive, default=20.0)
    p.add_argument("--picard-dt", type=_positive, default=0.1)
    return parser


# --- output ---------------------------------------------------------------------

def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _write_json(out: Path, name: str, data: dict) -> Path:
    return _write(out, name, json.dumps(verify._plain(data), indent=2, sort_keys=True) + "\n")


def _emit_check(res: verify.CheckResult, out: Path, quiet: bool) -> int:
    _write(out, f"{res.name}.csv", res.csv)
    _write_json(out, f"{res.name}.json", res.to_dict())
    if not quiet or not res.passed:
        print(res.line())
    return 0 if res.passed else 1


# --- experiments -----------------------------------------------------------------------

def _run_simulate(args, cfg: SimConfig, out: Path) -> int:
    g = cfg.grid
    if args.init == "cosine":
        rho = transform((1.0 + args.eps * np.cos(g.points[0]))[None], g)
        init = FluidState(rho, SpectralField.zeros(g, g.dim))
    else:
        init = perturbed_state(g, args.eps, p=cfg.p, seed=cfg.seed)
    res = simulate(init, cfg, store_every=cfg.steps)
    _write(out, "diagnostics.csv", records_to_csv(res.records, g.dim))
    write_dat_files(res.records, out / "dat", g.dim)
    final = res.final
    save_field(out / "final_rho.tsf", final.rho, {"t": final.t})
    save_field(out / "final_v.tsf", final.v, {"t": final.t})
    incr = float(res.energy_increments().max()) if len(res.step_energy) > 1 else 0.0
    energy_ok = cfg.sign != "repulsive" or incr <= 10 * cfg.dt**3
    ok = energy_ok and (cfg.sign != "repulsive" or not res.aborted)
    mom = np.asarray(res.step_momentum)
    summary = {
        "config": asdict(cfg),
        "init": args.init,
        "eps": args.eps,
        "aborted": res.aborted,
        "abort_reason": res.abort_reason,
        "t_final": float(res.step_times[-1]),
        "mass_drift": float(np.abs(res.step_mass - res.step_mass[0]).max()),
        "momentum_drift": float(np.abs(mom - mom[0]).max()),
        "max_energy_increment": incr,
        "energy_identity_defect": res.energy_identity_defect(),
        "budget_sup": max(r.budget["budget_total"] for r in res.records),
        "max_rho": [float(r.max_rho) for r in res.records][-1],
        "passed": ok,
    }
    _write_json(out, "summary.json", summary)
    if not args.quiet or not ok:
        state = "aborted" if res.aborted else "completed"
        print(f"{'PASS' if ok else 'FAIL'} simulate ({cfg.sign}): {state} at t={summary['t_final']:.6g}, "
              f"budget {summary['budget_sup']:.4g}")
    return 0 if ok else 1


def _run_sweep(args, cfg: SimConfig, out: Path) -> int:
    control = None if args.no_control else args.control_eps
    rep = stability_sweep(args.eps, cfg, control_eps=control, jobs=max(1, args.jobs))
    runs = rep.runs + ([rep.control] if rep.control else [])
    index = []
    for i, r in enumerate(runs):
        sub = out / f"run{i:02d}_{r.sign}_eps{r.eps:.3g}"
        _write(sub, "diagnostics.csv", r.csv)
        index.append({"dir": sub.name, **r.to_dict()})
    data = rep.to_dict()
    data["index"] = index
    _write_json(out, "sweep.json", data)
    rows = "eps,sign,budget_sup,c_emp,density_amplification,aborted\n" + "".join(
        f"{r.eps!r},{r.sign},{r.budget_sup!r},{r.amplification!r},{r.density_amplification!r},{r.aborted}\n"
        for r in runs)
    _write(out, "sweep.csv", rows)
    if not args.quiet or not rep.passed:
        print(f"{'PASS' if rep.passed else 'FAIL'} sweep: C_emp {['%.4g' % c for c in rep.c_emp]}, "
              f"log-slope {rep.log_slope:.3g}, spread {rep.spread:.3g}, control ok {rep.control_ok}")
    return 0 if rep.passed else 1


def _run_spectrum(args, cfg: SimConfig, out: Path) -> int:
    if args.kmax < 1:
        raise UsageError("--kmax must be at least 1")
    tab = spectrum_report(args.nu, args.kmax, args.dim or cfg.dim)
    _write(out, "spectrum.csv", tab.to_csv())
    _write_json(out, "spectrum.json", tab.summary)
    if not args.quiet:
        print(f"PASS spectrum: {tab.summary['modes']} modes, min |Re lambda+| "
              f"{tab.summary['min_abs_re_lambda_plus']:.4g}")
    return 0


def run(args) -> int:
    cfg = load_config(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(os.environ.get("TSL_OUT") or args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = args.kind
    if kind == "simulate":
        return _run_simulate(args, cfg, out)
    if kind == "sweep":
        return _run_sweep(args, cfg, out)
    if kind == "spectrum":
        return _run_spectrum(args, cfg, out)
    if kind == "linear-verify":
        return _emit_check(verify.linear_verify(cfg.seed), out, args.quiet)
    if kind == "lagrangian-check":
        res = verify.check_lagrangian(cfg.seed, amp=args.amp, t_end=cfg.t_end, dt=cfg.dt, n=cfg.n)
        return _emit_check(res, out, args.quiet)
    if kind == "besov-certify":
        if args.samples < 1:
            raise UsageError("--samples must be positive")
        return _emit_check(verify.check_besov(cfg.seed, samples=args.samples), out, args.quiet)
    if kind == "picard":
        res = verify.check_picard(args.eps, t_end=args.horizon, dt=args.picard_dt, sim_dt=cfg.dt, n=cfg.n)
        return _emit_check(res, out, args.quiet)
    raise UsageError(f"unknown experiment {kind!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, UsageError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tslab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
