"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 acceptance-suite failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import asymptotics as asy
from . import kernels
from .config import ConfigError, ExperimentConfig, load_config
from .detectors import DetectorError, detect_stream, estimate_psi, run_detector
from .filters import FilterError
from .mc_harness import arl_false_alarm, estimate_rows, sup_delay
from .results import write_csv, write_json
from .ssm_core import ModelError, simulate_trajectory
from .validation import run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPT = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srpssm", description="Weighted SRP change detection for state space models")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides harness.seed)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out-dir", default=None, help="output directory (overrides output.dir)")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("simulate", "emit a trajectory CSV"),
        ("detect", "run the detector on a simulated or piped stream"),
        ("arl", "average run length to false alarm"),
        ("delay", "conditional detection delays over the omega/theta grid"),
        ("asymptotics", "estimate K, ladder moments, gamma, Lambda'' and Z(b)"),
        ("psi", "estimate the quasi-stationary initial law"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("config", help="YAML experiment config")
        if name == "detect":
            p.add_argument("--stdin", action="store_true", help="read observations from standard input")
            p.add_argument("--path-csv", default=None, help="write the per-step log statistic to this CSV")
    p = sub.add_parser("validate", parents=[common], help="run the acceptance suite")
    p.add_argument("--suite", choices=["smoke", "full"], default="smoke")
    p.add_argument("--criteria", type=int, nargs="*", default=None)
    return ap


def _out_dir(cfg: ExperimentConfig | None, args) -> Path:
    d = Path(args.out_dir or (cfg.output.dir if cfg else "results"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _report(cfg: ExperimentConfig, seed: int, **payload) -> dict:
    return {"config": cfg.model_dump(), "seed": seed, "backend": kernels.BACKEND, **payload}


def _emit(cfg: ExperimentConfig, out: Path, stem: str, rows: list[dict], report: dict) -> None:
    if "csv" in cfg.output.formats:
        write_csv(out / f"{stem}.csv", rows)
    if "json" in cfg.output.formats:
        write_json(out / f"{stem}.json", report)


def _psi_config(cfg: ExperimentConfig, dcfg, seed: int):
    if cfg.detector.init_mode != "psi":
        return dcfg
    psi = estimate_psi(cfg.model_spec(), cfg.scenario.theta0, dcfg, cfg.detector.psi_particles, seed=seed)
    return replace(dcfg, init_mode="psi", psi=psi)


def cmd_simulate(cfg, args, seed, out):
    traj = simulate_trajectory(cfg.model_spec(), cfg.scenario_obj(), cfg.harness.n_steps, seed)
    traj.to_csv(out / "trajectory.csv")
    write_json(out / "trajectory.json", _report(cfg, seed, n=cfg.harness.n_steps))
    print(out / "trajectory.csv")


def _read_stdin(r: int) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(sys.stdin, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            vals = [float(t) for t in line.split()]
        except ValueError:
            raise ConfigError(f"non-numeric record on line {lineno}", "stdin") from None
        if len(vals) != r:
            raise ConfigError(f"line {lineno} has {len(vals)} fields, expected {r}", "stdin")
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, r)


def cmd_detect(cfg, args, seed, out):
    model = cfg.model_spec()
    dcfg = _psi_config(cfg, cfg.detector_config(), seed)
    if args.stdin:
        rep = detect_stream(model, cfg.scenario.theta0, dcfg, _read_stdin(model.r))
    else:
        rep = run_detector(model, cfg.scenario_obj(), dcfg, seed)
    if args.path_csv and rep.path is not None:
        write_csv(args.path_csv, [{"k": k, "log_stat": v} for k, v in enumerate(rep.path, start=1)])
    if rep.censored:
        print(f"censored {rep.stop_time} {rep.stat:.10g}")
    else:
        print(f"{rep.stop_time} {rep.stat:.10g} {rep.overshoot:.10g}")
    write_json(
        out / "detect.json",
        _report(cfg, seed, stop_time=rep.stop_time, censored=rep.censored, stat=rep.stat, overshoot=rep.overshoot),
    )


def cmd_arl(cfg, args, seed, out):
    model = cfg.model_spec()
    rows = []
    for b in cfg.detector.b:
        dcfg = _psi_config(cfg, cfg.detector_config(b), seed)
        est = arl_false_alarm(model, dcfg, cfg.harness.reps, seed, cfg.scenario.theta0, threads=args.threads)
        rows.append(estimate_rows(cfg.detector.rule, b, "inf", cfg.scenario.theta0, est))
        print(f"b={b:g} E_inf N = {est.mean:.4f} (se {est.se:.4f}) {' '.join(est.flags)}")
    _emit(cfg, out, "arl", rows, _report(cfg, seed, results=rows))


def cmd_delay(cfg, args, seed, out):
    model = cfg.model_spec()
    rows, maxima = [], []
    for b in cfg.detector.b:
        dcfg = _psi_config(cfg, cfg.detector_config(b), seed)
        tab = sup_delay(model, dcfg, cfg.harness.omegas, cfg.harness.thetas, cfg.harness.reps, seed, cfg.scenario.theta0, args.threads)
        for r in tab.rows:
            rows.append(estimate_rows(cfg.detector.rule, b, r["omega"], r["theta"], r["estimate"]))
        best = tab.rows[tab.argmax]
        maxima.append({"b": b, "omega": best["omega"], "theta": best["theta"], "estimate": best["estimate"]})
        print(f"b={b:g} sup delay = {tab.max.mean:.4f} (se {tab.max.se:.4f}) at omega={best['omega']} theta={best['theta']}")
    _emit(cfg, out, "delay", rows, _report(cfg, seed, results=rows, maxima=maxima))


def cmd_asymptotics(cfg, args, seed, out):
    model = cfg.model_spec()
    a = cfg.asymptotics
    th, th0 = cfg.scenario.theta, cfg.scenario.theta0
    kl = asy.estimate_kl(model, th, th0, a.kl_steps, a.kl_reps, seed)
    lad = asy.ladder_simulate(model, th, th0, a.ladder_reps, seed)
    gam = asy.gamma_estimate(model, th, th0, a.gamma_eps, a.gamma_reps, seed, kl=kl.mean)
    lam = asy.lambda2_estimate(model, th, th0, a.lambda2_steps, a.lambda2_reps, seed)
    grid = cfg.grid()
    terms = asy.ApproxTerms(kl.mean, gam.mean, lam.mean, grid.density_at(th), lad.rho)
    rows = [
        {"constant": "K", "estimate": kl.mean, "se": kl.se, "reps": kl.n_total, "seed": seed},
        {"constant": "rho_ladder", "estimate": lad.rho, "se": lad.rho_se, "reps": lad.n_reps, "seed": seed},
        {"constant": "gamma", "estimate": gam.mean, "se": gam.se, "reps": gam.n_total, "seed": seed},
        {"constant": "lambda2", "estimate": lam.mean, "se": lam.se, "reps": lam.n_total, "seed": seed},
        {"constant": "C_partial", "estimate": terms.partial_constant(), "se": math.nan, "reps": 0, "seed": seed},
    ]
    for lev, est in lad.direct.items():
        rows.append({"constant": f"overshoot_b{lev:g}", "estimate": est.mean, "se": est.se, "reps": est.n_total, "seed": seed})
    zs = []
    if len(cfg.detector.b) >= 1:
        dcfg = cfg.detector_config()
        if cfg.detector.init_mode == "psi":
            dcfg = _psi_config(cfg, dcfg, seed)
        pts = asy.empirical_constant(
            model, cfg.scenario_obj(), dcfg, sorted(cfg.detector.b), cfg.harness.reps, seed, kl=kl,
            threads=args.threads, psi_particles=cfg.detector.psi_particles,
        )
        for p in pts:
            zs.append({"b": p.b, "Z": p.z, "se": p.se, "delay": p.delay.mean, "delay_se": p.delay.se,
                       "predicted_partial": asy.predicted_delay(terms, p.b, "partial") if p.b > 1 else math.nan})
            rows.append({"constant": f"Z_b{p.b:g}", "estimate": p.z, "se": p.se, "reps": p.delay.n_total, "seed": seed})
    for r in rows:
        print(f"{r['constant']:>14s} {r['estimate']:.6g} (se {r['se']:.3g})")
    _emit(cfg, out, "asymptotics", rows, _report(cfg, seed, constants=rows, z=zs, flags=list(kl.flags + lam.flags)))


def cmd_psi(cfg, args, seed, out):
    dcfg = cfg.detector_config()
    psi = estimate_psi(cfg.model_spec(), cfg.scenario.theta0, dcfg, cfg.detector.psi_particles, seed=seed)
    write_csv(out / "psi.csv", [{"log_stat": float(s)} for s in psi.stat])
    write_json(
        out / "psi.json",
        _report(cfg, seed, iterations=psi.iterations, ks=psi.ks, mean_R=psi.mean_r(), b=psi.b, size=psi.size),
    )
    print(f"psi: {psi.size} particles, {psi.iterations} iterations, KS {psi.ks:.4g}, mean R {psi.mean_r():.4g}")


COMMANDS = {
    "simulate": cmd_simulate,
    "detect": cmd_detect,
    "arl": cmd_arl,
    "delay": cmd_delay,
    "asymptotics": cmd_asymptotics,
    "psi": cmd_psi,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            seed = 20240601 if args.seed is None else args.seed
            results = run_suite(args.suite, seed, args.threads, args.criteria, echo=print)
            out = _out_dir(None, args)
            write_json(out / "validate.json", {
                "suite": args.suite, "seed": seed, "backend": kernels.BACKEND,
                "criteria": [{"number": r.number, "name": r.name, "passed": r.passed, "seconds": r.seconds, **r.details} for r in results],
            })
            return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPT
        cfg = load_config(args.config)
        seed = cfg.harness.seed if args.seed is None else args.seed
        cfg.harness.seed = seed
        COMMANDS[args.command](cfg, args, seed, _out_dir(cfg, args))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"config error: model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterError, DetectorError, asy.DriftError, FloatingPointError, np.linalg.LinAlgError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        step = getattr(exc, "step", None)
        where = f" step {step}" if step is not None else ""
        print(f"numerical failure [{module}{where}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
