"""Command-line driver.

    zoneliq <simulate|solve|execute|verify|lattice|branching> --config FILE --out DIR [flags]

Every command writes ``report.json`` (config echo, seed, checks, artifacts)
plus its own CSV/JSON artifacts under ``--out``. Exit codes: 0 all checks
passed, 2 validation error, 3 numerical check failed, 4 IO error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .branching import finite_scale_prediction, laplace_estimate, validator_report
from .lattice import (clock_sup_error, crossings_from_path, lattice_cost, loctime_sup_error,
                      stieltjes_cost)
from .model import Config, ValidationError, load_config
from .paths import expected_loctime, simulate
from .strategy import (Policy, calibrate_constant_rate, execute, paired_excess, run_policies,
                       verification_entry)
from .value import SolverError, continuity_report, convergence_study, residual_mc, solve

EXIT_OK, EXIT_VALIDATION, EXIT_CHECK, EXIT_IO = 0, 2, 3, 4


@dataclass
class Check:
    name: str
    statistic: float
    threshold: float
    passed: bool


@dataclass
class RunReport:
    command: str
    problem_hash: str
    config: dict
    seed: int
    version: str = __version__
    checks: list[Check] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    results: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def check(self, name: str, statistic: float, threshold: float, passed: bool) -> None:
        self.checks.append(Check(name, float(statistic), float(threshold), bool(passed)))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["checks"] = [{"name": c.name, "statistic": c.statistic, "threshold": c.threshold,
                        "pass": c.passed} for c in self.checks]
        d["pass"] = self.passed
        return d


def _dump(path: Path, obj) -> str:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return str(path)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("ZONELIQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError("ZONELIQ_THREADS", f"expected an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _levels(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",")]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_simulate(cfg: Config, args, out: Path, rep: RunReport) -> None:
    T = cfg.cost.horizon
    rng = cfg.rng
    ST, LT = [], []
    width = len(str(max(args.paths - 1, 0)))
    for i in range(args.paths):
        path = simulate(cfg.model, T, args.steps, rng.substream(i))
        if i < args.max_files:
            fname = out / f"path_{i:0{width}d}.csv"
            path.to_csv(fname)
            rep.artifacts.append(str(fname))
        ST.append(path.prices[-1])
        LT.append(path.loctime[-1])
    ST, LT = np.array(ST), np.array(LT)
    n = len(LT)
    se = float(LT.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    expected = float(expected_loctime(cfg.model, cfg.model.z0, T))
    summary = {"npaths": n, "steps": args.steps, "horizon": T,
               "mean_S_T": float(ST.mean()), "var_S_T": float(ST.var(ddof=1)) if n > 1 else 0.0,
               "mean_L_T": float(LT.mean()), "var_L_T": float(LT.var(ddof=1)) if n > 1 else 0.0,
               "stderr_L_T": se, "expected_L_T": expected}
    rep.artifacts.append(_dump(out / "summary.json", summary))
    rep.results["summary"] = summary
    if n > 1:
        if se > 0:
            z = abs(summary["mean_L_T"] - expected) / se
        else:
            z = 0.0 if abs(summary["mean_L_T"] - expected) < 1e-12 else math.inf
        rep.check("mean_L_T_vs_expected", z, 3.0, z < 3.0)


def _solve_with_report(cfg: Config, rep: RunReport):
    problem = cfg.problem
    vg = solve(problem, cfg.grid)
    bound_ok = bool(np.all(vg.u >= 0.0) and np.all(vg.u <= problem.bound))
    rep.check("value_bound", float(vg.u.max()), problem.bound, bound_ok)
    return problem, vg


def cmd_solve(cfg: Config, args, out: Path, rep: RunReport) -> None:
    problem, vg = _solve_with_report(cfg, rep)
    residuals = residual_mc(problem, vg, args.residual_paths, cfg.rng, threads=_threads(args))
    for r in residuals:
        rep.check(f"residual(t={r['t']:g},z={r['z']:g})", r["z_score"], 3.0, r["pass"])
    extra = {"problem_hash": rep.problem_hash, "residual_report": residuals,
             "continuity": continuity_report(vg)}
    if args.refine:
        study = convergence_study(problem, cfg.grid, levels=3)
        extra["convergence"] = study
        rep.results["convergence"] = study
    rep.artifacts.extend(vg.export(out, extra))
    rep.results["u_T_z0"] = float(vg(problem.horizon, problem.model.z0))
    rep.results["residuals"] = residuals


def _policy_from_args(args) -> Policy:
    if args.policy == "optimal":
        return Policy.optimal()
    if args.policy == "scaled":
        return Policy.scaled(args.factor)
    return Policy.constant_rate(args.rate)


def cmd_execute(cfg: Config, args, out: Path, rep: RunReport) -> None:
    problem = cfg.problem
    policy = _policy_from_args(args)
    policy.check()
    vg = solve(problem, cfg.grid) if policy.needs_value else None
    for i in range(min(args.paths, args.max_files)):
        path = simulate(cfg.model, problem.horizon, args.steps, cfg.rng.substream(i))
        rec = execute(policy, path, cfg.cost, vg)
        fname = out / f"execution_{i:05d}.csv"
        rec.to_csv(fname)
        rep.artifacts.append(str(fname))
    if args.paths >= 2:
        sample = run_policies([policy], problem, args.paths, args.steps, cfg.rng, vg, _threads(args))[0]
        rep.results["summary"] = sample.summary()
        rep.artifacts.append(_dump(out / "execution_summary.json", sample.summary()))


def cmd_verify(cfg: Config, args, out: Path, rep: RunReport) -> None:
    problem, vg = _solve_with_report(cfg, rep)
    threads = _threads(args)
    z0 = problem.model.z0
    u = float(vg(problem.horizon, z0))
    rate = calibrate_constant_rate(problem, vg, args.steps, cfg.rng.substream(10**9),
                                   npaths=args.pilot_paths, threads=threads)
    policies = [Policy.optimal(), Policy.scaled(0.5), Policy.scaled(1.5), Policy.constant_rate(rate)]
    samples = run_policies(policies, problem, args.paths, args.steps, cfg.rng, vg, threads)
    x0, p = problem.cost.x0, problem.cost.p
    entries = [verification_entry(samples[0], u, x0, p)]
    rep.check("minimal_cost_identity", entries[0]["z_score"], 3.0, entries[0]["pass"])
    excess = []
    for s in samples[1:]:
        e = paired_excess(samples[0], s)
        # a perturbation may not beat the optimum beyond noise
        e["pass"] = bool(e["excess"] >= -3.0 * e["paired_stderr"])
        excess.append(e)
        rep.check(f"no_improvement[{s.policy.label}]", e["z_paired"], -3.0, e["pass"])
    cert = samples[3].certificate
    gap = samples[3].total - abs(x0) ** p * u
    diff = gap - cert
    se = float(diff.std(ddof=1) / math.sqrt(len(diff)))
    z_cert = abs(float(diff.mean())) / se if se > 0 else (0.0 if abs(diff.mean()) < 1e-12 else math.inf)
    rep.check("certificate_consistency[constant-rate]", z_cert, 3.0, z_cert < 3.0)
    opt_cert = float(np.max(samples[0].certificate))
    rep.check("optimal_certificate_max", opt_cert, 1e-6, opt_cert < 1e-6)
    for s in samples[1:]:
        entries.append({"policy": s.policy.label, "mean": s.summary()["mean"],
                        "stderr": s.summary()["stderr"], "u_times_x0p": abs(x0) ** p * u,
                        "z_score": None, "pass": None})
    report = {"u_T_z0": u, "calibrated_rate": rate, "entries": entries, "excess": excess,
              "certificate_z": z_cert, "optimal_certificate_max": opt_cert}
    rep.artifacts.append(_dump(out / "verification.json", report))
    rep.results.update(report)


def cmd_lattice(cfg: Config, args, out: Path, rep: RunReport) -> None:
    levels = _levels(args.levels)
    T = cfg.cost.horizon
    horizon = 1.25 * T  # crossing count fluctuates; simulate past T so index floor(4^n T) exists
    steps = args.steps or int(math.ceil(horizon * 4.0 ** max(levels) * 16))
    xi = lambda t: 1.0 + 0.5 * np.sin(2.0 * math.pi * t / T)
    zero = lambda t: np.zeros_like(t)
    p = cfg.cost.p
    sup, gap, zgap, clock, covered = ({n: [] for n in levels} for _ in range(5))
    for i in range(args.paths):
        path = simulate(cfg.model, horizon, steps, cfg.rng.substream(i))
        ref = stieltjes_cost(xi, path, p, T)
        zref = stieltjes_cost(zero, path, p, T)
        for n in levels:
            lat = crossings_from_path(path, n)
            if i == 0:
                rep.artifacts.append(str(out / f"lattice_n{n}.csv"))
                lat.to_csv(out / f"lattice_n{n}.csv")
            covered[n].append(lat.covers(T))
            sup[n].append(loctime_sup_error(lat, path, T))
            gap[n].append(abs(lattice_cost(xi, lat, p, T) - ref))
            zgap[n].append(abs(lattice_cost(zero, lat, p, T) - zref))
            clock[n].append(clock_sup_error(lat, T))
    rows = []
    for n in levels:
        rows.append({"n": n, "median_sup_error": float(np.median(sup[n])),
                     "median_cost_gap": float(np.median(gap[n])),
                     "median_clock_error": float(np.median(clock[n])),
                     "zero_policy_gap": float(np.max(zgap[n])),
                     "covered_fraction": float(np.mean(covered[n]))})
    fname = out / "lattice_convergence.csv"
    with open(fname, "w") as fh:
        keys = list(rows[0])
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[k]) for k in keys) + "\n")
    rep.artifacts.append(str(fname))
    e = [r["median_sup_error"] for r in rows]
    mono = bool(np.all(np.diff(e) < 0))
    rep.check("sup_error_strictly_decreasing", float(np.max(np.diff(e))) if len(e) > 1 else 0.0, 0.0, mono)
    if len(rows) > 1:
        ratio = rows[-1]["median_cost_gap"] / rows[0]["median_cost_gap"]
        rep.check("cost_gap_ratio_last_vs_first", ratio, 0.25, ratio < 0.25)
    rep.results["rows"] = rows


def cmd_branching(cfg: Config, args, out: Path, rep: RunReport) -> None:
    problem = cfg.problem
    vg = solve(problem, cfg.grid)
    u = float(vg(problem.horizon, problem.model.z0))
    est = laplace_estimate(cfg.model, cfg.cost, args.nscale, args.paths, cfg.rng)
    report = validator_report(est, u)
    rep.check("laplace_vs_solver", report["z_score"], 3.0, report["z_score"] < 3.0)
    for t, m, s in zip(est["mass_times"], est["mass_mean"], est["mass_stderr"]):
        z = abs(m - 1.0) / s if s > 0 else (0.0 if abs(m - 1.0) < 1e-12 else math.inf)
        rep.check(f"total_mass(t={t:g})", z, 3.0, z < 3.0)
    if cfg.cost.phi.is_zero:
        report["finite_scale_prediction"] = finite_scale_prediction(problem, args.nscale, cfg.grid)
    report["mass"] = {"times": est["mass_times"], "mean": est["mass_mean"], "stderr": est["mass_stderr"]}
    rep.artifacts.append(_dump(out / "branching.json", report))
    rep.results.update(report)


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "execute": cmd_execute,
            "verify": cmd_verify, "lattice": cmd_lattice, "branching": cmd_branching}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zoneliq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"zoneliq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override rng.seed")
        p.add_argument("--threads", type=int, help="worker cap (default: ZONELIQ_THREADS or all cores)")
        return p

    p = common(sub.add_parser("simulate", help="simulate reflected price paths"))
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--max-files", type=int, default=100, help="cap on per-path CSV files")

    p = common(sub.add_parser("solve", help="solve for the value function"))
    p.add_argument("--nt", type=int, help="override grid.nt")
    p.add_argument("--nz", type=int, help="override grid.nz")
    p.add_argument("--residual-paths", type=int, default=20_000)
    p.add_argument("--refine", action="store_true", help="add a time-step halving study")

    p = common(sub.add_parser("execute", help="run a policy along simulated paths"))
    p.add_argument("--policy", choices=["optimal", "scaled", "constant"], default="optimal")
    p.add_argument("--factor", type=float, default=1.0)
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--max-files", type=int, default=10)

    p = common(sub.add_parser("verify", help="Monte Carlo optimality checks"))
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--pilot-paths", type=int, default=10_000)
    p.add_argument("--steps", type=int, default=1000)

    p = common(sub.add_parser("lattice", help="lattice convergence tables"))
    p.add_argument("--levels", default="4..8", help="e.g. 4..8 or 4,6,8")
    p.add_argument("--paths", type=int, default=100)
    p.add_argument("--steps", type=int, help="fine path steps (default: 16 per finest lattice step)")

    p = common(sub.add_parser("branching", help="particle validator (p = 2)"))
    p.add_argument("--nscale", type=int, default=40)
    p.add_argument("--paths", type=int, default=10_000)
    return parser


def _apply_overrides(cfg: Config, args) -> Config:
    grid, rng = cfg.grid, cfg.rng
    if getattr(args, "nt", None) is not None:
        grid = dataclasses.replace(grid, nt=args.nt)
    if getattr(args, "nz", None) is not None:
        grid = dataclasses.replace(grid, nz=args.nz)
    if args.seed is not None:
        rng = dataclasses.replace(rng, seed=args.seed)
    grid.check()
    rng.check()
    return dataclasses.replace(cfg, grid=grid, rng=rng)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        for name in ("paths", "steps", "nscale", "residual_paths", "pilot_paths"):
            v = getattr(args, name, None)
            if v is not None and v < 1:
                raise ValidationError(f"--{name.replace('_', '-')}", "must be >= 1")
        _threads(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    out = Path(args.out)
    rep = RunReport(args.command, cfg.digest(), cfg.to_dict(), cfg.rng.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out, rep)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        rep.check("solver", float("nan"), float("nan"), False)
        rep.results["error"] = str(exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    rep.wall_clock = time.perf_counter() - start
    try:
        _dump(out / "report.json", rep.to_dict())
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.statistic:.6g} (threshold {c.threshold:g})")
    return EXIT_OK if rep.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
