"""Pathwise execution of liquidation policies and Monte Carlo cost accounting.

Trading happens only in the local-time clock: dX = xi dL. Within a simulation
step the barrier value a = u(T - t_mid, c)^beta is frozen, which makes every
per-step quantity (inventory, impact cost, excess-cost integrand) exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .model import CostSpec, ModelSpec, RngSpec, ValidatedProblem, ValidationError, validate
from .paths import PathBatch, PathBundle, iter_batches
from .value import ValueGrid

OPTIMAL = "optimal"
SCALED = "scaled-optimal"
CONSTANT = "constant-rate"
TABLE = "custom-table"


@dataclass(frozen=True)
class Policy:
    """A liquidation rule.

    * ``optimal``: xi = -X u(T-t, S)^beta
    * ``scaled-optimal``: the same feedback multiplied by ``factor``
    * ``constant-rate``: |xi| = ``rate`` toward zero until the position is flat
    * ``custom-table``: signed speed xi(t), piecewise linear through ``(times, speeds)``
    """

    variant: str
    factor: float = 1.0
    rate: float = 0.0
    times: tuple[float, ...] = ()
    speeds: tuple[float, ...] = ()

    @classmethod
    def optimal(cls) -> Policy:
        return cls(OPTIMAL)

    @classmethod
    def scaled(cls, factor: float) -> Policy:
        return cls(SCALED, factor=float(factor))

    @classmethod
    def constant_rate(cls, rate: float) -> Policy:
        return cls(CONSTANT, rate=float(rate))

    @classmethod
    def table(cls, times, speeds) -> Policy:
        return cls(TABLE, times=tuple(map(float, times)), speeds=tuple(map(float, speeds)))

    @property
    def needs_value(self) -> bool:
        return self.variant in (OPTIMAL, SCALED)

    @property
    def label(self) -> str:
        if self.variant == SCALED:
            return f"{SCALED}({self.factor:g})"
        if self.variant == CONSTANT:
            return f"{CONSTANT}({self.rate:.6g})"
        return self.variant

    def check(self) -> None:
        if self.variant not in (OPTIMAL, SCALED, CONSTANT, TABLE):
            raise ValidationError("policy.variant", f"unknown variant {self.variant!r}")
        if self.variant == SCALED and not (math.isfinite(self.factor) and self.factor >= 0):
            raise ValidationError("policy.factor", "must be finite and nonnegative")
        if self.variant == CONSTANT and not (math.isfinite(self.rate) and self.rate >= 0):
            raise ValidationError("policy.rate", "must be finite and nonnegative")
        if self.variant == TABLE:
            if not self.times or len(self.times) != len(self.speeds):
                raise ValidationError("policy.times", "times and speeds must be nonempty and equal length")
            if np.any(np.diff(self.times) < 0):
                raise ValidationError("policy.times", "must be nondecreasing")


def phi_p(x, y, p):
    """Young gap x^p - p y^(p-1) x + (p-1) y^p, nonnegative for x, y >= 0.

    Near the diagonal (x <= 2y) it is evaluated as y^p ((1+d)^p - 1 - p d) with
    d = x/y - 1, which is exactly 0 at x = y.
    """
    x, y, p = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, p)))
    near = (y > 0) & (x <= 2.0 * y)
    ys = np.where(near, y, 1.0)
    d = np.where(near, (x - ys) / ys, 0.0)
    with np.errstate(divide="ignore"):
        gap = ys**p * (np.expm1(p * np.log1p(d)) - p * d)
    direct = x**p - p * y ** (p - 1.0) * x + (p - 1.0) * y**p
    out = np.where(near, gap, direct)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# Batch engine
# --------------------------------------------------------------------------

@dataclass
class BatchCosts:
    """Per-path outputs for one block of paths."""

    inventory: np.ndarray      # (npaths, M+1)
    impact: np.ndarray
    running: np.ndarray
    terminal: np.ndarray
    certificate: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.impact + self.running + self.terminal


def _barrier_rates(vg: ValueGrid | None, problem: ValidatedProblem, times: np.ndarray) -> np.ndarray:
    """a_k = u(T - t_mid_k, c)^beta for each step."""
    if vg is None:
        raise ValidationError("vg", "a solved ValueGrid is required")
    mid = 0.5 * (times[1:] + times[:-1])
    w = np.maximum(vg.barrier_value(problem.horizon - mid), 0.0)
    return w**problem.beta


def _abs_power_integral(x_start, x_end, slope, length, q):
    """int_0^length |x_start + slope*l|^q dl for a linear inventory segment."""
    G = lambda x: np.sign(x) * np.abs(x) ** (q + 1.0) / (q + 1.0)
    flat = np.abs(slope) * length <= 1e-300
    safe = np.where(flat, 1.0, slope)
    return np.where(flat, np.abs(x_start) ** q * length, (G(x_end) - G(x_start)) / safe)


def _linear_policy(factor: float, a: np.ndarray, dL: np.ndarray, x0: float, p: float):
    fa = factor * a
    expo = np.concatenate([np.zeros((dL.shape[0], 1)), np.cumsum(fa * dL, axis=1)], axis=1)
    X = x0 * np.exp(-expo)
    rate = p * fa * dL
    seg = np.where(rate > 0, -np.expm1(-rate) / np.where(fa > 0, p * fa, 1.0), dL)
    Xp = np.abs(X[:, :-1]) ** p * seg
    impact = np.sum(fa**p * Xp, axis=1)
    cert = float(phi_p(factor, 1.0, p)) * np.sum(a**p * Xp, axis=1)
    return X, impact, cert


def _piecewise_speed_policy(speed: np.ndarray, stop_at_zero: bool, a: np.ndarray, dL: np.ndarray,
                            x0: float, p: float):
    """Per-step constant signed speed; optionally halts when the position reaches zero."""
    n, m = dL.shape
    X = np.empty((n, m + 1))
    X[:, 0] = x0
    impact = np.zeros(n)
    cert = np.zeros(n)
    speed = np.broadcast_to(speed, (n, m))
    for k in range(m):
        xk, s, dl = X[:, k], speed[:, k], dL[:, k]
        used = dl
        if stop_at_zero:
            reach = np.where(np.abs(s) > 0, np.abs(xk) / np.where(np.abs(s) > 0, np.abs(s), 1.0), np.inf)
            used = np.minimum(dl, reach)
        xn = xk + s * used
        if stop_at_zero:
            xn = np.where(used < dl, 0.0, xn)
        X[:, k + 1] = xn
        ak = a[k]
        impact += np.abs(s) ** p * used
        cert += (np.abs(s) ** p * used
                 - p * np.abs(s) * ak ** (p - 1.0) * _abs_power_integral(xk, xn, s, used, p - 1.0)
                 + (p - 1.0) * ak**p * _abs_power_integral(xk, xn, s, used, p)
                 + (p - 1.0) * ak**p * np.abs(xn) ** p * (dl - used))
    return X, impact, cert


def evaluate_batch(policy: Policy, batch: PathBatch, problem: ValidatedProblem,
                   vg: ValueGrid | None = None) -> BatchCosts:
    """Inventory, cost decomposition and excess-cost certificate for every path in ``batch``."""
    policy.check()
    cost = problem.cost
    p = float(cost.p)
    x0 = float(cost.x0)
    times = batch.times
    if abs(times[-1] - problem.horizon) > 1e-12 * max(1.0, problem.horizon):
        raise ValidationError("path", "path horizon must equal the cost horizon")
    dL = np.diff(batch.loctime, axis=1)
    if policy.needs_value or vg is not None:
        a = _barrier_rates(vg, problem, times)
    else:
        a = np.zeros(len(times) - 1)

    if policy.needs_value:
        factor = 1.0 if policy.variant == OPTIMAL else policy.factor
        X, impact, cert = _linear_policy(factor, a, dL, x0, p)
    elif policy.variant == CONSTANT:
        s = -math.copysign(policy.rate, x0) if x0 != 0 else 0.0
        X, impact, cert = _piecewise_speed_policy(np.full(len(a), s), True, a, dL, x0, p)
    else:
        mid = 0.5 * (times[1:] + times[:-1])
        s = np.interp(mid, policy.times, policy.speeds)
        X, impact, cert = _piecewise_speed_policy(s, False, a, dL, x0, p)

    if cost.phi.is_zero:
        running = np.zeros(X.shape[0])
    else:
        f = cost.phi(batch.prices) * np.abs(X) ** p
        running = np.sum(0.5 * (f[:, 1:] + f[:, :-1]) * np.diff(times), axis=1)
    terminal = cost.rho(batch.prices[:, -1]) * np.abs(X[:, -1]) ** p
    if vg is None:
        cert = np.full(X.shape[0], np.nan)
    return BatchCosts(X, impact, running, terminal, cert)


# --------------------------------------------------------------------------
# Single-path records
# --------------------------------------------------------------------------

@dataclass
class ExecutionRecord:
    path: PathBundle
    xi: np.ndarray
    inventory: np.ndarray
    cost_impact: float
    cost_running: float
    cost_terminal: float
    certificate: float = float("nan")

    @property
    def cost_total(self) -> float:
        return self.cost_impact + self.cost_running + self.cost_terminal

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "S", "L", "xi", "X"])
            for row in zip(self.path.times, self.path.prices, self.path.loctime, self.xi, self.inventory):
                wr.writerow([repr(float(v)) for v in row])


def _node_speeds(policy: Policy, path: PathBundle, X: np.ndarray, problem: ValidatedProblem,
                 vg: ValueGrid | None) -> np.ndarray:
    T = problem.horizon
    if policy.needs_value:
        factor = 1.0 if policy.variant == OPTIMAL else policy.factor
        u = np.maximum(vg(T - path.times, path.prices), 0.0)
        return -factor * X * u**problem.beta
    if policy.variant == CONSTANT:
        return np.where(X != 0, -np.sign(X) * policy.rate, 0.0)
    return np.interp(path.times, policy.times, policy.speeds)


def execute(policy: Policy, path: PathBundle, cost: CostSpec, vg: ValueGrid | None = None) -> ExecutionRecord:
    """Run ``policy`` along one recorded path."""
    if policy.needs_value and vg is None:
        raise ValidationError("vg", f"policy {policy.variant!r} requires a solved ValueGrid")
    problem = validate(path.model, cost)
    batch = PathBatch(path.times, path.prices[None, :], path.loctime[None, :])
    res = evaluate_batch(policy, batch, problem, vg)
    X = res.inventory[0]
    xi = _node_speeds(policy, path, X, problem, vg)
    return ExecutionRecord(path, xi, X, float(res.impact[0]), float(res.running[0]),
                           float(res.terminal[0]), float(res.certificate[0]))


@dataclass(frozen=True)
class CostDecomposition:
    impact: float
    running: float
    terminal: float

    @property
    def total(self) -> float:
        return self.impact + self.running + self.terminal


def realized_cost(record: ExecutionRecord, path: PathBundle, cost: CostSpec) -> CostDecomposition:
    """Cost functional from node values: trapezoid Stieltjes sum against dL and dt."""
    p = float(cost.p)
    dL = np.diff(path.loctime)
    g = np.abs(record.xi) ** p
    impact = float(np.sum(0.5 * (g[1:] + g[:-1]) * dL))
    f = cost.phi(path.prices) * np.abs(record.inventory) ** p
    running = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(path.times)))
    terminal = float(cost.rho(path.prices[-1]) * abs(record.inventory[-1]) ** p)
    return CostDecomposition(impact, running, terminal)


def excess_cost_certificate(record: ExecutionRecord, vg: ValueGrid, cost: CostSpec) -> float:
    """Pathwise int Phi_p(|xi|, |X| u^beta) dL; zero exactly for the optimal feedback."""
    if not math.isnan(record.certificate):
        return record.certificate
    problem = validate(record.path.model, cost)
    batch = PathBatch(record.path.times, record.path.prices[None, :], record.path.loctime[None, :])
    a = _barrier_rates(vg, problem, batch.times)
    dL = np.diff(batch.loctime, axis=1)
    speed = np.diff(record.inventory)[None, :] / np.where(dL > 0, dL, 1.0)
    _, _, cert = _piecewise_speed_policy(np.where(dL > 0, speed, 0.0), False, a, dL, cost.x0, float(cost.p))
    return float(cert[0])


# --------------------------------------------------------------------------
# Monte Carlo
# --------------------------------------------------------------------------

def _stats(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x)))


@dataclass
class PolicySample:
    """Per-path totals of one policy over a common set of paths."""

    policy: Policy
    total: np.ndarray
    impact: np.ndarray
    running: np.ndarray
    terminal: np.ndarray
    certificate: np.ndarray
    final_inventory: np.ndarray

    def summary(self) -> dict:
        mean, se = _stats(self.total)
        out = {"policy": self.policy.label, "mean": mean, "stderr": se,
               "impact": float(self.impact.mean()), "running": float(self.running.mean()),
               "terminal": float(self.terminal.mean())}
        if not np.all(np.isnan(self.certificate)):
            out["certificate_mean"], out["certificate_stderr"] = _stats(self.certificate)
            out["certificate_max"] = float(np.max(self.certificate))
        return out


def run_policies(policies, problem: ValidatedProblem, npaths: int, M: int, rng: RngSpec,
                 vg: ValueGrid | None = None, threads: int | None = None) -> list[PolicySample]:
    """Evaluate several policies on the same paths (common random numbers)."""
    if npaths < 2:
        raise ValidationError("npaths", "must be >= 2")
    policies = list(policies)
    acc = [{k: [] for k in ("total", "impact", "running", "terminal", "certificate", "xT")}
           for _ in policies]
    for batch in iter_batches(problem.model, problem.horizon, M, rng, npaths, threads=threads):
        for pol, store in zip(policies, acc):
            r = evaluate_batch(pol, batch, problem, vg)
            store["total"].append(r.total)
            store["impact"].append(r.impact)
            store["running"].append(r.running)
            store["terminal"].append(r.terminal)
            store["certificate"].append(r.certificate)
            store["xT"].append(r.inventory[:, -1])
    return [PolicySample(pol, *(np.concatenate(s[k]) for k in
                                ("total", "impact", "running", "terminal", "certificate", "xT")))
            for pol, s in zip(policies, acc)]


def mc_cost(policy: Policy, model: ModelSpec, cost: CostSpec, npaths: int, M: int, rng: RngSpec,
            vg: ValueGrid | None = None, threads: int | None = None) -> dict:
    """Sample mean, standard error and mean cost components of ``policy``."""
    if policy.needs_value and vg is None:
        raise ValidationError("vg", f"policy {policy.variant!r} requires a solved ValueGrid")
    return run_policies([policy], validate(model, cost), npaths, M, rng, vg, threads)[0].summary()


def paired_excess(a: PolicySample, b: PolicySample) -> dict:
    """Statistics of cost(b) - cost(a) on common paths."""
    d = b.total - a.total
    mean, se = _stats(d)
    pooled = math.hypot(_stats(a.total)[1], _stats(b.total)[1])
    return {"baseline": a.policy.label, "policy": b.policy.label, "excess": mean,
            "paired_stderr": se, "pooled_stderr": pooled,
            "z_paired": _ratio(mean, se), "z_pooled": _ratio(mean, pooled)}


def _ratio(x: float, scale: float) -> float:
    if scale > 0:
        return x / scale
    return 0.0 if x == 0 else math.copysign(math.inf, x)


def calibrate_constant_rate(problem: ValidatedProblem, vg: ValueGrid, M: int, rng: RngSpec,
                            npaths: int = 10_000, threads: int | None = None) -> float:
    """Rate r whose mean final inventory matches that of the optimal policy (pilot run)."""
    x0 = abs(problem.cost.x0)
    if x0 == 0:
        return 0.0
    LT, XT = [], []
    for batch in iter_batches(problem.model, problem.horizon, M, rng, npaths, threads=threads):
        r = evaluate_batch(Policy.optimal(), batch, problem, vg)
        LT.append(batch.loctime[:, -1])
        XT.append(np.abs(r.inventory[:, -1]))
    LT, target = np.concatenate(LT), float(np.mean(np.concatenate(XT)))
    gap = lambda r: float(np.mean(np.maximum(x0 - r * LT, 0.0))) - target
    if gap(0.0) <= 0:
        return 0.0
    hi = 1.0
    while gap(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            raise ValidationError("calibration", "no trading rate reaches the optimal turnover")
    return float(brentq(gap, 0.0, hi, xtol=1e-12))


def verification_entry(sample: PolicySample, u_value: float, x0: float, p: float,
                       rel_tol: float = 0.02) -> dict:
    """``{policy, mean, stderr, u_times_x0p, z_score, pass}`` for the minimal-cost identity."""
    mean, se = _stats(sample.total)
    target = abs(x0) ** p * u_value
    diff = abs(mean - target)
    z = diff / se if se > 0 else (0.0 if diff <= 1e-12 else math.inf)
    rel_ok = diff <= rel_tol * abs(target) if target != 0 else diff <= 1e-12
    return {"policy": sample.policy.label, "mean": mean, "stderr": se, "u_times_x0p": target,
            "z_score": z, "pass": bool(z < 3.0 and rel_ok)}
