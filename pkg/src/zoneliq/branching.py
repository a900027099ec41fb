"""Branching-particle estimator of the Laplace functional (beta = 1 only).

n particles of mass 1/n start at z and move as the reflected diffusion. Each
particle carries an exponential clock in its own local time with rate
lambda*n; when it fires the particle is replaced by 0 or 2 particles at the
barrier (probability 1/2 each). Then

    E[exp(-int <phi, Y_t> dt - <rho, Y_T>)] -> exp(-u(T, z))  as n -> inf,

where u solves the value equation with 1/beta = 1. The mechanism of this
system is (lambda/2) u^2, so lambda = 2.

For driftless ABM with constant phi the particle system is simulated exactly:
barrier hitting times, local-time thresholds and survivor positions are all
drawn from closed-form laws. Other models fall back to time stepping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, erfinv

from .model import CostSpec, FunctionSpec, GridSpec, ModelSpec, RngSpec, ValidatedProblem, \
    ValidationError, validate
from .paths import bridge_max, reduce_model
from .value import solve

RATE = 2.0
CENSOR_LIMIT = 1_000_000
BLOCK = 256  # populations per random stream


def _check_beta(problem: ValidatedProblem) -> None:
    if abs(problem.cost.p - 2.0) > 1e-12:
        raise ValidationError("cost.p", "the branching validator requires p = 2 (beta = 1)")


def exact_scheme_applies(model: ModelSpec, cost: CostSpec) -> bool:
    return model.kind == "ABM" and model.drift == 0.0 and cost.phi.is_constant


@dataclass
class Population:
    """Final state of one population (positions in price units)."""

    n_scale: int
    positions: np.ndarray
    accumulated: float
    censored: bool = False

    @property
    def mass(self) -> float:
        return len(self.positions) / self.n_scale


@dataclass
class BlockResult:
    running: np.ndarray        # int <phi, Y_t> dt per population
    final_rho: np.ndarray      # <rho, Y_T>
    masses: np.ndarray         # (npops, len(checkpoints))
    censored: np.ndarray
    positions: list | None = None
    branch_positions: np.ndarray | None = None


def _survivor_final(a, tau, gen, from_barrier: bool):
    """Final standardized position given the running maximum of B' stays below ``a``."""
    u1 = gen.random(len(a))
    u2 = 1.0 - gen.random(len(a))
    s = np.sqrt(2.0 * tau)
    m = s * erfinv(u1 * erf(a / s))
    m = np.minimum(m, a)
    r = np.sqrt(m * m - 2.0 * tau * np.log(u2))
    return r - m if from_barrier else a - 2.0 * m + r


def _exact_block(y0: float, kappa: float, n: int, npops: int, T: float, lam: float, gen,
                 phi0: float, checkpoints: np.ndarray, keep_positions: bool):
    pop = np.repeat(np.arange(npops), n)
    birth = np.zeros(pop.size)
    t = np.zeros(pop.size)
    y = np.full(pop.size, float(y0))
    lifetime = np.zeros(npops)
    alive = np.zeros((npops, len(checkpoints)))
    censored = np.zeros(npops, dtype=bool)
    final_pop, final_y, branch_y = [], [], []
    rate = lam * n * kappa  # threshold rate in standardized local time

    def close(p, b, d):
        np.add.at(lifetime, p, d - b)
        for j, tc in enumerate(checkpoints):
            inside = (b <= tc) & ((tc < d) | ((d >= T) & (tc >= T)))
            np.add.at(alive[:, j], p[inside], 1.0)

    while pop.size:
        # particles away from the barrier: first hit or survive to T
        off = y > 0
        if np.any(off):
            g = gen.standard_normal(int(off.sum()))
            hit = t[off] + (y[off] / np.maximum(np.abs(g), 1e-300)) ** 2
            surv = hit >= T
            idx = np.flatnonzero(off)
            s_idx = idx[surv]
            if s_idx.size:
                fy = _survivor_final(y[s_idx], T - t[s_idx], gen, from_barrier=False)
                close(pop[s_idx], birth[s_idx], np.full(s_idx.size, T))
                final_pop.append(pop[s_idx])
                final_y.append(fy)
            h_idx = idx[~surv]
            t[h_idx] = hit[~surv]
            y[h_idx] = 0.0
            keep = np.ones(pop.size, dtype=bool)
            keep[s_idx] = False
            pop, birth, t, y = pop[keep], birth[keep], t[keep], y[keep]
        if not pop.size:
            break
        # every remaining particle sits at the barrier
        theta = gen.standard_exponential(pop.size) / rate
        g = gen.standard_normal(pop.size)
        fire = t + (theta / np.maximum(np.abs(g), 1e-300)) ** 2
        surv = fire >= T
        if np.any(surv):
            fy = _survivor_final(theta[surv], T - t[surv], gen, from_barrier=True)
            close(pop[surv], birth[surv], np.full(int(surv.sum()), T))
            final_pop.append(pop[surv])
            final_y.append(fy)
        br = ~surv
        close(pop[br], birth[br], fire[br])
        if keep_positions:
            branch_y.append(np.zeros(int(br.sum())))
        two = gen.random(int(br.sum())) < 0.5
        parents = np.flatnonzero(br)[two]
        pop = np.repeat(pop[parents], 2)
        birth = np.repeat(fire[parents], 2)
        t = birth.copy()
        y = np.zeros(pop.size)
        # explosion guard
        if pop.size:
            counts = np.bincount(pop, minlength=npops)
            over = counts > CENSOR_LIMIT
            if np.any(over):
                censored |= over
                keep = ~over[pop]
                pop, birth, t, y = pop[keep], birth[keep], t[keep], y[keep]

    fp = np.concatenate(final_pop) if final_pop else np.zeros(0, dtype=int)
    fy = np.concatenate(final_y) if final_y else np.zeros(0)
    return (phi0 * lifetime / n, fp, fy, alive / n, censored,
            np.concatenate(branch_y) if branch_y else np.zeros(0))


def _stepped_block(model: ModelSpec, n: int, npops: int, T: float, dt: float, lam: float, gen,
                   phi: FunctionSpec, checkpoints: np.ndarray):
    """Time-stepping fallback: exact reflected steps, branching resolved at step ends.

    Offspring are placed at the barrier at the end of the step in which the
    clock fired; this shifts branching times by at most dt.
    """
    red = reduce_model(model)
    steps = max(1, int(math.ceil(T / dt - 1e-9)))
    h = T / steps
    pop = np.repeat(np.arange(npops), n)
    y = np.full(pop.size, float(red.to_std(model.z0)))
    theta = gen.standard_exponential(pop.size) / (lam * n * red.kappa)
    running = np.zeros(npops)
    alive = np.zeros((npops, len(checkpoints)))
    censored = np.zeros(npops, dtype=bool)
    ck_steps = np.rint(checkpoints / h).astype(int)
    for k in range(steps + 1):
        for j in np.flatnonzero(ck_steps == k):
            np.add.at(alive[:, j], pop, 1.0)
        if k == steps or not pop.size:
            break
        b = math.sqrt(h) * gen.standard_normal(pop.size) - red.mu * h
        m = bridge_max(0.0, b, h, 1.0 - gen.random(pop.size))
        top = np.maximum(y, m)
        new_y = top - b
        dl = top - y
        if not phi.is_zero:
            f0 = phi(red.from_std(y))
            f1 = phi(red.from_std(new_y))
            np.add.at(running, pop, 0.5 * (f0 + f1) * h / n)
        theta = theta - dl
        y = new_y
        fired = theta <= 0
        if np.any(fired):
            two = gen.random(int(fired.sum())) < 0.5
            parents = np.flatnonzero(fired)[two]
            kids = np.repeat(pop[parents], 2)
            pop = np.concatenate([pop[~fired], kids])
            y = np.concatenate([y[~fired], np.zeros(kids.size)])
            theta = np.concatenate([theta[~fired],
                                    gen.standard_exponential(kids.size) / (lam * n * red.kappa)])
            counts = np.bincount(pop, minlength=npops)
            over = counts > CENSOR_LIMIT
            if np.any(over):
                censored |= over
                keep = ~over[pop]
                pop, y, theta = pop[keep], y[keep], theta[keep]
    return running, pop, y, alive / n, censored


def simulate_block(problem: ValidatedProblem, n_scale: int, npops: int, rng: RngSpec,
                   z: float | None = None, rate: float = RATE, dt: float | None = None,
                   checkpoints=None, keep_positions: bool = False) -> BlockResult:
    """Simulate ``npops`` independent populations from one random stream."""
    _check_beta(problem)
    if n_scale < 1 or int(n_scale) != n_scale:
        raise ValidationError("n_scale", "must be a positive integer")
    model = problem.model if z is None else problem.model.with_start(z)
    model.check()
    T = problem.horizon
    cost = problem.cost
    checkpoints = np.asarray(checkpoints if checkpoints is not None else [T / 4, T / 2, T], dtype=float)
    gen = rng.generator()
    red = reduce_model(model)
    if exact_scheme_applies(model, cost):
        running, fp, fy, masses, censored, branch_y = _exact_block(
            float(red.to_std(model.z0)), red.kappa, int(n_scale), npops, T, rate, gen,
            cost.phi.bound, checkpoints, keep_positions)
    else:
        step = dt if dt is not None else T / 1000
        running, fp, fy, masses, censored = _stepped_block(
            model, int(n_scale), npops, T, step, rate, gen, cost.phi, checkpoints)
        branch_y = np.zeros(0)
    prices = red.from_std(fy)
    final_rho = np.zeros(npops)
    if prices.size:
        np.add.at(final_rho, fp, cost.rho(prices) / n_scale)
    positions = None
    if keep_positions:
        order = np.argsort(fp, kind="stable")
        splits = np.cumsum(np.bincount(fp, minlength=npops))[:-1]
        positions = np.split(prices[order], splits)
    return BlockResult(running, final_rho, masses, censored, positions,
                       red.from_std(branch_y) if keep_positions else None)


def simulate_population(model: ModelSpec, cost: CostSpec, n_scale: int, rng: RngSpec,
                        z: float | None = None, rate: float = RATE, dt: float | None = None) -> Population:
    """One population evolved to the horizon."""
    res = simulate_block(validate(model, cost), n_scale, 1, rng, z, rate, dt, keep_positions=True)
    return Population(n_scale, res.positions[0], float(res.running[0]), bool(res.censored[0]))


def _blocks(npaths: int):
    for b, start in enumerate(range(0, npaths, BLOCK)):
        yield b, min(BLOCK, npaths - start)


def laplace_estimate(model: ModelSpec, cost: CostSpec, n_scale: int, npaths: int, rng: RngSpec,
                     z: float | None = None, rate: float = RATE, dt: float | None = None) -> dict:
    """Monte Carlo estimate of E exp(-int <phi, Y> dt - <rho, Y_T>) with its standard error.

    Block b of populations draws from ``rng.substream(b)``, so the result is
    fixed by (seed, npaths). Censored populations are excluded from the mean.
    """
    problem = validate(model, cost)
    _check_beta(problem)
    if npaths < 2:
        raise ValidationError("npaths", "must be >= 2")
    vals, masses, cens = [], [], 0
    for b, size in _blocks(npaths):
        res = simulate_block(problem, n_scale, size, rng.substream(b), z, rate, dt)
        ok = ~res.censored
        vals.append(np.exp(-res.running[ok] - res.final_rho[ok]))
        masses.append(res.masses[ok])
        cens += int(res.censored.sum())
    vals = np.concatenate(vals)
    masses = np.concatenate(masses)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.inf
    T = problem.horizon
    return {"n_scale": int(n_scale), "npaths": int(npaths), "estimate": est, "stderr": se,
            "neg_log": -math.log(est) if est > 0 else math.inf,
            "neg_log_stderr": se / est if est > 0 else math.inf,
            "mass_times": [T / 4, T / 2, T], "mass_mean": masses.mean(axis=0).tolist(),
            "mass_stderr": (masses.std(axis=0, ddof=1) / math.sqrt(len(masses))).tolist(),
            "censored_paths": cens, "exact_scheme": exact_scheme_applies(problem.model.with_start(
                problem.model.z0 if z is None else z), cost), "rate": rate}


def finite_scale_prediction(problem: ValidatedProblem, n_scale: int, grid: GridSpec = GridSpec(),
                            z: float | None = None) -> float:
    """Exact large-sample limit of -log(laplace_estimate) at finite n (phi = 0).

    With one particle's log-Laplace transform written as V = n(1 - E exp(-.)),
    V solves the value equation with terminal penalty n(1 - exp(-rho/n)); the
    estimate then converges to (1 - V/n)^n.
    """
    _check_beta(problem)
    if not problem.cost.phi.is_zero:
        raise ValidationError("cost.phi", "finite-scale prediction is exact only for phi = 0")
    n = float(n_scale)
    cost = problem.cost
    if cost.rho.is_constant:
        rho_n = FunctionSpec.constant(n * -math.expm1(-cost.rho.bound / n))
        vg = solve(validate(problem.model, CostSpec(cost.p, cost.phi, rho_n, cost.horizon, cost.x0)), grid)
    else:
        vg = solve(problem, grid, rho=lambda s: n * -np.expm1(-cost.rho(s) / n))
    zz = problem.model.z0 if z is None else z
    v = float(vg(problem.horizon, zz))
    return -n * math.log1p(-v / n)


def validator_report(estimate: dict, u_solver: float) -> dict:
    """``{n_scale, npaths, estimate, stderr, u_solver, z_score, censored_paths}``."""
    se = estimate["neg_log_stderr"]
    diff = abs(estimate["neg_log"] - u_solver)
    z = diff / se if se > 0 else (0.0 if diff <= 1e-12 else math.inf)
    return {"n_scale": estimate["n_scale"], "npaths": estimate["npaths"],
            "estimate": estimate["estimate"], "stderr": estimate["stderr"], "u_solver": u_solver,
            "z_score": z, "censored_paths": estimate["censored_paths"]}


def calibrate_rate(problem: ValidatedProblem, u_solver: float, n_scale: int, npaths: int, rng: RngSpec,
                   candidates=(RATE,)) -> dict:
    """Accept the first candidate rate whose estimate matches the solver within 3 stderr."""
    trials = []
    for lam in candidates:
        est = laplace_estimate(problem.model, problem.cost, n_scale, npaths, rng, rate=lam)
        rep = validator_report(est, u_solver)
        trials.append({"rate": lam, "neg_log": est["neg_log"], "z_score": rep["z_score"]})
        if rep["z_score"] < 3.0:
            return {"rate": lam, "trials": trials}
    return {"rate": None, "trials": trials}
