"""Lattice approximation of the reflected price and of its local time.

Prices live on the grid c + sigma h Z (ABM) or c exp(sigma h Z) (GBM), h = 2^-n,
so one walk step takes h^2 units of time for every sigma. States are stored as
integer distances d >= 0 from the barrier; the lattice local time grows by
h*sigma (times c for GBM) on every visit to d = 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelSpec, RngSpec, ValidationError
from .paths import PathBundle

COARSE_LIMIT = 0.25  # max median |step| in lattice units accepted by crossings_from_path


def _spacing(n: int) -> float:
    if int(n) != n or n < 0:
        raise ValidationError("n", "resolution level must be a nonnegative integer")
    return 2.0 ** -int(n)


def _increment(model: ModelSpec, h: float) -> float:
    return h * model.sigma * (model.barrier if model.kind == "GBM" else 1.0)


def _distance(model: ModelSpec, prices):
    """Distance from the barrier in units of sigma (log-distance for GBM)."""
    prices = np.asarray(prices, dtype=float)
    if model.kind == "GBM":
        return model.sign * (np.log(prices) - math.log(model.barrier)) / model.sigma
    return model.sign * (prices - model.barrier) / model.sigma


def _price(model: ModelSpec, d):
    if model.kind == "GBM":
        return model.barrier * np.exp(model.sign * model.sigma * d)
    return model.barrier + model.sign * model.sigma * d


@dataclass
class LatticePath:
    n: int
    model: ModelSpec
    index: np.ndarray                 # integer distance from the barrier per step
    loctime: np.ndarray
    measured: np.ndarray | None = None  # crossing times when derived from a continuous path
    meta: dict = field(default_factory=dict)

    @property
    def spacing(self) -> float:
        return 2.0 ** -self.n

    @property
    def states(self) -> np.ndarray:
        return _price(self.model, self.index * self.spacing)

    @property
    def clock(self) -> np.ndarray:
        """Approximate physical times k 4^-n."""
        return np.arange(len(self.index)) * 4.0 ** -self.n

    def loctime_at(self, t):
        """ell at index floor(4^n t), clamped to the available range."""
        k = np.floor(np.asarray(t, dtype=float) * 4.0**self.n + 1e-9).astype(int)
        return self.loctime[np.clip(k, 0, len(self.loctime) - 1)]

    def covers(self, T: float) -> bool:
        return len(self.index) - 1 >= math.floor(T * 4.0**self.n + 1e-9)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k", "t_approx", "S", "ell"])
            for k, (t, s, l) in enumerate(zip(self.clock, self.states, self.loctime)):
                wr.writerow([k, repr(float(t)), repr(float(s)), repr(float(l))])
        meta = {"n": self.n, "spacing": self.spacing, "steps": len(self.index) - 1,
                "model": {"kind": self.model.kind, "sigma": self.model.sigma, "drift": self.model.drift,
                          "barrier": self.model.barrier, "side": self.model.side, "z0": self.model.z0},
                "clock": "measured" if self.measured is not None else "index", **self.meta}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def lattice_local_time(model: ModelSpec, n: int, index) -> np.ndarray:
    """ell_k = sum_{i <= k} increment * 1{state_i = barrier}."""
    h = _spacing(n)
    return _increment(model, h) * np.cumsum(np.asarray(index) == 0)


def step_up_probability(model: ModelSpec, n: int) -> float:
    """Probability that the walk moves away from the barrier, from an interior state.

    Exit probability of the drifted price from (-sigma h, sigma h) through the
    upper end, in the coordinate measuring distance from the barrier.
    """
    h = _spacing(n)
    if model.kind == "GBM":
        drift, sig = model.drift - 0.5 * model.sigma**2, model.sigma
    else:
        drift, sig = model.drift, model.sigma
    x = 2.0 * model.sign * drift * h / sig
    return float(0.5 * (1.0 + math.tanh(0.5 * x)))


def embedded_walk(model: ModelSpec, n: int, T: float, rng: RngSpec) -> LatticePath:
    """Direct simulation of the reflecting lattice walk for ceil(4^n T) steps.

    The walk starts at the grid level nearest to z0; from the barrier it moves
    away deterministically (image of the symmetric walk under |.|).
    """
    model.check()
    h = _spacing(n)
    steps = int(math.ceil(4.0**n * T - 1e-9))
    q = step_up_probability(model, n)
    d = int(round(float(_distance(model, model.z0)) / h))
    gen = rng.generator()
    u = gen.random(steps)
    index = np.empty(steps + 1, dtype=np.int64)
    index[0] = d
    up = u < q
    for k in range(steps):
        d = d + 1 if (d == 0 or up[k]) else d - 1
        index[k + 1] = d
    return LatticePath(int(n), model, index, lattice_local_time(model, n, index),
                       meta={"q_up": q, "start_distance": float(index[0] * h)})


def _level_events(x: np.ndarray, touches: np.ndarray, times: np.ndarray, var: float,
                  u: np.ndarray | None):
    """Integer level crossings of a sampled path, in time order.

    ``x`` is in lattice units and ``var`` is the variance of one step in those
    units. Between samples the path is linear, except that a step with a
    barrier touch goes x[i] -> 0 -> x[i+1]. If uniforms ``u`` are given, the
    first level beyond each step's range is added when the Brownian bridge
    reaches it, which linear interpolation misses.
    """
    a, b = x[:-1], x[1:]
    nstep = len(a)
    t0_all, t1_all = times[:-1], times[1:]
    fa, fb = np.floor(a), np.floor(b)
    active = touches | (fa != fb) | (fa == a) | (fb == b)
    extra = []
    if u is not None and var > 0:
        # first level beyond each step's range, reached by the bridge with probability exp(-2 d_a d_b / var)
        top = np.maximum(fa, fb) + 1.0
        hit_top = u[:nstep] < np.exp(-2.0 * (top - a) * (top - b) / var)
        bot = np.ceil(np.minimum(a, b)) - 1.0
        ok = (bot >= 1.0) & ~touches
        hit_bot = ok & (u[nstep:] < np.exp(-2.0 * (a - bot) * (b - bot) / var))
        for lvl, hit in ((top, hit_top), (bot, hit_bot)):
            i = np.flatnonzero(hit)
            # the excursion is placed next to the nearer endpoint
            near_start = np.abs(lvl[i] - a[i]) <= np.abs(lvl[i] - b[i])
            extra.append((lvl[i].astype(np.int64), np.where(near_start, t0_all[i], t1_all[i]),
                          i + np.where(near_start, 0.0, 0.99)))
    idx = np.flatnonzero(active)
    a, b, touches = a[idx], b[idx], touches[idx]
    t0, t1 = t0_all[idx], t1_all[idx]
    n_act = len(idx)
    # legs: a touch step is split into a -> 0 and 0 -> b
    frac = np.where(touches, a / np.maximum(a + b, 1e-300), 1.0)
    tm = t0 + frac * (t1 - t0)
    s_idx = np.concatenate([idx, idx[touches]])
    A = np.concatenate([a, np.zeros(touches.sum())])
    B = np.concatenate([np.where(touches, 0.0, b), b[touches]])
    TA = np.concatenate([t0, tm[touches]])
    TB = np.concatenate([np.where(touches, tm, t1), t1[touches]])
    KA = np.concatenate([np.zeros(n_act), frac[touches]])
    KB = np.concatenate([frac, np.ones(touches.sum())])
    up = B > A
    lo = np.where(up, np.floor(A) + 1, np.ceil(B))
    hi = np.where(up, np.floor(B), np.ceil(A) - 1)
    count = np.maximum(hi - lo + 1, 0).astype(np.int64)
    seg = np.repeat(np.arange(len(A)), count)
    offs = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
    level = np.where(up[seg], lo[seg] + offs, hi[seg] - offs)
    span = B[seg] - A[seg]
    w = np.where(span != 0, (level - A[seg]) / np.where(span != 0, span, 1.0), 1.0)
    t = TA[seg] + w * (TB[seg] - TA[seg])
    key = s_idx[seg] + 0.5 * (KA[seg] + w * (KB[seg] - KA[seg])) + 0.25
    levels, ts, keys = [level], [t], [key]
    for lv, tv, kv in extra:
        levels.append(lv)
        ts.append(tv)
        keys.append(kv)
    level, t, key = (np.concatenate(v) for v in (levels, ts, keys))
    order = np.argsort(key, kind="stable")
    return level[order].astype(np.int64), t[order]


def _bridge_uniforms(path: PathBundle, n: int) -> np.ndarray:
    ss = np.random.SeedSequence(int(path.rng.seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(path.rng.stream_id), 1, int(n)))
    return np.random.Generator(np.random.PCG64(ss)).random(2 * (len(path.times) - 1))


def crossings_from_path(path: PathBundle, n: int, refine: bool = True) -> LatticePath:
    """Lattice path read off a continuous path at its successive grid crossings.

    With ``refine`` the bridge excursions to the next level beyond each step
    are sampled from a dedicated random stream of the path.
    """
    h = _spacing(n)
    model = path.model
    x = np.maximum(_distance(model, path.prices), 0.0) / h
    med = float(np.median(np.abs(np.diff(x)))) if len(x) > 1 else 0.0
    if med >= COARSE_LIMIT:
        need = int(math.ceil((len(x) - 1) * (med / COARSE_LIMIT) ** 2))
        raise ValidationError("path", f"too coarse for level {n}: median step {med:.3f} grid units; "
                                      f"simulate with at least {need} steps")
    touches = np.diff(path.loctime) > 0
    dt = float(path.times[1] - path.times[0]) if len(x) > 1 else 0.0
    var = dt / h**2
    u = _bridge_uniforms(path, n) if refine and len(x) > 1 else None
    level, t = _level_events(x, touches, path.times, var, u)
    start = x[0]
    if abs(start - round(start)) < 1e-9:
        level = np.concatenate([[int(round(start))], level])
        t = np.concatenate([[path.times[0]], t])
    if level.size:
        keep = np.concatenate([[True], level[1:] != level[:-1]])
        level, t = level[keep], t[keep]
    return LatticePath(int(n), model, level, lattice_local_time(model, n, level), measured=t,
                       meta={"source": "crossings", "median_step": med, "refined": bool(refine)})


def _check_lengths(xi, lat: LatticePath) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1 or len(xi) < len(lat.loctime):
        raise ValidationError("xi_samples", f"need at least {len(lat.loctime)} samples, got {xi.size}")
    return xi[:len(lat.loctime)]


def _ell_increments(lat: LatticePath) -> np.ndarray:
    return np.diff(np.concatenate([[0.0], lat.loctime]))


def discrete_inventory(x0: float, xi_samples, lat: LatticePath) -> np.ndarray:
    """X_N = x0 + sum_{k <= N} xi_k (ell_k - ell_{k-1}), with ell_{-1} = 0."""
    xi = _check_lengths(xi_samples, lat)
    return x0 + np.cumsum(xi * _ell_increments(lat))


def discrete_cost(xi_samples, lat: LatticePath, p: float) -> float:
    """sum_k |xi_k|^p (ell_k - ell_{k-1})."""
    xi = _check_lengths(xi_samples, lat)
    return float(np.sum(np.abs(xi) ** p * _ell_increments(lat)))


def loctime_sup_error(lat: LatticePath, path: PathBundle, T: float) -> float:
    """sup_{t <= T} |ell_{floor(4^n t)} - L_t| over the sample times of ``path``."""
    sel = path.times <= T + 1e-12
    return float(np.max(np.abs(lat.loctime_at(path.times[sel]) - path.loctime[sel])))


def clock_sup_error(lat: LatticePath, T: float) -> float:
    """sup_{t <= T} |tau_{floor(4^n t)} - t| for a lattice path with measured clock."""
    if lat.measured is None:
        raise ValidationError("lat", "needs a measured clock (use crossings_from_path)")
    kmax = int(math.floor(T * 4.0**lat.n + 1e-9))
    k = np.arange(min(kmax, len(lat.measured) - 1) + 1)
    tau = lat.measured[k]
    # sup over t in [k 4^-n, (k+1) 4^-n) is attained at an endpoint
    left = np.abs(tau - k * 4.0**-lat.n)
    right = np.abs(tau - np.minimum((k + 1) * 4.0**-lat.n, T))
    return float(max(left.max(), right.max()))


def stieltjes_cost(xi_fn, path: PathBundle, p: float, T: float) -> float:
    """int_0^T |xi(t)|^p dL_t with xi evaluated at step midpoints."""
    sel = path.times <= T + 1e-12
    t, L = path.times[sel], path.loctime[sel]
    mid = 0.5 * (t[1:] + t[:-1])
    return float(np.sum(np.abs(xi_fn(mid)) ** p * np.diff(L)))


def lattice_cost(xi_fn, lat: LatticePath, p: float, T: float) -> float:
    """Discrete cost up to index floor(4^n T), xi sampled on the index clock."""
    kmax = min(int(math.floor(T * 4.0**lat.n + 1e-9)), len(lat.loctime) - 1)
    sub = LatticePath(lat.n, lat.model, lat.index[:kmax + 1], lat.loctime[:kmax + 1])
    return discrete_cost(xi_fn(sub.clock), sub, p)
