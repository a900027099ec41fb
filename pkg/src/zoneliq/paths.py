"""Reflected ABM/GBM paths with their barrier local time, and transition kernels.

Every model is reduced to a *standardized* reflected Brownian motion

    Y_t = y0 + W_t + mu t + L^Y_t,   Y >= 0,

with barrier at 0 and unit volatility. Prices map back through
``z = c + sign * sigma * y`` (ABM) or ``z = exp(log c + sign * sigma * y)``
(GBM), and the price-unit local time is ``L = kappa * L^Y``.

Local time is the Skorokhod pushing process. With ``B' = B - mu t`` and
``M`` its running maximum, ``(Y, L^Y) = (y0 v M - B', y0 v M - y0)`` in law;
sampling the Brownian-bridge maximum on every step makes this exact at the
grid nodes.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr, ndtr

from .model import ModelSpec, RngSpec, ValidationError

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Reduction:
    """Affine (or log-affine) map between prices and the standardized process."""

    sign: float
    center: float   # barrier, in log units for GBM
    sigma: float
    mu: float       # drift of Y, positive = away from the barrier
    kappa: float    # price local time per unit of standardized local time
    log: bool

    def to_std(self, z):
        z = np.asarray(z, dtype=float)
        x = np.log(z) if self.log else z
        return self.sign * (x - self.center) / self.sigma

    def from_std(self, y):
        x = self.center + self.sign * self.sigma * np.asarray(y, dtype=float)
        return np.exp(x) if self.log else x

    def jacobian(self, y):
        """|dz/dy| at standardized level y."""
        if self.log:
            return self.sigma * self.from_std(y)
        return np.full(np.shape(y), self.sigma)


def reduce_model(model: ModelSpec) -> Reduction:
    if model.kind == "GBM":
        drift = model.drift - 0.5 * model.sigma**2
        return Reduction(model.sign, math.log(model.barrier), model.sigma,
                         model.sign * drift / model.sigma, model.barrier * model.sigma, True)
    return Reduction(model.sign, model.barrier, model.sigma,
                     model.sign * model.drift / model.sigma, model.sigma, False)


# --------------------------------------------------------------------------
# Path simulation
# --------------------------------------------------------------------------

@dataclass
class PathBundle:
    times: np.ndarray
    prices: np.ndarray
    loctime: np.ndarray
    rng: RngSpec
    model: ModelSpec
    step_min: np.ndarray | None = None  # min over each step, in standardized distance

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "S", "L"])
            for row in zip(self.times, self.prices, self.loctime):
                w.writerow([repr(float(v)) for v in row])


def bridge_max(a: np.ndarray, b: np.ndarray, dt: float, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sample of max of a Brownian bridge from a to b over dt.

    ``u`` must lie in (0, 1]. P(max > m) = exp(-2 (m - a)(m - b) / dt).
    """
    d = b - a
    return 0.5 * (a + b + np.sqrt(d * d - 2.0 * dt * np.log(u)))


def std_paths(y0: float, mu: float, dt: float, normals: np.ndarray, uniforms: np.ndarray | None,
              bridge: bool = True):
    """Standardized reflected paths from Gaussian and uniform draws (rows = paths).

    Returns ``(Y, LY, step_min)`` with shapes (n, M+1), (n, M+1), (n, M).
    With ``bridge=False`` the running maximum only sees grid nodes.
    """
    normals = np.atleast_2d(normals)
    n, m = normals.shape
    b = np.zeros((n, m + 1))
    np.cumsum(math.sqrt(dt) * normals - mu * dt, axis=1, out=b[:, 1:])
    if bridge:
        step_max = bridge_max(b[:, :-1], b[:, 1:], dt, 1.0 - np.atleast_2d(uniforms))
    else:
        step_max = np.maximum(b[:, :-1], b[:, 1:])
    run = np.empty((n, m + 1))
    run[:, 0] = 0.0
    np.maximum.accumulate(step_max, axis=1, out=run[:, 1:])
    np.maximum(run[:, 1:], 0.0, out=run[:, 1:])
    top = np.maximum(run, y0)
    Y = top - b
    LY = top - y0
    step_min = top[:, 1:] - step_max
    return Y, LY, step_min


def _draws(rng: RngSpec, m: int):
    g = rng.generator()
    return g.standard_normal(m), g.random(m)


def simulate_abm(model: ModelSpec, T: float, M: int, rng: RngSpec, bridge: bool = True) -> PathBundle:
    """One reflected-ABM path with its local time on a uniform grid of M steps."""
    model.check()
    if model.kind != "ABM":
        raise ValidationError("model.kind", "simulate_abm needs an ABM model")
    if M < 1:
        raise ValidationError("M", "number of steps must be >= 1")
    red = reduce_model(model)
    dt = T / M
    z, u = _draws(rng, M)
    Y, LY, smin = std_paths(float(red.to_std(model.z0)), red.mu, dt, z, u, bridge)
    times = np.linspace(0.0, T, M + 1)
    return PathBundle(times, red.from_std(Y[0]), red.kappa * LY[0], rng, model, smin[0])


def simulate_gbm(model: ModelSpec, T: float, M: int, rng: RngSpec, bridge: bool = True) -> PathBundle:
    """Reflected GBM as the exponential of a reflected ABM in log price."""
    model.check()
    if model.kind != "GBM":
        raise ValidationError("model.kind", "simulate_gbm needs a GBM model")
    log_path = simulate_abm(model.log_transformed(), T, M, rng, bridge)
    return PathBundle(log_path.times, np.exp(log_path.prices), model.barrier * log_path.loctime,
                      rng, model, log_path.step_min)


def simulate(model: ModelSpec, T: float, M: int, rng: RngSpec, bridge: bool = True) -> PathBundle:
    if model.kind == "GBM":
        return simulate_gbm(model, T, M, rng, bridge)
    return simulate_abm(model, T, M, rng, bridge)


@dataclass
class PathBatch:
    """Many paths on a shared grid; row i was drawn from ``rng.substream(i)``."""

    times: np.ndarray
    prices: np.ndarray
    loctime: np.ndarray

    @property
    def npaths(self) -> int:
        return self.prices.shape[0]


def _batch_chunk(model: ModelSpec, T: float, M: int, rng: RngSpec, start: int, stop: int,
                 bridge: bool) -> tuple[np.ndarray, np.ndarray]:
    red = reduce_model(model)
    z = np.empty((stop - start, M))
    u = np.empty((stop - start, M))
    for i in range(start, stop):
        z[i - start], u[i - start] = _draws(rng.substream(i), M)
    Y, LY, _ = std_paths(float(red.to_std(model.z0)), red.mu, T / M, z, u, bridge)
    return red.from_std(Y), red.kappa * LY


def simulate_batch(model: ModelSpec, T: float, M: int, rng: RngSpec, npaths: int,
                   bridge: bool = True, threads: int | None = None, chunk: int = 2048) -> PathBatch:
    """Simulate ``npaths`` independent paths; results do not depend on chunking or threads."""
    model.check()
    if M < 1:
        raise ValidationError("M", "number of steps must be >= 1")
    bounds = [(s, min(s + chunk, npaths)) for s in range(0, npaths, chunk)]
    with ThreadPoolExecutor(max_workers=threads or 1) as pool:
        parts = list(pool.map(lambda ab: _batch_chunk(model, T, M, rng, ab[0], ab[1], bridge), bounds))
    prices = np.concatenate([p[0] for p in parts]) if parts else np.empty((0, M + 1))
    loctime = np.concatenate([p[1] for p in parts]) if parts else np.empty((0, M + 1))
    return PathBatch(np.linspace(0.0, T, M + 1), prices, loctime)


def iter_batches(model: ModelSpec, T: float, M: int, rng: RngSpec, npaths: int,
                 chunk: int = 2048, bridge: bool = True, threads: int | None = None):
    """Yield PathBatch blocks covering paths 0..npaths-1 in order (bounded memory)."""
    bounds = [(s, min(s + chunk, npaths)) for s in range(0, npaths, chunk)]
    times = np.linspace(0.0, T, M + 1)
    width = max(1, threads or 1)
    with ThreadPoolExecutor(max_workers=width) as pool:
        for w0 in range(0, len(bounds), width):
            window = bounds[w0:w0 + width]
            for S, L in pool.map(lambda ab: _batch_chunk(model, T, M, rng, ab[0], ab[1], bridge), window):
                yield PathBatch(times, S, L)


# --------------------------------------------------------------------------
# Standardized kernels (unit volatility, barrier at 0, drift mu)
# --------------------------------------------------------------------------

def _npdf(x):
    return np.exp(-0.5 * x * x) / SQRT_2PI


def std_reflected_density(s, y0, y, mu: float):
    """Transition density of reflected BM with drift mu on [0, inf)."""
    s, y0, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (s, y0, y)))
    rs = np.sqrt(s)
    direct = _npdf((y - y0 - mu * s) / rs) / rs
    image = np.exp(-2.0 * mu * y0) * _npdf((y + y0 - mu * s) / rs) / rs
    if mu == 0.0:
        return direct + image
    tail = -2.0 * mu * np.exp(2.0 * mu * y + log_ndtr(-(y + y0 + mu * s) / rs))
    return direct + image + tail


def std_flux(s, y0, mu: float):
    """d/ds E_{y0}[L^Y_s] for standardized reflected BM with drift mu."""
    s = np.asarray(s, dtype=float)
    rs = np.sqrt(s)
    a = (np.asarray(y0, dtype=float) + mu * s) / rs
    out = _npdf(a) / rs
    if mu != 0.0:
        out = out - mu * ndtr(-a)
    return out


def std_expected_loctime(t, y0, mu: float = 0.0):
    """E_{y0}[L^Y_t]; closed form for mu = 0, quadrature otherwise."""
    t = np.asarray(t, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    if mu == 0.0:
        rt = np.sqrt(t)
        return 2.0 * (rt * _npdf(y0 / rt) - y0 * ndtr(-y0 / rt))
    # substitute s = v^2 to remove the 1/sqrt(s) singularity
    x, wq = np.polynomial.legendre.leggauss(64)
    t_b, y_b = np.broadcast_arrays(t, y0)
    out = np.empty(t_b.shape)
    for idx in np.ndindex(t_b.shape):
        rt = math.sqrt(t_b[idx])
        v = 0.5 * rt * (x + 1.0)
        out[idx] = 0.5 * rt * np.sum(wq * 2.0 * v * std_flux(v * v, y_b[idx], mu))
    return out


# --------------------------------------------------------------------------
# Price-unit kernels
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DensityQuery:
    origin: float
    target: float
    elapsed: float


def free_density(model: ModelSpec, q: DensityQuery) -> float:
    """Density of the unreflected driving motion from ``origin`` to ``target``."""
    s = q.elapsed
    if s <= 0:
        raise ValidationError("elapsed", "must be positive")
    sig = model.sigma
    if model.kind == "ABM":
        m = q.origin + model.drift * s
        return float(_npdf((q.target - m) / (sig * math.sqrt(s))) / (sig * math.sqrt(s)))
    if q.target <= 0:
        return 0.0
    m = math.log(q.origin) + (model.drift - 0.5 * sig**2) * s
    sd = sig * math.sqrt(s)
    return float(_npdf((math.log(q.target) - m) / sd) / (sd * q.target))


def reflected_density(model: ModelSpec, q: DensityQuery) -> float:
    """Transition density of the reflected price process (closed form, any drift)."""
    if q.elapsed <= 0:
        raise ValidationError("elapsed", "must be positive")
    red = reduce_model(model)
    y0 = float(red.to_std(q.origin))
    y = float(red.to_std(q.target))
    if y0 < -1e-12 or y < -1e-12:
        raise ValidationError("target", "points must lie on the admissible side of the barrier")
    y0, y = max(y0, 0.0), max(y, 0.0)
    return float(std_reflected_density(q.elapsed, y0, y, red.mu) / red.jacobian(y))


def barrier_flux(model: ModelSpec, z, s):
    """rho_s(z) = d/ds E_z[L_s] in price-unit local time."""
    red = reduce_model(model)
    return red.kappa * std_flux(s, np.maximum(red.to_std(z), 0.0), red.mu)


def expected_loctime(model: ModelSpec, z, t):
    """E_z[L_t] = integral of barrier_flux over [0, t]."""
    red = reduce_model(model)
    return red.kappa * std_expected_loctime(t, np.maximum(red.to_std(z), 0.0), red.mu)


def contact_tolerance(model: ModelSpec, T: float) -> float:
    return 2.0**-20 * model.sigma * math.sqrt(T)
