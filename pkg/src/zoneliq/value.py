"""Value function of the liquidation problem.

u solves

    u(t, z) = h(t, z) - (1/beta) E_z[ int_0^t u(t-s, S_s)^(1+beta) dL_s ],
    h(t, z) = E_z[ rho(S_t) + int_0^t phi(S_s) ds ].

Because dL only charges the barrier, the nonlocal term only sees the barrier
trace w(t) = u(t, c):

    u(t, z) = h(t, z) - (1/beta) int_0^t w(t-s)^(1+beta) flux_s(z) ds,

so w solves a scalar Volterra equation with a weakly singular (~ s^-1/2)
kernel, and the field follows from w by one more convolution.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import erfcx, ndtr

from .model import GridSpec, RngSpec, ValidatedProblem, ValidationError
from .paths import Reduction, iter_batches, reduce_model

FIXED_POINT_TOL = 1e-10
NEGATIVE_TOL = 1e-8
_GMAX = 10.0  # standard normal truncation in quadrature


class SolverError(RuntimeError):
    """Numerical failure: non-convergence or a violated solver invariant."""


class QuadratureError(SolverError):
    pass


# --------------------------------------------------------------------------
# Expectations under the standardized reflected law
# --------------------------------------------------------------------------

def _composite_gl(panels: int, order: int = 8):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    nodes = (edges[:-1, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


_NODES_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _unit_rule(panels: int):
    if panels not in _NODES_CACHE:
        _NODES_CACHE[panels] = _composite_gl(panels)
    return _NODES_CACHE[panels]


def _log_npdf(g):
    return -0.5 * g * g - 0.5 * math.log(2.0 * math.pi)


def _exp_tail_table(f: Callable, mu: float, xmax: float, npts: int = 400001):
    """x -> int_0^x f(v) 2|mu| exp(-2|mu| v) dv on a fine grid (mu < 0 tail term)."""
    lam = 2.0 * abs(mu)
    xmax = max(min(xmax, 40.0 / lam), 1e-12)
    v = np.linspace(0.0, xmax, npts)
    dens = f(v) * lam * np.exp(-lam * v)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(v))])
    return v, cum


def std_expectation(f: Callable, s, y0, mu: float, panels: int = 64, chunk: int = 4096):
    """E_{y0}[f(Y_s)] for the standardized reflected BM with drift ``mu``.

    The transition density splits into a direct Gaussian, an image Gaussian and
    (for mu != 0) an exponential tail term; each is integrated in its natural
    Gaussian variable with composite Gauss-Legendre on [-10, 10].
    """
    s, y0 = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(y0, dtype=float))
    shape = s.shape
    s, y0 = s.ravel(), y0.ravel()
    out = np.empty(s.shape)
    xq, wq = _unit_rule(panels)
    table = None
    if mu < 0.0:
        xmax = float(np.max(_GMAX * np.sqrt(s) - (y0 + mu * s))) if s.size else 0.0
        table = _exp_tail_table(f, mu, xmax)

    def span(lo):
        lo = np.clip(lo, -_GMAX, _GMAX)
        g = lo[:, None] + (_GMAX - lo)[:, None] * xq[None, :]
        return g, (_GMAX - lo)[:, None] * wq[None, :]

    for a0 in range(0, s.size, chunk):
        ss, yy = s[a0:a0 + chunk], y0[a0:a0 + chunk]
        rs = np.sqrt(ss)
        a = yy + mu * ss
        ap = yy - mu * ss
        g, w = span(-a / rs)
        total = np.sum(w * f(a[:, None] + rs[:, None] * g) * np.exp(_log_npdf(g)), axis=1)
        g, w = span(ap / rs)
        y_img = np.maximum(-ap[:, None] + rs[:, None] * g, 0.0)
        log_w = -2.0 * mu * yy[:, None] + _log_npdf(g)
        f_img = f(y_img)
        total += np.sum(w * f_img * np.exp(log_w), axis=1)
        if mu > 0.0:
            x = g + 2.0 * mu * rs[:, None]
            mills = erfcx(x / math.sqrt(2.0)) * math.sqrt(0.5 * math.pi)
            total -= 2.0 * mu * rs * np.sum(w * f_img * np.exp(log_w) * mills, axis=1)
        elif mu < 0.0:
            g, w = span(a / rs)
            arg = np.maximum(rs[:, None] * g - a[:, None], 0.0)
            total += np.sum(w * np.interp(arg, table[0], table[1]) * np.exp(_log_npdf(g)), axis=1)
        out[a0:a0 + chunk] = total
    return out.reshape(shape)


# --------------------------------------------------------------------------
# Source term h(t, z)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class _Penalties:
    """Penalties as functions of standardized level, plus shortcuts."""

    rho: Callable
    phi: Callable
    rho_const: float | None
    phi_const: float | None


def _penalties(problem: ValidatedProblem, red: Reduction, rho=None, phi=None) -> _Penalties:
    cost = problem.cost
    rho_fn = rho if rho is not None else cost.rho
    phi_fn = phi if phi is not None else cost.phi
    rc = cost.rho.bound if (rho is None and cost.rho.is_constant) else None
    pc = cost.phi.bound if (phi is None and cost.phi.is_constant) else None
    return _Penalties(lambda y: rho_fn(red.from_std(y)), lambda y: phi_fn(red.from_std(y)), rc, pc)


def _source_on_grid(pen: _Penalties, mu: float, tgrid: np.ndarray, y: np.ndarray,
                    panels: int = 64) -> np.ndarray:
    nt1, ny = len(tgrid), len(y)
    h = np.zeros((nt1, ny))
    if pen.rho_const is not None:
        h += pen.rho_const
    else:
        h[0] = pen.rho(y)
        S, Yg = np.meshgrid(tgrid[1:], y, indexing="ij")
        h[1:] = std_expectation(pen.rho, S, Yg, mu, panels)
    if pen.phi_const is not None:
        h += pen.phi_const * tgrid[:, None]
    else:
        # 3-point Gauss-Legendre in each time cell, accumulated
        x, w = np.polynomial.legendre.leggauss(3)
        dt = np.diff(tgrid)
        snodes = tgrid[:-1, None] + 0.5 * dt[:, None] * (x[None, :] + 1.0)
        S, Yg = np.meshgrid(snodes.ravel(), y, indexing="ij")
        vals = std_expectation(pen.phi, S, Yg, mu, panels).reshape(len(dt), 3, ny)
        cell = np.einsum("k,ckj->cj", w, vals) * 0.5 * dt[:, None]
        h[1:] += np.cumsum(cell, axis=0)
    return h


def _check_quadrature(pen: _Penalties, mu: float, tgrid: np.ndarray, y: np.ndarray, h: np.ndarray,
                      tol: float = 1e-5) -> float:
    """Compare the last time row against a doubled quadrature rule."""
    if pen.rho_const is not None and pen.phi_const is not None:
        return 0.0
    idx = np.linspace(0, len(y) - 1, min(len(y), 9)).astype(int)
    # the running term accumulates over the whole grid; the terminal term needs only t = T
    times = tgrid if pen.phi_const is None else tgrid[[0, -1]]
    fine = _source_on_grid(pen, mu, times, y[idx], panels=128)
    err = float(np.max(np.abs(fine[-1] - h[-1, idx])))
    scale = max(1.0, float(np.max(np.abs(h))))
    if err > tol * scale:
        raise QuadratureError(
            f"source term quadrature did not converge (difference {err:.2e}); "
            "refine the penalty tables or increase quadrature panels")
    return err


def source_term(problem: ValidatedProblem, t, z):
    """h(t, z) = E_z[rho(S_t) + int_0^t phi(S_s) ds] for arrays t >= 0, z admissible."""
    red = reduce_model(problem.model)
    pen = _penalties(problem, red)
    t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
    if np.any(t < 0) or np.any(t > problem.horizon * (1 + 1e-12)):
        raise ValidationError("t", "must lie in [0, T]")
    y = np.maximum(red.to_std(z), 0.0)
    out = np.zeros(t.shape)
    pos = t > 0
    if pen.rho_const is not None:
        out += pen.rho_const
    else:
        out[~pos] = pen.rho(y[~pos])
        if np.any(pos):
            out[pos] = std_expectation(pen.rho, t[pos], y[pos], red.mu)
    if pen.phi_const is not None:
        out += pen.phi_const * t
    elif np.any(pos):
        # s = v^2 removes the sqrt behaviour at s = 0
        x, w = np.polynomial.legendre.leggauss(48)
        tp, yp = t[pos], y[pos]
        rt = np.sqrt(tp)
        v = 0.5 * rt[:, None] * (x[None, :] + 1.0)
        vals = std_expectation(pen.phi, v * v, np.broadcast_to(yp[:, None], v.shape), red.mu)
        out[pos] += np.sum(0.5 * rt[:, None] * w[None, :] * 2.0 * v * vals, axis=1)
    return out


# --------------------------------------------------------------------------
# Kernel moments for product integration
# --------------------------------------------------------------------------

def kernel_moments(red: Reduction, step: float, ncells: int, y, order: int = 24):
    """Exact-to-quadrature cell moments of the price-unit barrier flux.

    For cell j = [j*step, (j+1)*step] returns
    ``A[j] = int flux_s ds`` and ``B[j] = int (s - j*step)/step * flux_s ds``,
    computed in v = sqrt(s) where the integrand is smooth.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    x, w = np.polynomial.legendre.leggauss(order)
    j = np.arange(ncells, dtype=float)
    v0 = np.sqrt(j * step)
    v1 = np.sqrt((j + 1.0) * step)
    half = 0.5 * (v1 - v0)
    v = v0[:, None] + half[:, None] * (x[None, :] + 1.0)          # (ncells, order)
    V = v[:, :, None]
    arg = (y[None, None, :] + red.mu * V * V) / V
    dens = 2.0 * np.exp(_log_npdf(arg))
    if red.mu != 0.0:
        dens = dens - 2.0 * red.mu * V * ndtr(-arg)
    dens *= red.kappa
    wts = (half[:, None] * w[None, :])[:, :, None]
    A = np.sum(wts * dens, axis=1)
    frac = ((v * v - (j * step)[:, None]) / step)[:, :, None]
    B = np.sum(wts * frac * dens, axis=1)
    return A, B


# --------------------------------------------------------------------------
# Value grid
# --------------------------------------------------------------------------

def make_tgrid(T: float, nt: int) -> np.ndarray:
    return np.linspace(0.0, T, nt + 1)


def make_zgrid(problem: ValidatedProblem, grid: GridSpec) -> np.ndarray:
    """Prices ordered by distance from the barrier; zgrid[0] is the barrier."""
    m = problem.model
    xi = np.linspace(0.0, 1.0, grid.nz)
    if grid.stretch == "sqrt-clustered-at-barrier":
        xi = xi**2
    if m.kind == "GBM" and m.side == "upper" and grid.z_far >= m.barrier:
        raise ValidationError("grid.z_far", "must be smaller than the barrier for an upper GBM barrier")
    return m.barrier + m.sign * grid.z_far * xi


@dataclass
class ValueGrid:
    tgrid: np.ndarray
    zgrid: np.ndarray
    w: np.ndarray
    u: np.ndarray
    h: np.ndarray
    problem: ValidatedProblem
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._dist = self.problem.model.sign * (self.zgrid - self.problem.model.barrier)
        self._pchip = None

    def barrier_value(self, tau):
        """w(tau) by linear interpolation in time."""
        return np.interp(tau, self.tgrid, self.w)

    def __call__(self, t, z):
        """u(t, z): monotone cubic in z, linear in t, clamped to [0, C_rho + T C_phi]."""
        if self._pchip is None:
            self._pchip = PchipInterpolator(self._dist, self.u.T, axis=0, extrapolate=True)
        t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
        d = np.clip(self.problem.model.sign * (z - self.problem.model.barrier), 0.0, self._dist[-1])
        tt = np.clip(t, self.tgrid[0], self.tgrid[-1])
        nt = len(self.tgrid) - 1
        pos = (tt - self.tgrid[0]) / (self.tgrid[-1] - self.tgrid[0]) * nt
        i = np.minimum(np.floor(pos).astype(int), nt - 1)
        a = pos - i
        flat_d, flat_i, flat_a = d.ravel(), i.ravel(), a.ravel()
        out = np.empty(flat_d.shape)
        # evaluate all time columns at the requested distances, in blocks
        for b0 in range(0, flat_d.size, 512):
            cols = self._pchip(flat_d[b0:b0 + 512])              # (k, nt+1)
            k = np.arange(cols.shape[0])
            ii = flat_i[b0:b0 + 512]
            aa = flat_a[b0:b0 + 512]
            out[b0:b0 + 512] = (1 - aa) * cols[k, ii] + aa * cols[k, ii + 1]
        return np.clip(out, 0.0, self.problem.bound).reshape(d.shape)

    def export(self, out_dir: str | Path, extra_meta: dict | None = None) -> list[str]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(self.meta)
        if extra_meta:
            meta.update(extra_meta)
        (out / "value_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float))
        with open(out / "value_field.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "z", "u", "h"])
            for i, t in enumerate(self.tgrid):
                for j, z in enumerate(self.zgrid):
                    wr.writerow([repr(float(t)), repr(float(z)), repr(float(self.u[i, j])),
                                 repr(float(self.h[i, j]))])
        return [str(out / "value_meta.json"), str(out / "value_field.csv")]


def _power(x, e):
    return np.power(np.maximum(x, 0.0), e)


def solve_barrier(problem: ValidatedProblem, grid: GridSpec, *, rho=None, phi=None):
    """Barrier trace w on the uniform time grid by product-integration marching.

    The nonlinearity w^(1+beta) is interpolated linearly in each cell and
    integrated exactly (to quadrature precision) against the singular flux.
    Returns ``(tgrid, w, meta)``.
    """
    grid.check()
    T = problem.horizon
    nt = grid.nt
    step = T / nt
    tgrid = make_tgrid(T, nt)
    red = reduce_model(problem.model)
    pen = _penalties(problem, red, rho, phi)
    H = _source_on_grid(pen, red.mu, tgrid, np.zeros(1))[:, 0]
    A, B = kernel_moments(red, step, nt, 0.0)
    A, B = A[:, 0], B[:, 0]
    D = A - B
    e = problem.exponent
    inv_beta = 1.0 / problem.beta

    w = np.zeros(nt + 1)
    F = np.zeros(nt + 1)
    w[0] = H[0]
    F[0] = _power(w[0], e)
    iters_max = 0
    d0 = inv_beta * D[0]
    for i in range(1, nt + 1):
        known = B[0] * F[i - 1]
        if i > 1:
            known += np.dot(F[i - 1:0:-1], D[1:i]) + np.dot(F[i - 2::-1], B[1:i])
        rhs = H[i] - inv_beta * known
        x = max(w[i - 1], 0.0)
        for it in range(1, 201):
            g = rhs - d0 * _power(x, e)
            # damping from the local slope keeps the iteration contractive
            theta = 1.0 / (1.0 + d0 * e * max(x, 0.0) ** (e - 1.0))
            x_new = x + theta * (g - x)
            if abs(x_new - x) <= FIXED_POINT_TOL:
                x = x_new
                break
            x = x_new
        else:
            raise SolverError(f"fixed point did not converge at t={tgrid[i]:.6g}")
        iters_max = max(iters_max, it)
        if x < -NEGATIVE_TOL:
            raise SolverError(f"negative barrier value {x:.3e} at t={tgrid[i]:.6g}; "
                              "kernel or penalty configuration is inconsistent")
        w[i] = x
        F[i] = _power(x, e)

    K = problem.bound
    if np.any(w > K + 1e-9):
        raise SolverError("barrier trace exceeds the a-priori bound C_rho + T*C_phi")
    meta = {"nt": nt, "step": step, "fixed_point_tol": FIXED_POINT_TOL,
            "max_fixed_point_iterations": iters_max, "bound": K,
            "w_min": float(w.min()), "w_max": float(w.max())}
    return tgrid, w, meta


def extend_field(problem: ValidatedProblem, w: np.ndarray, grid: GridSpec, *, rho=None, phi=None,
                 meta: dict | None = None, check_quadrature: bool = True) -> ValueGrid:
    """Full field u on tgrid x zgrid from the barrier trace."""
    T = problem.horizon
    nt = len(w) - 1
    step = T / nt
    tgrid = make_tgrid(T, nt)
    zgrid = make_zgrid(problem, grid)
    red = reduce_model(problem.model)
    y = np.maximum(red.to_std(zgrid), 0.0)
    y[0] = 0.0
    pen = _penalties(problem, red, rho, phi)
    h = _source_on_grid(pen, red.mu, tgrid, y)
    quad_err = _check_quadrature(pen, red.mu, tgrid, y, h) if check_quadrature else None
    A, B = kernel_moments(red, step, nt, y)
    D = A - B
    F = _power(w, problem.exponent)
    u = np.empty_like(h)
    u[0] = h[0]
    for j in range(len(y)):
        conv = np.convolve(F[1:], D[:, j])[:nt] + np.convolve(F, B[:, j])[:nt]
        u[1:, j] = h[1:, j] - conv / problem.beta
    drift = float(np.max(np.abs(u[:, 0] - w)))
    if drift > 1e-8 * max(1.0, problem.bound):
        raise SolverError(f"field does not reproduce the barrier trace (max diff {drift:.2e})")
    u[:, 0] = w
    if np.any(u < -NEGATIVE_TOL):
        raise SolverError(f"value field negative ({u.min():.3e}); refine the grid")
    if np.any(u > problem.bound + 1e-9):
        raise SolverError("value field exceeds the a-priori bound C_rho + T*C_phi")
    info = dict(meta or {})
    info.update({"nz": len(zgrid), "z_far": grid.z_far, "stretch": grid.stretch,
                 "barrier_consistency": drift, "quadrature_check": quad_err,
                 "u_min": float(u.min()), "u_max": float(u.max())})
    return ValueGrid(tgrid, zgrid, w, u, h, problem, info)


def solve(problem: ValidatedProblem, grid: GridSpec = GridSpec(), **kw) -> ValueGrid:
    tgrid, w, meta = solve_barrier(problem, grid, **kw)
    return extend_field(problem, w, grid, meta=meta, **kw)


# --------------------------------------------------------------------------
# Diagnostics
# --------------------------------------------------------------------------

def convergence_study(problem: ValidatedProblem, grid: GridSpec, levels: int = 3,
                      probe_times=None) -> dict:
    """Barrier trace under successive time-step halving, with Richardson extrapolation."""
    T = problem.horizon
    probe_times = np.asarray(probe_times if probe_times is not None else [T / 4, T / 2, T])
    runs = []
    for k in range(levels):
        g = GridSpec(grid.nt * 2**k, grid.nz, grid.z_far, grid.stretch)
        tgrid, w, _ = solve_barrier(problem, g)
        runs.append(np.interp(probe_times, tgrid, w))
    runs = np.array(runs)
    diffs = np.abs(np.diff(runs, axis=0))
    out = {"nt": [grid.nt * 2**k for k in range(levels)], "probe_times": probe_times.tolist(),
           "w": runs.tolist(), "diffs": diffs.tolist()}
    if levels >= 3:
        with np.errstate(divide="ignore", invalid="ignore"):
            order = np.log2(diffs[-2] / diffs[-1])
        out["order"] = order.tolist()
        p = np.where(np.isfinite(order) & (order > 0), order, 1.0)
        out["richardson"] = (runs[-1] + (runs[-1] - runs[-2]) / (2.0**p - 1.0)).tolist()
    return out


def residual_mc(problem: ValidatedProblem, vg: ValueGrid, npaths: int, rng: RngSpec,
                probes=None, steps: int = 400, threads: int | None = None) -> list[dict]:
    """Monte Carlo check of the integral equation at probe points.

    For each probe (t, z) the per-path quantity
    rho(S_t) + int phi(S) ds - (1/beta) int w(t-s)^(1+beta) dL_s
    has mean u(t, z); the report gives |u - mean| / stderr.
    """
    m = problem.model
    T = problem.horizon
    if probes is None:
        far = m.barrier + m.sign * 0.5 * abs(vg.zgrid[-1] - m.barrier)
        probes = [(T, m.barrier), (0.5 * T, m.barrier), (T, far)]
    cost = problem.cost
    report = []
    for k, (t, z) in enumerate(probes):
        q = []
        sub = RngSpec(rng.seed, rng.stream_id + k * (npaths + 1))
        model_z = m.with_start(z)
        for batch in iter_batches(model_z, t, steps, sub, npaths, threads=threads):
            tm = 0.5 * (batch.times[1:] + batch.times[:-1])
            Fw = _power(vg.barrier_value(t - tm), problem.exponent)
            dL = np.diff(batch.loctime, axis=1)
            val = cost.rho(batch.prices[:, -1]) - (dL @ Fw) / problem.beta
            if not cost.phi.is_zero:
                ph = cost.phi(batch.prices)
                val = val + np.sum(0.5 * (ph[:, 1:] + ph[:, :-1]) * np.diff(batch.times), axis=1)
            q.append(val)
        q = np.concatenate(q)
        mean = float(q.mean())
        se = float(q.std(ddof=1) / math.sqrt(len(q)))
        u_val = float(vg(t, z))
        diff = abs(u_val - mean)
        zscore = diff / se if se > 0 else (0.0 if diff <= 1e-12 else math.inf)
        report.append({"t": float(t), "z": float(z), "u": u_val, "estimate": mean, "stderr": se,
                       "z_score": zscore, "pass": bool(zscore < 3.0)})
    return report


def terminal_limit_diagnostic(problem: ValidatedProblem, vg: ValueGrid, npaths: int, rng: RngSpec,
                              ks=range(2, 7), steps: int = 256) -> dict:
    """Median over paths of |u(T - t_k, S_{t_k}) - rho(S_T)| at t_k = T(1 - 2^-k)."""
    ks = list(ks)
    T = problem.horizon
    if steps % 2 ** max(ks):
        raise ValidationError("steps", f"must be a multiple of 2^{max(ks)}")
    idx = [steps - steps // 2**k for k in ks]
    medians = np.zeros(len(ks))
    vals = [[] for _ in ks]
    for batch in iter_batches(problem.model, T, steps, rng, npaths):
        target = problem.cost.rho(batch.prices[:, -1])
        for n, i in enumerate(idx):
            vals[n].append(np.abs(vg(T - batch.times[i], batch.prices[:, i]) - target))
    for n in range(len(ks)):
        medians[n] = float(np.median(np.concatenate(vals[n])))
    return {"k": ks, "t": [T * (1 - 2.0**-k) for k in ks], "median_abs_gap": medians.tolist(),
            "monotone": bool(np.all(np.diff(medians) < 0))}


def continuity_report(vg: ValueGrid, spike_factor: float = 3.0) -> dict:
    """Discrete moduli of continuity and a spike check (first time row excluded)."""
    u = vg.u
    dt = np.abs(np.diff(u[1:], axis=0))
    dz = np.abs(np.diff(u[1:], axis=1))
    spikes = 0
    for arr in (dt, dz):
        if arr.shape[0] < 3 or arr.shape[1] < 3:
            continue
        pad = np.pad(arr, 1, mode="edge")
        neigh = np.stack([pad[1 + a:pad.shape[0] - 1 + a, 1 + b:pad.shape[1] - 1 + b]
                          for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)])
        med = np.median(neigh, axis=0)
        floor = 1e-9 * max(1.0, vg.problem.bound)
        spikes += int(np.sum(arr > spike_factor * med + floor))
    return {"modulus_t": float(dt.max()) if dt.size else 0.0,
            "modulus_z": float(dz.max()) if dz.size else 0.0, "spikes": spikes}
