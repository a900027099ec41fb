"""Problem definition: reflected price model, cost data, grids and RNG streams.

Everything here is immutable once validated. Config files are JSON with the
top-level keys ``model``, ``cost``, ``grid`` and ``rng``; unknown keys are
rejected at every level.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

P_MAX = 10.0


class ValidationError(ValueError):
    """Raised when a spec violates one of its invariants."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _finite(name: str, value: Any) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ValidationError(name, f"expected a number, got {value!r}") from None
    if not math.isfinite(x):
        raise ValidationError(name, "must be finite")
    return x


# --------------------------------------------------------------------------
# Penalty functions
# --------------------------------------------------------------------------

_VARIANT_FIELDS = {
    "constant": ("v",),
    "affine-clamped": ("a", "b", "lo", "hi"),
    "gaussian-bump": ("center", "width", "height"),
    "table": ("knots", "values", "interpolation", "extrapolation"),
}


@dataclass(frozen=True)
class FunctionSpec:
    """Bounded nonnegative scalar function of price.

    Variants:
      * ``constant``: ``v``
      * ``affine-clamped``: ``clip(a + b*z, lo, hi)``
      * ``gaussian-bump``: ``height * exp(-(z - center)**2 / (2 width**2))``
      * ``table``: piecewise-linear through ``(knots, values)``, flat outside
    """

    variant: str
    v: float = 0.0
    a: float = 0.0
    b: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    center: float = 0.0
    width: float = 1.0
    height: float = 0.0
    knots: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    interpolation: str = "linear"
    extrapolation: str = "clamp"

    @classmethod
    def constant(cls, v: float) -> FunctionSpec:
        return cls("constant", v=float(v))

    @classmethod
    def affine_clamped(cls, a: float, b: float, lo: float, hi: float) -> FunctionSpec:
        return cls("affine-clamped", a=float(a), b=float(b), lo=float(lo), hi=float(hi))

    @classmethod
    def gaussian_bump(cls, center: float, width: float, height: float) -> FunctionSpec:
        return cls("gaussian-bump", center=float(center), width=float(width), height=float(height))

    @classmethod
    def table(cls, knots, values) -> FunctionSpec:
        return cls("table", knots=tuple(float(k) for k in knots),
                   values=tuple(float(v) for v in values))

    def check(self, name: str = "function") -> None:
        if self.variant not in _VARIANT_FIELDS:
            raise ValidationError(f"{name}.variant", f"unknown variant {self.variant!r}")
        if self.variant == "constant":
            if _finite(f"{name}.v", self.v) < 0:
                raise ValidationError(f"{name}.v", "must be nonnegative")
        elif self.variant == "affine-clamped":
            for k in ("a", "b", "lo", "hi"):
                _finite(f"{name}.{k}", getattr(self, k))
            if self.lo < 0:
                raise ValidationError(f"{name}.lo", "must be nonnegative")
            if self.hi < self.lo:
                raise ValidationError(f"{name}.hi", "must be >= lo")
        elif self.variant == "gaussian-bump":
            for k in ("center", "width", "height"):
                _finite(f"{name}.{k}", getattr(self, k))
            if self.width <= 0:
                raise ValidationError(f"{name}.width", "must be positive")
            if self.height < 0:
                raise ValidationError(f"{name}.height", "must be nonnegative")
        else:
            if len(self.knots) < 1 or len(self.knots) != len(self.values):
                raise ValidationError(f"{name}.knots", "knots and values must be nonempty and equal length")
            kn = np.array([_finite(f"{name}.knots", k) for k in self.knots])
            vals = np.array([_finite(f"{name}.values", v) for v in self.values])
            if np.any(np.diff(kn) < 0):
                raise ValidationError(f"{name}.knots", "must be nondecreasing")
            if np.any(vals < 0):
                raise ValidationError(f"{name}.values", "must be nonnegative")
            if self.interpolation != "linear":
                raise ValidationError(f"{name}.interpolation", "only 'linear' is supported")
            if self.extrapolation != "clamp":
                raise ValidationError(f"{name}.extrapolation", "only 'clamp' is supported")

    @property
    def bound(self) -> float:
        """Declared upper bound (sup of the function)."""
        if self.variant == "constant":
            return self.v
        if self.variant == "affine-clamped":
            if self.b == 0.0:
                return float(np.clip(self.a, self.lo, self.hi))
            return self.hi
        if self.variant == "gaussian-bump":
            return self.height
        return max(self.values)

    @property
    def is_constant(self) -> bool:
        if self.variant == "constant":
            return True
        if self.variant == "affine-clamped":
            return self.b == 0.0 or self.lo == self.hi
        if self.variant == "gaussian-bump":
            return self.height == 0.0
        return len(set(self.values)) == 1

    @property
    def is_zero(self) -> bool:
        return self.is_constant and self.bound == 0.0

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.variant == "constant":
            return np.full(z.shape, self.v)
        if self.variant == "affine-clamped":
            return np.clip(self.a + self.b * z, self.lo, self.hi)
        if self.variant == "gaussian-bump":
            return self.height * np.exp(-0.5 * ((z - self.center) / self.width) ** 2)
        return np.interp(z, self.knots, self.values)

    def to_dict(self) -> dict:
        out = {"variant": self.variant}
        for k in _VARIANT_FIELDS[self.variant]:
            val = getattr(self, k)
            out[k] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], name: str = "function") -> FunctionSpec:
        if not isinstance(d, Mapping) or "variant" not in d:
            raise ValidationError(name, "expected an object with a 'variant' key")
        variant = d["variant"]
        if variant not in _VARIANT_FIELDS:
            raise ValidationError(f"{name}.variant", f"unknown variant {variant!r}")
        allowed = set(_VARIANT_FIELDS[variant]) | {"variant"}
        extra = set(d) - allowed
        if extra:
            raise ValidationError(name, f"unknown keys {sorted(extra)}")
        kw = dict(d)
        for k in ("knots", "values"):
            if k in kw:
                kw[k] = tuple(float(x) for x in kw[k])
        spec = cls(**kw)
        spec.check(name)
        return spec


# --------------------------------------------------------------------------
# Model, cost, grid, RNG
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    kind: str = "ABM"
    sigma: float = 1.0
    drift: float = 0.0
    barrier: float = 0.0
    side: str = "lower"
    z0: float = 0.0

    def check(self) -> None:
        if self.kind not in ("ABM", "GBM"):
            raise ValidationError("model.kind", "must be 'ABM' or 'GBM'")
        if self.side not in ("lower", "upper"):
            raise ValidationError("model.side", "must be 'lower' or 'upper'")
        if _finite("model.sigma", self.sigma) <= 0:
            raise ValidationError("model.sigma", "must be positive")
        _finite("model.drift", self.drift)
        _finite("model.barrier", self.barrier)
        _finite("model.z0", self.z0)
        if self.kind == "GBM":
            if self.barrier <= 0:
                raise ValidationError("model.barrier", "barrier must be positive for GBM")
            if self.z0 <= 0:
                raise ValidationError("model.z0", "start price must be positive for GBM")
        if self.side == "lower" and self.z0 < self.barrier:
            raise ValidationError("model.z0", "must be >= barrier for a lower barrier")
        if self.side == "upper" and self.z0 > self.barrier:
            raise ValidationError("model.z0", "must be <= barrier for an upper barrier")

    @property
    def sign(self) -> float:
        """+1 when the admissible side is above the barrier."""
        return 1.0 if self.side == "lower" else -1.0

    def with_start(self, z0: float) -> ModelSpec:
        return ModelSpec(self.kind, self.sigma, self.drift, self.barrier, self.side, float(z0))

    def log_transformed(self) -> ModelSpec:
        """Reflected ABM whose exponential is this reflected GBM."""
        if self.kind != "GBM":
            raise ValidationError("model.kind", "log transform only applies to GBM")
        return ModelSpec("ABM", self.sigma, self.drift - 0.5 * self.sigma**2,
                         math.log(self.barrier), self.side, math.log(self.z0))


@dataclass(frozen=True)
class CostSpec:
    p: float = 2.0
    phi: FunctionSpec = field(default_factory=lambda: FunctionSpec.constant(0.0))
    rho: FunctionSpec = field(default_factory=lambda: FunctionSpec.constant(1.0))
    horizon: float = 1.0
    x0: float = 1.0

    @property
    def beta(self) -> float:
        return 1.0 / (self.p - 1.0)

    def check(self) -> None:
        p = _finite("cost.p", self.p)
        if not 2.0 <= p <= P_MAX:
            raise ValidationError("cost.p", f"must lie in [2, {P_MAX:g}]")
        if _finite("cost.horizon", self.horizon) <= 0:
            raise ValidationError("cost.horizon", "must be positive")
        _finite("cost.x0", self.x0)
        self.phi.check("cost.phi")
        self.rho.check("cost.rho")


@dataclass(frozen=True)
class GridSpec:
    nt: int = 400
    nz: int = 81
    z_far: float = 4.0
    stretch: str = "sqrt-clustered-at-barrier"

    def check(self) -> None:
        if int(self.nt) != self.nt or self.nt < 2:
            raise ValidationError("grid.nt", "must be an integer >= 2")
        if int(self.nz) != self.nz or self.nz < 2:
            raise ValidationError("grid.nz", "must be an integer >= 2")
        if _finite("grid.z_far", self.z_far) <= 0:
            raise ValidationError("grid.z_far", "must be positive")
        if self.stretch not in ("uniform", "sqrt-clustered-at-barrier"):
            raise ValidationError("grid.stretch", "must be 'uniform' or 'sqrt-clustered-at-barrier'")


@dataclass(frozen=True)
class RngSpec:
    seed: int = 0
    stream_id: int = 0

    def check(self) -> None:
        if int(self.seed) != self.seed:
            raise ValidationError("rng.seed", "must be an integer")
        if int(self.stream_id) != self.stream_id or self.stream_id < 0:
            raise ValidationError("rng.stream_id", "must be a nonnegative integer")

    def substream(self, offset: int) -> RngSpec:
        return RngSpec(self.seed, self.stream_id + int(offset))

    def generator(self) -> np.random.Generator:
        """Independent generator for this (seed, stream_id) pair."""
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF,
                                    spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ValidatedProblem:
    model: ModelSpec
    cost: CostSpec
    beta: float
    exponent: float  # 1 + beta, computed as p / (p - 1)
    c_phi: float
    c_rho: float

    @property
    def horizon(self) -> float:
        return self.cost.horizon

    @property
    def bound(self) -> float:
        """Upper bound C_rho + T * C_phi on the value function."""
        return self.c_rho + self.cost.horizon * self.c_phi


def validate(model: ModelSpec, cost: CostSpec) -> ValidatedProblem:
    model.check()
    cost.check()
    p = float(cost.p)
    return ValidatedProblem(
        model=model,
        cost=cost,
        beta=1.0 / (p - 1.0),
        exponent=p / (p - 1.0),
        c_phi=float(cost.phi.bound),
        c_rho=float(cost.rho.bound),
    )


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Config:
    model: ModelSpec
    cost: CostSpec
    grid: GridSpec = GridSpec()
    rng: RngSpec = RngSpec()

    @property
    def problem(self) -> ValidatedProblem:
        return validate(self.model, self.cost)

    def to_dict(self) -> dict:
        cost = {"p": self.cost.p, "phi": self.cost.phi.to_dict(), "rho": self.cost.rho.to_dict(),
                "horizon": self.cost.horizon, "x0": self.cost.x0}
        return {"model": asdict(self.model), "cost": cost,
                "grid": asdict(self.grid), "rng": asdict(self.rng)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _take(section: str, raw: Any, cls) -> dict:
    if not isinstance(raw, Mapping):
        raise ValidationError(section, "expected an object")
    names = {f.name for f in fields(cls)}
    extra = set(raw) - names
    if extra:
        raise ValidationError(section, f"unknown keys {sorted(extra)}")
    return dict(raw)


def parse_config(raw: Mapping[str, Any]) -> Config:
    if not isinstance(raw, Mapping):
        raise ValidationError("config", "expected a JSON object")
    extra = set(raw) - {"model", "cost", "grid", "rng"}
    if extra:
        raise ValidationError("config", f"unknown keys {sorted(extra)}")
    for key in ("model", "cost"):
        if key not in raw:
            raise ValidationError("config", f"missing '{key}' section")

    model = ModelSpec(**_take("model", raw["model"], ModelSpec))

    cost_raw = dict(raw["cost"]) if isinstance(raw["cost"], Mapping) else raw["cost"]
    if isinstance(cost_raw, dict) and "beta" in cost_raw:
        # beta is derived; accept it only if consistent
        beta = cost_raw.pop("beta")
        p = float(cost_raw.get("p", 2.0))
        if not math.isclose(float(beta), 1.0 / (p - 1.0), rel_tol=1e-12):
            raise ValidationError("cost.beta", "must equal 1/(p-1)")
    cost_kw = _take("cost", cost_raw, CostSpec)
    for k in ("phi", "rho"):
        if k in cost_kw:
            cost_kw[k] = FunctionSpec.from_dict(cost_kw[k], f"cost.{k}")
    cost = CostSpec(**cost_kw)

    grid = GridSpec(**_take("grid", raw.get("grid", {}), GridSpec))
    rng = RngSpec(**_take("rng", raw.get("rng", {}), RngSpec))

    validate(model, cost)
    grid.check()
    rng.check()
    return Config(model, cost, grid, rng)


def load_config(path: str | Path) -> Config:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError("config", f"invalid JSON: {exc}") from None
    return parse_config(raw)
