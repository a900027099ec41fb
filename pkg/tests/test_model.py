import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zoneliq.model import (
    Config, CostSpec, FunctionSpec, GridSpec, ModelSpec, RngSpec, ValidationError,
    load_config, parse_config, validate,
)


def test_beta_from_p():
    assert validate(ModelSpec(), CostSpec(p=2.0)).beta == 1.0
    assert validate(ModelSpec(), CostSpec(p=3.0)).beta == 0.5


def test_gbm_negative_barrier_rejected():
    with pytest.raises(ValidationError, match="barrier must be positive for GBM") as exc:
        validate(ModelSpec("GBM", 0.2, 0.0, -1.0, "lower", 1.0), CostSpec())
    assert exc.value.field == "model.barrier"


@pytest.mark.parametrize("model, field", [
    (ModelSpec(sigma=0.0), "model.sigma"),
    (ModelSpec(kind="OU"), "model.kind"),
    (ModelSpec(side="middle"), "model.side"),
    (ModelSpec(barrier=1.0, z0=0.5), "model.z0"),
    (ModelSpec(side="upper", barrier=0.0, z0=0.5), "model.z0"),
    (ModelSpec("GBM", 0.2, 0.0, 1.0, "lower", -2.0), "model.z0"),
    (ModelSpec(drift=math.nan), "model.drift"),
])
def test_model_invariants_name_the_field(model, field):
    with pytest.raises(ValidationError) as exc:
        validate(model, CostSpec())
    assert exc.value.field == field


@pytest.mark.parametrize("cost, field", [
    (CostSpec(p=1.5), "cost.p"),
    (CostSpec(p=11.0), "cost.p"),
    (CostSpec(horizon=0.0), "cost.horizon"),
    (CostSpec(phi=FunctionSpec.constant(-1.0)), "cost.phi.v"),
    (CostSpec(rho=FunctionSpec.gaussian_bump(0.0, 0.0, 1.0)), "cost.rho.width"),
    (CostSpec(rho=FunctionSpec.table([0.0, 1.0], [1.0, -1.0])), "cost.rho.values"),
    (CostSpec(rho=FunctionSpec.affine_clamped(0.0, 1.0, -1.0, 1.0)), "cost.rho.lo"),
])
def test_cost_invariants_name_the_field(cost, field):
    with pytest.raises(ValidationError) as exc:
        validate(ModelSpec(), cost)
    assert exc.value.field == field


def test_function_examples():
    assert FunctionSpec.constant(0.5)(7.0) == 0.5
    assert FunctionSpec.table([0.0, 1.0], [0.0, 2.0])(0.5) == 1.0
    assert FunctionSpec.gaussian_bump(3.0, 0.4, 2.5)(3.0) == 2.5


def test_table_clamps_outside_knots():
    f = FunctionSpec.table([0.0, 1.0, 2.0], [1.0, 3.0, 2.0])
    np.testing.assert_array_equal(f(np.array([-5.0, 10.0])), [1.0, 2.0])
    assert f.bound == 3.0


def test_bounds_extracted():
    prob = validate(ModelSpec(), CostSpec(phi=FunctionSpec.gaussian_bump(0.0, 1.0, 0.3),
                                          rho=FunctionSpec.affine_clamped(1.0, -0.5, 0.2, 1.4),
                                          horizon=2.0))
    assert prob.c_phi == 0.3
    assert prob.c_rho == 1.4
    assert prob.bound == pytest.approx(1.4 + 2.0 * 0.3)


@given(p=st.floats(2.0, 10.0))
def test_exponent_is_one_plus_beta(p):
    prob = validate(ModelSpec(), CostSpec(p=p))
    assert prob.exponent == pytest.approx(1.0 + prob.beta, rel=1e-15, abs=0)
    assert 0.0 < prob.beta <= 1.0


@given(kind=st.sampled_from(["constant", "affine", "bump", "table"]),
       a=st.floats(-5, 5), b=st.floats(0, 5),
       z=st.floats(-50, 50))
def test_functions_bounded_nonnegative(kind, a, b, z):
    f = {
        "constant": FunctionSpec.constant(b),
        "affine": FunctionSpec.affine_clamped(a, a, 0.0, b),
        "bump": FunctionSpec.gaussian_bump(a, 1.0 + b, b),
        "table": FunctionSpec.table([a, a + 1.0], [b, 0.5 * b]),
    }[kind]
    f.check()
    v = float(f(z))
    assert 0.0 <= v <= f.bound


def test_revalidation_idempotent():
    prob = validate(ModelSpec("GBM", 0.3, 0.05, 1.0, "lower", 1.2), CostSpec(p=3.0))
    assert validate(prob.model, prob.cost) == prob


def test_config_roundtrip(configs_dir):
    cfg = load_config(configs_dir / "benchmark_gbm.json")
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_changes_with_content():
    a = Config(ModelSpec(), CostSpec())
    b = Config(ModelSpec(), CostSpec(x0=2.0))
    assert a.digest() != b.digest()


@pytest.mark.parametrize("raw", [
    {"model": {}, "cost": {}, "extra": 1},
    {"model": {"volatility": 1.0}, "cost": {}},
    {"model": {}, "cost": {"rho": {"variant": "constant", "v": 1.0, "w": 2}}},
    {"model": {}, "cost": {}, "grid": {"nt": 1}},
    {"model": {}},
])
def test_bad_configs_rejected(raw):
    with pytest.raises(ValidationError):
        parse_config(raw)


def test_config_beta_must_match_p():
    parse_config({"model": {}, "cost": {"p": 3.0, "beta": 0.5}})
    with pytest.raises(ValidationError, match="cost.beta"):
        parse_config({"model": {}, "cost": {"p": 3.0, "beta": 1.0}})


def test_grid_invariants():
    for g in (GridSpec(nt=1), GridSpec(nz=1), GridSpec(z_far=0.0), GridSpec(stretch="log")):
        with pytest.raises(ValidationError):
            g.check()


def test_rng_streams_reproducible_and_distinct():
    a = RngSpec(42, 3).generator().random(5)
    b = RngSpec(42, 3).generator().random(5)
    c = RngSpec(42, 4).generator().random(5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngSpec(42, 3).substream(2) == RngSpec(42, 5)


def test_log_transform():
    m = ModelSpec("GBM", 0.3, 0.05, 1.2, "lower", 1.5).log_transformed()
    assert m.kind == "ABM"
    assert m.drift == pytest.approx(0.05 - 0.045)
    assert m.barrier == pytest.approx(math.log(1.2))
    assert m.z0 == pytest.approx(math.log(1.5))
