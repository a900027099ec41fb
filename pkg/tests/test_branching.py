import math

import numpy as np
import pytest

from conftest import problem
from zoneliq.branching import (
    exact_scheme_applies, finite_scale_prediction, laplace_estimate, simulate_block,
    simulate_population, validator_report,
)
from zoneliq.model import CostSpec, FunctionSpec, GridSpec, ModelSpec, RngSpec, ValidationError


def test_no_penalty_gives_one():
    prob = problem(rho=0.0, phi=0.0)
    est = laplace_estimate(prob.model, prob.cost, 10, 300, RngSpec(1, 0))
    assert est["estimate"] == 1.0
    assert est["neg_log"] == 0.0


def test_far_start_does_not_branch():
    prob = problem(rho=0.8, phi=0.3, z0=30.0)
    est = laplace_estimate(prob.model, prob.cost, 10, 200, RngSpec(2, 0))
    assert est["estimate"] == pytest.approx(math.exp(-0.8 - 0.3), rel=1e-12)
    assert est["mass_mean"] == [1.0, 1.0, 1.0]


def test_branching_happens_only_at_barrier():
    prob = problem(z0=0.5)
    res = simulate_block(prob, 20, 50, RngSpec(3, 0), keep_positions=True)
    assert res.branch_positions.size > 0
    assert np.all(res.branch_positions == 0.0)
    assert all(np.all(p >= 0.0) for p in res.positions)


def test_population_record():
    pop = simulate_population(ModelSpec(), CostSpec(), 10, RngSpec(4, 0))
    assert pop.mass == len(pop.positions) / 10
    assert not pop.censored


def test_total_mass_is_critical():
    prob = problem()
    est = laplace_estimate(prob.model, prob.cost, 10, 4000, RngSpec(5, 0))
    for m, se in zip(est["mass_mean"], est["mass_stderr"]):
        assert abs(m - 1.0) < 3 * se


def test_requires_quadratic_impact():
    prob = problem(p=3.0)
    with pytest.raises(ValidationError, match="p = 2"):
        laplace_estimate(prob.model, prob.cost, 10, 10, RngSpec())


def test_deterministic_per_seed():
    prob = problem()
    a = laplace_estimate(prob.model, prob.cost, 8, 600, RngSpec(6, 0))
    b = laplace_estimate(prob.model, prob.cost, 8, 600, RngSpec(6, 0))
    c = laplace_estimate(prob.model, prob.cost, 8, 600, RngSpec(7, 0))
    assert a == b
    assert a["estimate"] != c["estimate"]


def test_scheme_selection():
    assert exact_scheme_applies(ModelSpec(), CostSpec(phi=FunctionSpec.constant(0.4)))
    assert not exact_scheme_applies(ModelSpec(drift=0.1), CostSpec())
    assert not exact_scheme_applies(ModelSpec(), CostSpec(phi=FunctionSpec.gaussian_bump(0, 1, 1)))


def test_matches_finite_scale_prediction():
    prob = problem()
    est = laplace_estimate(prob.model, prob.cost, 10, 4000, RngSpec(8, 0))
    pred = finite_scale_prediction(prob, 10, GridSpec(nt=200, nz=11))
    assert abs(est["neg_log"] - pred) < 3 * est["neg_log_stderr"]


def test_stepped_scheme_with_drift_matches_prediction():
    prob = problem(drift=0.3, rho=0.7)
    est = laplace_estimate(prob.model, prob.cost, 5, 2000, RngSpec(9, 0), dt=1e-3)
    pred = finite_scale_prediction(prob, 5, GridSpec(nt=200, nz=11))
    assert not est["exact_scheme"]
    # stepping misses some barrier contacts, so allow an O(sqrt(dt)) bias
    assert abs(est["neg_log"] - pred) < 3 * est["neg_log_stderr"] + 0.02


def test_prediction_tends_to_value(bench_value):
    u = float(bench_value(1.0, 0.0))
    gaps = [abs(finite_scale_prediction(problem(), n, GridSpec(nt=200, nz=11)) - u) for n in (5, 20, 80)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_validator_report_fields():
    rep = validator_report({"n_scale": 5, "npaths": 10, "estimate": 0.5, "stderr": 0.01,
                            "neg_log": math.log(2), "neg_log_stderr": 0.02, "censored_paths": 0}, 0.7)
    assert rep["z_score"] == pytest.approx(abs(math.log(2) - 0.7) / 0.02)
