import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from conftest import problem
from zoneliq.model import CostSpec, GridSpec, ModelSpec, RngSpec, ValidationError
from zoneliq.paths import simulate, simulate_batch
from zoneliq.strategy import (
    Policy, evaluate_batch, excess_cost_certificate, execute, mc_cost, paired_excess, phi_p,
    realized_cost, run_policies, verification_entry,
)
from zoneliq.value import solve


def test_phi_examples():
    assert phi_p(3.0, 1.0, 2.0) == pytest.approx(4.0, rel=1e-14)
    assert phi_p(1.0, 2.0, 3.0) == pytest.approx(5.0, rel=1e-14)
    assert phi_p(2.0, 2.0, 2.5) == 0.0
    assert phi_p(0.0, 2.0, 3.0) == pytest.approx(16.0)
    assert phi_p(2.0, 0.0, 3.0) == 8.0


@given(x=st.floats(0, 10), y=st.floats(0, 10), p=st.floats(2, 5))
def test_phi_nonnegative(x, y, p):
    assert phi_p(x, y, p) >= -1e-12
    assert phi_p(x, x, p) == 0.0


@pytest.fixture(scope="module")
def path():
    return simulate(ModelSpec(), 1.0, 400, RngSpec(17, 3))


def test_missing_value_grid_rejected(path):
    with pytest.raises(ValidationError):
        execute(Policy.optimal(), path, CostSpec())
    with pytest.raises(ValidationError):
        mc_cost(Policy.scaled(0.5), ModelSpec(), CostSpec(), 10, 10, RngSpec())


def test_zero_value_means_no_trading(path):
    prob = problem(rho=0.0, phi=0.0)
    vg = solve(prob, GridSpec(nt=50, nz=11))
    rec = execute(Policy.optimal(), path, prob.cost, vg)
    assert np.all(rec.inventory == 1.0)
    assert rec.cost_total == 0.0


def test_no_local_time_keeps_position(bench_value):
    far = simulate(ModelSpec(z0=40.0), 1.0, 100, RngSpec(1, 0))
    for pol in (Policy.optimal(), Policy.constant_rate(3.0)):
        rec = execute(pol, far, CostSpec(), bench_value)
        assert rec.inventory[-1] == 1.0
        assert rec.cost_total == 1.0


def test_inventory_matches_ode_in_local_time_clock(path, bench_value):
    # dX/dl = -a_k X on each step, integrated numerically
    rec = execute(Policy.optimal(), path, CostSpec(), bench_value)
    mid = 0.5 * (path.times[1:] + path.times[:-1])
    a = bench_value.barrier_value(1.0 - mid)
    x = 1.0
    for ak, dl in zip(a, np.diff(path.loctime)):
        if dl > 0:
            x = solve_ivp(lambda _, y: -ak * y, (0.0, dl), [x], rtol=1e-12, atol=1e-14).y[0, -1]
    assert rec.inventory[-1] == pytest.approx(x, abs=1e-8)
    assert rec.inventory[-1] == pytest.approx(math.exp(-np.sum(a * np.diff(path.loctime))), abs=1e-12)


@pytest.mark.parametrize("x0", [2.0, -1.5])
def test_inventory_monotone_toward_zero(x0, bench_value):
    batch = simulate_batch(ModelSpec(), 1.0, 200, RngSpec(2, 0), 50)
    prob = problem(x0=x0)
    for pol in (Policy.optimal(), Policy.constant_rate(0.7), Policy.scaled(1.5)):
        X = evaluate_batch(pol, batch, prob, bench_value).inventory
        assert np.all(np.sign(X) * np.sign(x0) >= 0)
        assert np.all(np.diff(np.abs(X), axis=1) <= 1e-15)


@given(lam=st.floats(-3.0, 3.0).filter(lambda v: abs(v) > 1e-3), p=st.sampled_from([2.0, 3.0]))
@settings(max_examples=10, deadline=None)
def test_costs_homogeneous_in_inventory(lam, p):
    prob1 = problem(p=p, phi=0.2, x0=1.0)
    prob2 = problem(p=p, phi=0.2, x0=lam)
    vg = solve(prob1, GridSpec(nt=50, nz=11))
    batch = simulate_batch(prob1.model, 1.0, 50, RngSpec(3, 0), 20)
    pairs = [(Policy.optimal(), Policy.optimal()),
             (Policy.table([0.0, 1.0], [-0.5, -1.0]), Policy.table([0.0, 1.0], [-0.5 * lam, -lam]))]
    for pol1, pol2 in pairs:
        c1 = evaluate_batch(pol1, batch, prob1, vg).total
        c2 = evaluate_batch(pol2, batch, prob2, vg).total
        np.testing.assert_allclose(c2, abs(lam) ** p * c1, rtol=1e-10)


def test_table_policy_is_linear_in_local_time(path):
    rec = execute(Policy.table([0.0, 1.0], [-0.3, -0.3]), path, CostSpec())
    np.testing.assert_allclose(rec.inventory, 1.0 - 0.3 * path.loctime, atol=1e-14)
    assert rec.cost_impact == pytest.approx(0.09 * path.loctime[-1], rel=1e-12)


def test_constant_rate_stops_at_zero(path):
    rec = execute(Policy.constant_rate(50.0), path, CostSpec())
    assert rec.inventory[-1] == 0.0
    assert np.all(rec.inventory >= 0.0)
    assert rec.cost_impact == pytest.approx(50.0, rel=1e-12)  # |xi|^2 * (x0 / |xi|)


def test_realized_cost_trivial_cases(path):
    cost = CostSpec(phi=problem(phi=0.5).cost.phi)
    rec = execute(Policy.table([0.0], [0.0]), path, cost)
    dec = realized_cost(rec, path, cost)
    assert dec.impact == 0.0
    assert dec.running == pytest.approx(0.5)
    assert dec.terminal == 1.0


def test_realized_cost_agrees_with_engine(bench_value):
    fine = simulate(ModelSpec(), 1.0, 20_000, RngSpec(5, 0))
    rec = execute(Policy.optimal(), fine, CostSpec(), bench_value)
    assert realized_cost(rec, fine, CostSpec()).total == pytest.approx(rec.cost_total, abs=2e-3)


def test_certificate_vanishes_for_optimal(path, bench_value):
    rec = execute(Policy.optimal(), path, CostSpec(), bench_value)
    assert abs(rec.certificate) < 1e-12


@settings(max_examples=10, deadline=None)
@given(rate=st.floats(0.0, 5.0), factor=st.floats(0.0, 3.0))
def test_certificate_nonnegative(rate, factor, path, bench_value):
    for pol in (Policy.constant_rate(rate), Policy.scaled(factor)):
        rec = execute(pol, path, CostSpec(), bench_value)
        assert rec.certificate >= -1e-12


def test_certificate_recomputed_from_inventory(path, bench_value):
    rec = execute(Policy.table([0.0, 1.0], [-0.2, -0.8]), path, CostSpec(), bench_value)
    rec.certificate = float("nan")
    again = excess_cost_certificate(rec, bench_value, CostSpec())
    stored = execute(Policy.table([0.0, 1.0], [-0.2, -0.8]), path, CostSpec(), bench_value).certificate
    assert again == pytest.approx(stored, rel=1e-6)


def test_optimal_cost_near_value(bench, bench_value):
    samples = run_policies([Policy.optimal(), Policy.scaled(0.5)], bench, 20_000, 200,
                           RngSpec(19, 0), bench_value)
    entry = verification_entry(samples[0], float(bench_value(1.0, 0.0)), 1.0, 2.0)
    assert entry["pass"], entry
    ex = paired_excess(samples[0], samples[1])
    assert ex["excess"] > 0 and ex["z_paired"] > 3


def test_csv_columns(tmp_path, path, bench_value):
    rec = execute(Policy.optimal(), path, CostSpec(), bench_value)
    rec.to_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines()[0] == "t,S,L,xi,X"
