import json
import math
from dataclasses import replace

import numpy as np
import pydantic
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import models
from oracles import simple_cycles
from optswitch.model import (CostSpec, ModelValidationError, Payoff, SwitchingModel, bench_path,
                             cycle_costs, evaluate_cost, evaluate_payoff, load_model, model_from_dict,
                             model_to_dict, require_valid, validate_model)


def two_mode(base, rate=0.0, gamma=0.5, model=None):
    m = model or load_model(bench_path())
    return replace(m, costs=CostSpec(np.asarray(base, float), rate, gamma))


def test_unit_costs_above_floor_are_valid():
    assert validate_model(two_mode([[0, 1], [1, 0]])).ok


def test_zero_cost_violates_floor():
    rep = validate_model(two_mode([[0, 0], [1, 0]]))
    assert [str(v) for v in rep] == ["costs.base: cost floor: l_12 < gamma on [0, T]"]


def test_cost_shape_mismatch_reported():
    m = two_mode([[0, 1], [1, 0]])
    m = replace(m, modes=replace(m.modes, labels=("a", "b", "c")),
                payoffs=m.payoffs + (Payoff("constant", c=1.0),))
    rep = validate_model(m)
    assert any("cost matrix shape" in v.rule for v in rep)


def test_floor_accounts_for_discounting():
    # e^{-rT} a = e^{-1} < 0.5 at T = 1 even though a = 1 at t = 0
    rep = validate_model(two_mode([[0, 1], [1, 0]], rate=1.0))
    assert len(rep) == 2


@pytest.mark.parametrize("mutate, field", [
    (lambda m: replace(m, costs=CostSpec(m.costs.base, 0.0, 0.0)), "costs.gamma"),
    (lambda m: replace(m, costs=CostSpec(m.costs.base, -1.0, 0.01)), "costs.rate"),
    (lambda m: replace(m, diffusion=replace(m.diffusion, x0=(-1.0,))), "diffusion.x0"),
    (lambda m: replace(m, diffusion=replace(m.diffusion, sigma=(-0.1,))), "diffusion.sigma"),
    (lambda m: replace(m, diffusion=replace(m.diffusion, mu=(math.nan,))), "diffusion.mu"),
    (lambda m: replace(m, grid=replace(m.grid, T=0.0)), "grid.T"),
    (lambda m: replace(m, grid=replace(m.grid, N=0)), "grid.N"),
    (lambda m: replace(m, i0=5), "initial_mode"),
    (lambda m: replace(m, payoffs=m.payoffs[:1]), "payoffs"),
    (lambda m: replace(m, modes=replace(m.modes, labels=("a", "a"))), "modes"),
])
def test_each_violation_names_its_field(bench, mutate, field):
    rep = validate_model(mutate(bench))
    assert field in {v.field for v in rep}


def test_require_valid_raises_with_violations(bench):
    with pytest.raises(ModelValidationError) as exc:
        require_valid(replace(bench, i0=-1))
    assert exc.value.violations


def test_spread_payoff(bench):
    assert evaluate_payoff(bench, 1, 0.3, 3.0) == 2.0


def test_constant_payoff_is_zero_everywhere(bench):
    assert all(evaluate_payoff(bench, 0, t, x) == 0.0 for t in (0, 0.5, 1) for x in (-5, 0, 7))


def test_discounted_spread_with_zero_rate_is_spread():
    rng = np.random.default_rng(3)
    a, b = Payoff("discounted_spread", K=0.7, rho=0.0), Payoff("spread", K=0.7)
    for t, x in rng.uniform(0, 5, size=(100, 2)):
        assert a(t, np.array([x])) == b(t, np.array([x]))


def test_affine_sums_coordinates():
    p = Payoff("affine", a=1.0, b=(2.0, -1.0))
    assert p(0.0, np.array([3.0, 4.0])) == 1.0 + 6.0 - 4.0


def test_payoff_mode_out_of_range(bench):
    with pytest.raises(IndexError):
        evaluate_payoff(bench, 2, 0.0, 1.0)


def test_cost_examples():
    m = two_mode([[0, 1], [1, 0]])
    assert evaluate_cost(m, 0, 1, 0.7) == 1.0
    m2 = two_mode([[0, 2], [2, 0]], rate=math.log(2), gamma=0.5)
    assert evaluate_cost(m2, 0, 1, 1.0) == pytest.approx(1.0, rel=1e-15)


def test_self_switch_is_an_error(bench):
    with pytest.raises(ValueError):
        evaluate_cost(bench, 1, 1, 0.0)


@given(models(q_max=5))
def test_grid_cost_floor_holds_for_valid_models(model):
    assert validate_model(model).ok
    for m in range(model.grid.N + 1):
        t = model.grid.t(m)
        for i in range(model.q):
            for j in range(model.q):
                if i != j:
                    assert evaluate_cost(model, i, j, t) >= model.costs.gamma


@given(models(q_max=5), st.floats(0, 1))
def test_every_cycle_costs_at_least_two_gamma(model, frac):
    t = frac * model.grid.T
    got = cycle_costs(model, t)
    expected = set(simple_cycles(model.q))
    assert set(got) == expected
    for cyc in expected:
        total = sum(evaluate_cost(model, cyc[s], cyc[(s + 1) % len(cyc)], t) for s in range(len(cyc)))
        assert got[cyc] == pytest.approx(total, rel=1e-14)
        assert total >= 2 * model.costs.gamma


@given(models(), st.floats(0, 1), st.floats(-3, 3))
def test_evaluation_is_pure(model, frac, x):
    t = frac * model.grid.T
    for i in range(model.q):
        a = evaluate_payoff(model, i, t, x)
        assert a == evaluate_payoff(model, i, t, x)
        j = (i + 1) % model.q
        assert evaluate_cost(model, i, j, t) == evaluate_cost(model, i, j, t)


def test_config_round_trip(bench):
    again = model_from_dict(json.loads(json.dumps(model_to_dict(bench))))
    assert again == bench


def test_config_is_one_based(bench):
    doc = json.loads(bench_path().read_text())
    assert doc["initial_mode"] == 1 and bench.i0 == 0


def test_unknown_config_key_rejected():
    doc = json.loads(bench_path().read_text())
    doc["grid"]["dt"] = 0.1
    with pytest.raises(pydantic.ValidationError):
        model_from_dict(doc)


def test_benchmark_parameters(bench):
    d = bench.diffusion
    assert (d.family, d.mu, d.sigma, d.x0) == ("gbm", (0.02,), (0.3,), (1.0,))
    assert bench.grid.T == 1.0 and bench.q == 2 and bench.i0 == 0
    assert bench.costs.base[0, 1] == bench.costs.base[1, 0] == 0.05
    assert bench.costs.rate == 0.0 and bench.costs.gamma == 0.01
    assert [p.family for p in bench.payoffs] == ["constant", "spread"]


def test_models_are_immutable(bench):
    with pytest.raises(Exception):
        bench.costs.base[0, 1] = 0.0
    assert isinstance(bench, SwitchingModel)
