import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import models
from optswitch.acceptance import hand_instance
from optswitch.lattice import build_binomial_chain, solve_fixed_point, solve_no_switch
from optswitch.penalized import (PenaltySchedule, loglog_slope, penalized_step, penalty_sweep,
                                 solve_penalized)
from optswitch.model import CostSpec

TOL = 1e-9


def chain_of(model):
    return build_binomial_chain(model.diffusion, model.grid)


def tri(v):
    return v[~np.isnan(v)]


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1e6))
def test_step_solves_scalar_equation(c, L, w):
    y = float(penalized_step(np.array(c), np.array(L), w))
    assert y == pytest.approx(c + w * max(L - y, 0.0), rel=1e-9, abs=1e-9)
    assert min(c, L) - 1e-12 <= y <= max(c, L) + 1e-12


@given(models())
def test_zero_penalty_is_no_switch(model):
    ch = chain_of(model)
    assert np.array_equal(solve_penalized(ch, model, 0.0).values, solve_no_switch(ch, model).values,
                          equal_nan=True)


@pytest.mark.parametrize("n", [1.0, 64.0, 1e4])
def test_huge_costs_leave_no_switch_field(bench, bench_chain, n):
    m = replace(bench, costs=CostSpec(np.array([[0, 1e3], [1e3, 0]]), 0.0, 0.01))
    assert np.array_equal(solve_penalized(bench_chain, m, n).values, solve_no_switch(bench_chain, m).values,
                          equal_nan=True)


def test_hand_instance_large_penalty():
    m = hand_instance()
    pen = solve_penalized(chain_of(m), m, 1e6)
    assert 5.0 - 1e-3 <= pen.root[0] <= 5.0
    assert pen.meta["converged"]


@given(models(q_max=3, n_max=5), st.sampled_from([0.5, 4.0, 50.0]))
def test_picard_iterates_nondecreasing(model, n):
    lat = solve_penalized(chain_of(model), model, n, keep_iterates=True)
    its = lat.meta["iterates"]
    for a, b in zip(its, its[1:]):
        assert np.all(tri(a) <= tri(b) + TOL)


@given(models(q_max=3, n_max=5))
def test_monotone_in_penalty_and_dominated(model):
    ch = chain_of(model)
    fp = tri(solve_fixed_point(ch, model).values)
    prev = None
    for n in (1.0, 8.0, 64.0, 512.0):
        v = tri(solve_penalized(ch, model, n).values)
        assert np.all(v <= fp + TOL)
        if prev is not None:
            assert np.all(prev <= v + TOL)
        prev = v


def test_kmax_reached_is_flagged(bench, bench_chain):
    lat = solve_penalized(bench_chain, bench, 256.0, kmax=1)
    assert not lat.meta["converged"] and lat.meta["picard_iterations"] == 1


def test_negative_penalty_refused(bench, bench_chain):
    with pytest.raises(ValueError):
        solve_penalized(bench_chain, bench, -1.0)


@pytest.mark.parametrize("sched", [
    PenaltySchedule(()), PenaltySchedule((2.0, 1.0)), PenaltySchedule((0.0, 1.0)),
    PenaltySchedule((1.0,), tol=0.0), PenaltySchedule((1.0,), kmax=0),
])
def test_invalid_schedules(sched):
    with pytest.raises(ValueError):
        sched.check()


def test_default_schedule():
    s = PenaltySchedule()
    assert s.penalties == tuple(2.0**k for k in range(9))
    assert (s.kmax, s.tol) == (200, 1e-10)


def test_loglog_slope_of_power_law():
    n = np.array([1, 2, 4, 8, 16.0])
    assert loglog_slope(n, 3.0 / n) == pytest.approx(-1.0, abs=1e-12)
    assert math.isnan(loglog_slope([1.0], [1.0]))


@pytest.fixture(scope="module")
def sweep(bench, bench_chain, bench_fp):
    return penalty_sweep(bench_chain, bench, PenaltySchedule(), reference=bench_fp)


def test_sweep_gaps_nonincreasing(sweep):
    assert sweep.gaps_nonincreasing
    assert np.all(np.diff(sweep.root_gaps) <= 0)


def test_sweep_dominated_and_monotone(sweep):
    assert sweep.dominated and sweep.monotone_in_penalty and all(sweep.converged)


def test_sweep_gap_at_256(sweep):
    assert sweep.sup_gaps[-1] <= 1e-2


def test_sweep_slope_diagnostic(sweep):
    # constant-cost two-mode benchmark: rate close to 1/n
    assert -1.3 <= sweep.slope <= -0.7


def test_obstacle_shortfall_vanishes(sweep):
    # sup over all lattice nodes, so the far tails set the pace
    assert np.all(np.diff(sweep.shortfalls) < 0)
    assert sweep.shortfalls[-1] < sweep.shortfalls[0] / 20


def test_sweep_csv(tmp_path, sweep):
    sweep.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("penalty,sup_gap,slope_so_far,converged_flag")
    assert len(lines) == 10
