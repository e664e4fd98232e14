import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from optswitch.lattice import build_binomial_chain, n_switch_levels, solve_fixed_point
from optswitch.lsmc import (RegressionBasis, design_matrix, fit_continuation, lsmc_n_switch_levels,
                            solve_lsmc_fixed_point, solve_lsmc_n_switch)
from optswitch.mc import simulate_euler
from optswitch.model import CostSpec, DiffusionSpec, Payoff, SwitchingModel, TimeGrid


@pytest.fixture(scope="module")
def bench_batch(bench):
    return simulate_euler(bench.diffusion, bench.grid, 20_000, 21)


def deterministic(model: SwitchingModel, N: int = 20) -> SwitchingModel:
    d = DiffusionSpec("abm", x0=(0.2,), mu=(1.5,), sigma=(0.0,))
    return replace(model, diffusion=d, grid=TimeGrid(1.0, N))


# --- regression ---------------------------------------------------------------


def test_basis_size_and_terms():
    b = RegressionBasis(degree=3)
    assert b.size(1) == 4 and b.size(2) == 10 and b.size(3) == 20
    assert len(b.exponents(2)) == 10
    assert [b.term_label(e) for e in b.exponents(2)[:4]] == ["1", "z1", "z2", "z1^2"]


def test_basis_guard():
    with pytest.raises(ValueError, match="paths"):
        RegressionBasis(degree=3).check(39, 1)
    RegressionBasis(degree=3).check(40, 1)


@given(st.floats(-5, 5), st.integers(0, 4))
def test_constant_targets_fit_exactly(c, degree):
    x = np.random.default_rng(0).normal(size=(200, 1))
    fit = fit_continuation(x, np.full(200, c), RegressionBasis(degree=degree))
    assert np.allclose(fit.fitted, c, atol=1e-9 * max(1, abs(c)))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 4))
def test_linear_targets_fit_exactly(a, b1, b2, degree):
    x = np.random.default_rng(1).normal(size=(300, 2)) * [1.0, 50.0] + [0.0, 100.0]
    y = a + b1 * x[:, 0] + b2 * x[:, 1]
    fit = fit_continuation(x, y, RegressionBasis(degree=degree))
    assert np.max(np.abs(fit.fitted - y)) <= 1e-8 * max(1.0, np.max(np.abs(y)))
    assert not fit.rank_deficient


def test_rank_deficient_design_falls_back_and_flags():
    x = np.column_stack([np.linspace(0, 1, 100), np.linspace(0, 1, 100)])
    fit = fit_continuation(x, x[:, 0] * 2.0, RegressionBasis(degree=1))
    assert fit.rank_deficient
    assert np.allclose(fit.fitted, x[:, 0] * 2.0, atol=1e-10)


def test_degenerate_coordinate_keeps_intercept():
    A, _, scale = design_matrix(np.full((5, 1), 3.0), RegressionBasis(degree=2))
    assert scale[0] == 0 and np.all(A[:, 0] == 1) and np.all(A[:, 1:] == 0)


def test_non_finite_targets_refused():
    with pytest.raises(FloatingPointError):
        fit_continuation(np.zeros((20, 1)), np.array([np.nan] * 20), RegressionBasis(degree=0))


def test_gbm_conditional_mean(bench):
    b = simulate_euler(bench.diffusion, bench.grid, 100_000, 31)
    m = 100
    fit = fit_continuation(b.at(m), b.paths[:, -1, 0], RegressionBasis(degree=2))
    A, _, _ = design_matrix(np.array([[1.0]]), RegressionBasis(degree=2), fit.shift, fit.scale)
    at_x0 = float((A @ fit.coef)[0])
    resid = b.paths[:, -1, 0] - fit.fitted
    se = resid.std() / math.sqrt(b.M) * 2  # local standard error is larger than the global one
    exact = 1.0 * (1 + 0.02 * bench.grid.dt) ** (bench.grid.N - m)
    assert abs(at_x0 - exact) <= 3 * se
    assert abs(exact - math.exp(0.02 * 0.5)) < 1e-5


# --- solvers ----------------------------------------------------------------------


@pytest.mark.parametrize("n", [0, 1, 2, None])
def test_zero_vol_equals_lattice(bench, n):
    m = deterministic(bench)
    batch = simulate_euler(m.diffusion, m.grid, 50, 4)
    ch = build_binomial_chain(m.diffusion, m.grid)
    basis = RegressionBasis(degree=3)
    if n is None:
        lat, ls = solve_fixed_point(ch, m), solve_lsmc_fixed_point(batch, m, basis)
    else:
        lat, ls = n_switch_levels(ch, m, n)[-1], solve_lsmc_n_switch(batch, m, basis, n)
    for step in range(m.grid.N + 1):
        assert np.allclose(ls.mean[:, step], lat.values[:, step, 0], rtol=0, atol=1e-8)
        assert np.all(ls.stderr[:, step] <= 1e-12)


def test_n_switch_at_qN_equals_fixed_point_on_zero_vol(bench):
    m = deterministic(bench, N=10)
    batch = simulate_euler(m.diffusion, m.grid, 50, 4)
    basis = RegressionBasis(degree=2)
    fp = solve_lsmc_fixed_point(batch, m, basis)
    ns = solve_lsmc_n_switch(batch, m, basis, m.q * m.grid.N)
    assert np.array_equal(fp.mean, ns.mean)


def test_never_switch_equals_plain_monte_carlo(bench, bench_batch):
    m = replace(bench, costs=CostSpec(np.array([[0, 1e6], [1e6, 0]]), 0.0, 0.01))
    ls = solve_lsmc_fixed_point(bench_batch, m, RegressionBasis())
    dt = m.grid.dt
    pay = (bench_batch.paths[:, :-1, 0] - 1.0).sum(axis=1) * dt
    assert ls.root[0] == 0.0
    assert abs(ls.root[1] - pay.mean()) <= 3 * pay.std() / math.sqrt(bench_batch.M)
    n0 = solve_lsmc_n_switch(bench_batch, m, RegressionBasis(), 0)
    assert abs(n0.root[1] - pay.mean()) <= 3 * n0.root_stderr[1]


def test_mean_monotone_in_n(bench, bench_batch):
    levels = lsmc_n_switch_levels(bench_batch, bench, RegressionBasis(), 4)
    for a, b in zip(levels, levels[1:]):
        se = math.hypot(a.root_stderr[0], b.root_stderr[0])
        assert a.root[0] <= b.root[0] + 3 * se


def test_seed_stability(bench):
    a = solve_lsmc_fixed_point(simulate_euler(bench.diffusion, bench.grid, 20_000, 100), bench,
                               RegressionBasis(), store_values=False)
    b = solve_lsmc_fixed_point(simulate_euler(bench.diffusion, bench.grid, 20_000, 200), bench,
                               RegressionBasis(), store_values=False)
    assert abs(a.root[0] - b.root[0]) <= 4 * math.hypot(a.root_stderr[0], b.root_stderr[0])


def test_benchmark_against_lattice_high_degree(bench, bench_fp):
    # with a rich basis the decision rule is good enough for agreement at 3 SE
    batch = simulate_euler(bench.diffusion, bench.grid, 50_000, 41)
    ls = solve_lsmc_fixed_point(batch, bench, RegressionBasis(degree=8), store_values=False)
    assert abs(ls.root[0] - bench_fp.root[0]) <= 3 * ls.root_stderr[0]


def test_fixed_point_is_lower_biased_at_degree_three(bench, bench_fp, bench_batch):
    # realized values of a suboptimal rule sit below the true value
    ls = solve_lsmc_fixed_point(bench_batch, bench, RegressionBasis(degree=3))
    assert ls.root[0] < bench_fp.root[0]
    assert ls.values.shape == (2, bench.grid.N + 1, bench_batch.M)
    assert np.all(ls.values[:, -1] == 0)


def test_grid_mismatch_refused(bench, bench_batch):
    with pytest.raises(ValueError, match="grid"):
        solve_lsmc_fixed_point(bench_batch, bench.with_grid(N=100))


def test_nan_propagation_names_mode_and_step(bench):
    m = replace(bench, payoffs=(Payoff("constant", c=0.0), Payoff("affine", a=0.0, b=(1.0,))))
    batch = simulate_euler(m.diffusion, m.grid, 100, 1)
    paths = batch.paths.copy()
    paths[3, 150, 0] = np.inf
    with pytest.raises(FloatingPointError, match="mode 2, m=150"):
        solve_lsmc_fixed_point(replace(batch, paths=paths), m, RegressionBasis(degree=1))


def test_multidimensional_state(bench):
    d = DiffusionSpec("abm", x0=(0.0, 0.0), mu=(0.1,), sigma=(0.3, 0.2))
    m = replace(bench, diffusion=d, payoffs=(Payoff("constant", c=0.0), Payoff("spread", K=0.0)),
                grid=TimeGrid(1.0, 10))
    batch = simulate_euler(d, m.grid, 2_000, 5)
    ls = solve_lsmc_fixed_point(batch, m, RegressionBasis(degree=2))
    assert ls.coefficients.shape == (2, 11, 6)
    assert ls.root[0] >= -1e-12


def test_exports(tmp_path, bench):
    m = deterministic(bench, N=3)
    ls = solve_lsmc_fixed_point(simulate_euler(m.diffusion, m.grid, 40, 1), m, RegressionBasis(degree=1))
    ls.to_csv(tmp_path / "f.csv")
    ls.coefficients_to_csv(tmp_path / "c.csv")
    f = (tmp_path / "f.csv").read_text().splitlines()
    c = (tmp_path / "c.csv").read_text().splitlines()
    assert f[0] == "mode,m,mean,stderr" and len(f) == 1 + 2 * 4
    assert c[0] == "mode,m,term,weight" and len(c) == 1 + 2 * 3 * 2
    assert c[1].startswith("1,0,1,")
