import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from optswitch.acceptance import hand_instance  # noqa: E402
from optswitch.lattice import build_binomial_chain, solve_fixed_point  # noqa: E402
from optswitch.model import (CostSpec, DiffusionSpec, ModeSet, Payoff, SwitchingModel,  # noqa: E402
                             TimeGrid, bench_model)

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bench():
    return bench_model()


@pytest.fixture(scope="session")
def bench_chain(bench):
    return build_binomial_chain(bench.diffusion, bench.grid)


@pytest.fixture(scope="session")
def bench_fp(bench, bench_chain):
    return solve_fixed_point(bench_chain, bench)


@pytest.fixture
def hand():
    return hand_instance()


finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


@st.composite
def payoffs(draw):
    kind = draw(st.sampled_from(["constant", "affine", "spread", "discounted_spread"]))
    if kind == "constant":
        return Payoff("constant", c=draw(finite))
    if kind == "affine":
        return Payoff("affine", a=draw(finite), b=(draw(finite),))
    if kind == "spread":
        return Payoff("spread", K=draw(st.floats(0.0, 2.0)))
    return Payoff("discounted_spread", K=draw(st.floats(0.0, 2.0)), rho=draw(st.floats(0.0, 1.0)))


@st.composite
def diffusions(draw):
    fam = draw(st.sampled_from(["abm", "gbm", "ou"]))
    sigma = draw(st.floats(0.0, 0.8))
    if fam == "abm":
        return DiffusionSpec("abm", x0=(draw(st.floats(-1, 2)),), mu=(draw(st.floats(-0.5, 0.5)),), sigma=(sigma,))
    if fam == "gbm":
        return DiffusionSpec("gbm", x0=(draw(st.floats(0.3, 2.0)),), mu=(draw(st.floats(-0.3, 0.3)),),
                             sigma=(sigma,))
    return DiffusionSpec("ou", x0=(draw(st.floats(0, 2)),), kappa=(draw(st.floats(0, 2)),),
                         theta=(draw(st.floats(0, 2)),), sigma=(sigma,))


@st.composite
def models(draw, q_max=3, n_max=6):
    """Valid small models: every off-diagonal cost sits above the floor on [0, T]."""
    q = draw(st.integers(2, q_max))
    N = draw(st.integers(1, n_max))
    T = draw(st.floats(0.25, 2.0))
    rate = draw(st.floats(0.0, 0.5))
    gamma = 0.01
    base = np.array(draw(st.lists(st.floats(0.02, 1.0), min_size=q * q, max_size=q * q))).reshape(q, q)
    base = base * np.exp(rate * T) + gamma
    np.fill_diagonal(base, 0.0)
    return SwitchingModel(ModeSet.of_size(q), tuple(draw(payoffs()) for _ in range(q)),
                          CostSpec(base, rate, gamma), draw(diffusions()), TimeGrid(T, N),
                          i0=draw(st.integers(0, q - 1)))
