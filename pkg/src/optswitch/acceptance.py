"""Acceptance suite and cross-method consistency matrix.

Each ``criterion_*`` function runs one acceptance check end to end and
returns a :class:`CriterionResult`; the CLI and the test suite share them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .lattice import (bound_lattice, build_binomial_chain, enumerate_strategies, n_switch_levels,
                      solve_fixed_point)
from .lsmc import RegressionBasis, solve_lsmc_fixed_point
from .mc import simulate_euler
from .model import (CostSpec, DiffusionSpec, ModeSet, Payoff, SwitchingModel, TimeGrid,
                    bench_model)
from .pde import SpaceGrid, solve_qvi_fd
from .penalized import PenaltySchedule, penalty_sweep, solve_penalized
from .strategy import execute, extract_rule, optimality_gap, random_rule

TOL = 1e-9
TOL_FLOOR = 1e-8
SLOPE_BAND = (-1.3, -0.7)
METHODS = ("lattice", "penalized", "pde", "lsmc")


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    seconds: float
    limit: float
    details: dict = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = "; ".join(self.failures + [f"warning: {w}" for w in self.warnings])
        text = f"[{status}] criterion {self.number}: {self.title} ({self.seconds:.2f}s / {self.limit:.0f}s)"
        return text + (f" -- {extra}" if extra else "")


def _run(number: int, title: str, limit: float, body: Callable[[CriterionResult], None]) -> CriterionResult:
    res = CriterionResult(number, title, True, 0.0, limit)
    start = time.perf_counter()
    body(res)
    res.seconds = time.perf_counter() - start
    if res.seconds >= limit:
        res.failures.append(f"runtime {res.seconds:.1f}s over {limit:.0f}s")
    res.passed = not res.failures
    return res


def _expect(res: CriterionResult, ok: bool, message: str) -> None:
    if not ok:
        res.failures.append(message)


# --------------------------------------------------------------------------- #
# Instances
# --------------------------------------------------------------------------- #


def hand_instance(cost: float = 1.0) -> SwitchingModel:
    """Deterministic two-step instance: psi = (1, 3), l = cost, T = 2, N = 2."""
    return SwitchingModel(
        modes=ModeSet(("low", "high")),
        payoffs=(Payoff("constant", c=1.0), Payoff("constant", c=3.0)),
        costs=CostSpec(np.array([[0.0, cost], [cost, 0.0]])),
        diffusion=DiffusionSpec("abm", x0=(0.0,), mu=(0.0,), sigma=(0.0,)),
        grid=TimeGrid(2.0, 2),
    )


def random_instance(rng: np.random.Generator) -> SwitchingModel:
    """Small random instance with q in {2, 3}, N in 3..6 and costs above the floor."""
    q = int(rng.integers(2, 4))
    N = int(rng.integers(3, 7))
    T = float(rng.uniform(0.5, 2.0))
    payoffs = []
    for _ in range(q):
        kind = rng.integers(3)
        if kind == 0:
            payoffs.append(Payoff("constant", c=float(rng.uniform(-1.0, 2.0))))
        elif kind == 1:
            payoffs.append(Payoff("spread", K=float(rng.uniform(0.5, 1.5))))
        else:
            payoffs.append(Payoff("affine", a=float(rng.uniform(-1, 1)), b=(float(rng.uniform(-1, 1)),)))
    base = rng.uniform(0.05, 0.6, size=(q, q))
    np.fill_diagonal(base, 0.0)
    costs = CostSpec(base, rate=float(rng.uniform(0.0, 0.5)), gamma=0.01)
    fam = ("abm", "gbm", "ou")[int(rng.integers(3))]
    if fam == "abm":
        diff = DiffusionSpec("abm", x0=(1.0,), mu=(float(rng.uniform(-0.5, 0.5)),),
                             sigma=(float(rng.uniform(0.1, 1.0)),))
    elif fam == "gbm":
        diff = DiffusionSpec("gbm", x0=(float(rng.uniform(0.5, 1.5)),), mu=(float(rng.uniform(-0.2, 0.2)),),
                             sigma=(float(rng.uniform(0.1, 0.6)),))
    else:
        diff = DiffusionSpec("ou", x0=(1.0,), kappa=(float(rng.uniform(0.1, 2.0)),),
                             theta=(float(rng.uniform(0.5, 1.5)),), sigma=(float(rng.uniform(0.1, 1.0)),))
    return SwitchingModel(ModeSet.of_size(q), tuple(payoffs), costs, diff, TimeGrid(T, N),
                          i0=int(rng.integers(q)))


def random_instances(count: int = 50, seed: int = 20240) -> list[SwitchingModel]:
    rng = np.random.default_rng(seed)
    return [random_instance(rng) for _ in range(count)]


# --------------------------------------------------------------------------- #
# Cross-method matrix
# --------------------------------------------------------------------------- #


@dataclass
class Crosscheck:
    methods: tuple[str, ...]
    values: dict[str, float]  # Y^{i0}_0 per method
    stderr: float  # LSMC standard error of Y^{i0}_0
    gaps: np.ndarray  # |difference| per method pair
    tolerances: np.ndarray
    passed: np.ndarray

    @property
    def ok(self) -> bool:
        return bool(np.all(self.passed))

    def rows(self) -> list[dict]:
        out = []
        for a, ma in enumerate(self.methods):
            for b, mb in enumerate(self.methods):
                out.append({"a": ma, "b": mb, "gap": float(self.gaps[a, b]),
                            "tolerance": float(self.tolerances[a, b]), "pass": bool(self.passed[a, b])})
        return out


def pair_tolerances(reference: float, stderr: float, methods=METHODS) -> np.ndarray:
    """Tolerance of each method against the lattice; other pairs get the sum of both.

    An absolute floor of ``TOL_FLOOR`` absorbs roundoff when the reference or
    the standard error is exactly zero (deterministic dynamics).
    """
    to_lattice = {"lattice": 0.0, "pde": 2e-2 * abs(reference), "penalized": 1e-2, "lsmc": 3.0 * stderr}
    n = len(methods)
    tol = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                tol[a, b] = max(to_lattice[methods[a]] + to_lattice[methods[b]], TOL_FLOOR)
    return tol


def crosscheck(model: SwitchingModel, N: Optional[int] = None, J: int = 400, M: int = 100_000,
               seed: int = 1, degree: int = 3, penalty: float = 256.0, theta: float = 1.0,
               workers: int = 1) -> Crosscheck:
    if N is not None:
        model = model.with_grid(N=N)
    i0 = model.i0
    chain = build_binomial_chain(model.diffusion, model.grid)
    values = {"lattice": float(solve_fixed_point(chain, model).root[i0])}
    pen = solve_penalized(chain, model, penalty)
    values["penalized"] = float(pen.root[i0])
    pde = solve_qvi_fd(model, SpaceGrid.default(model, J=J), theta)
    values["pde"] = float(pde.at(float(model.diffusion.x0[0]))[i0])
    batch = simulate_euler(model.diffusion, model.grid, M, seed, workers=workers)
    lsmc = solve_lsmc_fixed_point(batch, model, RegressionBasis(degree=degree), store_values=False)
    values["lsmc"] = float(lsmc.root[i0])
    se = float(lsmc.root_stderr[i0])
    v = np.array([values[m] for m in METHODS])
    gaps = np.abs(v[:, None] - v[None, :])
    tol = pair_tolerances(values["lattice"], se)
    return Crosscheck(METHODS, values, se, gaps, tol, gaps <= tol)


# --------------------------------------------------------------------------- #
# Criteria
# --------------------------------------------------------------------------- #


def criterion_1() -> CriterionResult:
    def body(res):
        model = hand_instance()
        chain = build_binomial_chain(model.diffusion, model.grid)
        fp = solve_fixed_point(chain, model)
        y = fp.root
        res.details["Y0"] = y.tolist()
        _expect(res, abs(y[0] - 5.0) <= 1e-12 and abs(y[1] - 6.0) <= 1e-12, f"Y0 = {y.tolist()}, want [5, 6]")
        rule = extract_rule(fp, model)
        first = int(rule.actions[0][0, 0])
        _expect(res, first == 1, f"mode 1 at m=0 should switch to mode 2, rule says {first}")
        realized = execute(rule, chain, model, 0).mean
        res.details["realized"] = realized
        _expect(res, abs(realized - 5.0) <= 1e-12, f"realized profit {realized}, want 5")

    return _run(1, "hand-instance exactness", 1.0, body)


def criterion_2(instances: Optional[list[SwitchingModel]] = None) -> CriterionResult:
    def body(res):
        worst = 0.0
        for k, model in enumerate(instances or random_instances()):
            chain = build_binomial_chain(model.diffusion, model.grid)
            levels = n_switch_levels(chain, model, 3)
            for n in range(4):
                ref = enumerate_strategies(chain, model, model.i0, n)
                err = abs(ref - levels[n].root[model.i0])
                worst = max(worst, err)
                _expect(res, err <= 1e-10, f"instance {k}, n={n}: enumeration {ref} vs lattice "
                                           f"{levels[n].root[model.i0]}")
        res.details["max_error"] = worst

    return _run(2, "enumeration oracle equivalence", 30.0, body)


def criterion_3(instances: Optional[list[SwitchingModel]] = None) -> CriterionResult:
    def body(res):
        for k, model in enumerate(instances or random_instances()):
            chain = build_binomial_chain(model.diffusion, model.grid)
            fp = solve_fixed_point(chain, model).values
            bound = bound_lattice(chain, model)
            nmax = model.q * model.grid.N
            levels = n_switch_levels(chain, model, nmax)
            tri = ~np.isnan(fp)
            for n in range(nmax):
                a, b = levels[n].values[tri], levels[n + 1].values[tri]
                if np.any(a > b + TOL):
                    res.failures.append(f"instance {k}: Y^n > Y^(n+1) at n={n}")
                if np.any(b > fp[tri] + TOL):
                    res.failures.append(f"instance {k}: Y^(n+1) above fixed point at n={n}")
            if np.any(fp > bound[None] + TOL):
                res.failures.append(f"instance {k}: fixed point above growth bound")
            if not np.array_equal(levels[nmax].values, fp, equal_nan=True):
                res.failures.append(f"instance {k}: Y^(qN) differs from fixed point")

    return _run(3, "monotone n-switch scheme", 30.0, body)


def criterion_4(model: Optional[SwitchingModel] = None) -> CriterionResult:
    def body(res):
        m = model or bench_model()
        chain = build_binomial_chain(m.diffusion, m.grid)
        rep = penalty_sweep(chain, m, PenaltySchedule())
        res.details.update(sup_gaps=rep.sup_gaps, slope=rep.slope, root_gaps=rep.root_gaps)
        _expect(res, rep.monotone_in_penalty, "penalized lattices not monotone in penalty")
        _expect(res, rep.dominated, "penalized lattice exceeds fixed point")
        _expect(res, all(rep.converged), "Picard iteration hit kmax")
        _expect(res, rep.sup_gaps[-1] <= 1e-2, f"sup-gap at penalty 256 is {rep.sup_gaps[-1]:.3g}")
        lo, hi = SLOPE_BAND
        if not lo <= rep.slope <= hi:
            res.warnings.append(f"log-log slope {rep.slope:.3f} outside [{lo}, {hi}]")

    return _run(4, "penalization convergence", 60.0, body)


def criterion_5(model: Optional[SwitchingModel] = None, seed: int = 1) -> CriterionResult:
    def body(res):
        cc = crosscheck(model or bench_model(), N=200, J=400, M=100_000, seed=seed, degree=3)
        res.details.update(values=cc.values, stderr=cc.stderr)
        lat = METHODS.index("lattice")
        for b, name in enumerate(METHODS):
            if b != lat and not cc.passed[lat, b]:
                res.failures.append(f"|lattice - {name}| = {cc.gaps[lat, b]:.3g} > {cc.tolerances[lat, b]:.3g}")

    return _run(5, "cross-method consistency", 120.0, body)


def criterion_6(model: Optional[SwitchingModel] = None, seed: int = 77, n_random: int = 200) -> CriterionResult:
    def body(res):
        m = model or bench_model()
        chain = build_binomial_chain(m.diffusion, m.grid)
        fp = solve_fixed_point(chain, m)
        y0 = float(fp.root[m.i0])
        rule = extract_rule(fp, m)
        exact = execute(rule, chain, m, m.i0)
        _expect(res, abs(exact.mean - y0) <= TOL, f"chain execution {exact.mean} vs Y0 {y0}")
        batch = simulate_euler(m.diffusion, m.grid, 100_000, seed)
        z = optimality_gap(execute(rule, batch, m, m.i0, log_switches=False), y0).z
        res.details.update(Y0=y0, chain_mean=exact.mean, z=z)
        _expect(res, abs(z) <= 3.0, f"fresh-seed z = {z:.2f}")
        rng = np.random.default_rng(seed)
        worst = -math.inf
        rates = (0.5, 0.1, 0.01, 0.001)  # from erratic to nearly passive rules
        for k in range(n_random):
            r = random_rule(chain, m.q, rng, p_switch=rates[k % len(rates)])
            worst = max(worst, execute(r, chain, m, m.i0).mean)
        res.details["best_random"] = worst
        _expect(res, worst <= y0 + TOL, f"random rule scored {worst} > Y0 {y0}")

    return _run(6, "strategy optimality loop", 60.0, body)


def criterion_7(model: Optional[SwitchingModel] = None, seed: int = 7) -> CriterionResult:
    def body(res):
        m = model or bench_model()
        d, T = m.diffusion, m.grid.T
        x0, mu, s = float(d.x0[0]), float(d.mu[0]), float(d.sigma[0])
        batch = simulate_euler(d, m.grid, 100_000, seed)
        xT = batch.paths[:, -1, 0]
        sq = math.sqrt(batch.M)
        m1, m2 = x0 * math.exp(mu * T), x0**2 * math.exp((2 * mu + s**2) * T)
        z1 = (xT.mean() - m1) / (xT.std(ddof=1) / sq)
        z2 = ((xT**2).mean() - m2) / ((xT**2).std(ddof=1) / sq)
        res.details.update(z_mean=float(z1), z_second=float(z2))
        _expect(res, abs(z1) <= 4.0, f"E[X_T] off by {z1:.2f} SE")
        _expect(res, abs(z2) <= 4.0, f"E[X_T^2] off by {z2:.2f} SE")
        small = replace(m.grid, N=50)
        a = simulate_euler(d, small, 20_000, seed, workers=1)
        b = simulate_euler(d, small, 20_000, seed, workers=4, chunk=1_000)
        _expect(res, np.array_equal(a.paths, b.paths), "batches differ across worker counts")

    return _run(7, "path-engine fidelity", 30.0, body)


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7)


def run_all(selected: Optional[list[int]] = None) -> list[CriterionResult]:
    return [fn() for k, fn in enumerate(CRITERIA, start=1) if not selected or k in selected]
