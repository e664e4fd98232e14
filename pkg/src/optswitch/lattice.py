"""Recombining binomial chains and exact backward induction for switching.

Value arrays are stored densely with shape ``(q, N+1, N+1)``: entry
``[i, m, l]`` is meaningful for ``l <= m`` and NaN above the diagonal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .coupling import obstacle, resolve_switches
from .model import DiffusionSpec, SwitchingModel, TimeGrid, require_valid

ENUMERATION_LIMIT = 10**7


@dataclass(frozen=True)
class ChainModel:
    grid: TimeGrid
    nodes: tuple[np.ndarray, ...]  # nodes[m] has m + 1 states
    probs: tuple[np.ndarray, ...]  # probs[m] has m + 1 up-probabilities, m < N
    provenance: str = "explicit"

    @property
    def N(self) -> int:
        return self.grid.N

    def expect(self, m: int, nxt: np.ndarray) -> np.ndarray:
        """E[V_{m+1} | node l at m] for ``nxt`` of shape ``(..., m + 2)``."""
        p = self.probs[m]
        return p * nxt[..., 1:] + (1.0 - p) * nxt[..., :-1]

    def check(self) -> None:
        if len(self.nodes) != self.N + 1 or len(self.probs) != self.N:
            raise ValueError("chain must have N + 1 node layers and N probability layers")
        for m, (x, p) in enumerate(zip(self.nodes, self.probs + (None,))):
            if len(x) != m + 1:
                raise ValueError(f"layer {m} has {len(x)} nodes, expected {m + 1}")
            if p is not None and (len(p) != m + 1 or np.any(p < 0) or np.any(p > 1)):
                raise ValueError(f"layer {m} probabilities invalid")


@dataclass
class ValueLattice:
    values: np.ndarray
    chain: ChainModel
    scheme: str
    n: Optional[int] = None
    penalty: Optional[float] = None
    continuation: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.values.shape[0]

    @property
    def root(self) -> np.ndarray:
        return self.values[:, 0, 0].copy()

    def layer(self, m: int) -> np.ndarray:
        return self.values[:, m, : m + 1]

    def to_csv(self, path: str | Path) -> None:
        write_lattice_csv(path, self.values, self.chain)


def write_lattice_csv(path, values: np.ndarray, chain: ChainModel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "m", "l", "x", "value"])
        for i in range(values.shape[0]):
            for m in range(chain.N + 1):
                for l in range(m + 1):
                    w.writerow([i + 1, m, l, repr(float(chain.nodes[m][l])), repr(float(values[i, m, l]))])


# --------------------------------------------------------------------------- #
# Chain construction
# --------------------------------------------------------------------------- #


def _offsets(m: int) -> np.ndarray:
    return 2.0 * np.arange(m + 1) - m


def build_binomial_chain(diffusion: DiffusionSpec, grid: TimeGrid) -> ChainModel:
    """Weak-order-one binomial approximation with conditional mean increment ``b dt``.

    ABM moves ``x + mu dt +/- sigma sqrt(dt)`` with p = 1/2.  GBM recombines in
    log space with p = 1/2 and a log-drift chosen so that
    ``E[X_{m+1} | X_m] = X_m (1 + mu dt)``.  OU keeps a fixed spread
    ``x0 + sigma sqrt(dt) (2l - m)`` and carries the drift in the probabilities
    (clipped to [0, 1]).  Zero volatility collapses every layer onto the
    Euler path of the ODE.
    """
    if diffusion.k != 1:
        raise ValueError(f"binomial chain needs a 1-D diffusion, got k={diffusion.k}")
    N, dt = grid.N, grid.dt
    x0 = float(diffusion.x0[0])
    sig = float(diffusion.sigma[0])
    half = tuple(np.full(m + 1, 0.5) for m in range(N))
    sq = math.sqrt(dt)

    if sig == 0.0:
        path = [x0]
        for m in range(N):
            x = np.array([[path[-1]]])
            path.append(float(path[-1] + diffusion.drift(grid.t(m), x)[0, 0] * dt))
        nodes = tuple(np.full(m + 1, path[m]) for m in range(N + 1))
        return ChainModel(grid, nodes, half, f"{diffusion.family}:deterministic")

    if diffusion.family == "abm":
        mu = float(diffusion.mu[0])
        nodes = tuple(x0 + mu * grid.t(m) + sig * sq * _offsets(m) for m in range(N + 1))
        return ChainModel(grid, nodes, half, "abm")

    if diffusion.family == "gbm":
        mu = float(diffusion.mu[0])
        if 1.0 + mu * dt <= 0:
            raise ValueError("GBM chain needs 1 + mu*dt > 0")
        g = math.log1p(mu * dt) - math.log(math.cosh(sig * sq))
        lx0 = math.log(x0)
        nodes = tuple(np.exp(lx0 + g * m + sig * sq * _offsets(m)) for m in range(N + 1))
        return ChainModel(grid, nodes, half, "gbm:log")

    if diffusion.family == "ou":
        nodes = tuple(x0 + sig * sq * _offsets(m) for m in range(N + 1))
        probs = []
        for m in range(N):
            b = diffusion.drift(grid.t(m), nodes[m][:, None])[:, 0]
            with np.errstate(over="ignore"):  # tiny sigma: drift saturates the probability
                probs.append(np.clip(0.5 + b * sq / (2.0 * sig), 0.0, 1.0))
        return ChainModel(grid, nodes, tuple(probs), "ou:prob")

    raise ValueError(f"unsupported diffusion family {diffusion.family!r}")


def deterministic_chain(grid: TimeGrid, x: float = 0.0) -> ChainModel:
    """Chain whose every node sits at ``x``; handy for hand-built instances."""
    nodes = tuple(np.full(m + 1, float(x)) for m in range(grid.N + 1))
    probs = tuple(np.full(m + 1, 0.5) for m in range(grid.N))
    return ChainModel(grid, nodes, probs, "explicit")


# --------------------------------------------------------------------------- #
# Backward induction
# --------------------------------------------------------------------------- #


def _check(chain: ChainModel, model: SwitchingModel) -> None:
    require_valid(model)
    if chain.grid != model.grid:
        raise ValueError(f"chain grid {chain.grid} does not match model grid {model.grid}")


def _empty(q: int, N: int) -> np.ndarray:
    v = np.full((q, N + 1, N + 1), np.nan)
    v[:, N, :] = 0.0
    return v


def payoff_layers(chain: ChainModel, model: SwitchingModel) -> list[np.ndarray]:
    """``psi_i(t_m, x_{m,l}) * dt`` for every layer, each of shape ``(q, m + 1)``."""
    dt = chain.grid.dt
    return [model.payoff_rates(chain.grid.t(m), chain.nodes[m][:, None]) * dt for m in range(chain.N)]


def solve_no_switch(chain: ChainModel, model: SwitchingModel) -> ValueLattice:
    _check(chain, model)
    N = chain.N
    run = payoff_layers(chain, model)
    y = _empty(model.q, N)
    for m in range(N - 1, -1, -1):
        y[:, m, : m + 1] = run[m] + chain.expect(m, y[:, m + 1, : m + 2])
    return ValueLattice(y, chain, "n-switch", n=0, continuation=y.copy())


def solve_fixed_point(chain: ChainModel, model: SwitchingModel) -> ValueLattice:
    """Coupled discrete Snell envelopes ``Y_i = max(C_i, max_j(-l_ij + Y_j))``."""
    _check(chain, model)
    N = chain.N
    run = payoff_layers(chain, model)
    y = _empty(model.q, N)
    cont = _empty(model.q, N)
    max_sweeps = 0
    for m in range(N - 1, -1, -1):
        c = run[m] + chain.expect(m, y[:, m + 1, : m + 2])
        cont[:, m, : m + 1] = c
        y[:, m, : m + 1], sweeps = resolve_switches(c, model.costs.matrix(chain.grid.t(m)))
        max_sweeps = max(max_sweeps, sweeps)
    return ValueLattice(y, chain, "fixed-point", continuation=cont, meta={"max_sweeps": max_sweeps})


def _next_level(chain: ChainModel, model: SwitchingModel, prev: ValueLattice,
                run: list[np.ndarray]) -> ValueLattice:
    N = chain.N
    y = _empty(model.q, N)
    cont = _empty(model.q, N)
    for m in range(N - 1, -1, -1):
        c = run[m] + chain.expect(m, y[:, m + 1, : m + 2])
        cont[:, m, : m + 1] = c
        obs, _ = obstacle(prev.values[:, m, : m + 1], model.costs.matrix(chain.grid.t(m)))
        y[:, m, : m + 1] = np.maximum(c, obs)
    return ValueLattice(y, chain, "n-switch", n=prev.n + 1, continuation=cont)


def n_switch_levels(chain: ChainModel, model: SwitchingModel, n: int) -> list[ValueLattice]:
    """Lattices ``Y^{., 0}, ..., Y^{., n}`` (at most that many further switches)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    levels = [solve_no_switch(chain, model)]
    run = payoff_layers(chain, model)
    while len(levels) <= n:
        prev = levels[-1]
        if len(levels) >= 2 and np.array_equal(prev.values, levels[-2].values, equal_nan=True):
            # stationary from here on
            nxt = ValueLattice(prev.values, chain, "n-switch", n=prev.n + 1,
                               continuation=prev.continuation, meta={"stationary": True})
        else:
            nxt = _next_level(chain, model, prev, run)
        levels.append(nxt)
    return levels


def solve_n_switch(chain: ChainModel, model: SwitchingModel, n: int) -> ValueLattice:
    return n_switch_levels(chain, model, n)[-1]


def bound_lattice(chain: ChainModel, model: SwitchingModel) -> np.ndarray:
    """Conditional expectation of the remaining ``max_i |psi_i| dt``; shape ``(N+1, N+1)``."""
    run = payoff_layers(chain, model)
    N = chain.N
    b = np.full((N + 1, N + 1), np.nan)
    b[N] = 0.0
    for m in range(N - 1, -1, -1):
        b[m, : m + 1] = np.abs(run[m]).max(axis=0) + chain.expect(m, b[m + 1, : m + 2])
    return b


def expected_path_max(chain: ChainModel, G: np.ndarray, n_thresholds: int = 1024) -> tuple[float, float]:
    """Bracket ``E[max_m G[m, l_m]]`` over chain paths for a nonnegative node field ``G``.

    Forward-propagates, for each threshold u, the probability of never having
    reached u; the layer-cake integral over log-spaced thresholds then gives a
    lower and an upper bound.
    """
    N = chain.N
    top = max(float(np.nanmax(G[m, : m + 1])) for m in range(N + 1))
    if top <= 0:
        return 0.0, 0.0
    u = np.geomspace(top * 1e-14, top, n_thresholds)
    alive = np.ones((u.size, 1))  # P(path stayed below u so far), per node
    for m in range(N + 1):
        alive = alive * (G[m, : m + 1][None, :] < u[:, None])
        if m < N:
            p = chain.probs[m]
            nxt = np.zeros((u.size, m + 2))
            nxt[:, 1:] += alive * p
            nxt[:, :-1] += alive * (1.0 - p)
            alive = nxt
    reached = 1.0 - alive.sum(axis=1)  # P(max >= u_k)
    edges = np.concatenate([[0.0], u])
    width = np.diff(edges)
    lower = float(np.sum(width * reached))
    upper = float(np.sum(width * np.concatenate([[1.0], reached[:-1]])))
    return lower, upper


# --------------------------------------------------------------------------- #
# Brute-force reference
# --------------------------------------------------------------------------- #


def enumeration_size(q: int, N: int, max_switches: int) -> int:
    return (q - 1) ** max_switches * math.comb(N, min(max_switches, N)) * 2**N


def enumerate_strategies(chain: ChainModel, model: SwitchingModel, i0: int, max_switches: int) -> float:
    """Best expected profit over history-dependent strategies with at most ``max_switches`` switches.

    Walks the full (non-recombining) binary tree of chain histories and tries
    every switch sequence at every visited node.  Independent of the lattice
    recursion; exponential, so only for tiny instances.
    """
    _check(chain, model)
    N = chain.N
    size = enumeration_size(model.q, N, max_switches)
    if size > ENUMERATION_LIMIT:
        raise ValueError(f"enumeration too large: estimated {size} > {ENUMERATION_LIMIT}")
    dt = chain.grid.dt
    q = model.q
    rates = [[[float(model.payoffs[i](chain.grid.t(m), np.array([chain.nodes[m][l]])))
               for l in range(m + 1)] for m in range(N + 1)] for i in range(q)]
    costs = [model.costs.matrix(chain.grid.t(m)) for m in range(N + 1)]

    def walk(m: int, l: int, mode: int, left: int) -> float:
        if m == N:
            return 0.0
        p = float(chain.probs[m][l])
        up = walk(m + 1, l + 1, mode, left) if p > 0 else 0.0
        down = walk(m + 1, l, mode, left) if p < 1 else 0.0
        best = rates[mode][m][l] * dt + p * up + (1.0 - p) * down
        if left > 0:
            for j in range(q):
                if j != mode:
                    best = max(best, -float(costs[m][mode, j]) + walk(m, l, j, left - 1))
        return best

    return walk(0, 0, i0, max_switches)
