"""Switching rules read off value fields, and their pathwise execution.

A rule says, for each (mode, time index, node), whether to keep running or
to switch and where.  Executing it yields the realized profit
``sum psi_u dt - sum l``; on the chain this is an exact expectation obtained
by pushing probability mass forward, on simulated paths a sample mean.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .coupling import obstacle
from .lattice import ChainModel, ValueLattice
from .mc import PathBatch
from .model import SwitchingModel
from .pde import GridValueField

CONTINUE = -1
RULE_TOL = 1e-9


@dataclass
class DecisionRule:
    actions: list[np.ndarray]  # actions[m]: (q, nodes_m) ints, CONTINUE or target mode; m < N
    node_x: list[np.ndarray]  # node states per time index, ascending
    kind: str  # "lattice" or "grid"
    source: str = ""

    @property
    def q(self) -> int:
        return self.actions[0].shape[0]

    @property
    def N(self) -> int:
        return len(self.actions)

    def copy(self) -> "DecisionRule":
        return DecisionRule([a.copy() for a in self.actions], self.node_x, self.kind, self.source)


def extract_rule(field: Union[ValueLattice, GridValueField], model: SwitchingModel,
                 obstacle_source: Union[ValueLattice, GridValueField, None] = None,
                 tol: float = RULE_TOL) -> DecisionRule:
    """Switch to the best target iff its obstacle beats continuation by ``tol`` (relative).

    ``obstacle_source`` supplies the values the obstacle is built from when
    they differ from ``field`` (the (n-1)-level for an n-switch lattice).
    Ties in the target are broken by the smallest mode index.
    """
    if field.continuation is None:
        raise ValueError("field carries no continuation values")
    if field.q != model.q or field.values.shape[1] != model.grid.N + 1:
        raise ValueError("field does not match model (mode count or time grid)")
    if not np.allclose(np.nan_to_num(field.values[:, -1]), 0.0):
        raise ValueError("field violates the terminal condition Y_T = 0")
    src = field if obstacle_source is None else obstacle_source
    actions, xs = [], []
    for m in range(model.grid.N):
        if isinstance(field, ValueLattice):
            cols = slice(0, m + 1)
            xs.append(field.chain.nodes[m])
        else:
            cols = slice(None)
            xs.append(field.space.x)
        c = field.continuation[:, m, cols]
        obs, arg = obstacle(src.values[:, m, cols], model.costs.matrix(model.grid.t(m)))
        switch = obs >= c + tol * np.maximum(1.0, np.abs(c))
        actions.append(np.where(switch, arg, CONTINUE).astype(np.int64))
    if isinstance(field, ValueLattice):
        xs.append(field.chain.nodes[model.grid.N])
        kind, source = "lattice", f"{field.scheme}" + (f"(n={field.n})" if field.n is not None else "")
    else:
        xs.append(field.space.x)
        kind, source = "grid", f"pde(theta={field.theta})"
    return DecisionRule(actions, xs, kind, source)


def extract_n_switch_rules(levels: Sequence[ValueLattice], model: SwitchingModel) -> list[DecisionRule]:
    """Rule per number of switches left: level 0 never switches, level n looks at level n-1."""
    rules = [extract_rule(levels[0], model)]
    for n in range(1, len(levels)):
        rules.append(extract_rule(levels[n], model, obstacle_source=levels[n - 1]))
    return rules


def random_rule(chain: ChainModel, q: int, rng: np.random.Generator, p_switch: float = 0.5) -> DecisionRule:
    actions = []
    for m in range(chain.N):
        a = np.full((q, m + 1), CONTINUE, dtype=np.int64)
        for i in range(q):
            sw = rng.random(m + 1) < p_switch
            tgt = rng.integers(0, q - 1, size=m + 1)
            tgt = tgt + (tgt >= i)  # skip i itself
            a[i, sw] = tgt[sw]
        actions.append(a)
    return DecisionRule(actions, list(chain.nodes), "lattice", "random")


def continue_rule(chain: ChainModel, q: int) -> DecisionRule:
    return DecisionRule([np.full((q, m + 1), CONTINUE, dtype=np.int64) for m in range(chain.N)],
                        list(chain.nodes), "lattice", "continue")


# --------------------------------------------------------------------------- #
# Execution
# --------------------------------------------------------------------------- #


@dataclass
class ExecutionReport:
    mean: float
    stderr: float
    switch_histogram: dict[int, float]
    carrier: str
    profits: Optional[np.ndarray] = None
    switch_counts: Optional[np.ndarray] = None
    switch_log: list[tuple[int, int, int, int, float]] = field(default_factory=list)
    clamped: int = 0

    @property
    def max_switches(self) -> int:
        return max((k for k, v in self.switch_histogram.items() if v > 0), default=0)

    def switch_log_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "m", "from", "to", "cost"])
            for p, m, a, b, c in self.switch_log:
                w.writerow([p, m, a + 1, b + 1, repr(c)])


@dataclass(frozen=True)
class OptimalityGap:
    gap: float
    z: float


def optimality_gap(report: ExecutionReport, y0: float) -> OptimalityGap:
    gap = float(y0 - report.mean)
    if report.stderr > 0:
        return OptimalityGap(gap, gap / report.stderr)
    return OptimalityGap(gap, gap)


def write_aggregate_json(path: str | Path, report: ExecutionReport, y0: float) -> None:
    g = optimality_gap(report, y0)
    doc = {"mean": report.mean, "stderr": report.stderr, "Y0": y0, "gap": g.gap, "z": g.z,
           "switch_histogram": {str(k): v for k, v in sorted(report.switch_histogram.items())}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _rule_for(rules: Sequence[DecisionRule], left: int) -> DecisionRule:
    return rules[min(left, len(rules) - 1)]


def execute(rule: Union[DecisionRule, Sequence[DecisionRule]], carrier: Union[ChainModel, PathBatch],
            model: SwitchingModel, i0: int, cap: Optional[int] = None,
            log_switches: bool = True) -> ExecutionReport:
    """Run a rule from mode ``i0``.

    Within a time step the rule is re-applied after each switch (at most
    q - 1 times) and the step's payoff then accrues in the final mode.  A
    sequence of rules is indexed by the number of switches left under
    ``cap`` (see :func:`extract_n_switch_rules`).
    """
    single = isinstance(rule, DecisionRule)
    rules = [rule] if single else list(rule)
    if cap is None and not single:
        cap = len(rules) - 1
    for r in rules:
        if r.q != model.q or r.N != model.grid.N:
            raise ValueError("rule does not match model (mode count or time grid)")
    if isinstance(carrier, ChainModel):
        return _execute_chain(rules, carrier, model, i0, cap)
    return _execute_paths(rules, carrier, model, i0, cap, log_switches)


def _execute_chain(rules, chain: ChainModel, model: SwitchingModel, i0: int,
                   cap: Optional[int]) -> ExecutionReport:
    if rules[0].kind != "lattice":
        raise ValueError("chain execution needs a lattice rule")
    q, N, dt = model.q, chain.N, chain.grid.dt
    kmax = (q - 1) * N if cap is None else min(cap, (q - 1) * N)
    # mass[c, i, l]: probability of being at node l in mode i after c switches
    mass = np.zeros((kmax + 1, q, 1))
    mass[0, i0, 0] = 1.0
    profit = 0.0
    # contiguous blocks of switch counts that share a rule: (c_lo, c_hi, rule index)
    if cap is None:
        blocks = [(0, kmax, 0)]
    else:
        blocks = [(c, c + 1, min(cap - c, len(rules) - 1)) for c in range(kmax)]
    for m in range(N):
        costs = model.costs.matrix(chain.grid.t(m))
        for _ in range(q - 1):
            moved = False
            new = mass.copy()
            for lo, hi, r in blocks:
                act = rules[r].actions[m]
                for i in range(q):
                    w = mass[lo:hi, i]
                    for j in range(q):
                        sel = act[i] == j
                        if not sel.any():
                            continue
                        moving = w[:, sel]
                        total = moving.sum()
                        if total <= 0:
                            continue
                        moved = True
                        new[lo:hi, i, sel] -= moving
                        new[lo + 1:hi + 1, j, sel] += moving
                        profit -= float(np.sum(moving.sum(axis=0) * costs[i, j]))
            mass = new
            if not moved:
                break
        rates = model.payoff_rates(chain.grid.t(m), chain.nodes[m][:, None]) * dt
        profit += float(np.sum(mass.sum(axis=0) * rates))
        p = chain.probs[m]
        nxt = np.zeros((kmax + 1, q, m + 2))
        nxt[..., 1:] += mass * p
        nxt[..., :-1] += mass * (1.0 - p)
        mass = nxt
    hist = mass.sum(axis=(1, 2))
    return ExecutionReport(profit, 0.0, {c: float(hist[c]) for c in range(kmax + 1) if hist[c] > 0},
                           "chain")


def _nearest(xs: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest node index and an outside-the-grid flag."""
    idx = np.clip(np.searchsorted(xs, x), 1, max(len(xs) - 1, 1))
    if len(xs) == 1:
        return np.zeros(x.shape, dtype=np.int64), np.zeros(x.shape, dtype=bool)
    left = xs[idx - 1]
    right = xs[idx]
    idx = np.where(np.abs(x - left) <= np.abs(right - x), idx - 1, idx)
    outside = (x < xs[0]) | (x > xs[-1])
    return idx, outside


def _execute_paths(rules, batch: PathBatch, model: SwitchingModel, i0: int,
                   cap: Optional[int], log_switches: bool) -> ExecutionReport:
    if batch.k != 1:
        raise ValueError("rules are 1-D; path execution needs k = 1")
    q, N, dt, M = model.q, model.grid.N, model.grid.dt, batch.M
    mode = np.full(M, i0, dtype=np.int64)
    count = np.zeros(M, dtype=np.int64)
    profit = np.zeros(M)
    log: list[tuple[int, int, int, int, float]] = []
    clamped = np.zeros(M, dtype=bool)
    rows = np.arange(M)
    for m in range(N):
        x = batch.paths[:, m, 0]
        costs = model.costs.matrix(model.grid.t(m))
        node = None
        for _ in range(q - 1):
            if cap is None:
                act_all = rules[0]
                if node is None:
                    node, out = _nearest(act_all.node_x[m], x)
                    clamped |= out
                tgt = act_all.actions[m][mode, node]
            else:
                tgt = np.full(M, CONTINUE, dtype=np.int64)
                for left in np.unique(cap - count):
                    if left <= 0:
                        continue
                    r = _rule_for(rules, int(left))
                    sel = (cap - count) == left
                    idx, out = _nearest(r.node_x[m], x[sel])
                    clamped[sel] |= out
                    tgt[sel] = r.actions[m][mode[sel], idx]
            sw = tgt != CONTINUE
            if not sw.any():
                break
            paid = costs[mode[sw], tgt[sw]]
            profit[sw] -= paid
            if log_switches:
                log.extend(zip(rows[sw].tolist(), [m] * int(sw.sum()), mode[sw].tolist(),
                               tgt[sw].tolist(), paid.tolist()))
            mode[sw] = tgt[sw]
            count[sw] += 1
        rates = model.payoff_rates(model.grid.t(m), batch.paths[:, m, :])
        profit += rates[mode, rows] * dt
    hist = Counter(count.tolist())
    se = float(profit.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    log.sort(key=lambda r: (r[0], r[1]))
    return ExecutionReport(float(profit.mean()), se, {k: v / M for k, v in sorted(hist.items())},
                           "paths", profit, count, log, int(clamped.sum()))
