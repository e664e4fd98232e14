"""Least-squares Monte Carlo for the switching system.

Conditional expectations on the lattice are replaced by polynomial
regressions of next-step values on the current path states.  Fitted
continuations only drive the switch decisions; the values carried backward
are realized along each path, which keeps the estimator from compounding
regression error into the stored values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from .coupling import obstacle, resolve_switches
from .mc import PathBatch
from .model import SwitchingModel, require_valid


@dataclass(frozen=True)
class RegressionBasis:
    family: str = "polynomial"
    degree: int = 3
    standardize: bool = True

    def exponents(self, k: int) -> list[tuple[int, ...]]:
        terms = [e for e in product(range(self.degree + 1), repeat=k) if sum(e) <= self.degree]
        return sorted(terms, key=lambda e: (sum(e), tuple(-v for v in e)))

    def size(self, k: int) -> int:
        return math.comb(self.degree + k, k)

    def check(self, M: int, k: int) -> None:
        if self.family != "polynomial":
            raise ValueError(f"unsupported basis family {self.family!r}")
        if self.degree < 0:
            raise ValueError("basis degree must be >= 0")
        if self.size(k) > M / 10:
            raise ValueError(f"basis of size {self.size(k)} needs at least {10 * self.size(k)} paths, got {M}")

    @staticmethod
    def term_label(e: tuple[int, ...]) -> str:
        parts = [f"z{c + 1}" + (f"^{p}" if p > 1 else "") for c, p in enumerate(e) if p]
        return "*".join(parts) or "1"


@dataclass
class Fit:
    coef: np.ndarray  # (P, r)
    fitted: np.ndarray  # (M, r)
    shift: np.ndarray
    scale: np.ndarray
    rank_deficient: bool


def design_matrix(states: np.ndarray, basis: RegressionBasis,
                  shift: Optional[np.ndarray] = None, scale: Optional[np.ndarray] = None):
    states = np.asarray(states, float)
    if states.ndim == 1:
        states = states[:, None]
    k = states.shape[1]
    if shift is None:
        if basis.standardize:
            shift = states.mean(axis=0)
            scale = states.std(axis=0)
        else:
            shift, scale = np.zeros(k), np.ones(k)
    # degenerate coordinate: every non-constant term collapses to zero
    safe = np.where(scale > 0, scale, 1.0)
    z = np.where(scale > 0, (states - shift) / safe, 0.0)
    cols = [np.prod(z ** np.asarray(e), axis=1) for e in basis.exponents(k)]
    return np.column_stack(cols), shift, scale


def fit_continuation(states: np.ndarray, targets: np.ndarray, basis: RegressionBasis) -> Fit:
    """OLS of ``targets`` (``(M,)`` or ``(M, r)``) on the basis evaluated at ``states``.

    Householder QR; a numerically rank-deficient design falls back to the
    minimum-norm SVD solution and is flagged.
    """
    y = np.asarray(targets, float)
    one = y.ndim == 1
    if one:
        y = y[:, None]
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("regression targets must be finite")
    A, shift, scale = design_matrix(states, basis)
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    deficient = d.size == 0 or d.min() <= 1e-10 * max(d.max(), 1e-300) * max(A.shape)
    if deficient:
        coef = np.linalg.lstsq(A, y, rcond=None)[0]
    else:
        coef = solve_triangular(R, Q.T @ y)
    fitted = A @ coef
    if one:
        return Fit(coef[:, 0], fitted[:, 0], shift, scale, deficient)
    return Fit(coef, fitted, shift, scale, deficient)


@dataclass
class PathValueField:
    mean: np.ndarray  # (q, N + 1)
    stderr: np.ndarray  # (q, N + 1)
    coefficients: np.ndarray  # (q, N + 1, P); row N unused
    basis: RegressionBasis
    scheme: str
    seed: int
    n: Optional[int] = None
    values: Optional[np.ndarray] = None  # (q, N + 1, M)
    rank_deficient_steps: list[int] = field(default_factory=list)
    terms: list[str] = field(default_factory=list)
    estimates: Optional[np.ndarray] = None  # fitted-based values that drove the decisions

    @property
    def root(self) -> np.ndarray:
        return self.mean[:, 0].copy()

    @property
    def root_stderr(self) -> np.ndarray:
        return self.stderr[:, 0].copy()

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "m", "mean", "stderr"])
            for i in range(self.mean.shape[0]):
                for m in range(self.mean.shape[1]):
                    w.writerow([i + 1, m, repr(float(self.mean[i, m])), repr(float(self.stderr[i, m]))])

    def coefficients_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "m", "term", "weight"])
            q, n1, _ = self.coefficients.shape
            for i in range(q):
                for m in range(n1 - 1):
                    for term, wgt in zip(self.terms, self.coefficients[i, m]):
                        w.writerow([i + 1, m, term, repr(float(wgt))])


def _prepare(batch: PathBatch, model: SwitchingModel, basis: RegressionBasis) -> None:
    require_valid(model)
    if batch.grid != model.grid:
        raise ValueError(f"batch grid {batch.grid} does not match model grid {model.grid}")
    if batch.k != model.diffusion.k:
        raise ValueError("batch dimension does not match model diffusion")
    basis.check(batch.M, batch.k)


def _realize(decision: np.ndarray, cont_raw: np.ndarray, other: np.ndarray,
             costs: np.ndarray) -> np.ndarray:
    """Pathwise values from decisions: continue -> realized continuation,
    switch to j -> ``-l_ij + other_j`` (``other`` may be the array being built)."""
    q = decision.shape[0]
    cols = np.arange(decision.shape[1])
    y = cont_raw.copy()
    for _ in range(q):
        src = other if other is not None else y
        new = cont_raw.copy()
        for i in range(q):
            sw = decision[i] >= 0
            if sw.any():
                j = decision[i, sw]
                new[i, sw] = src[j, cols[sw]] - costs[i, j]
        if other is not None or np.array_equal(new, y):
            return new
        y = new
    return y


def _decide(est: np.ndarray, cont_hat: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """-1 where the estimate says continue, else the argmax switch target."""
    obs, arg = obstacle(est, costs)
    return np.where(est > cont_hat, arg, -1)


def _check_finite(y: np.ndarray, m: int) -> None:
    bad = ~np.isfinite(y)
    if bad.any():
        i = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise FloatingPointError(f"non-finite value in lsmc backward pass at mode {i + 1}, m={m}")


def _backward(batch: PathBatch, model: SwitchingModel, basis: RegressionBasis,
              prev: Optional[PathValueField], coupled: bool, store: bool, scheme: str,
              n: Optional[int]) -> PathValueField:
    """One backward pass.

    ``coupled``: the obstacle comes from same-time values of this pass (fixed
    point).  Otherwise it comes from ``prev`` (the (n-1)-field) or is absent
    (n = 0).  Decisions use fitted quantities; stored values are realized
    pathwise (continue: payoff plus next-step value; switch: cost plus the
    target mode's same-time value).
    """
    q, N, M = model.q, model.grid.N, batch.M
    dt = model.grid.dt
    k = batch.k
    P = basis.size(k)
    mean = np.zeros((q, N + 1))
    se = np.zeros((q, N + 1))
    coefs = np.full((q, N + 1, P), np.nan)
    values = np.zeros((q, N + 1, M)) if store else None
    estimates = np.zeros((q, N + 1, M)) if store else None
    deficient = []
    y_next = np.zeros((q, M))
    for m in range(N - 1, -1, -1):
        t = model.grid.t(m)
        X = batch.at(m)
        run = model.payoff_rates(t, X) * dt
        cont_raw = run + y_next
        _check_finite(cont_raw, m)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"non-finite path state in lsmc backward pass at m={m}")
        fit = fit_continuation(X, y_next.T, basis)
        if fit.rank_deficient:
            deficient.append(m)
        coefs[:, m, :] = fit.coef.T
        cont_hat = run + fit.fitted.T
        costs = model.costs.matrix(t)
        if coupled:
            est, _ = resolve_switches(cont_hat, costs)
            y = _realize(_decide(est, cont_hat, costs), cont_raw, None, costs)
        elif prev is not None:
            obs, arg = obstacle(prev.estimates[:, m, :], costs)
            est = np.maximum(cont_hat, obs)
            y = _realize(np.where(obs > cont_hat, arg, -1), cont_raw, prev.values[:, m, :], costs)
        else:
            est, y = cont_hat, cont_raw
        _check_finite(y, m)
        mean[:, m] = y.mean(axis=1)
        se[:, m] = y.std(axis=1, ddof=1) / math.sqrt(M) if M > 1 else 0.0
        if store:
            values[:, m, :] = y
            estimates[:, m, :] = est
        y_next = y
    terms = [basis.term_label(e) for e in basis.exponents(k)]
    return PathValueField(mean, se, coefs, basis, scheme, batch.seed, n, values,
                          sorted(deficient), terms, estimates)


def solve_lsmc_fixed_point(batch: PathBatch, model: SwitchingModel,
                           basis: RegressionBasis = RegressionBasis(),
                           store_values: bool = True) -> PathValueField:
    _prepare(batch, model, basis)
    return _backward(batch, model, basis, None, True, store_values, "fixed-point", None)


def lsmc_n_switch_levels(batch: PathBatch, model: SwitchingModel, basis: RegressionBasis,
                         n: int) -> list[PathValueField]:
    """Fields for 0..n further switches; path values are kept for the last two levels only."""
    if n < 0:
        raise ValueError("n must be >= 0")
    _prepare(batch, model, basis)
    levels = [_backward(batch, model, basis, None, False, True, "n-switch", 0)]
    while len(levels) <= n:
        prev = levels[-1]
        if len(levels) >= 2 and np.array_equal(prev.values, levels[-2].values):
            nxt = PathValueField(prev.mean, prev.stderr, prev.coefficients, basis, "n-switch",
                                 batch.seed, prev.n + 1, prev.values, prev.rank_deficient_steps,
                                 prev.terms, prev.estimates)
        else:
            nxt = _backward(batch, model, basis, prev, False, True, "n-switch", prev.n + 1)
        levels.append(nxt)
        if len(levels) >= 3:
            # only the previous level feeds the next obstacle
            levels[-3].values = levels[-3].estimates = None
    return levels


def solve_lsmc_n_switch(batch: PathBatch, model: SwitchingModel,
                        basis: RegressionBasis = RegressionBasis(), n: int = 0) -> PathValueField:
    return lsmc_n_switch_levels(batch, model, basis, n)[-1]
