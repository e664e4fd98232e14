"""Finite differences for the 1-D system of QVIs with inter-connected obstacles.

Backward theta-scheme for ``v_t + A v + psi_i = 0`` per mode (central second
differences, upwinded drift, zero-curvature boundaries), followed by
projection onto the obstacles ``max_{j != i}(-l_ij + v_j)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .coupling import resolve_switches
from .model import SwitchingModel, require_valid


@dataclass(frozen=True)
class SpaceGrid:
    x_min: float
    x_max: float
    J: int

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.J

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.J + 1)

    def check(self, x0: float) -> None:
        if not self.x_min < x0 < self.x_max:
            raise ValueError(f"x0={x0} must lie strictly inside [{self.x_min}, {self.x_max}]")
        if self.J < 8:
            raise ValueError("space grid needs J >= 8")

    @classmethod
    def default(cls, model: SwitchingModel, J: int = 400, width: float = 5.0) -> "SpaceGrid":
        """x0 e^{-/+ w s sqrt(T)} for GBM, x0 -/+ w s sqrt(T) otherwise."""
        d = model.diffusion
        x0, s, T = float(d.x0[0]), float(d.sigma[0]), model.grid.T
        spread = width * s * math.sqrt(T)
        if d.family == "gbm":
            lo, hi = x0 * math.exp(-spread), x0 * math.exp(spread)
        else:
            lo, hi = x0 - spread, x0 + spread
        if spread == 0.0:
            # degenerate volatility: a unit window around x0
            lo, hi = x0 - 1.0, x0 + 1.0
        return cls(lo, hi, J)


@dataclass
class GridValueField:
    values: np.ndarray  # (q, N + 1, J + 1)
    space: SpaceGrid
    theta: float
    continuation: np.ndarray  # linear-solve result before projection
    boundary: str = "linear-extrapolation"
    meta: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return self.values.shape[0]

    def at(self, x0: float, m: int = 0) -> np.ndarray:
        """Per-mode values at state x0 by linear interpolation."""
        xs = self.space.x
        return np.array([np.interp(x0, xs, self.values[i, m]) for i in range(self.q)])

    def to_csv(self, path: str | Path) -> None:
        xs = self.space.x
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "m", "j", "x", "value"])
            q, n1, j1 = self.values.shape
            for i in range(q):
                for m in range(n1):
                    for j in range(j1):
                        w.writerow([i + 1, m, j, repr(float(xs[j])), repr(float(self.values[i, m, j]))])


def _generator_bands(model: SwitchingModel, t: float, xs: np.ndarray, h: float):
    """Coefficients (lower, diag, upper) of the discrete generator A on the grid."""
    d = model.diffusion
    b = d.drift(t, xs[:, None])[:, 0]
    s = d.vol(t, xs[:, None])[:, 0]
    diff = 0.5 * s**2 / h**2
    lo = diff + np.maximum(-b, 0.0) / h
    up = diff + np.maximum(b, 0.0) / h
    dg = -(lo + up)
    # zero-curvature boundaries: drop diffusion, one-sided inward drift
    lo[0], up[0], dg[0] = 0.0, b[0] / h, -b[0] / h
    lo[-1], up[-1], dg[-1] = b[-1] / h, 0.0, -b[-1] / h
    return lo, dg, up


def _apply(lo, dg, up, v):
    out = dg * v
    out[1:] += lo[1:] * v[:-1]
    out[:-1] += up[:-1] * v[1:]
    return out


def monotonicity_margin(model: SwitchingModel, space: SpaceGrid) -> float:
    """max over grid and time of sigma^2 dt / h^2 + |b| dt / h (must be <= 1 for explicit parts)."""
    d, dt, h = model.diffusion, model.grid.dt, space.h
    xs = space.x[:, None]
    worst = 0.0
    for m in range(model.grid.N):
        t = model.grid.t(m)
        s = d.vol(t, xs)[:, 0]
        b = d.drift(t, xs)[:, 0]
        worst = max(worst, float(np.max(s**2 * dt / h**2 + np.abs(b) * dt / h)))
    return worst


def solve_qvi_fd(model: SwitchingModel, space: SpaceGrid | None = None, theta: float = 1.0) -> GridValueField:
    require_valid(model)
    if model.diffusion.k != 1:
        raise ValueError(f"finite-difference solver needs a 1-D diffusion, got k={model.diffusion.k}")
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [1/2, 1]")
    space = space or SpaceGrid.default(model)
    space.check(float(model.diffusion.x0[0]))
    if theta < 1.0:
        margin = monotonicity_margin(model, space)
        if margin > 1.0:
            raise ValueError(f"explicit part not monotone: sigma^2 dt/h^2 + |b| dt/h = {margin:.3g} > 1")

    q, N, dt, h = model.q, model.grid.N, model.grid.dt, space.h
    xs = space.x
    J1 = xs.size
    v = np.zeros((q, N + 1, J1))
    cont = np.zeros((q, N + 1, J1))
    max_sweeps = 0
    for m in range(N - 1, -1, -1):
        t_now, t_next = model.grid.t(m), model.grid.t(m + 1)
        lo, dg, up = _generator_bands(model, t_now, xs, h)
        ab = np.zeros((3, J1))
        ab[0, 1:] = -theta * dt * up[:-1]
        ab[1] = 1.0 - theta * dt * dg
        ab[2, :-1] = -theta * dt * lo[1:]
        if theta < 1.0:
            lo_e, dg_e, up_e = _generator_bands(model, t_next, xs, h)
        psi = model.payoff_rates(t_now, xs[:, None]) * dt
        c = np.empty((q, J1))
        for i in range(q):
            rhs = v[i, m + 1] + psi[i]
            if theta < 1.0:
                rhs = rhs + (1.0 - theta) * dt * _apply(lo_e, dg_e, up_e, v[i, m + 1])
            c[i] = solve_banded((1, 1), ab, rhs)
        cont[:, m] = c
        v[:, m], sweeps = resolve_switches(c, model.costs.matrix(t_now))
        max_sweeps = max(max_sweeps, sweeps)
    return GridValueField(v, space, theta, cont, meta={"max_sweeps": max_sweeps})
