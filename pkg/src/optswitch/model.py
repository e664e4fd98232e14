"""Problem instances for finite-horizon optimal switching.

A :class:`SwitchingModel` bundles the mode set, the payoff rate of each mode,
the (deterministic, exponentially decaying) switching costs, the driving
diffusion and the time grid.  Modes are 0-based inside Python; the JSON config
and every exported artifact use 1-based mode numbers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Any, Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

DEFAULT_GAMMA = 1e-6


class ModelValidationError(ValueError):
    """Raised by solvers handed a model whose validation report is non-empty."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


# --------------------------------------------------------------------------- #
# Component types
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ModeSet:
    labels: tuple[str, ...]

    @property
    def q(self) -> int:
        return len(self.labels)

    @classmethod
    def of_size(cls, q: int) -> "ModeSet":
        return cls(tuple(f"mode{i + 1}" for i in range(q)))


@dataclass(frozen=True)
class Payoff:
    """One builtin payoff-rate family.

    ``constant``           c
    ``affine``             a + sum_c b_c x_c
    ``spread``             sum_c x_c - K
    ``discounted_spread``  exp(-rho t) (sum_c x_c - K)
    """

    family: Literal["constant", "affine", "spread", "discounted_spread"]
    c: float = 0.0
    a: float = 0.0
    b: tuple[float, ...] = (0.0,)
    K: float = 0.0
    rho: float = 0.0

    def __call__(self, t, x) -> np.ndarray:
        """Evaluate on states ``x`` of shape ``(..., k)``; returns shape ``(...)``."""
        x = np.asarray(x, dtype=float)
        if self.family == "constant":
            return np.full(x.shape[:-1], float(self.c))
        if self.family == "affine":
            return self.a + x @ np.broadcast_to(np.asarray(self.b, float), x.shape[-1:])
        level = x.sum(axis=-1) - self.K
        if self.family == "spread":
            return level
        if self.family == "discounted_spread":
            return np.exp(-self.rho * np.asarray(t, float)) * level
        raise ValueError(f"unknown payoff family {self.family!r}")

    def params(self) -> dict[str, Any]:
        if self.family == "constant":
            return {"c": self.c}
        if self.family == "affine":
            return {"a": self.a, "b": list(self.b)}
        if self.family == "spread":
            return {"K": self.K}
        return {"K": self.K, "rho": self.rho}


PayoffSpec = tuple[Payoff, ...]


@dataclass(frozen=True)
class CostSpec:
    """Switching costs ``l_ij(t) = exp(-rate t) * base[i, j]`` with floor ``gamma``."""

    base: np.ndarray
    rate: float = 0.0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        base = np.array(self.base, dtype=float)
        base.setflags(write=False)
        object.__setattr__(self, "base", base)

    def matrix(self, t: float) -> np.ndarray:
        """q x q cost matrix at time t with ``+inf`` on the diagonal (no self-switch)."""
        m = math.exp(-self.rate * t) * self.base
        np.fill_diagonal(m, np.inf)
        return m

    def __eq__(self, other):
        return (
            isinstance(other, CostSpec)
            and np.array_equal(self.base, other.base)
            and self.rate == other.rate
            and self.gamma == other.gamma
        )

    __hash__ = None


@dataclass(frozen=True)
class DiffusionSpec:
    """Diagonal diffusion with independent coordinates.

    ``abm``: b = mu, s = sigma;  ``gbm``: b = mu x, s = sigma x;
    ``ou``: b = kappa (theta - x), s = sigma.  Parameters broadcast over
    the k coordinates.
    """

    family: Literal["abm", "gbm", "ou"]
    x0: tuple[float, ...]
    mu: tuple[float, ...] = (0.0,)
    sigma: tuple[float, ...] = (0.0,)
    kappa: tuple[float, ...] = (0.0,)
    theta: tuple[float, ...] = (0.0,)

    @property
    def k(self) -> int:
        return len(self.x0)

    def _p(self, name: str) -> np.ndarray:
        return np.broadcast_to(np.asarray(getattr(self, name), float), (self.k,))

    def drift(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.family == "abm":
            return np.broadcast_to(self._p("mu"), x.shape).copy()
        if self.family == "gbm":
            return self._p("mu") * x
        if self.family == "ou":
            return self._p("kappa") * (self._p("theta") - x)
        raise ValueError(f"unknown diffusion family {self.family!r}")

    def vol(self, t, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.family == "gbm":
            return self._p("sigma") * x
        if self.family in ("abm", "ou"):
            return np.broadcast_to(self._p("sigma"), x.shape).copy()
        raise ValueError(f"unknown diffusion family {self.family!r}")

    def params(self) -> dict[str, Any]:
        keys = {"abm": ("mu", "sigma"), "gbm": ("mu", "sigma"), "ou": ("kappa", "theta", "sigma")}
        out: dict[str, Any] = {}
        for key in keys[self.family]:
            val = list(getattr(self, key))
            out[key] = val[0] if len(val) == 1 else val
        return out


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def t(self, m: int) -> float:
        return m * self.dt


@dataclass(frozen=True)
class SwitchingModel:
    modes: ModeSet
    payoffs: PayoffSpec
    costs: CostSpec
    diffusion: DiffusionSpec
    grid: TimeGrid
    i0: int = 0

    @property
    def q(self) -> int:
        return self.modes.q

    def with_grid(self, N: int | None = None, T: float | None = None) -> "SwitchingModel":
        grid = TimeGrid(self.grid.T if T is None else T, self.grid.N if N is None else N)
        return SwitchingModel(self.modes, self.payoffs, self.costs, self.diffusion, grid, self.i0)

    def payoff_rates(self, t, x) -> np.ndarray:
        """All modes' payoff rates at states ``x`` of shape ``(..., k)``; shape ``(q, ...)``."""
        return np.stack([np.asarray(f(t, x), float) for f in self.payoffs])


# --------------------------------------------------------------------------- #
# Validation
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def add(self, fld: str, rule: str) -> None:
        self.violations.append(Violation(fld, rule))


def _finite(vals) -> bool:
    return bool(np.all(np.isfinite(np.asarray(vals, float))))


def validate_model(model: SwitchingModel) -> ValidationReport:
    rep = ValidationReport()
    q = model.q
    if q < 2:
        rep.add("modes", "mode set needs q >= 2")
    if len(set(model.modes.labels)) != q:
        rep.add("modes", "labels must be distinct")

    if len(model.payoffs) != q:
        rep.add("payoffs", f"expected {q} payoff specs, got {len(model.payoffs)}")
    for i, p in enumerate(model.payoffs):
        if p.family not in ("constant", "affine", "spread", "discounted_spread"):
            rep.add(f"payoffs[{i + 1}]", f"unknown family {p.family!r}")
        elif not _finite([p.a, p.c, p.K, p.rho, *p.b]):
            rep.add(f"payoffs[{i + 1}]", "parameters must be finite")

    c = model.costs
    if c.base.shape != (q, q):
        rep.add("costs.base", f"cost matrix shape {c.base.shape} != ({q}, {q})")
    if not (c.gamma > 0 and math.isfinite(c.gamma)):
        rep.add("costs.gamma", "floor gamma must be > 0")
    if not (c.rate >= 0 and math.isfinite(c.rate)):
        rep.add("costs.rate", "discount rate must be >= 0")
    if c.base.shape == (q, q) and q >= 2:
        off = c.base[~np.eye(q, dtype=bool)]
        if not _finite(off):
            rep.add("costs.base", "off-diagonal costs must be finite")
        elif math.isfinite(c.rate) and math.isfinite(model.grid.T):
            for i in range(q):
                for j in range(q):
                    if i != j and math.exp(-c.rate * model.grid.T) * c.base[i, j] < c.gamma:
                        rep.add("costs.base", f"cost floor: l_{i + 1}{j + 1} < gamma on [0, T]")

    d = model.diffusion
    if d.family not in ("abm", "gbm", "ou"):
        rep.add("diffusion.family", f"unknown family {d.family!r}")
    else:
        for name in ("x0", "mu", "sigma", "kappa", "theta"):
            val = getattr(d, name)
            if not _finite(val):
                rep.add(f"diffusion.{name}", "parameters must be finite")
            elif name != "x0" and len(val) not in (1, d.k):
                rep.add(f"diffusion.{name}", f"length {len(val)} incompatible with dimension {d.k}")
        if d.k < 1:
            rep.add("diffusion.x0", "state dimension must be >= 1")
        if _finite(d.sigma) and np.any(np.asarray(d.sigma) < 0):
            rep.add("diffusion.sigma", "volatility must be >= 0")
        if d.family == "gbm" and _finite(d.x0) and np.any(np.asarray(d.x0) <= 0):
            rep.add("diffusion.x0", "GBM requires x0 > 0")
        for i, p in enumerate(model.payoffs):
            if p.family == "affine" and len(p.b) not in (1, d.k):
                rep.add(f"payoffs[{i + 1}].b", f"length {len(p.b)} incompatible with dimension {d.k}")

    g = model.grid
    if not (g.T > 0 and math.isfinite(g.T)):
        rep.add("grid.T", "horizon must be > 0")
    if not (isinstance(g.N, (int, np.integer)) and g.N >= 1):
        rep.add("grid.N", "step count must be an integer >= 1")

    if not (0 <= model.i0 < q):
        rep.add("initial_mode", f"initial mode must be in 1..{q}")
    return rep


def require_valid(model: SwitchingModel) -> None:
    rep = validate_model(model)
    if rep:
        raise ModelValidationError(rep.violations)


# --------------------------------------------------------------------------- #
# Pointwise evaluation
# --------------------------------------------------------------------------- #


def _check_mode(model: SwitchingModel, i: int) -> None:
    if not (0 <= i < model.q):
        raise IndexError(f"mode {i} out of range 0..{model.q - 1}")


def evaluate_payoff(model: SwitchingModel, i: int, t: float, x) -> float:
    """Payoff rate of mode ``i`` (0-based) at time ``t`` and state ``x``."""
    _check_mode(model, i)
    if not (0.0 <= t <= model.grid.T):
        raise ValueError(f"t={t} outside [0, {model.grid.T}]")
    xa = np.atleast_1d(np.asarray(x, float))
    return float(model.payoffs[i](t, xa))


def evaluate_cost(model: SwitchingModel, i: int, j: int, t: float) -> float:
    _check_mode(model, i)
    _check_mode(model, j)
    if i == j:
        raise ValueError("self-switch i == j has no cost: switches must change mode")
    return math.exp(-model.costs.rate * t) * float(model.costs.base[i, j])


def cycle_costs(model: SwitchingModel, t: float) -> dict[tuple[int, ...], float]:
    """Total cost of every switch cycle i -> ... -> i over distinct intermediate modes."""
    cm = model.costs.matrix(t)
    out: dict[tuple[int, ...], float] = {}
    q = model.q
    for length in range(2, q + 1):
        for cyc in permutations(range(q), length):
            if cyc[0] != min(cyc):
                continue
            out[cyc] = float(sum(cm[cyc[s], cyc[(s + 1) % length]] for s in range(length)))
    return out


# --------------------------------------------------------------------------- #
# JSON config (strict)
# --------------------------------------------------------------------------- #

_Num = Union[float, list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class _ConstantCfg(_Strict):
    family: Literal["constant"]
    c: float


class _AffineCfg(_Strict):
    family: Literal["affine"]
    a: float
    b: _Num


class _SpreadCfg(_Strict):
    family: Literal["spread"]
    K: float


class _DiscSpreadCfg(_Strict):
    family: Literal["discounted_spread"]
    K: float
    rho: float


class _CostsCfg(_Strict):
    base: list[list[float]]
    rate: float = 0.0
    gamma: float = DEFAULT_GAMMA


class _AbmCfg(_Strict):
    family: Literal["abm"]
    mu: _Num
    sigma: _Num
    x0: _Num


class _GbmCfg(_Strict):
    family: Literal["gbm"]
    mu: _Num
    sigma: _Num
    x0: _Num


class _OuCfg(_Strict):
    family: Literal["ou"]
    kappa: _Num
    theta: _Num
    sigma: _Num
    x0: _Num


class _GridCfg(_Strict):
    T: float
    N: int


class ModelConfig(_Strict):
    modes: Union[int, list[str]]
    payoffs: list[Union[_ConstantCfg, _AffineCfg, _SpreadCfg, _DiscSpreadCfg]]
    costs: _CostsCfg
    diffusion: Union[_AbmCfg, _GbmCfg, _OuCfg]
    grid: _GridCfg
    initial_mode: int = 1


def _tup(v) -> tuple[float, ...]:
    return tuple(float(x) for x in (v if isinstance(v, list) else [v]))


def model_from_dict(data: dict[str, Any]) -> SwitchingModel:
    """Build a model from a config mapping; unknown keys raise ``pydantic.ValidationError``."""
    cfg = ModelConfig.model_validate(data)
    modes = ModeSet.of_size(cfg.modes) if isinstance(cfg.modes, int) else ModeSet(tuple(cfg.modes))
    payoffs = []
    for p in cfg.payoffs:
        kw = p.model_dump()
        if "b" in kw:
            kw["b"] = _tup(kw["b"])
        payoffs.append(Payoff(**kw))
    d = cfg.diffusion.model_dump()
    family = d.pop("family")
    diffusion = DiffusionSpec(family, **{k: _tup(v) for k, v in d.items()})
    return SwitchingModel(
        modes=modes,
        payoffs=tuple(payoffs),
        costs=CostSpec(np.array(cfg.costs.base, float) if cfg.costs.base else np.zeros((0, 0)),
                       cfg.costs.rate, cfg.costs.gamma),
        diffusion=diffusion,
        grid=TimeGrid(cfg.grid.T, cfg.grid.N),
        i0=cfg.initial_mode - 1,
    )


def model_to_dict(model: SwitchingModel) -> dict[str, Any]:
    d = model.diffusion
    x0 = list(d.x0)
    return {
        "modes": list(model.modes.labels),
        "payoffs": [{"family": p.family, **p.params()} for p in model.payoffs],
        "costs": {"base": model.costs.base.tolist(), "rate": model.costs.rate, "gamma": model.costs.gamma},
        "diffusion": {"family": d.family, **d.params(), "x0": x0[0] if len(x0) == 1 else x0},
        "grid": {"T": model.grid.T, "N": model.grid.N},
        "initial_mode": model.i0 + 1,
    }


def load_model(path: str | Path) -> SwitchingModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def bench_path() -> Path:
    return Path(__file__).parent / "data" / "bench.json"


def bench_model(N: int | None = None) -> SwitchingModel:
    """The shipped two-mode GBM benchmark (off / on with payoff x - 1)."""
    m = load_model(bench_path())
    return m if N is None else m.with_grid(N=N)
