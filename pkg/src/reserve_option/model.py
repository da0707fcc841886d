"""Domain types and deterministic valuation formulas.

Regimes are indexed from 0 throughout; the mid-state of an ``m = 2L + 1``
chain is index ``L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import expm


class InfeasibleVolumeError(ValueError):
    """A reserve volume cannot be depleted at the planned extraction rate."""


def _readonly(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MarketModel:
    """Exponential OU spot, ``S = exp(theta + X)``, ``dX = -kappa X dt + sigma dW``."""

    kappa: float
    theta: float
    sigma: float
    rho: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")

    @property
    def stationary_std(self) -> float:
        return self.sigma / np.sqrt(2.0 * self.kappa)


@dataclass(frozen=True)
class ExtractionPlan:
    """Extraction schedule ``g(u) = alpha * exp(-beta (u - start))``.

    ``volume_unit`` is the number of spot-priced commodity units in one
    volume unit; cash flows are ``volume_unit * g(u) * (F - c)``. It only
    matters when volumes are quoted in a coarser unit than the spot price.
    """

    alpha: float
    beta: float
    gamma: float
    epsilon: float
    c: float = 0.0
    volume_unit: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.epsilon < 0 or self.c < 0:
            raise ValueError("alpha, beta, epsilon and c must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.volume_unit > 0:
            raise ValueError("volume_unit must be positive")

    def check_volumes(self, volumes) -> None:
        """Raise :class:`InfeasibleVolumeError` unless every volume depletes in finite time."""
        v = np.asarray(volumes, dtype=float)
        if np.any(v < 0):
            raise InfeasibleVolumeError("volumes must be non-negative")
        if self.alpha == 0:
            return
        ratio = self.beta * self.gamma * v / self.alpha
        if np.any(ratio >= 1.0):
            raise InfeasibleVolumeError(
                f"beta*gamma*v/alpha = {ratio.max():.6g} >= 1: "
                "reserve cannot be depleted at this extraction rate"
            )


@dataclass(frozen=True)
class CostModel:
    c0: float
    c1: float

    def __post_init__(self):
        if self.c0 < 0 or self.c1 < 0:
            raise ValueError("investment cost parameters must be non-negative")


@dataclass(frozen=True, eq=False)
class TechnicalModel:
    """Reserve-volume chain with generator ``h_t A`` and ``h_t = a exp(-b t)``."""

    volumes: np.ndarray
    generator: np.ndarray
    learn_a: float
    learn_b: float
    _spectrum: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        v = _readonly(self.volumes)
        A = _readonly(self.generator)
        object.__setattr__(self, "volumes", v)
        object.__setattr__(self, "generator", A)
        m = v.size
        if v.ndim != 1 or m % 2 != 1:
            raise ValueError(f"need an odd number of volume states, got {m}")
        if A.shape != (m, m):
            raise ValueError(f"generator shape {A.shape} does not match {m} volumes")
        if m > 1 and np.any(np.diff(v) <= 0):
            raise ValueError("volumes must be strictly increasing")
        mid = v[m // 2]
        scale = max(abs(mid), 1.0)
        if not np.allclose(v - mid, -(v - mid)[::-1], atol=1e-12 * scale, rtol=0):
            raise ValueError("volumes must be symmetric about the mid-state")
        rate_scale = max(np.abs(A).max(), 1.0)
        if np.any(np.abs(A.sum(axis=1)) > 1e-10 * rate_scale):
            raise ValueError("generator rows must sum to zero")
        off = A - np.diag(np.diag(A))
        if np.any(off < 0):
            raise ValueError("generator off-diagonal entries must be non-negative")
        if np.any(np.triu(off, 2)) or np.any(np.tril(off, -2)):
            raise ValueError("generator must be tridiagonal")
        if not np.allclose(A, A[::-1, ::-1], atol=1e-12 * rate_scale, rtol=0):
            raise ValueError("generator rates must be symmetric across the mid-state")
        if not self.learn_a >= 0 or not self.learn_b >= 0:
            raise ValueError("learning parameters must be non-negative")

    @property
    def m(self) -> int:
        return self.volumes.size

    @property
    def mid(self) -> int:
        return self.m // 2

    @property
    def learns(self) -> bool:
        return self.learn_b > 0

    def learning_rate(self, t):
        return self.learn_a * np.exp(-self.learn_b * np.asarray(t, dtype=float))

    def clock(self, t):
        """Integrated learning rate from 0 to ``t``."""
        t = np.asarray(t, dtype=float)
        if self.learn_b == 0:
            return self.learn_a * t
        return self.learn_a / self.learn_b * -np.expm1(-self.learn_b * t)

    def remaining_clock(self, t):
        """Integrated learning rate from ``t`` to infinity (infinite when ``b = 0``)."""
        if self.learn_b == 0:
            return np.inf
        return self.learn_a / self.learn_b * np.exp(-self.learn_b * t)

    @cached_property
    def invariant_distribution(self) -> np.ndarray:
        m = self.m
        if m == 1:
            return _readonly([1.0])
        A = self.generator
        # birth-death chain: detailed balance gives the law directly
        ratios = A[:-1, 1:].diagonal() / A[1:, :-1].diagonal()
        w = np.concatenate([[1.0], np.cumprod(ratios)])
        return _readonly(w / w.sum())

    def _eig(self):
        if "eig" not in self._spectrum:
            pi = self.invariant_distribution
            d = np.sqrt(pi)
            S = d[:, None] * self.generator / d[None, :]
            S = 0.5 * (S + S.T)
            lam, Q = np.linalg.eigh(S)
            left = Q / d[:, None]
            right = Q.T * d[None, :]
            cond = d.max() / d.min()
            self._spectrum["eig"] = (lam, left, right, cond)
        return self._spectrum["eig"]

    def transition(self, c: float) -> np.ndarray:
        """``exp(c A)`` for ``c >= 0``; ``c = inf`` returns the invariant-law limit."""
        if c < 0:
            raise ValueError("matrix exponential argument must be non-negative")
        m = self.m
        if np.isinf(c):
            return np.tile(self.invariant_distribution, (m, 1))
        if c == 0 or m == 1:
            return np.eye(m)
        lam, left, right, cond = self._eig()
        if cond > 1e6:
            return expm(c * self.generator)
        P = (left * np.exp(c * lam)[None, :]) @ right
        np.clip(P, 0.0, None, out=P)
        return P / P.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Spatial grid in the log-deviation ``x`` and the admissible exercise dates."""

    x_half_width: float
    n_points: int
    exercise_dates: np.ndarray
    quadrature_points: int = 64

    def __post_init__(self):
        dates = _readonly(self.exercise_dates)
        object.__setattr__(self, "exercise_dates", dates)
        n = int(self.n_points)
        if n < 4 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two, got {self.n_points}")
        if not self.x_half_width > 0:
            raise ValueError("x_half_width must be positive")
        if dates.size == 0:
            raise ValueError("at least one exercise date is required")
        if dates[0] != 0 or np.any(np.diff(dates) <= 0):
            raise ValueError("exercise dates must start at 0 and increase strictly")
        if self.quadrature_points < 1:
            raise ValueError("quadrature_points must be positive")

    @classmethod
    def uniform(cls, horizon, n_steps, x_half_width, n_points=4096, quadrature_points=64):
        return cls(
            x_half_width=x_half_width,
            n_points=n_points,
            exercise_dates=np.linspace(0.0, horizon, n_steps + 1),
            quadrature_points=quadrature_points,
        )

    @property
    def x_grid(self) -> np.ndarray:
        return np.linspace(-self.x_half_width, self.x_half_width, self.n_points)

    @property
    def horizon(self) -> float:
        return float(self.exercise_dates[-1])


def forward_price(t, x, u, market: MarketModel):
    """Risk-neutral expectation of ``S_u`` given ``X_t = x``."""
    tau = np.asarray(u, dtype=float) - np.asarray(t, dtype=float)
    if np.any(tau < 0):
        raise ValueError("forward maturity u must not precede t")
    k = market.kappa
    return np.exp(
        market.theta
        + np.exp(-k * tau) * x
        + market.sigma**2 / (4 * k) * -np.expm1(-2 * k * tau)
    )


def depletion_time(v, plan: ExtractionPlan):
    """Time needed to extract ``gamma * v`` at the decaying rate ``g``."""
    plan.check_volumes(v)
    v = np.asarray(v, dtype=float)
    if plan.alpha == 0:
        if np.any(v > 0):
            raise InfeasibleVolumeError("zero extraction rate never depletes a positive volume")
        return np.zeros_like(v)[()]
    target = plan.gamma * v / plan.alpha
    if plan.beta == 0:
        return target
    return -np.log1p(-plan.beta * target) / plan.beta


def extraction_rate(s, plan: ExtractionPlan):
    """``g`` as a function of time since extraction started."""
    return plan.alpha * np.exp(-plan.beta * np.asarray(s, dtype=float))


def limit_transition(t: float, tech: TechnicalModel) -> np.ndarray:
    """Law of the eventual volume state given the state at ``t`` (rows sum to one)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return tech.transition(tech.remaining_clock(t))


def cash_flow_values(x, market: MarketModel, plan: ExtractionPlan, volumes, n_nodes=64):
    """Discounted extraction value for each known volume, shape ``(len(volumes), len(x))``.

    The integrand depends on time only through ``u - t``, so these values
    do not depend on the investment date.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    volumes = np.atleast_1d(np.asarray(volumes, dtype=float))
    out = np.zeros((volumes.size, x.size))
    if plan.alpha == 0:
        return out
    durations = np.atleast_1d(depletion_time(volumes, plan))
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    k = market.kappa
    for j, dur in enumerate(durations):
        if dur <= 0:
            continue
        half = 0.5 * dur
        s = plan.epsilon + half * (nodes + 1.0)
        w = half * weights * np.exp(-market.rho * s) * extraction_rate(s - plan.epsilon, plan)
        log_fwd = market.theta + market.sigma**2 / (4 * k) * -np.expm1(-2 * k * s)
        fwd = np.exp(log_fwd[:, None] + np.exp(-k * s)[:, None] * x[None, :])
        out[j] = w @ (fwd - plan.c)
    return plan.volume_unit * out


def reserve_values(t, x, market, plan, tech: TechnicalModel, n_nodes=64):
    """Expected discounted reserve value for every regime, shape ``(m, len(x))``."""
    kernel = cash_flow_values(x, market, plan, tech.volumes, n_nodes)
    return limit_transition(t, tech) @ kernel


def reserve_value(t, x, regime, market, plan, tech: TechnicalModel, grid: GridSpec | None = None):
    """Expected discounted value of the reserve when investing at ``t`` in ``regime``."""
    if not 0 <= regime < tech.m:
        raise IndexError(f"regime {regime} outside 0..{tech.m - 1}")
    n = grid.quadrature_points if grid is not None else 64
    vals = reserve_values(t, x, market, plan, tech, n)[regime]
    return vals if np.ndim(x) else float(vals[0])


def investment_cost(regime, costs: CostModel, tech: TechnicalModel):
    if np.any(np.asarray(regime) < 0) or np.any(np.asarray(regime) >= tech.m):
        raise IndexError(f"regime {regime} outside 0..{tech.m - 1}")
    return costs.c0 + costs.c1 * tech.volumes[regime]


def investment_costs(costs: CostModel, tech: TechnicalModel) -> np.ndarray:
    return costs.c0 + costs.c1 * np.asarray(tech.volumes)
