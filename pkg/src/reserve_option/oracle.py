"""Brute-force validators for the Fourier pricer.

Monte-Carlo simulation of the spot and of the volume chain, a Monte-Carlo
reserve value, a Monte-Carlo European price, and a Crank-Nicolson lattice
for the Bermudan problem.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.linalg import solve_banded

from .fst import regime_coupler
from .model import (
    CostModel,
    ExtractionPlan,
    GridSpec,
    MarketModel,
    TechnicalModel,
    cash_flow_values,
    depletion_time,
    extraction_rate,
    forward_price,
    investment_costs,
    limit_transition,
)


class LatticeStabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    dt_sim: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")

    def rng(self):
        return np.random.default_rng(self.seed)

    def time_grid(self, horizon):
        n = max(1, math.ceil(horizon / self.dt_sim - 1e-12))
        return np.linspace(0.0, horizon, n + 1)


def simulate_ou(x0, horizon, market: MarketModel, sim: SimConfig, rng=None):
    """Exact OU transitions on ``sim.time_grid(horizon)``; shape ``(n_paths, n_steps + 1)``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    rng = sim.rng() if rng is None else rng
    times = sim.time_grid(horizon)
    out = np.empty((sim.n_paths, times.size))
    out[:, 0] = x0
    k = market.kappa
    for i, dt in enumerate(np.diff(times), start=1):
        decay = math.exp(-k * dt)
        sd = market.sigma * math.sqrt(-math.expm1(-2 * k * dt) / (2 * k))
        out[:, i] = decay * out[:, i - 1] + sd * rng.standard_normal(sim.n_paths)
    return out


def simulate_chain(z0, horizon, tech: TechnicalModel, sim: SimConfig, rng=None):
    """Event-driven paths of the volume chain, sampled on ``sim.time_grid(horizon)``.

    The inhomogeneous chain is the homogeneous chain with generator ``A``
    run on the clock ``int_0^t h_u du``.
    """
    if not 0 <= z0 < tech.m:
        raise IndexError(f"start state {z0} outside 0..{tech.m - 1}")
    rng = sim.rng() if rng is None else rng
    times = sim.time_grid(horizon)
    clocks = np.asarray(tech.clock(times), dtype=float)
    A = tech.generator
    rate = -np.diag(A)
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(rate > 0, np.append(A.diagonal(1), 0.0) / rate, 0.0)
        inv_rate = np.where(rate > 0, 1.0 / rate, np.inf)

    n = sim.n_paths
    out = np.empty((n, times.size), dtype=np.int64)
    state = np.full(n, z0, dtype=np.int64)
    out[:, 0] = z0
    next_jump = rng.exponential(size=n) * inv_rate[state]
    for i in range(1, times.size):
        target = clocks[i]
        idx = np.flatnonzero(next_jump <= target)
        # work on compact copies of the live paths, writing back as they finish
        z, nj = state[idx], next_jump[idx]
        while idx.size:
            z += 2 * (rng.random(z.size) < up[z]) - 1
            nj += rng.exponential(size=z.size) * inv_rate[z]
            live = nj <= target
            done = ~live
            state[idx[done]] = z[done]
            next_jump[idx[done]] = nj[done]
            idx, z, nj = idx[live], z[live], nj[live]
        out[:, i] = state
    return out


def _dcf_by_quad(t, x, v, market, plan):
    dur = float(depletion_time(v, plan))
    if dur == 0 or plan.alpha == 0:
        return 0.0
    start = t + plan.epsilon

    def integrand(u):
        return (
            math.exp(-market.rho * (u - t))
            * (forward_price(t, x, u, market) - plan.c)
            * extraction_rate(u - start, plan)
        )

    val, _ = integrate.quad(integrand, start, start + dur, epsabs=0.0, epsrel=1e-12, limit=200)
    return plan.volume_unit * val


def simulate_dcf(t, x, regime, market, plan: ExtractionPlan, tech: TechnicalModel, sim: SimConfig):
    """Monte-Carlo reserve value and its standard error.

    Only the eventual volume is random: it is drawn from the limit-law row
    of ``regime``, and the spot expectation inside the cash-flow integral is
    the forward price, integrated by adaptive quadrature.
    """
    plan.check_volumes(tech.volumes)
    rng = sim.rng()
    row = limit_transition(t, tech)[regime]
    draws = rng.choice(tech.m, size=sim.n_paths, p=row / row.sum())
    per_volume = np.array([_dcf_by_quad(t, x, v, market, plan) for v in tech.volumes])
    samples = per_volume[draws]
    if sim.n_paths == 1 or np.ptp(samples) == 0:
        se = 0.0
    else:
        se = samples.std(ddof=1) / math.sqrt(sim.n_paths)
    return float(samples.mean()), float(se)


def european_mc(regime, x0, market, plan, costs, tech, horizon, sim: SimConfig, n_interp=8193):
    """Monte-Carlo price at time 0 of investing only at ``horizon``.

    Returns ``(price, standard_error)``. The reserve value at the horizon is
    tabulated on a fine grid spanning twelve terminal standard deviations
    and interpolated at the simulated spots.
    """
    rng = sim.rng()
    one_step = SimConfig(sim.n_paths, horizon, sim.seed)
    xT = simulate_ou(x0, horizon, market, one_step, rng)[:, -1]
    zT = simulate_chain(regime, horizon, tech, one_step, rng)[:, -1]

    sd = max(market.stationary_std, 1e-12)
    lo, hi = min(xT.min(), -12 * sd), max(xT.max(), 12 * sd)
    table_x = np.linspace(lo, hi, n_interp)
    kernel = cash_flow_values(table_x, market, plan, tech.volumes)
    pv = limit_transition(horizon, tech) @ kernel - investment_costs(costs, tech)[:, None]

    payoff = np.empty(sim.n_paths)
    for k in np.unique(zT):
        sel = zT == k
        payoff[sel] = np.interp(xT[sel], table_x, pv[k])
    payoff = math.exp(-market.rho * horizon) * np.maximum(payoff, 0.0)
    return float(payoff.mean()), float(payoff.std(ddof=1) / math.sqrt(sim.n_paths))


def _generator_bands(x, market: MarketModel):
    """Banded form of ``L = -kappa x d/dx + sigma^2/2 d2/dx2``.

    Central differences, switching to upwinding where the cell Peclet number
    exceeds one; the end rows use the one-sided inward difference and no
    diffusion.
    """
    n = x.size
    dx = x[1] - x[0]
    drift = -market.kappa * x
    diff = 0.5 * market.sigma**2 / dx**2
    lower = np.full(n, diff)
    upper = np.full(n, diff)
    central = np.abs(drift) * dx <= market.sigma**2
    upper += np.where(central, drift / (2 * dx), np.where(drift > 0, drift / dx, 0.0))
    lower += np.where(central, -drift / (2 * dx), np.where(drift < 0, -drift / dx, 0.0))
    lower[0] = upper[-1] = 0.0
    upper[0] = max(drift[0], 0.0) / dx
    lower[-1] = max(-drift[-1], 0.0) / dx
    diag = -(lower + upper)
    bands = np.zeros((3, n))
    bands[0, 1:] = upper[:-1]
    bands[1] = diag
    bands[2, :-1] = lower[1:]
    return bands


def _apply_bands(bands, v):
    out = bands[1][:, None] * v
    out[:-1] += bands[0, 1:, None] * v[1:]
    out[1:] += bands[2, :-1, None] * v[:-1]
    return out


class _ThetaStep:
    def __init__(self, bands, dt, theta):
        self.bands, self.dt, self.theta = bands, dt, theta
        lhs = -theta * dt * bands
        lhs[1] += 1.0
        self.lhs = lhs

    def __call__(self, v):
        rhs = v
        if self.theta < 1:
            rhs = v + (1 - self.theta) * self.dt * _apply_bands(self.bands, v)
        return solve_banded((1, 1), self.lhs, rhs)


def lattice_bermudan(
    market: MarketModel,
    plan: ExtractionPlan,
    costs: CostModel,
    tech: TechnicalModel,
    grid: GridSpec,
    n_x: int = 2001,
    substeps: int = 4,
    theta: float = 0.5,
    exercisable=None,
    x_half_width=None,
    return_grid=False,
):
    """Finite-difference Bermudan value at ``t = 0, x = 0`` for every regime.

    Each interval between exercise dates is stepped with a theta scheme in
    ``x`` (Rannacher start: two implicit half steps) and then mixed across
    regimes with the interval's coupler.
    """
    if n_x % 2 != 1:
        raise ValueError("n_x must be odd so that x = 0 is a node")
    half = grid.x_half_width if x_half_width is None else x_half_width
    x = np.linspace(-half, half, n_x)
    times = grid.exercise_dates
    if exercisable is None:
        exercisable = np.ones(times.size, dtype=bool)
    exercisable = np.asarray(exercisable, dtype=bool)

    bands = _generator_bands(x, market)
    dx = x[1] - x[0]
    stiffness = np.abs(bands[1]).max()

    kernel = cash_flow_values(x, market, plan, tech.volumes, grid.quadrature_points)
    cost = investment_costs(costs, tech)[:, None]

    def exercise_value(i):
        if not exercisable[i]:
            return 0.0
        pv = limit_transition(times[i], tech) @ kernel - cost
        return math.exp(-market.rho * times[i]) * np.maximum(pv, 0.0)

    steppers = {}
    values = np.zeros((tech.m, n_x)) + exercise_value(times.size - 1)
    for i in range(times.size - 2, -1, -1):
        dt = (times[i + 1] - times[i]) / substeps
        key = round(dt, 14)
        if key not in steppers:
            if theta < 0.5 and (1 - 2 * theta) * dt * stiffness > 1:
                warnings.warn(
                    f"theta={theta} step {dt:.3g} exceeds the stability limit "
                    f"{1 / ((1 - 2 * theta) * stiffness):.3g} (dx={dx:.3g})",
                    LatticeStabilityWarning,
                    stacklevel=2,
                )
            steppers[key] = (_ThetaStep(bands, dt / 2, 1.0), _ThetaStep(bands, dt, theta))
        half_step, step = steppers[key]
        v = values.T
        v = half_step(half_step(v))
        for _ in range(substeps - 1):
            v = step(v)
        values = v.T
        if tech.m > 1:
            values = regime_coupler(times[i], times[i + 1], tech) @ values
        values = np.maximum(values, exercise_value(i))
    mid = n_x // 2
    if return_grid:
        return values[:, mid], x, values
    return values[:, mid]
