"""Bermudan option to invest, priced by Fourier space-time stepping.

Between exercise dates each regime's deflated value is a martingale, so the
backward step is a Gaussian convolution in the log-deviation ``x`` after
contracting the grid by ``exp(-kappa dt)`` (the moving frame that absorbs
mean reversion). Regimes are mixed by ``exp(int h ds A)``, which commutes
with the spatial step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .model import (
    CostModel,
    ExtractionPlan,
    GridSpec,
    MarketModel,
    TechnicalModel,
    cash_flow_values,
    investment_costs,
    limit_transition,
)


class GridWarning(UserWarning):
    """The spatial grid is too narrow for the state density."""


def psi(omega, market: MarketModel):
    return market.kappa - 0.5 * market.sigma**2 * np.asarray(omega, dtype=float) ** 2


def step_factor(omega, dt, market: MarketModel):
    """``exp(int_0^dt psi(omega e^{kappa s}) ds)`` in closed form."""
    k = market.kappa
    omega = np.asarray(omega, dtype=float)
    return np.exp(k * dt - market.sigma**2 * omega**2 / (4 * k) * np.expm1(2 * k * dt))


def regime_coupler(t0, t1, tech: TechnicalModel) -> np.ndarray:
    if not t1 > t0:
        raise ValueError("coupler needs t0 < t1")
    return tech.transition(float(tech.clock(t1) - tech.clock(t0)))


def frequencies(x_grid) -> np.ndarray:
    dx = x_grid[1] - x_grid[0]
    return 2 * np.pi * np.fft.rfftfreq(x_grid.size, d=dx)


def propagate_interval(values, t0, t1, market, tech, x_grid, factor=step_factor):
    """Continuation values at ``t0+`` from values at ``t1``.

    ``values`` has shape ``(m, n)`` on ``x_grid``. ``factor`` is the
    frequency-domain multiplier; it is a parameter so validation can feed a
    deliberately wrong one.
    """
    dt = t1 - t0
    if not dt > 0:
        raise ValueError("propagation interval must have positive length")
    values = np.asarray(values, dtype=float)
    shrink = np.exp(-market.kappa * dt)
    # a spline is linear in the data, so the whole step stays linear
    contracted = CubicSpline(x_grid, values, axis=1)(x_grid * shrink)

    # remove the end-to-end ramp so the periodic extension is continuous;
    # a linear function is invariant under the symmetric Gaussian kernel
    width = x_grid[-1] - x_grid[0]
    slope = (contracted[:, -1] - contracted[:, 0]) / width
    ramp = contracted[:, :1] + slope[:, None] * (x_grid - x_grid[0])[None, :]
    spectra = np.fft.rfft(contracted - ramp, axis=1)

    # 1/shrink comes from rescaling the transform argument by e^{kappa dt}
    mult = factor(frequencies(x_grid), dt, market) * shrink
    if tech.m > 1:
        spectra = regime_coupler(t0, t1, tech) @ (spectra * mult[None, :])
        ramp = regime_coupler(t0, t1, tech) @ ramp
    else:
        spectra = spectra * mult[None, :]
    return np.fft.irfft(spectra, n=x_grid.size, axis=1) + ramp


def apply_exercise(continuation, t, payoff, market: MarketModel):
    """Pointwise max of continuation and the deflated, floored payoff ``P - I``."""
    return np.maximum(continuation, np.exp(-market.rho * t) * np.maximum(payoff, 0.0))


@dataclass
class ValueSurface:
    """Deflated values on (exercise date, regime, x).

    ``payoff`` holds the deflated, unfloored ``e^{-rho t}(P - I)`` (``-inf``
    on dates where exercise is not allowed) and ``continuation`` the
    deflated value of waiting (zero at the last date).
    """

    times: np.ndarray
    x_grid: np.ndarray
    continuation: np.ndarray
    payoff: np.ndarray
    theta: float
    rho: float

    @property
    def exercise(self) -> np.ndarray:
        """Deflated immediate-exercise value ``e^{-rho t}(P - I)_+``."""
        return np.maximum(self.payoff, 0.0)

    @property
    def values(self) -> np.ndarray:
        return np.maximum(self.continuation, self.exercise)

    def undeflated(self) -> np.ndarray:
        return self.values * np.exp(self.rho * self.times)[:, None, None]

    @property
    def spots(self) -> np.ndarray:
        return np.exp(self.theta + self.x_grid)

    def value_at(self, x=0.0, date_index=0, undeflated=True):
        """Per-regime value at ``x`` (cubic interpolation between nodes)."""
        v = np.maximum(self.continuation[date_index], np.maximum(self.payoff[date_index], 0.0))
        out = CubicSpline(self.x_grid, v, axis=1)(x)
        if undeflated:
            out = out * np.exp(self.rho * self.times[date_index])
        return out


def _check_grid(x_grid, payoff, market, horizon, tol=1e-3, outer=0.05):
    """Warn when more than ``tol`` of the payoff-weighted state density sits in the outer grid."""
    var = market.sigma**2 / (2 * market.kappa) * -np.expm1(-2 * market.kappa * horizon)
    if var <= 0:
        return
    dens = np.exp(-0.5 * x_grid**2 / var)
    mass = dens * np.abs(payoff).max(axis=0)
    total = mass.sum()
    if total <= 0:
        mass, total = dens, dens.sum()
    cut = outer * (x_grid[-1] - x_grid[0]) / 2
    edge = np.abs(x_grid) > x_grid[-1] - cut
    share = mass[edge].sum() / total
    if share > tol:
        warnings.warn(
            f"{share:.2%} of the payoff mass lies in the outer {outer:.0%} of the grid; "
            "increase x_half_width",
            GridWarning,
            stacklevel=3,
        )


def exercise_payoffs(market, plan, costs, tech, grid: GridSpec):
    """Undeflated ``P - I`` on every (date, regime, x), unfloored."""
    x = grid.x_grid
    kernel = cash_flow_values(x, market, plan, tech.volumes, grid.quadrature_points)
    cost = investment_costs(costs, tech)[:, None]
    out = np.empty((grid.exercise_dates.size, tech.m, x.size))
    if not tech.learns:
        pv = limit_transition(0.0, tech) @ kernel - cost
        out[:] = pv
        return out
    for i, t in enumerate(grid.exercise_dates):
        out[i] = limit_transition(t, tech) @ kernel - cost
    return out


def solve(
    market: MarketModel,
    plan: ExtractionPlan,
    costs: CostModel,
    tech: TechnicalModel,
    grid: GridSpec,
    exercisable=None,
    factor=step_factor,
) -> ValueSurface:
    """Backward induction over the exercise dates.

    ``exercisable`` is an optional boolean mask over ``grid.exercise_dates``
    (default: every date); dates where it is False are only propagated
    through.
    """
    plan.check_volumes(tech.volumes)
    times = grid.exercise_dates
    n_dates = times.size
    if exercisable is None:
        exercisable = np.ones(n_dates, dtype=bool)
    exercisable = np.asarray(exercisable, dtype=bool)
    if exercisable.shape != (n_dates,):
        raise ValueError("exercisable mask must match the exercise dates")
    if not exercisable.any():
        raise ValueError("no exercise date is allowed")

    x = grid.x_grid
    payoff = exercise_payoffs(market, plan, costs, tech, grid)
    _check_grid(x, payoff[-1], market, grid.horizon)

    payoff *= np.exp(-market.rho * times)[:, None, None]
    payoff[~exercisable] = -np.inf

    continuation = np.zeros_like(payoff)
    current = np.maximum(payoff[-1], 0.0)
    for i in range(n_dates - 2, -1, -1):
        cont = propagate_interval(current, times[i], times[i + 1], market, tech, x, factor)
        continuation[i] = cont
        # same as apply_exercise on the deflated payoff; skipped dates pass through
        current = np.maximum(cont, np.maximum(payoff[i], 0.0)) if exercisable[i] else cont
    return ValueSurface(times.copy(), x, continuation, payoff, market.theta, market.rho)


@dataclass
class ExerciseBoundary:
    """Critical spot per (date, regime); NaN where exercise never happens on the grid.

    ``pinned`` marks entries where the whole grid exercises, so the value is
    the lowest grid spot rather than a resolved boundary.
    """

    times: np.ndarray
    spots: np.ndarray
    pinned: np.ndarray

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.spots)


def extract_boundary(surface: ValueSurface, tol=1e-9) -> ExerciseBoundary:
    """Lowest spot from which exercising is optimal at every higher grid node.

    Exercise is optimal where the payoff is positive and at least the
    continuation, up to ``tol`` relative to the value scale at that date.
    The crossing is refined by linear interpolation of the unfloored
    exercise premium between the bracketing nodes.
    """
    pay, cont, x = surface.payoff, surface.continuation, surface.x_grid
    n_dates, m, _ = pay.shape
    spots = np.full((n_dates, m), np.nan)
    pinned = np.zeros((n_dates, m), dtype=bool)
    for i in range(n_dates):
        ex = pay[i]
        if np.all(np.isneginf(ex)):
            continue
        scale = max(np.abs(ex).max(), np.abs(cont[i]).max(), np.finfo(float).tiny)
        gap = ex - cont[i]
        exercised = (ex > 0) & (gap >= -tol * scale)
        for j in range(m):
            row = exercised[j]
            if not row[-1]:
                continue
            k = row.size - np.argmin(row[::-1]) if not row.all() else 0
            if k == 0:
                spots[i, j] = np.exp(surface.theta + x[0])
                pinned[i, j] = True
                continue
            g0, g1 = gap[j, k - 1], gap[j, k]
            w = g0 / (g0 - g1) if g1 != g0 else 1.0
            w = min(max(w, 0.0), 1.0)
            spots[i, j] = np.exp(surface.theta + x[k - 1] + w * (x[k] - x[k - 1]))
    return ExerciseBoundary(surface.times.copy(), spots, pinned)
