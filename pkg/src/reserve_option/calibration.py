"""Calibration of the reserve-volume chain.

The state grid and base generator are fitted to a discretised normal prior
through the chain's invariant law; the learning function ``h_t = a e^{-bt}``
is then fitted to the conditional variance from the mid-state at ``t = 0``
and at a horizon ``T'``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.optimize import bisect
from scipy.stats import norm

from .model import TechnicalModel, limit_transition

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Normal prior on the reserve volume and the variance it should shrink to."""

    mu: float
    sigma0_sq: float
    sigmaTp_sq: float
    t_prime: float
    m: int = 31
    n_sigmas: float = 4.0

    def __post_init__(self):
        if self.m < 3 or self.m % 2 != 1:
            raise ValueError(f"m must be odd and at least 3, got {self.m}")
        if not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be positive")
        if not 0 < self.sigmaTp_sq <= self.sigma0_sq:
            raise ValueError("need 0 < sigmaTp_sq <= sigma0_sq")
        if not self.t_prime > 0:
            raise ValueError("t_prime must be positive")
        if not self.n_sigmas > 0:
            raise ValueError("n_sigmas must be positive")

    @property
    def sigma0(self) -> float:
        return float(np.sqrt(self.sigma0_sq))


def build_state_grid(prior: PriorSpec) -> np.ndarray:
    """Volumes equally spaced over ``mu +/- n_sigmas * sigma0``."""
    half = prior.n_sigmas * prior.sigma0
    if prior.mu - half <= 0:
        raise ValueError(
            f"lowest volume {prior.mu - half:.6g} is not positive; reduce n_sigmas"
        )
    k = np.arange(prior.m)
    v = prior.mu - half + k * (2 * half / (prior.m - 1))
    # exact mid-state and exact mirror symmetry despite rounding
    L = prior.m // 2
    v[L] = prior.mu
    v[L + 1 :] = 2 * prior.mu - v[:L][::-1]
    return v


def discretized_prior(prior: PriorSpec, volumes) -> np.ndarray:
    """Normal masses of the cells between neighbouring volumes, renormalised.

    Edge cells extend half a grid step beyond the outermost volumes.
    """
    v = np.asarray(volumes, dtype=float)
    mids = 0.5 * (v[1:] + v[:-1])
    lo = 0.5 * (v[0] + (v[0] - (v[1] - v[0])))
    hi = 0.5 * (v[-1] + (v[-1] + (v[-1] - v[-2])))
    edges = np.concatenate([[lo], mids, [hi]])
    cdf = norm.cdf(edges, loc=prior.mu, scale=prior.sigma0)
    p = np.diff(cdf)
    # symmetric by construction; average the mirror images to remove rounding
    p = 0.5 * (p + p[::-1])
    return p / p.sum()


def build_generator(lambdas, m: int) -> np.ndarray:
    """Symmetric tridiagonal generator from the rates ``lambda_1..lambda_{L+1}``.

    Row ``k`` (0-based, ``k <= L``) jumps to each neighbour at rate
    ``lambdas[k]``; rows above the mid-state mirror those below it. The two
    edge rows have a single neighbour.
    """
    lam = np.asarray(lambdas, dtype=float)
    if m % 2 != 1 or lam.size != m // 2 + 1:
        raise ValueError(f"{m} states need {m // 2 + 1} rates, got {lam.size}")
    if np.any(lam <= 0):
        raise ValueError("rates must be positive")
    rates = np.concatenate([lam, lam[:-1][::-1]])
    A = np.zeros((m, m))
    idx = np.arange(m)
    A[idx[:-1], idx[:-1] + 1] = rates[:-1]
    A[idx[1:], idx[1:] - 1] = rates[1:]
    A[idx, idx] = -A.sum(axis=1)
    return A


def _invariant(A: np.ndarray) -> np.ndarray:
    m = A.shape[0]
    M = np.vstack([A.T, np.ones(m)])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    return pi


def calibrate_lambda(pi_target, tol=1e-10, max_iter=20) -> np.ndarray:
    """Rates whose generator has ``pi_target`` as invariant law, scaled so ``lambda_{L+1} = 1``.

    Detailed balance gives ``pi_k * lambda_k`` constant along the lower half,
    which is the starting point; a damped Newton iteration on the
    eigenproblem residual then polishes it.
    """
    pi = np.asarray(pi_target, dtype=float)
    m = pi.size
    if m % 2 != 1 or m < 3:
        raise ValueError("target law must have an odd number (>= 3) of states")
    if np.any(pi <= 0):
        raise ValueError("target law must be strictly positive")
    if not np.allclose(pi, pi[::-1], rtol=1e-12, atol=0):
        raise ValueError("target law must be symmetric")
    pi = pi / pi.sum()
    L = m // 2
    log_lam = np.log(pi[L]) - np.log(pi[: L + 1])

    def residual(ll):
        A = build_generator(np.exp(np.append(ll[:L], 0.0)), m)
        return _invariant(A)[:L] - pi[:L]

    for _ in range(max_iter):
        r = residual(log_lam)
        if np.abs(r).max() < 1e-15:
            break
        J = np.empty((L, L))
        h = 1e-7
        for i in range(L):
            step = np.zeros(L + 1)
            step[i] = h
            J[:, i] = (residual(log_lam + step) - r) / h
        delta = np.linalg.lstsq(J, -r, rcond=None)[0]
        damp = 1.0
        while damp > 1e-4:
            trial = log_lam.copy()
            trial[:L] += damp * delta
            if np.abs(residual(trial)).max() < np.abs(r).max():
                log_lam = trial
                break
            damp *= 0.5
        else:
            break
    lam = np.exp(log_lam)
    lam[L] = 1.0

    P = expm(build_generator(lam, m))
    res = np.abs(pi @ P - pi).max()
    if res > tol:
        raise CalibrationError(f"invariant-law residual {res:.3e} exceeds {tol:.0e}")
    return lam


def conditional_moments(t, tech: TechnicalModel, from_state=None):
    """Mean and variance of the eventual volume given the state at ``t``."""
    if from_state is None:
        from_state = tech.mid
    row = limit_transition(t, tech)[from_state]
    v = tech.volumes
    mean = row @ v
    return float(mean), float(row @ (v - mean) ** 2)


def _solve_clock(tech: TechnicalModel, target: float, xtol: float) -> float:
    """Smallest ``c`` with the mid-state variance under ``exp(cA)`` equal to ``target``."""
    v = tech.volumes
    pi = tech.invariant_distribution
    ceiling = pi @ (v - pi @ v) ** 2

    def var(c):
        row = tech.transition(c)[tech.mid]
        mean = row @ v
        return row @ (v - mean) ** 2 - target

    if target >= ceiling:
        raise CalibrationError(
            f"variance target {target:.6g} is not below the invariant-law variance "
            f"{ceiling:.6g}; widen the grid (n_sigmas) or lower the target"
        )
    hi = 1.0
    while var(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            raise CalibrationError("could not bracket the variance target")
    return bisect(var, 0.0, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=400)


def calibrate_learning(prior: PriorSpec, A, volumes, xtol=1e-12):
    """Learning-function parameters ``(a, b)`` matching the variance targets.

    Both targets depend on ``(a, b)`` only through the remaining clock
    ``a/b`` at ``t = 0`` and ``(a/b) e^{-b T'}`` at ``T'``; each is a
    monotone one-dimensional root problem.
    """
    if not prior.sigmaTp_sq < prior.sigma0_sq:
        raise CalibrationError("horizon variance must be strictly below the initial variance")
    tech = TechnicalModel(volumes, A, 1.0, 0.0)
    h0 = _solve_clock(tech, prior.sigma0_sq, xtol)
    h1 = _solve_clock(tech, prior.sigmaTp_sq, xtol)
    b = np.log(h0 / h1) / prior.t_prime
    return float(b * h0), float(b)


@dataclass(frozen=True)
class Calibration:
    tech: TechnicalModel
    prior: PriorSpec
    pi_target: np.ndarray
    lambdas: np.ndarray
    invariant_residual: float
    variance_t0: float
    variance_tprime: float
    seconds: float

    def report(self) -> dict:
        """JSON-ready audit record."""
        return {
            "volumes": self.tech.volumes.tolist(),
            "pi_target": self.pi_target.tolist(),
            "lambdas": self.lambdas.tolist(),
            "learn_a": self.tech.learn_a,
            "learn_b": self.tech.learn_b,
            "invariant_residual": self.invariant_residual,
            "variance_t0": self.variance_t0,
            "variance_t0_target": self.prior.sigma0_sq,
            "variance_tprime": self.variance_tprime,
            "variance_tprime_target": self.prior.sigmaTp_sq,
            "seconds": self.seconds,
        }


def calibrate(prior: PriorSpec, learning: bool = True) -> Calibration:
    """Full calibration from a prior; ``learning=False`` gives ``a = 1, b = 0``."""
    start = time.perf_counter()
    volumes = build_state_grid(prior)
    pi_target = discretized_prior(prior, volumes)
    lambdas = calibrate_lambda(pi_target)
    A = build_generator(lambdas, prior.m)
    if learning:
        a, b = calibrate_learning(prior, A, volumes)
    else:
        a, b = 1.0, 0.0
    tech = TechnicalModel(volumes, A, a, b)
    residual = float(np.abs(tech.invariant_distribution - pi_target).max())
    _, var0 = conditional_moments(0.0, tech)
    _, var1 = conditional_moments(prior.t_prime, tech)
    elapsed = time.perf_counter() - start
    log.debug("calibrated a=%.6g b=%.6g in %.3fs", a, b, elapsed)
    return Calibration(tech, prior, pi_target, lambdas, residual, var0, var1, elapsed)
