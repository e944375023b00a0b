"""Randomness, Laplace noise, grids and Bernoulli first-success tools."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Slack used when snapping to a grid and when comparing against analytic bounds.
GRID_EPS = 1e-12
BOUND_SLACK = 1e-12


class SeedStream:
    """Deterministic random stream addressed by a master seed and a path.

    ``derive`` returns an independent child stream. The same
    (seed, path) pair always yields the same draws.
    """

    def __init__(self, master_seed: int, path: Sequence[int] = ()):
        self.master_seed = int(master_seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        self.rng = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *path: int) -> "SeedStream":
        return SeedStream(self.master_seed, self.path + tuple(int(p) for p in path))

    def uniform(self) -> float:
        return float(self.rng.random())

    def __repr__(self):
        return f"SeedStream({self.master_seed}, {self.path})"


def as_rng(stream) -> np.random.Generator:
    if isinstance(stream, SeedStream):
        return stream.rng
    if isinstance(stream, np.random.Generator):
        return stream
    return np.random.default_rng(stream)


# Laplace

@dataclass(frozen=True)
class LaplaceParam:
    lam: float

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError(f"Laplace scale must be positive, got {self.lam}")


def _scale(param) -> float:
    lam = param.lam if isinstance(param, LaplaceParam) else float(param)
    if not lam > 0:
        raise ValueError(f"Laplace scale must be positive, got {lam}")
    return lam


def laplace_from_uniform(u, lam: float):
    """Inverse CDF of Lap(lam). ``u = 0.5`` maps to 0."""
    u = np.asarray(u, dtype=float)
    # keep away from the endpoints so logs stay finite
    u = np.clip(u, 2.0 ** -60, 1.0 - 2.0 ** -53)
    lo = lam * np.log(2.0 * np.minimum(u, 0.5))
    hi = -lam * np.log(2.0 * (1.0 - np.maximum(u, 0.5)))
    out = np.where(u < 0.5, lo, hi)
    return float(out) if out.ndim == 0 else out


def sample_laplace(param, stream, size=None):
    """One uniform per draw, pushed through the inverse CDF."""
    lam = _scale(param)
    rng = as_rng(stream)
    u = rng.random() if size is None else rng.random(size)
    return laplace_from_uniform(u, lam)


def laplace_tail(lam: float, t):
    """Pr[Lap(lam) >= t]."""
    lam = _scale(lam)
    t = np.asarray(t, dtype=float)
    out = np.where(t >= 0, 0.5 * np.exp(-np.abs(t) / lam), 1.0 - 0.5 * np.exp(-np.abs(t) / lam))
    return float(out) if out.ndim == 0 else out


@dataclass
class RatioCheck:
    p: float
    p_prime: float
    eps: float
    holds: bool
    in_regime: bool


def check_laplace_ratio(gamma: float, gamma_p: float, lam: float) -> RatioCheck:
    """Check p'/p and p/p' lie in 1 +- 5|eps| for the shifted Laplace tails.

    Here p = Pr[Lap >= gamma * lam], p' = Pr[Lap >= gamma' * lam] and
    eps = gamma' - gamma. Outside |eps| <= 1 the statement says nothing and
    ``in_regime`` is False.
    """
    p = laplace_tail(lam, gamma * lam)
    pp = laplace_tail(lam, gamma_p * lam)
    eps = gamma_p - gamma
    band = 5.0 * abs(eps) + BOUND_SLACK
    holds = abs(pp / p - 1.0) <= band and abs(p / pp - 1.0) <= band
    return RatioCheck(p, pp, eps, bool(holds), abs(eps) <= 1.0)


# Grids

def round_down(x, delta: float):
    """Largest multiple of ``delta`` not exceeding x (with tiny snap)."""
    if not delta > 0:
        raise ValueError("grid step must be positive")
    x = np.asarray(x, dtype=float)
    out = np.floor(x / delta + GRID_EPS) * delta
    return float(out) if out.ndim == 0 else out


def grid_index(x, delta: float):
    """Index k of ``round_down(x, delta) = k * delta``."""
    x = np.asarray(x, dtype=float)
    out = np.floor(x / delta + GRID_EPS).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Grid:
    step: float
    upper: float

    def snap(self, x):
        return round_down(x, self.step)

    def index(self, x):
        return grid_index(x, self.step)

    @property
    def size(self) -> int:
        return int(math.floor(self.upper / self.step + GRID_EPS)) + 1


def x_grid(r: int) -> Grid:
    """Game-value grid of step 1/(200r) on [0, 1]."""
    return Grid(1.0 / (200 * r), 1.0)


def sos_grid(r: int) -> Grid:
    """Sum-of-squares grid of step 1/(200r)^2 on [0, r]."""
    return Grid(1.0 / (200 * r) ** 2, float(r))


# Bernoulli first-success distributions

def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("need a non-empty 1-d vector of probabilities")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    if p[-1] != 1.0:
        raise ValueError("last success probability must be exactly 1")
    return p


def first_success_dist(p) -> np.ndarray:
    """q_i = p_i * prod_{j<i} (1 - p_j); sums to 1 because p_r = 1."""
    p = _check_probs(p)
    survive = np.concatenate(([1.0], np.cumprod(1.0 - p)[:-1]))
    return p * survive


def ratio_eps(p, p_prime) -> float:
    """Smallest eps with p'/p, p/p', (1-p')/(1-p), (1-p)/(1-p') in 1 +- eps.

    0/0 counts as ratio 1. A positive number over zero has no finite eps
    and raises ValueError.
    """
    p = np.asarray(p, dtype=float)
    pp = np.asarray(p_prime, dtype=float)
    eps = 0.0
    for a, b in ((p, pp), (1 - p, 1 - pp)):
        for num, den in ((a, b), (b, a)):
            zero_den = den == 0
            if np.any(zero_den & (num != 0)):
                raise ValueError("ratio precondition unsatisfiable: x/0 with x > 0")
            ok = ~zero_den
            if np.any(ok):
                eps = max(eps, float(np.max(np.abs(num[ok] / den[ok] - 1.0))))
    return eps


@dataclass
class LemmaReport:
    eps: float
    a1: bool
    active: bool
    per_index: bool
    total: bool
    a1_residual: float
    worst_active: float
    worst_per_index: float
    worst_total: float

    @property
    def holds(self) -> bool:
        return self.a1 and self.active and self.per_index and self.total


def verify_bernoulli_lemmas(p, p_prime) -> LemmaReport:
    """Evaluate the first-success lemmas on one pair of sequences.

    Reported ``worst_*`` values are max(lhs - rhs); non-positive means
    the inequality holds.
    """
    p = _check_probs(p)
    pp = _check_probs(p_prime)
    if p.shape != pp.shape:
        raise ValueError("sequences must have equal length")
    eps = ratio_eps(p, pp)
    q = first_success_dist(p)
    qp = first_success_dist(pp)

    a1_res = abs(float(np.sum(q * np.cumsum(p))) - 1.0)
    a1_res = max(a1_res, abs(float(np.sum(qp * np.cumsum(pp))) - 1.0))

    m = np.minimum(p, pp)
    surv_p = np.cumprod(1 - p)
    surv_pp = np.cumprod(1 - pp)
    surv_m = np.cumprod(1 - m)
    cum_m = np.cumsum(m)

    # survival products up to every index
    lhs = np.abs(surv_pp - surv_p)
    rhs = 3 * eps * surv_m * cum_m
    worst_active = float(np.max(lhs - rhs))

    prev_m = np.concatenate(([1.0], surv_m[:-1]))
    lhs_i = np.abs(q - qp)
    rhs_i = 3 * eps * m * prev_m * (1.0 / 3.0 + cum_m)
    worst_pi = float(np.max(lhs_i - rhs_i))

    tot = float(np.sum(np.abs(q[:-1] - qp[:-1])))
    worst_tot = tot - 4 * eps * (1.0 - q[-1])

    return LemmaReport(
        eps=eps,
        a1=a1_res <= 1e-12,
        active=worst_active <= BOUND_SLACK,
        per_index=worst_pi <= BOUND_SLACK,
        total=worst_tot <= BOUND_SLACK,
        a1_residual=a1_res,
        worst_active=worst_active,
        worst_per_index=worst_pi,
        worst_total=worst_tot,
    )


def hoeffding_halfsample_bound(n: int, eps: float) -> float:
    """Pr[|mean - mean over a random half| >= eps/sqrt(n)] <= 2 exp(-eps^2).

    Returned as a probability, so values above 1 are clamped.
    """
    if n < 2 or n % 2:
        raise ValueError("n must be a positive even integer")
    return min(1.0, 2.0 * math.exp(-eps * eps))


def halfsample_deviation_freq(x, eps: float, trials: int, stream) -> float:
    """Monte Carlo frequency of the half-sample deviation for 0/1 data."""
    x = np.asarray(x)
    n = x.size
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("expects 0/1 data")
    rng = as_rng(stream)
    ones = int(x.sum())
    half = rng.hypergeometric(ones, n - ones, n // 2, size=trials)
    dev = np.abs(ones / n - 2.0 * half / n)
    return float(np.mean(dev >= eps / math.sqrt(n) - BOUND_SLACK))


def random_bernoulli_pair(stream, r_max: int = 10, spread: float = 0.3):
    """Random (p, p') with p_r = p'_r = 1 and p'_i a multiplicative
    perturbation of p_i; near 1 the complement 1 - p_i is perturbed
    instead so every ratio stays finite."""
    rng = as_rng(stream)
    r = int(rng.integers(1, r_max + 1))
    p = rng.random(r) ** rng.uniform(0.5, 3.0)
    u = rng.uniform(-spread, spread, r)
    pp = p * np.exp(u)
    over = pp >= 1.0
    pp[over] = 1.0 - (1.0 - p[over]) * np.exp(-np.abs(u[over]))
    p[-1] = pp[-1] = 1.0
    return p, pp
