"""The oblivious sampling game and its reward bounds.

A hidden party h is drawn uniformly. In each round the player sees only
the leave-one-out mean s_i^{\\h} and may halt; the reward is s_J^h.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .prob_core import BOUND_SLACK, as_rng, laplace_from_uniform, laplace_tail


@dataclass(frozen=True)
class SamplingInstance:
    values: np.ndarray  # (r, n): values[i-1, h] = s_i^h
    gamma: float
    lam: float
    p: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("values must be an (r, n) matrix")
        if np.any(np.abs(v) > 1 + 1e-12):
            raise ValueError("values must lie in [-1, 1]")
        if not np.allclose(v[-1], v[-1, 0], atol=0, rtol=0):
            raise ValueError("last-round values must agree across parties")
        if not (0 <= self.p <= 0.5):
            raise ValueError("p must lie in [0, 1/2]")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def r(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def means(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def leave_out(self) -> np.ndarray:
        """(r, n) matrix of s_i^{\\h} = (s_i - p s_i^h) / (1 - p)."""
        return (self.means[:, None] - self.p * self.values) / (1.0 - self.p)

    @property
    def sigma(self) -> np.ndarray:
        """sigma^h = max_i |s_i - s_i^h|."""
        return np.max(np.abs(self.means[:, None] - self.values), axis=0)


@dataclass
class Outcome:
    h: int
    J: int  # 1-based halting round
    reward: float


def adversarial_instance(r: int, tsh: float, sigma: float, gamma: float,
                         lam: float | None = None, p: float | None = None) -> SamplingInstance:
    """n = r-1 parties; party h sits sigma below tsh at round h only; s_r = gamma."""
    if r < 2:
        raise ValueError("need r >= 2")
    n = r - 1
    v = np.full((r, n), float(tsh))
    for h in range(n):
        v[h, h] = tsh - sigma
    v[-1, :] = gamma
    if lam is None:
        lam = default_lambda(gamma, r)
    if p is None:
        p = 1.0 / n if n >= 2 else 0.5
    return SamplingInstance(v, gamma, lam, p)


def default_lambda(gamma: float, r: int) -> float:
    return gamma / (4.0 * math.log2(r)) if r > 1 else gamma


def run_lapexp(inst: SamplingInstance, stream, h: int | None = None) -> Outcome:
    """One run of the game with the Laplace-noised threshold strategy."""
    rng = as_rng(stream)
    if h is None:
        h = int(rng.integers(inst.n))
    loo = inst.leave_out[:, h]
    for i in range(inst.r - 1):
        nu = laplace_from_uniform(rng.random(), inst.lam)
        if loo[i] + nu >= inst.gamma:
            return Outcome(h, i + 1, float(inst.values[i, h]))
    return Outcome(h, inst.r, float(inst.values[-1, h]))


def run_lapexp_batch(inst: SamplingInstance, trials: int, stream, h=None):
    """Vectorised runs. Returns arrays (h, J, reward).

    Draws r-1 noise values per run up front; the halting rule reads the
    same values as run_lapexp but the stream is consumed differently.
    """
    rng = as_rng(stream)
    if h is None:
        hs = rng.integers(inst.n, size=trials)
    else:
        hs = np.full(trials, int(h))
    J = np.full(trials, inst.r)
    if inst.r > 1:
        nu = laplace_from_uniform(rng.random((trials, inst.r - 1)), inst.lam)
        loo = inst.leave_out[:-1, :].T[hs]
        cross = loo + nu >= inst.gamma
        any_c = cross.any(axis=1)
        J = np.where(any_c, np.argmax(cross, axis=1) + 1, inst.r)
    reward = inst.values[J - 1, hs]
    return hs, J, reward


def run_threshold(inst: SamplingInstance, tsh: float, leave_out_mean: bool = True, h: int = 0) -> Outcome:
    """Deterministic rule: halt at the first i < r whose mean reaches tsh."""
    stat = inst.leave_out[:, h] if leave_out_mean else inst.means
    for i in range(inst.r - 1):
        if stat[i] >= tsh - BOUND_SLACK:
            return Outcome(h, i + 1, float(inst.values[i, h]))
    return Outcome(h, inst.r, float(inst.values[-1, h]))


def threshold_reward(inst: SamplingInstance, tsh: float, leave_out_mean: bool = True) -> float:
    return float(np.mean([run_threshold(inst, tsh, leave_out_mean, h).reward for h in range(inst.n)]))


# Reward bounds

@dataclass
class BoundReport:
    similar: list
    nonsimilar: list
    v: np.ndarray
    lower_bound: float
    halt_check: bool | None = None


def _exp_term(gamma: float, lam: float) -> float:
    e = -gamma / (2.0 * lam)
    return 0.0 if e < -745 else math.exp(e)


def halting_bound(inst: SamplingInstance, halt_probs) -> BoundReport:
    """Lower bound on E[s_J^H] from per-party halting probabilities."""
    q = np.asarray(halt_probs, dtype=float)
    if q.shape != (inst.n,):
        raise ValueError("need one halting probability per party")
    sig = inst.sigma
    p, lam, g = inst.p, inst.lam, inst.gamma
    cut = lam * (1 - p) / p if p > 0 else math.inf
    sim = sig <= cut
    penalty = 40.0 * sig ** 2 * p / (lam * (1 - p))
    v = np.where(sim, q * (g / 2.0 - penalty), -4.0 * sig)
    bound = float(v.mean()) - inst.r * _exp_term(g, lam)
    # a similar party facing some early round at or above gamma halts often
    halt_check = None
    if inst.r > 1 and np.max(inst.means[:-1]) >= g:
        halt_check = bool(np.all(q[sim] >= 1.0 / 6.0 - BOUND_SLACK))
    return BoundReport(np.flatnonzero(sim).tolist(), np.flatnonzero(~sim).tolist(), v, bound, halt_check)


def estimate_halt_probs(inst: SamplingInstance, runs: int, stream) -> np.ndarray:
    rng = as_rng(stream)
    out = np.empty(inst.n)
    for h in range(inst.n):
        _, J, _ = run_lapexp_batch(inst, runs, rng, h=h)
        out[h] = np.mean(J != inst.r)
    return out


def exact_halt_probs(inst: SamplingInstance) -> np.ndarray:
    """Pr[J != r | H = h] in closed form from the Laplace tail."""
    loo = inst.leave_out[:-1, :]
    stay = 1.0 - laplace_tail(inst.lam, inst.gamma - loo)
    return 1.0 - np.prod(stay, axis=0)


@dataclass
class DistributionBound:
    general: float
    simplified: float | None
    simplified_ok: bool
    warning: str = ""


def distribution_bound(alpha, beta, gamma, delta, lam, p, r) -> DistributionBound:
    """Distributional reward bound; the simplified form needs its parameter regime."""
    warn = ""
    if p > 0 and alpha > lam * (1 - p) / (2 * p):
        warn = "alpha exceeds lambda(1-p)/(2p); tail hypothesis out of range"
    penalty = 40.0 * alpha ** 2 * p / (lam * (1 - p)) if p > 0 else 0.0
    general = ((delta - beta / 2.0) * (gamma / 2.0 - penalty)) / 6.0 \
        - 168.0 * alpha * beta - 8.0 * alpha * beta * math.log2(1.0 / lam) \
        - (r / 2.0) * _exp_term(gamma, lam)
    simplified = None
    ok = False
    if r > 1 and p > 0:
        L = math.log2(r)
        ratio = math.sqrt((1 - p) / p)
        ok = (gamma >= 1.0 / (256.0 * math.sqrt(r)) - BOUND_SLACK
              and abs(lam - gamma / (4 * L)) <= 1e-12 * max(1.0, lam)
              and alpha <= gamma * math.sqrt(4 * (1 - p) / p) / (32 * L) + BOUND_SLACK
              and beta <= delta / (16 * ratio) + BOUND_SLACK)
        if ok:
            simplified = gamma * delta / 125.0 - 1.0 / (2 * r)
    return DistributionBound(general, simplified, ok, warn)


@dataclass
class TailReport:
    precondition: bool
    outlier_lhs: float | None
    outlier_rhs: float
    exsq_lhs: float | None
    exsq_rhs: float
    holds: bool | None
    worst_tail_ratio: float


def check_sigma_tail_bounds(values, probs, alpha, beta, lam, p) -> TailReport:
    """Check the two sigma-moment bounds given Pr[sigma >= rho alpha] <= beta/rho.

    ``values``/``probs`` describe a discrete distribution of sigma >= 0.
    """
    v = np.asarray(values, dtype=float)
    w = np.asarray(probs, dtype=float)
    if v.shape != w.shape or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
        raise ValueError("need a probability vector matching the support")
    cut = (1 - p) * lam / p
    out_rhs = 2 * alpha * beta * math.log2(1.0 / lam) + 2 * alpha * beta
    sq_rhs = 4 * (1 - p) * lam * alpha * beta / p

    # the tail is a step function, so checking at rho = max(1, v/alpha) suffices
    worst = 0.0
    for t in np.unique(np.concatenate(([alpha], v[v >= alpha]))):
        rho = max(1.0, t / alpha)
        tail = float(w[v >= rho * alpha - 1e-15].sum())
        worst = max(worst, tail / (beta / rho) if beta > 0 else (math.inf if tail > 0 else 0.0))
    pre = worst <= 1.0 + 1e-12
    if not pre:
        return TailReport(False, None, out_rhs, None, sq_rhs, None, worst)
    out_lhs = float(np.sum(w * v * (v >= cut)))
    sq_lhs = float(np.sum(w * v * v * ((v >= alpha) & (v <= cut))))
    holds = out_lhs <= out_rhs + BOUND_SLACK and sq_lhs <= sq_rhs + BOUND_SLACK
    return TailReport(True, out_lhs, out_rhs, sq_lhs, sq_rhs, bool(holds), worst)


def random_admissible_tail(stream, alpha_range=(1e-3, 0.05), support=8):
    """Random discrete sigma distribution plus (alpha, beta, lam, p) meeting the hypotheses."""
    rng = as_rng(stream)
    p = float(rng.uniform(0.01, 0.5))
    alpha = float(rng.uniform(*alpha_range))
    # need alpha <= lam (1-p) / (2p)
    lam = float(rng.uniform(2 * alpha * p / (1 - p), 0.5)) if 2 * alpha * p / (1 - p) < 0.5 else 0.5
    v = np.concatenate(([0.0], rng.uniform(0, 2, size=support)))
    w = rng.dirichlet(np.ones(v.size))
    beta = 0.0
    for t in v[v >= alpha]:
        beta = max(beta, (t / alpha) * float(w[v >= t].sum()))
    beta = max(beta, float(w[v >= alpha].sum()))
    return v, w, alpha, beta, lam, p
