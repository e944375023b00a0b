"""Martingale sequences, empirical weak-martingale checks and gap statistics.

An ensemble is an (m, r+1) array; row j holds X_0..X_r of one draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .prob_core import as_rng, grid_index, sos_grid
from .stats import wilson_interval

SOS_THRESHOLD = 1.0 / 16.0
GAP_PROB = 1.0 / 20.0


def as_ensemble(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValueError("ensemble must be (sequences, r+1)")
    if np.any(arr < -1e-12) or np.any(arr > 1 + 1e-12):
        raise ValueError("sequence entries must lie in [0, 1]")
    return arr


def diffs(x) -> np.ndarray:
    """Y_i = X_i - X_{i-1}, i = 1..r."""
    x = np.asarray(x, dtype=float)
    return np.diff(x, axis=-1)


def sum_of_squares(x) -> np.ndarray | float:
    y = diffs(x)
    out = np.sum(y * y, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def running_sos(x) -> np.ndarray:
    """Column i is sum_{j<=i} Y_j^2, with column 0 equal to 0."""
    y = diffs(x)
    sos = np.cumsum(y * y, axis=-1)
    pad = np.zeros(sos.shape[:-1] + (1,))
    return np.concatenate((pad, sos), axis=-1)


# Classification

@dataclass
class MartingaleReport:
    flavor: str
    delta_hat: float
    gamma_hat: float
    bins_used: int
    bins_sparse: int
    violating_bins: int
    inconclusive: bool
    delta_threshold: float
    z: float
    worst: dict = field(default_factory=dict)


def classify(ens, grid_step: float, flavor: str = "weak", delta_threshold: float | None = None,
             min_count: int = 30, alpha: float = 0.01) -> MartingaleReport:
    """Estimate how far an ensemble is from a (SoS-augmented) weak martingale.

    Histories are binned by round, by X_i snapped to ``grid_step`` and,
    for ``sos_weak``, by the running sum of squares snapped to the
    1/(200r)^2 grid. Inside each bin the mean increment estimates
    E[Y_{i+1} | context]. ``delta_hat`` is the largest absolute bin mean.
    A bin violates the threshold when its mean exceeds the threshold by
    more than z standard errors, where z is Bonferroni-corrected over bins
    at family level ``alpha``. ``gamma_hat`` is the fraction of sequences
    that visit a violating bin.
    """
    if flavor not in ("weak", "sos_weak"):
        raise ValueError(f"unknown flavor {flavor!r}")
    x = as_ensemble(ens)
    m, cols = x.shape
    r = cols - 1
    thr = 0.0 if delta_threshold is None else float(delta_threshold)
    if r == 0:
        return MartingaleReport(flavor, 0.0, 0.0, 0, 0, 0, True, thr, 0.0)

    y = diffs(x)
    xi = grid_index(x[:, :-1], grid_step)
    rounds = np.broadcast_to(np.arange(r, dtype=np.int64), (m, r))
    keys = [rounds, xi]
    if flavor == "sos_weak":
        sos = running_sos(x)[:, :-1]
        keys.append(grid_index(sos, sos_grid(r).step))
    code, uniq_rows = _pack(keys)
    uniq, inv, counts = np.unique(code, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    uniq = uniq_rows(uniq)
    yv = y.ravel()
    sums = np.bincount(inv, weights=yv, minlength=len(uniq))
    sq = np.bincount(inv, weights=yv * yv, minlength=len(uniq))
    dense = counts >= min_count
    n_used = int(dense.sum())
    if n_used == 0:
        return MartingaleReport(flavor, 0.0, 0.0, 0, int(len(uniq)), 0, True, thr, 0.0)

    mean = sums / counts
    var = np.maximum(sq / counts - mean * mean, 0.0)
    se = np.sqrt(var / np.maximum(counts - 1, 1))
    z = NormalDist().inv_cdf(1.0 - alpha / (2.0 * n_used))
    excess = np.abs(mean) - thr
    violating = dense & (excess > z * se) & (excess > 0)

    dev = np.where(dense, np.abs(mean), 0.0)
    worst_idx = int(np.argmax(dev))
    worst = {"round": int(uniq[worst_idx, 0]), "count": int(counts[worst_idx]),
             "mean_increment": float(mean[worst_idx]), "se": float(se[worst_idx])}

    bad_hist = violating[inv].reshape(m, r).any(axis=1)
    return MartingaleReport(
        flavor=flavor,
        delta_hat=float(dev.max()),
        gamma_hat=float(bad_hist.mean()),
        bins_used=n_used,
        bins_sparse=int(len(uniq) - n_used),
        violating_bins=int(violating.sum()),
        inconclusive=False,
        delta_threshold=thr,
        z=float(z),
        worst=worst,
    )


def _pack(keys):
    """Mixed-radix code for non-negative integer key columns."""
    cols = [np.asarray(k, dtype=np.int64).ravel() for k in keys]
    radices = [int(c.max()) + 1 if c.size else 1 for c in cols]
    if sum(math.log2(b) for b in radices) < 62:
        code = np.zeros_like(cols[0])
        for c, b in zip(cols, radices):
            code = code * b + c

        def rows(u):
            out = np.empty((u.size, len(cols)), dtype=np.int64)
            rest = u.copy()
            for j in range(len(cols) - 1, -1, -1):
                out[:, j] = rest % radices[j]
                rest //= radices[j]
            return out

        return code, rows
    flat = np.stack(cols, axis=1)
    uniq, code = np.unique(flat, axis=0, return_inverse=True)
    return code.ravel(), lambda u: uniq[u]


@dataclass
class ExMachinaReport:
    lhs: float
    rhs: float
    se: float
    slack: float
    holds: bool


def check_ex_machina(ens, delta: float, z: float = 3.0) -> ExMachinaReport:
    """E[X_r^2 - X_0^2] in E[sum Y^2] +- 2 r delta, with a z-SE cushion."""
    x = as_ensemble(ens)
    m, cols = x.shape
    r = cols - 1
    left = x[:, -1] ** 2 - x[:, 0] ** 2
    right = sum_of_squares(x)
    right = np.atleast_1d(right)
    d = left - right
    se = float(d.std(ddof=1) / math.sqrt(m)) if m > 1 else float("inf")
    slack = 2.0 * r * delta
    holds = abs(float(d.mean())) <= slack + z * se
    return ExMachinaReport(float(left.mean()), float(right.mean()), se, slack, bool(holds))


@dataclass
class GapReport:
    r: int
    trials: int
    p_sos: float
    p_sos_ci: tuple
    p_jump: float
    p_jump_ci: tuple
    endpoint_violations: int

    def margin_se(self, which: str, bound: float = GAP_PROB) -> float:
        p = self.p_sos if which == "sos" else self.p_jump
        se = math.sqrt(p * (1 - p) / self.trials)
        if se == 0:
            return math.copysign(math.inf, p - bound) if p != bound else 0.0
        return (p - bound) / se


def gap_stats(ens) -> GapReport:
    """Frequencies of sum Y^2 >= 1/16 and of some |Y_i| >= 1/(4 sqrt r)."""
    x = as_ensemble(ens)
    m, cols = x.shape
    r = cols - 1
    y = diffs(x)
    sos = np.sum(y * y, axis=1)
    jump = np.max(np.abs(y), axis=1) >= 1.0 / (4.0 * math.sqrt(r)) - 1e-12 if r else np.zeros(m, bool)
    hit_sos = sos >= SOS_THRESHOLD - 1e-12
    ends = x[:, -1]
    bad_end = int(np.sum((np.abs(ends) > 1e-12) & (np.abs(ends - 1) > 1e-12)))
    bad_end += int(np.sum(np.abs(x[:, 0] - 0.5) > 1e-12))
    k_sos, k_jump = int(hit_sos.sum()), int(jump.sum())
    return GapReport(r, m, k_sos / m, wilson_interval(k_sos, m), k_jump / m,
                     wilson_interval(k_jump, m), bad_end)


def coupled_u_sequence(x) -> np.ndarray:
    """U_i = X_i while sum_{j<i} Y_j^2 <= 1/16, frozen afterwards."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    prior = running_sos(x2)
    # sum over j < i is column i-1 of the running sum
    ok = np.concatenate((np.ones((x2.shape[0], 1), bool), prior[:, :-1] <= SOS_THRESHOLD + 1e-15), axis=1)
    ok = np.logical_and.accumulate(ok, axis=1)
    last = np.where(ok, np.arange(x2.shape[1]), 0)
    last = np.maximum.accumulate(last, axis=1)
    u = np.take_along_axis(x2, last, axis=1)
    return u[0] if squeeze else u


# Generators

def majority_doob_table(r: int) -> list[np.ndarray]:
    """table[i][h] = Pr[majority of r fair coins is 1 | h heads in first i]."""
    need = r // 2 + 1
    out = []
    for i in range(r + 1):
        rem = r - i
        row = np.empty(i + 1)
        for h in range(i + 1):
            k = need - h
            if k <= 0:
                row[h] = 1.0
            elif k > rem:
                row[h] = 0.0
            else:
                row[h] = sum(math.comb(rem, j) for j in range(k, rem + 1)) / 2.0 ** rem
        out.append(row)
    return out


def majority_doob(r: int, trials: int, stream) -> np.ndarray:
    """Doob martingale of the majority of r fair coins (r odd)."""
    if r < 1 or r % 2 == 0:
        raise ValueError("majority-Doob needs odd r")
    rng = as_rng(stream)
    table = majority_doob_table(r)
    coins = rng.integers(0, 2, size=(trials, r), dtype=np.int8)
    heads = np.concatenate((np.zeros((trials, 1), np.int64), np.cumsum(coins, axis=1)), axis=1)
    x = np.empty((trials, r + 1))
    for i in range(r + 1):
        x[:, i] = table[i][heads[:, i]]
    return x


def drift_sequences(r: int, trials: int, stream, drift: float = 0.1) -> np.ndarray:
    """X_0 uniform on [0, 1 - r*drift], then X_i = X_{i-1} + drift."""
    if r * drift > 1:
        raise ValueError("drift too large for the unit interval")
    rng = as_rng(stream)
    x0 = rng.random(trials) * (1 - r * drift)
    return x0[:, None] + drift * np.arange(r + 1)[None, :]


def constant_sequences(r: int, trials: int, value: float = 0.5) -> np.ndarray:
    return np.full((trials, r + 1), float(value))


GENERATORS = {
    "majority-doob": majority_doob,
    "drift": drift_sequences,
}
