"""Game-value tables mu_i and the discretised sequence X-hat built from them.

Contexts are integer tuples (b, b', x, sigma, tau):
  b, b'  -- backup sums over the tuple set at rounds i and i-1 (B = b / |S|)
  x      -- previous game value as an index on the 1/(200r) grid
  sigma  -- running sum of squared steps as an index on the 1/(200r)^2 grid
  tau    -- trigger bit
Because x lives on the 1/(200r) grid, squared steps land exactly on the
1/(200r)^2 grid and sigma is an exact integer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..prob_core import GRID_EPS, SeedStream, as_rng
from ..protocol_core import ProtocolDef, TupleSet, backup_matrix, iter_backup_samples, run_honest

EXACT_LIMIT_BITS = 20


def jump_threshold(r: int) -> float:
    return 1.0 / (64.0 * math.sqrt(r))


def trigger_g(x, y, y_prime, no_jump, r: int):
    """no_jump if y or y' is within 1/(64 sqrt r) of x, else 0."""
    thr = jump_threshold(r)
    close = (np.abs(np.asarray(y) - x) < thr) | (np.abs(np.asarray(y_prime) - x) < thr)
    out = np.where(close, no_jump, 0)
    return int(out) if np.ndim(out) == 0 else out.astype(np.int8)


@dataclass
class RoundTable:
    """mu_i as sorted packed context codes with their values and counts."""

    codes: np.ndarray
    ctx: np.ndarray  # (K, 5) context rows
    vals: np.ndarray  # x indices
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def empty(cls) -> "RoundTable":
        z = np.zeros(0, np.int64)
        return cls(z, np.zeros((0, 5), np.int64), z, np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.codes)


@dataclass
class GameValueTable:
    r: int
    m: int  # |S|
    rounds: list  # rounds[i]: RoundTable for mu_i, i = 1..r (rounds[0] empty)
    budget: int
    exact: bool
    meta: dict = field(default_factory=dict)

    @property
    def delta(self) -> float:
        return 1.0 / (200 * self.r)

    @property
    def half(self) -> int:
        return 100 * self.r

    @property
    def mu(self) -> list:
        """Per-round dicts context -> x index (built on demand)."""
        return [{tuple(int(v) for v in c): int(x) for c, x in zip(rt.ctx, rt.vals)} for rt in self.rounds]

    @property
    def counts(self) -> list:
        return [{tuple(int(v) for v in c): (float(a), float(b)) for c, a, b in zip(rt.ctx, rt.p, rt.q)}
                for rt in self.rounds]

    def lookup(self, i: int, ctx: tuple) -> int:
        """mu_i(ctx); unseen contexts return the conditioning value x."""
        return int(self.lookup_many(i, np.array([ctx], dtype=np.int64))[0])

    def lookup_many(self, i: int, ctx: np.ndarray) -> np.ndarray:
        rt = self.rounds[i]
        q = _encode(ctx, self.m, self.r)
        if len(rt) == 0:
            return ctx[:, 2].copy()
        pos = np.searchsorted(rt.codes, q)
        pos_c = np.minimum(pos, len(rt) - 1)
        hit = (pos < len(rt)) & (rt.codes[pos_c] == q)
        return np.where(hit, rt.vals[pos_c], ctx[:, 2])

    def to_json(self) -> dict:
        return {
            "r": self.r, "m": self.m, "budget": self.budget, "exact": self.exact, "meta": self.meta,
            "mu": [[[*map(int, c), int(x), float(a), float(b)] for c, x, a, b in zip(rt.ctx, rt.vals, rt.p, rt.q)]
                   for rt in self.rounds],
        }

    @classmethod
    def from_json(cls, d: dict) -> "GameValueTable":
        rounds = []
        for rows in d["mu"]:
            if not rows:
                rounds.append(RoundTable.empty())
                continue
            arr = np.array(rows, dtype=float)
            ctx = arr[:, :5].astype(np.int64)
            codes = _encode(ctx, d["m"], d["r"])
            order = np.argsort(codes)
            rounds.append(RoundTable(codes[order], ctx[order], arr[order, 5].astype(np.int64),
                                     arr[order, 6], arr[order, 7]))
        return cls(d["r"], d["m"], rounds, d["budget"], d["exact"], d.get("meta", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def _radices(m: int, r: int):
    return (m + 1, m + 1, 200 * r + 1, r * (200 * r) ** 2 + 1, 2)


def _encode(ctx: np.ndarray, m: int, r: int) -> np.ndarray:
    rad = _radices(m, r)
    if sum(math.log2(b) for b in rad) >= 63:
        raise OverflowError("context space too large for packed keys")
    code = np.zeros(len(ctx), dtype=np.int64)
    for j, b in enumerate(rad):
        code = code * b + ctx[:, j]
    return code


def _round_index(p: np.ndarray, q: np.ndarray, r: int) -> np.ndarray:
    return np.floor(p / q * (200 * r) + GRID_EPS).astype(np.int64)


@dataclass
class XTrace:
    x: np.ndarray  # grid indices, shape (..., r+1)
    g: np.ndarray
    sos: np.ndarray  # 1/(200r)^2 grid indices
    r: int

    @property
    def values(self) -> np.ndarray:
        return self.x / (200.0 * self.r)

    @property
    def sos_values(self) -> np.ndarray:
        return self.sos / (200.0 * self.r) ** 2


def _step(table, i, b, bprev, x, sos, g, m, r, lookup):
    ctx = np.stack([b, bprev, x, sos, g], axis=1)
    xn = lookup(i, ctx)
    sos_n = sos + (xn - x) ** 2
    thr = jump_threshold(r)
    bi, bp = b / m, bprev / m
    xv = xn / (200.0 * r)
    close = (np.abs(bi - xv) < thr) | (np.abs(bp - xv) < thr)
    gn = np.where(close, g, 0)
    return xn, sos_n, gn


def eval_x(table: GameValueTable, traj) -> XTrace:
    """Run X-hat along backup-sum trajectories of shape (N, r+1) or (r+1,)."""
    b = np.asarray(traj, dtype=np.int64)
    single = b.ndim == 1
    b = np.atleast_2d(b)
    N, cols = b.shape
    r = table.r
    if cols != r + 1:
        raise ValueError(f"trajectory needs {r + 1} entries (rounds 0..r)")
    x = np.empty((N, r + 1), np.int64)
    g = np.empty((N, r + 1), np.int64)
    s = np.empty((N, r + 1), np.int64)
    x[:, 0], g[:, 0], s[:, 0] = table.half, 1, 0
    for i in range(1, r + 1):
        x[:, i], s[:, i], g[:, i] = _step(table, i, b[:, i], b[:, i - 1], x[:, i - 1], s[:, i - 1],
                                          g[:, i - 1], table.m, r, table.lookup_many)
    tr = XTrace(x, g, s, r)
    if single:
        return XTrace(x[0], g[0], s[0], r)
    return tr


def step_online(table: GameValueTable, i: int, b: int, bprev: int, x: int, sos: int, g: int):
    """One step of X-hat for a single execution (used by the attacker)."""
    ctx = (int(b), int(bprev), int(x), int(sos), int(g))
    xn = table.lookup(i, ctx)
    sos_n = sos + (xn - x) ** 2
    thr = jump_threshold(table.r)
    xv = xn / (200.0 * table.r)
    close = abs(b / table.m - xv) < thr or abs(bprev / table.m - xv) < thr
    return xn, sos_n, (g if close else 0)


def _fit_round(i, b, out, w, table: GameValueTable) -> RoundTable:
    """Replay rounds < i through the table, then count contexts at round i."""
    N = b.shape[0]
    r, m = table.r, table.m
    x = np.full(N, table.half, np.int64)
    sos = np.zeros(N, np.int64)
    g = np.ones(N, np.int64)
    for j in range(1, i):
        x, sos, g = _step(table, j, b[:, j], b[:, j - 1], x, sos, g, m, r, table.lookup_many)
    ctx = np.stack([b[:, i], b[:, i - 1], x, sos, g], axis=1)
    codes = _encode(ctx, m, r)
    uniq, first, inv = np.unique(codes, return_index=True, return_inverse=True)
    inv = inv.ravel()
    q = np.bincount(inv, weights=w, minlength=len(uniq))
    p = np.bincount(inv, weights=w * out, minlength=len(uniq))
    return RoundTable(uniq, ctx[first], _round_index(p, q, r), p, q)


def exact_trajectories(proto: ProtocolDef, S: TupleSet, limit_bits: int = EXACT_LIMIT_BITS):
    """Backup sums (2^bits, r+1) and outputs over the whole coin space."""
    if proto.coin_bits > limit_bits:
        raise ValueError(f"coin space 2^{proto.coin_bits} exceeds exact-mode limit 2^{limit_bits}")
    rows, outs = [], []
    for coins in proto.enumerate_coins(limit_bits):
        tr, out = run_honest(proto, coins)
        rows.append(backup_matrix(proto, coins, S, tr).sum(axis=0))
        outs.append(out)
    return np.array(rows, dtype=np.int64), np.array(outs, dtype=np.int64)


def sample_trajectories(proto: ProtocolDef, S: TupleSet, count: int, stream):
    bs, outs = [], []
    for b, out in iter_backup_samples(proto, S, count, stream):
        bs.append(b.sum(axis=1, dtype=np.int64))
        outs.append(out.astype(np.int64))
    if not bs:
        return np.zeros((0, proto.r + 1), np.int64), np.zeros(0, np.int64)
    return np.concatenate(bs), np.concatenate(outs)


def build_x(proto: ProtocolDef, S: TupleSet, N: int = 100_000, stream=None,
            exact: bool | None = None, fresh_per_round: bool = True) -> GameValueTable:
    """Construct mu_1..mu_r for tuple set S.

    Exact mode (coin space at most 2^20, or ``exact=True``) enumerates the
    coins; otherwise round i is fit on its own N sampled trajectories,
    replayed through the already fitted mu_{<i}.
    """
    if len(S) == 0:
        raise ValueError("empty tuple set")
    if exact is None:
        exact = proto.coin_bits <= EXACT_LIMIT_BITS
    table = GameValueTable(proto.r, len(S), [RoundTable.empty() for _ in range(proto.r + 1)],
                           0 if exact else N, exact, {"protocol": proto.describe(), "tuples": len(S)})
    if exact:
        b, out = exact_trajectories(proto, S)
        w = np.ones(len(out))
        for i in range(1, proto.r + 1):
            table.rounds[i] = _fit_round(i, b, out, w, table)
        return table
    if stream is None:
        raise ValueError("sampling mode needs a stream")
    base = stream if isinstance(stream, SeedStream) else SeedStream(int(as_rng(stream).integers(2 ** 62)))
    shared = None
    for i in range(1, proto.r + 1):
        if fresh_per_round:
            b, out = sample_trajectories(proto, S, N, base.derive(i))
        else:
            if shared is None:
                shared = sample_trajectories(proto, S, N, base.derive(0))
            b, out = shared
        table.rounds[i] = _fit_round(i, b, out, np.ones(len(out)), table)
    return table


def exact_conditional(table: GameValueTable, b: np.ndarray, out: np.ndarray, i: int,
                      weights: np.ndarray | None = None) -> dict:
    """E[out | context at round i] and its weight, over a trajectory
    population whose contexts are formed by replaying ``table``."""
    w = np.ones(len(out)) if weights is None else weights
    rt = _fit_round(i, b, out, w, table)
    return {tuple(int(v) for v in c): (a / q, q) for c, a, q in zip(rt.ctx, rt.p, rt.q)}


def quality_violation(table: GameValueTable, b: np.ndarray, out: np.ndarray,
                      weights: np.ndarray | None = None, cushion: float = 0.0) -> np.ndarray:
    """Per round i, Pr[X-hat_i outside E[out | context_i] +- 1/(200r)].

    The conditioning context is (B_i, B_{i-1}, X-hat_{i-1}, sos, G).
    With ``cushion`` = z > 0 a context fitted from q samples is also
    allowed z * sqrt(e(1-e)/q) of sampling error around its true mean e.
    """
    w = np.ones(len(out)) if weights is None else np.asarray(weights, float)
    tr = eval_x(table, b)
    delta = table.delta
    res = np.zeros(table.r + 1)
    for i in range(1, table.r + 1):
        ctx = np.stack([b[:, i], b[:, i - 1], tr.x[:, i - 1], tr.sos[:, i - 1], tr.g[:, i - 1]], axis=1)
        codes = _encode(ctx, table.m, table.r)
        uniq, inv = np.unique(codes, return_inverse=True)
        inv = inv.ravel()
        q = np.bincount(inv, weights=w, minlength=len(uniq))
        p = np.bincount(inv, weights=w * out, minlength=len(uniq))
        e = p / q
        tol = np.full(len(uniq), delta)
        if cushion > 0 and len(table.rounds[i]):
            rt = table.rounds[i]
            pos = np.clip(np.searchsorted(rt.codes, uniq), 0, len(rt.codes) - 1)
            fitted = np.where(rt.codes[pos] == uniq, rt.q[pos], 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                se = np.where(fitted > 0, np.sqrt(e * (1 - e) / fitted), 0.0)
            tol = tol + cushion * se
        bad = np.abs(tr.values[:, i] - e[inv]) > tol[inv] + 1e-12
        res[i] = float(np.sum(w * bad) / np.sum(w))
    return res
