"""Fail-stop rushing adversaries built on tuple-set backup averages."""

from __future__ import annotations

import math

import numpy as np

from ..prob_core import LaplaceParam, as_rng, sample_laplace
from ..protocol_core import Abort, Adversary, ProtocolDef, RoundView, TupleSet, tuple_remove, tuple_select
from .gamevalue import GameValueTable, jump_threshold, step_online


class AttackConfigError(ValueError):
    """The attack cannot be instantiated for the given sets and party."""


def _sign(z: int) -> int:
    return 1 if z == 1 else -1


def _keep(S_h: TupleSet, h: int, rng) -> frozenset:
    """Corrupted survivors: a uniformly chosen tuple of S(h), minus h."""
    U = S_h.tuples[int(rng.integers(len(S_h)))]
    return U - {h}


class MartAttack(Adversary):
    """Martingale attack driven by the game-value sequence of ``S``.

    In engine round t = i + 1 (i = 1..r-1) the adversary has seen the
    honest round-t messages, so it knows B_i, B_{i+1} and X-hat_{i+1}.
    Before-send aborts leave the survivors at Bckp(U, i), after-send
    aborts at Bckp(U, i+1). Round 1 runs the initial comparison with 1/2.
    """

    kind = "mart"

    def __init__(self, S: TupleSet, S_prime: TupleSet, z: int, h: int, table: GameValueTable,
                 disabled: bool = False):
        if len(tuple_select(S, h)):
            raise AttackConfigError("S(h) must be empty")
        self.S_h = tuple_select(S_prime, h)
        if len(self.S_h) == 0:
            raise AttackConfigError(f"S'({h}) is empty")
        if table.m != len(S) or table.r < 1:
            raise AttackConfigError("game-value table was built for a different tuple set")
        self.S, self.z, self.h, self.table = S, int(z), int(h), table
        self.thr = math.inf if disabled else jump_threshold(table.r)
        self.s = _sign(self.z)

    def start(self, proto, honest, coins, stream):
        if frozenset(honest) != {self.h}:
            raise AttackConfigError("MartAttack corrupts everyone except h")
        self.rng = as_rng(stream)
        self.r = proto.r
        m = self.table.m
        self.b = [0] * (proto.r + 1)
        self.x = self.table.half
        self.sos = 0
        self.g = 1
        self.m = m
        self.trace = []
        self.decision = None

    @property
    def x_at_decision(self) -> float:
        """X-hat at the decision round J* (X-hat_r when no abort happened)."""
        if self.decision is not None:
            return self.decision["x_hat"]
        return self.x / (200.0 * self.r)

    def _abort(self, placement, i, xv):
        self.decision = {"i": i, "x_hat": xv, "placement": placement}
        return Abort(_keep(self.S_h, self.h, self.rng), placement)

    def on_round(self, view: RoundView):
        t = view.t
        bt = int(round(view.avg_backup(self.S, t) * self.m))
        self.b[t] = bt
        if t == 1:
            # X-hat_1 from B_1, B_0 = (all backups at round 0)
            self.b[0] = int(round(view.avg_backup(self.S, 0) * self.m))
            x1, sos1, g1 = step_online(self.table, 1, bt, self.b[0], self.x, self.sos, self.g)
            if self.s * (bt / self.m - 0.5) > self.thr:
                return self._abort("before", 0, x1 / (200.0 * self.r))
            self.x, self.sos, self.g = x1, sos1, g1
            self.trace.append(self.x)
            return None
        i = t - 1
        g_i = self.g
        x_next, sos_next, g_next = step_online(self.table, i + 1, bt, self.b[i], self.x, self.sos, self.g)
        xv = x_next / (200.0 * self.r)
        if g_i == 1:
            if self.s * (self.b[i] / self.m - xv) > self.thr:
                return self._abort("before", i, xv)
            if self.s * (bt / self.m - xv) > self.thr:
                return self._abort("after", i + 1, xv)
        self.x, self.sos, self.g = x_next, sos_next, g_next
        self.trace.append(self.x)
        return None


class DpAttack(Adversary):
    """Laplace-noised leave-h-out gap test; aborts before sending."""

    kind = "dp"

    def __init__(self, S1: TupleSet, S0: TupleSet, z: int, h: int, gamma: float, r: int,
                 lam: float | None = None, disabled: bool = False):
        self.h, self.z, self.gamma = int(h), int(z), float(gamma)
        self.S1h, self.S0h = tuple_remove(S1, h), tuple_remove(S0, h)
        if not len(self.S1h) or not len(self.S0h):
            raise AttackConfigError("S1 minus h and S0 minus h must be non-empty")
        self.S_h = tuple_select(S1 if z == 1 else S0, h)
        if not len(self.S_h):
            raise AttackConfigError(f"S_{z}({h}) is empty")
        if lam is None:
            lam = self.gamma / (4.0 * math.log2(r)) if r > 1 else self.gamma / 4.0
        self.lam = LaplaceParam(lam)
        self.disabled = disabled

    def start(self, proto, honest, coins, stream):
        if frozenset(honest) != {self.h}:
            raise AttackConfigError("DpAttack corrupts everyone except h")
        self.rng = as_rng(stream)
        self.gaps = []

    def on_round(self, view: RoundView):
        t = view.t
        gap = view.avg_backup(self.S1h, t) - view.avg_backup(self.S0h, t)
        nu = float(sample_laplace(self.lam, self.rng))
        self.gaps.append(gap)
        if not self.disabled and gap + nu > self.gamma:
            return Abort(_keep(self.S_h, self.h, self.rng), "before")
        return None


class SingAttack(Adversary):
    """Half-sample gap test against 3*gamma/4; keeps the unique tuple of S_z(h)."""

    kind = "sing"

    def __init__(self, S1: TupleSet, S0: TupleSet, z: int, h: int, gamma: float,
                 disabled: bool = False):
        self.h, self.z, self.gamma = int(h), int(z), float(gamma)
        self.S1, self.S0 = S1, S0
        self.S_h = tuple_select(S1 if z == 1 else S0, h)
        if len(self.S_h) != 1:
            raise AttackConfigError(f"|S_{z}({h})| = {len(self.S_h)}, expected 1")
        self.R1, self.R0 = tuple_remove(S1, h), tuple_remove(S0, h)
        if len(S1) // 2 < 1 or len(S0) // 2 < 1:
            raise AttackConfigError("tuple sets too small to halve")
        self.disabled = disabled

    def start(self, proto, honest, coins, stream):
        if frozenset(honest) != {self.h}:
            raise AttackConfigError("SingAttack corrupts everyone except h")
        self.rng = as_rng(stream)
        self.E1 = self._half(self.R1, len(self.S1) // 2)
        self.E0 = self._half(self.R0, len(self.S0) // 2)
        self.gaps = []

    def _half(self, R: TupleSet, size: int) -> TupleSet:
        size = min(size, len(R))
        idx = self.rng.choice(len(R), size=size, replace=False)
        return TupleSet([R.tuples[j] for j in sorted(idx)], R.k)

    def on_round(self, view: RoundView):
        t = view.t
        gap = view.avg_backup(self.E1, t) - view.avg_backup(self.E0, t)
        self.gaps.append(gap)
        if not self.disabled and gap > 0.75 * self.gamma:
            return Abort(self.S_h.tuples[0] - {self.h}, "before")
        return None


class CI93Attack(Adversary):
    """Transcript-conditioned oracle attack for tiny coin spaces.

    V_t = E[out | T_{<=t}] and W_t = E[Bckp({h}, t-1) | T_{<=t}] come from
    full enumeration. In round t, after seeing h's message, the adversary
    aborts everyone before sending when W_t beats V_t towards the target
    by at least 1/(2 sqrt r); h then completes alone from round t - 1.
    """

    kind = "ci93"
    LIMIT_BITS = 20

    def __init__(self, proto: ProtocolDef, z: int, h: int, threshold: float | None = None,
                 disabled: bool = False):
        if proto.coin_bits > self.LIMIT_BITS:
            raise AttackConfigError(f"coin space 2^{proto.coin_bits} too large for the exact oracle")
        self.proto, self.z, self.h = proto, int(z), int(h)
        if disabled:
            self.thr = math.inf
        else:
            self.thr = threshold if threshold is not None else 1.0 / (2.0 * math.sqrt(proto.r))
        self._build()

    def _build(self):
        from ..protocol_core import run_honest

        proto = self.proto
        alone = frozenset({self.h})
        val = [dict() for _ in range(proto.r + 1)]
        alt = [dict() for _ in range(proto.r + 1)]
        for coins in proto.enumerate_coins(self.LIMIT_BITS):
            tr, out = run_honest(proto, coins)
            for t in range(1, proto.r + 1):
                key = tr.key(t)
                a = val[t].setdefault(key, [0.0, 0])
                a[0] += out
                a[1] += 1
                b = alt[t].setdefault(key, [0.0, 0])
                b[0] += proto.residual_output(alone, coins, tr.prefix(t - 1), t - 1)
                b[1] += 1
        self.value = [{k: v[0] / v[1] for k, v in d.items()} for d in val]
        self.stay_value = [{k: v[0] / v[1] for k, v in d.items()} for d in alt]

    def start(self, proto, honest, coins, stream):
        if frozenset(honest) != {self.h}:
            raise AttackConfigError("CI93Attack corrupts everyone except h")

    def on_round(self, view: RoundView):
        t = view.t
        key = view.transcript_through(t).key(t)
        now, stay = self.value[t].get(key), self.stay_value[t].get(key)
        if now is None or stay is None:
            return None
        if _sign(self.z) * (stay - now) >= self.thr:
            return Abort(frozenset(), "before")
        return None


def half_sample_event_freq(proto: ProtocolDef, S1: TupleSet, S0: TupleSet, h: int, alpha: float,
                           trials: int, stream) -> tuple[float, int]:
    """Frequency of max_i |B^{E_z} - B^{S_z}| >= alpha/(8 sqrt n) for some z,
    with E_z a fresh random half of S_z minus h in every trial.

    Uses full-information backups, so it is a harness-side check of the
    SingAttack sampling step rather than something the adversary computes.
    """
    rng = as_rng(stream)
    union = TupleSet(list(S1.tuples) + [U for U in S0.tuples if U not in S1.as_set()], S1.k)
    idx1 = np.array([union.index_of(U) for U in S1])
    idx0 = np.array([union.index_of(U) for U in S0])
    b, _ = proto.sample_backups(union, trials, rng)
    b = b[:, :, 1:].astype(float)
    thr = alpha / (8.0 * math.sqrt(proto.n))
    hit = np.zeros(trials, dtype=bool)
    for idx, S in ((idx1, S1), (idx0, S0)):
        full = b[:, idx, :].mean(axis=1)
        pool = np.array([j for j, U in zip(idx, S) if h not in U])
        size = min(len(S) // 2, len(pool))
        keys = rng.random((trials, len(pool)))
        pick = pool[np.argsort(keys, axis=1)[:, :size]]
        half = np.take_along_axis(b, pick[:, :, None], axis=1).mean(axis=1)
        hit |= np.abs(half - full).max(axis=1) >= thr
    return float(hit.mean()), int(hit.sum())
