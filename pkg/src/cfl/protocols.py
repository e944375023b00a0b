"""Concrete protocols and the party-grouping reduction."""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np

from .prob_core import as_rng
from .protocol_core import (Coins, ProtocolDef, RestrictedCoins, Round, Transcript, TupleSet,
                            backup_matrix, run_honest)

_BIT = (b"\x00", b"\x01")


def _round_xor(rd: Round) -> int:
    v = rd.cache.get("xor")
    if v is None:
        acc = 0
        for m in rd.messages.values():
            acc ^= m[0] if m else 0
        v = rd.cache["xor"] = acc & 1
    return v


class XorRoundsProtocol(ProtocolDef):
    """Each round every alive party broadcasts a fresh bit; the round coin
    is their XOR. Survivors replace missing rounds by completion coins,
    each the XOR of the survivors' pre-sampled residual bits.

    Party coins: r message bits followed by r residual bits.
    """

    name = "xor-rounds"

    def __init__(self, n: int, r: int):
        super().__init__(n, r, coin_len=2 * r)

    def combine(self, c: np.ndarray) -> np.ndarray:
        """Output bit from round coins; ``c`` has shape (..., r)."""
        raise NotImplementedError

    def combine_counts(self, ones: np.ndarray, last: np.ndarray) -> np.ndarray | None:
        """Output from the number of one-coins and the last coin, when the
        combiner is symmetric; None otherwise."""
        return None

    def _sample_by_counts(self, c, e):
        count, m, r = e.shape
        pre = np.zeros((count, 1, r + 1), np.int64)
        pre[:, 0, 1:] = np.cumsum(c, axis=1)
        suf = np.zeros((count, m, r + 1), np.int64)
        suf[:, :, :r] = np.cumsum(e[:, :, ::-1], axis=2)[:, :, ::-1]
        last = np.empty((count, m, r + 1), np.uint8)
        last[:] = e[:, :, r - 1:r]
        last[:, :, r] = c[:, None, r - 1]
        return self.combine_counts(pre + suf, last)

    def next_message(self, party, rnd, own, transcript):
        return _BIT[int(own[rnd - 1])]

    def round_messages(self, parties, rnd, coins, transcript):
        if isinstance(coins, RestrictedCoins):
            col = coins.rows(list(parties))[:, rnd - 1] if len(parties) else []
        else:
            col = coins.bits[list(parties), rnd - 1] if len(parties) else []
        return dict(zip(parties, (_BIT[b] for b in col)))

    def _completion(self, coins: Coins, members) -> np.ndarray:
        rows = coins.rows(sorted(members))
        return np.bitwise_xor.reduce(rows[:, self.r:], axis=0)

    def residual_output(self, U, coins, transcript, i):
        if not U:
            raise ValueError("empty survivor set")
        c = np.empty(self.r, dtype=np.uint8)
        for t in range(i):
            c[t] = _round_xor(transcript.rounds[t])
        c[i:] = self._completion(coins, U)[i:]
        return int(self.combine(c))

    def _tuple_completion(self, coins: Coins, tuples: TupleSet) -> np.ndarray:
        key = ("completion", id(tuples))
        hit = coins.cache.get(key)
        if hit is not None and hit[0] is tuples:
            return hit[1]
        arr = tuples.array
        flat = coins.rows(arr.ravel())[:, self.r:].reshape(arr.shape[0], arr.shape[1], self.r)
        e = np.bitwise_xor.reduce(flat, axis=1)
        coins.cache[key] = (tuples, e)
        return e

    def backup_rows(self, coins, tuples, transcript, i):
        e = self._tuple_completion(coins, tuples)
        c = np.array([_round_xor(rd) for rd in transcript.rounds[:i]], dtype=np.uint8)
        full = np.concatenate((np.broadcast_to(c, (e.shape[0], i)), e[:, i:]), axis=1)
        return self.combine(full).astype(np.uint8)

    def sample_backups(self, tuples, count, stream):
        # Round coins are XORs of n fresh bits, hence uniform; only the
        # residual bits of parties appearing in the tuples are drawn.
        rng = as_rng(stream)
        arr = tuples.array
        m, k = arr.shape
        c = rng.integers(0, 2, size=(count, self.r), dtype=np.uint8)
        members, local = np.unique(arr.ravel(), return_inverse=True)
        res = rng.integers(0, 2, size=(count, len(members), self.r), dtype=np.uint8)
        e = np.bitwise_xor.reduce(res[:, local.ravel(), :].reshape(count, m, k, self.r), axis=2)
        fast = self._sample_by_counts(c, e)
        if fast is not None:
            return fast, self.combine(c).astype(np.uint8)
        out = np.empty((count, m, self.r + 1), dtype=np.uint8)
        for i in range(self.r + 1):
            full = np.concatenate((np.broadcast_to(c[:, None, :i], (count, m, i)), e[:, :, i:]), axis=2)
            out[:, :, i] = self.combine(full)
        return out, self.combine(c).astype(np.uint8)


class MajorityCoin(XorRoundsProtocol):
    """out = majority of the r round coins (r odd unless ``tiebreak``)."""

    name = "majority"

    def __init__(self, n: int, r: int, tiebreak: bool = False):
        if n < 2:
            raise ValueError("majority protocol needs n >= 2")
        if r % 2 == 0 and not tiebreak:
            raise ValueError("majority protocol needs odd r (or tiebreak=True)")
        super().__init__(n, r)
        self.tiebreak = tiebreak

    def combine(self, c):
        c = np.asarray(c)
        ones = c.sum(axis=-1, dtype=np.int64)
        out = (2 * ones > self.r).astype(np.uint8)
        if self.r % 2 == 0:
            tie = 2 * ones == self.r
            out = np.where(tie, c[..., -1], out).astype(np.uint8)
        return out

    def combine_counts(self, ones, last):
        out = (2 * ones > self.r).astype(np.uint8)
        if self.r % 2 == 0:
            out = np.where(2 * ones == self.r, last, out).astype(np.uint8)
        return out

    def describe(self):
        return {"name": self.name, "n": self.n, "r": self.r, "tiebreak": self.tiebreak}


class ParityCoin(XorRoundsProtocol):
    """out = XOR of the round coins."""

    name = "parity"

    def combine(self, c):
        return (np.asarray(c).sum(axis=-1, dtype=np.int64) & 1).astype(np.uint8)

    def combine_counts(self, ones, last):
        return (ones & 1).astype(np.uint8)


class NullProtocol(ProtocolDef):
    """Output fixed by shared setup randomness; every backup equals it."""

    name = "null"

    def __init__(self, n: int, r: int):
        super().__init__(n, r, coin_len=0, shared_len=1)

    def next_message(self, party, rnd, own, transcript):
        return b""

    def residual_output(self, U, coins, transcript, i):
        return int(coins.shared[0])

    def backup_rows(self, coins, tuples, transcript, i):
        return np.full(len(tuples), coins.shared[0], dtype=np.uint8)

    def sample_backups(self, tuples, count, stream):
        rng = as_rng(stream)
        s = rng.integers(0, 2, size=count, dtype=np.uint8)
        return np.broadcast_to(s[:, None, None], (count, len(tuples), self.r + 1)).copy(), s


class PlantedGap(ProtocolDef):
    """Test protocol: tuples touching ``marked`` back up to an independent
    shared bit in rounds 1..r-1, all other tuples back up to the output.
    """

    name = "planted"

    def __init__(self, n: int, r: int, marked):
        super().__init__(n, r, coin_len=0, shared_len=2)
        self.marked = frozenset(marked)

    def next_message(self, party, rnd, own, transcript):
        return b""

    def residual_output(self, U, coins, transcript, i):
        if 0 < i < self.r and frozenset(U) & self.marked:
            return int(coins.shared[1])
        return int(coins.shared[0])

    def backup_rows(self, coins, tuples, transcript, i):
        hit = np.array([bool(U & self.marked) for U in tuples], dtype=bool)
        if 0 < i < self.r:
            return np.where(hit, coins.shared[1], coins.shared[0]).astype(np.uint8)
        return np.full(len(tuples), coins.shared[0], dtype=np.uint8)

    def sample_backups(self, tuples, count, stream):
        rng = as_rng(stream)
        s = rng.integers(0, 2, size=(count, 2), dtype=np.uint8)
        hit = np.array([bool(U & self.marked) for U in tuples], dtype=bool)
        out = np.empty((count, len(tuples), self.r + 1), dtype=np.uint8)
        out[:] = s[:, 0, None, None]
        inner = np.where(hit[None, :], s[:, 1, None], s[:, 0, None])
        out[:, :, 1:self.r] = inner[:, :, None]
        return out, s[:, 0].copy()


# Scripted protocols

class ScriptedProtocol(ProtocolDef):
    """Table-driven protocol for tiny coin spaces.

    The coin index concatenates the parties' coin bits, party 0 first,
    most significant bit first. Backup tables are indexed by the full
    coin index; they act as an oracle, so it is the author's job to make
    Bckp(U, i) depend only on U's coins and the public transcript.
    """

    name = "scripted"

    def __init__(self, n, r, coin_len, out, backups, messages=None, source=None):
        super().__init__(n, r, coin_len)
        size = 2 ** (n * coin_len)
        self.out = np.asarray(out, dtype=np.uint8)
        if self.out.shape != (size,) or np.any(self.out > 1):
            raise ValueError(f"out table must hold {size} bits")
        self.backups: dict = {}
        for (U, i), tab in backups.items():
            U = frozenset(U)
            tab = np.asarray(tab, dtype=np.uint8)
            if not U or not U <= self.parties:
                raise ValueError(f"bad survivor set {sorted(U)}")
            if not 0 <= i <= r:
                raise ValueError(f"bad backup round {i}")
            if tab.shape != (size,) or np.any(tab > 1):
                raise ValueError(f"backup table for {sorted(U)}, {i} must hold {size} bits")
            if i == r and not np.array_equal(tab, self.out):
                raise ValueError("round-r backups must equal the output table")
            self.backups[(U, i)] = tab
        self.messages = messages or {}
        self.source = source

    def _index(self, coins: Coins) -> int:
        base = coins._base if isinstance(coins, RestrictedCoins) else coins
        idx = 0
        for b in base.bits.ravel():
            idx = (idx << 1) | int(b)
        return idx

    def _own_value(self, own) -> int:
        v = 0
        for b in own:
            v = (v << 1) | int(b)
        return v

    def next_message(self, party, rnd, own, transcript):
        tab = self.messages.get((party, rnd))
        if tab is not None:
            return bytes.fromhex(tab[self._own_value(own)])
        if rnd <= self.coin_len:
            return _BIT[int(own[rnd - 1])]
        return b""

    def residual_output(self, U, coins, transcript, i):
        U = frozenset(U)
        idx = self._index(coins)
        if i == self.r:
            return int(self.out[idx])
        tab = self.backups.get((U, i))
        if tab is None:
            raise KeyError(f"no backup table for survivors {sorted(U)} after round {i}")
        return int(tab[idx])

    def sample_backups(self, tuples, count, stream):
        # the tables are indexed by the coin index, so no transcript is needed
        rng = as_rng(stream)
        idx = rng.integers(0, 2 ** self.coin_bits, size=count)
        b = np.empty((count, len(tuples), self.r + 1), dtype=np.uint8)
        for j, U in enumerate(tuples.tuples):
            for i in range(self.r):
                tab = self.backups.get((frozenset(U), i))
                if tab is None:
                    raise KeyError(f"no backup table for survivors {sorted(U)} after round {i}")
                b[:, j, i] = tab[idx]
            b[:, j, self.r] = self.out[idx]
        return b, self.out[idx]

    def to_json(self) -> dict:
        return {
            "kind": "scripted",
            "n": self.n,
            "r": self.r,
            "coin_len": self.coin_len,
            "out": self.out.tolist(),
            "backups": [{"U": sorted(U), "i": i, "table": t.tolist()}
                        for (U, i), t in sorted(self.backups.items(), key=lambda kv: (sorted(kv[0][0]), kv[0][1]))],
            "messages": [{"party": j, "round": t, "table": tab} for (j, t), tab in sorted(self.messages.items())],
        }


def scripted(spec) -> ScriptedProtocol:
    """Build a scripted protocol from a dict, JSON text or a path."""
    source = None
    if isinstance(spec, (str, Path)) and Path(str(spec)).exists():
        source = str(spec)
        spec = json.loads(Path(spec).read_text())
    elif isinstance(spec, str):
        spec = json.loads(spec)
    try:
        n, r = int(spec["n"]), int(spec["r"])
        coin_len = int(spec.get("coin_len", 1))
        backups = {(tuple(e["U"]), int(e["i"])): e["table"] for e in spec.get("backups", [])}
        messages = {(int(e["party"]), int(e["round"])): e["table"] for e in spec.get("messages", [])}
        out = spec["out"]
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scripted protocol: {exc}") from exc
    return ScriptedProtocol(n, r, coin_len, out, backups, messages, source)


def tabulate(proto: ProtocolDef, limit_bits: int = 16) -> ScriptedProtocol:
    """Exhaustively tabulate a small protocol (all survivor sets, all rounds)."""
    if proto.shared_len:
        raise ValueError("tabulation needs per-party coins only")
    if proto.coin_bits > limit_bits:
        raise ValueError("coin space too large to tabulate")
    size = 2 ** proto.coin_bits
    subsets = [frozenset(c) for k in range(1, proto.n + 1) for c in itertools.combinations(range(proto.n), k)]
    out = np.empty(size, dtype=np.uint8)
    tabs = {(U, i): np.empty(size, dtype=np.uint8) for U in subsets for i in range(proto.r + 1)}
    for idx in range(size):
        coins = proto.coins_from_index(idx)
        tr, out[idx] = run_honest(proto, coins)
        for U in subsets:
            for i in range(proto.r + 1):
                tabs[(U, i)][idx] = proto.residual_output(U, coins, tr.prefix(i), i)
    msgs = {}
    for j in range(proto.n):
        for t in range(1, proto.r + 1):
            tab = []
            for v in range(2 ** proto.coin_len):
                own = np.array([(v >> (proto.coin_len - 1 - b)) & 1 for b in range(proto.coin_len)], np.uint8)
                tab.append(proto.next_message(j, t, own, Transcript()).hex())
            msgs[(j, t)] = tab
    return ScriptedProtocol(proto.n, proto.r, proto.coin_len, out,
                            {(tuple(sorted(U)), i): t for (U, i), t in tabs.items()}, msgs)


# Grouping

def _pack_messages(msgs) -> bytes:
    out = bytearray()
    for m in msgs:
        out += len(m).to_bytes(2, "big") + m
    return bytes(out)


def _unpack_messages(blob: bytes) -> list:
    out, pos = [], 0
    while pos < len(blob):
        ln = int.from_bytes(blob[pos:pos + 2], "big")
        out.append(blob[pos + 2:pos + 2 + ln])
        pos += 2 + ln
    return out


class GroupedProtocol(ProtocolDef):
    """n' = floor(n/s) virtual parties, each running a block of base parties.

    Blocks are consecutive; leftover base parties join the last block.
    """

    name = "grouped"

    def __init__(self, base: ProtocolDef, s: int):
        if s < 1 or (s > 1 and s >= base.n / 2):
            raise ValueError("group size must satisfy 1 <= s < n/2")
        nv = base.n // s
        blocks = [list(range(v * s, (v + 1) * s)) for v in range(nv)]
        blocks[-1].extend(range(nv * s, base.n))
        self.base, self.s = base, s
        self.blocks = [tuple(b) for b in blocks]
        width = max(len(b) for b in blocks) * base.coin_len
        super().__init__(nv, base.r, width, base.shared_len)

    def expand(self, U) -> frozenset:
        return frozenset(j for v in U for j in self.blocks[v])

    def _base_coins(self, coins: Coins) -> Coins:
        hit = coins.cache.get("base")
        if hit is not None:
            return hit
        L = self.base.coin_len
        if isinstance(coins, RestrictedCoins):
            full = coins._base
            visible = [v for v in range(self.n) if coins._mask[v]]
            inner = self._base_coins(full)
            res = RestrictedCoins(inner, self.expand(visible))
        else:
            bits = np.zeros((self.base.n, L), dtype=np.uint8)
            for v, blk in enumerate(self.blocks):
                for pos, j in enumerate(blk):
                    bits[j] = coins.bits[v, pos * L:(pos + 1) * L]
            res = Coins(bits, coins.shared)
        coins.cache["base"] = res
        return res

    def coins_from_base(self, base_coins: Coins) -> Coins:
        L = self.base.coin_len
        bits = np.zeros((self.n, self.coin_len), dtype=np.uint8)
        for v, blk in enumerate(self.blocks):
            for pos, j in enumerate(blk):
                bits[v, pos * L:(pos + 1) * L] = base_coins.bits[j]
        return Coins(bits, base_coins.shared)

    def _base_transcript(self, transcript: Transcript) -> Transcript:
        rounds = []
        for rd in transcript.rounds:
            msgs = {}
            for v, blob in rd.messages.items():
                for j, m in zip(self.blocks[v], _unpack_messages(blob)):
                    msgs[j] = m
            rounds.append(Round(msgs, self.expand(rd.aborted), rd.placement))
        return Transcript(rounds)

    def next_message(self, party, rnd, own, transcript):
        raise NotImplementedError("grouped messages are produced per round")

    def round_messages(self, parties, rnd, coins, transcript):
        bc = self._base_coins(coins)
        btr = self._base_transcript(transcript)
        out = {}
        for v in parties:
            inner = self.base.round_messages(list(self.blocks[v]), rnd, bc, btr)
            out[v] = _pack_messages(inner[j] for j in self.blocks[v])
        return out

    def residual_output(self, U, coins, transcript, i):
        return self.base.residual_output(self.expand(U), self._base_coins(coins),
                                         self._base_transcript(transcript), i)

    def describe(self):
        return {"name": self.name, "s": self.s, "base": self.base.describe()}


def group_parties(base: ProtocolDef, s: int) -> GroupedProtocol:
    return GroupedProtocol(base, s)


def majority_coin(n: int, r: int, tiebreak: bool = False) -> MajorityCoin:
    return MajorityCoin(n, r, tiebreak)


def parity_coin(n: int, r: int = 1) -> ParityCoin:
    return ParityCoin(n, r)


def make_protocol(name: str, **params) -> ProtocolDef:
    """Registry: "majority", "parity", "null", "planted", "scripted:<path>"."""
    if name.startswith("scripted:"):
        return scripted(name.split(":", 1)[1])
    if name == "majority":
        return MajorityCoin(int(params["n"]), int(params["r"]), bool(params.get("tiebreak", False)))
    if name == "parity":
        return ParityCoin(int(params["n"]), int(params.get("r", 1)))
    if name == "null":
        return NullProtocol(int(params["n"]), int(params["r"]))
    if name == "planted":
        return PlantedGap(int(params["n"]), int(params["r"]), [int(j) for j in params.get("marked", [0])])
    raise ValueError(f"unknown protocol {name!r}")


def honest_bias(proto: ProtocolDef, trials: int, stream) -> tuple[float, float]:
    """(p_hat of out = 1, standard error) over honest executions."""
    rng = as_rng(stream)
    ones = 0
    for _ in range(trials):
        _, out = run_honest(proto, proto.sample_coins(rng))
        ones += out
    p = ones / trials
    return p, (p * (1 - p) / trials) ** 0.5


def exact_out_distribution(proto: ProtocolDef, limit_bits: int = 20) -> float:
    """Pr[out = 1] by full enumeration."""
    ones = total = 0
    for coins in proto.enumerate_coins(limit_bits):
        _, out = run_honest(proto, coins)
        ones += out
        total += 1
    return ones / total


__all__ = [
    "MajorityCoin", "ParityCoin", "NullProtocol", "PlantedGap", "ScriptedProtocol", "GroupedProtocol",
    "majority_coin", "parity_coin", "scripted", "tabulate", "group_parties", "make_protocol",
    "honest_bias", "exact_out_distribution", "backup_matrix",
]
