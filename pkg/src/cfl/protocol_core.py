"""Protocol abstraction, rushing fail-stop execution engine, backup values
and tuple-set algebra.

Parties are labelled 0..n-1. Every party's coins are sampled in full
before the execution starts, including the residual bits survivors use
to finish the protocol after an abort, so a backup value is a pure
function of the coins.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .prob_core import SeedStream, as_rng


class FailStopViolation(RuntimeError):
    """An adversary tried something other than honest sending or aborting."""


class RushingViolation(RuntimeError):
    """An adversary asked for messages it cannot have seen yet."""


# Coins

class Coins:
    """Pre-sampled randomness: ``bits[j]`` is party j's bit vector.

    ``shared`` holds setup randomness common to all parties (empty for
    most protocols).
    """

    def __init__(self, bits: np.ndarray, shared: np.ndarray | None = None):
        self.bits = np.asarray(bits, dtype=np.uint8)
        self.shared = np.zeros(0, np.uint8) if shared is None else np.asarray(shared, np.uint8)
        self.cache: dict = {}

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    def rows(self, parties) -> np.ndarray:
        return self.bits[np.asarray(parties, dtype=np.int64)]

    def own(self, party: int) -> np.ndarray:
        return self.bits[party]

    def restricted(self, visible: Iterable[int]) -> "RestrictedCoins":
        return RestrictedCoins(self, visible)

    def key(self) -> bytes:
        return self.bits.tobytes() + b"|" + self.shared.tobytes()


class RestrictedCoins(Coins):
    """Adversary view of the coins: reading an honest party's row raises."""

    def __init__(self, base: Coins, visible: Iterable[int]):
        self._base = base
        self._mask = np.zeros(base.n, dtype=bool)
        self._mask[list(visible)] = True
        self.shared = base.shared
        self.cache = {}

    @property
    def bits(self):
        raise PermissionError("the adversary cannot read honest coins")

    @property
    def n(self) -> int:
        return self._base.n

    def rows(self, parties) -> np.ndarray:
        idx = np.asarray(parties, dtype=np.int64)
        if not np.all(self._mask[idx]):
            raise PermissionError("the adversary cannot read honest coins")
        return self._base.bits[idx]

    def own(self, party: int) -> np.ndarray:
        return self.rows([party])[0]


# Transcripts

@dataclass
class Round:
    messages: dict  # party -> bytes
    aborted: frozenset = frozenset()
    placement: str | None = None  # "before" | "after" when someone aborted
    cache: dict = field(default_factory=dict, repr=False, compare=False)


class Transcript:
    """Sealed rounds 1..len. ``prefix(i)`` shares the round objects."""

    def __init__(self, rounds: Sequence[Round] = ()):
        self.rounds = tuple(rounds)

    def __len__(self):
        return len(self.rounds)

    def prefix(self, i: int) -> "Transcript":
        if i > len(self.rounds):
            raise ValueError(f"prefix through round {i} not available (have {len(self.rounds)})")
        return Transcript(self.rounds[:i])

    def round(self, t: int) -> Round:
        return self.rounds[t - 1]

    def __eq__(self, other):
        if not isinstance(other, Transcript) or len(self) != len(other):
            return False
        return all(a.messages == b.messages and a.aborted == b.aborted and a.placement == b.placement
                   for a, b in zip(self.rounds, other.rounds))

    def key(self, i: int | None = None) -> tuple:
        rounds = self.rounds if i is None else self.rounds[:i]
        return tuple(tuple(sorted(rd.messages.items())) for rd in rounds)

    def to_jsonl(self) -> str:
        lines = []
        for t, rd in enumerate(self.rounds, start=1):
            lines.append(json.dumps({
                "round": t,
                "messages": {str(j): m.hex() for j, m in sorted(rd.messages.items())},
                "aborts": sorted(rd.aborted),
                "placement": rd.placement,
            }, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @staticmethod
    def from_jsonl(text: str) -> "Transcript":
        rounds = []
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            rounds.append(Round({int(j): bytes.fromhex(m) for j, m in d["messages"].items()},
                                frozenset(d.get("aborts", [])), d.get("placement")))
        return Transcript(rounds)


# Protocols

class ProtocolDef:
    """Base class for an n-party, r-round coin-flipping protocol.

    Subclasses implement ``next_message`` and ``residual_output``; the
    batch hooks have generic fallbacks and exist only for speed.
    """

    name = "protocol"

    def __init__(self, n: int, r: int, coin_len: int, shared_len: int = 0):
        if n < 1 or r < 1:
            raise ValueError("need n >= 1 and r >= 1")
        self.n, self.r = int(n), int(r)
        self.coin_len, self.shared_len = int(coin_len), int(shared_len)

    @property
    def parties(self) -> frozenset:
        return frozenset(range(self.n))

    @property
    def coin_bits(self) -> int:
        return self.n * self.coin_len + self.shared_len

    def sample_coins(self, stream) -> Coins:
        rng = as_rng(stream)
        bits = rng.integers(0, 2, size=(self.n, self.coin_len), dtype=np.uint8)
        shared = rng.integers(0, 2, size=self.shared_len, dtype=np.uint8)
        return Coins(bits, shared)

    def coins_from_index(self, idx: int) -> Coins:
        """Coin assignment number ``idx`` in a fixed enumeration order."""
        total = self.coin_bits
        flat = np.array([(idx >> (total - 1 - b)) & 1 for b in range(total)], dtype=np.uint8)
        bits = flat[: self.n * self.coin_len].reshape(self.n, self.coin_len)
        return Coins(bits, flat[self.n * self.coin_len:])

    def enumerate_coins(self, limit_bits: int = 20) -> Iterator[Coins]:
        if self.coin_bits > limit_bits:
            raise ValueError(f"coin space 2^{self.coin_bits} too large to enumerate")
        for idx in range(2 ** self.coin_bits):
            yield self.coins_from_index(idx)

    def next_message(self, party: int, rnd: int, own: np.ndarray, transcript: Transcript) -> bytes:
        raise NotImplementedError

    def residual_output(self, U: frozenset, coins: Coins, transcript: Transcript, i: int) -> int:
        raise NotImplementedError

    # batch hooks

    def round_messages(self, parties, rnd: int, coins: Coins, transcript: Transcript) -> dict:
        return {j: self.next_message(j, rnd, coins.own(j), transcript) for j in parties}

    def backup_rows(self, coins: Coins, tuples: "TupleSet", transcript: Transcript, i: int) -> np.ndarray:
        """Bckp(U, i) for every U in ``tuples`` along ``transcript``."""
        pre = transcript.prefix(i)
        return np.array([self.residual_output(U, coins, pre, i) for U in tuples.tuples], dtype=np.uint8)

    def sample_backups(self, tuples: "TupleSet", count: int, stream):
        """Honest executions: backups (count, m, r+1) and outputs (count,)."""
        rng = as_rng(stream)
        b = np.empty((count, len(tuples), self.r + 1), dtype=np.uint8)
        out = np.empty(count, dtype=np.uint8)
        for s in range(count):
            coins = self.sample_coins(rng)
            tr, out[s] = run_honest(self, coins)
            b[s] = backup_matrix(self, coins, tuples, tr)
        return b, out

    def describe(self) -> dict:
        return {"name": self.name, "n": self.n, "r": self.r}


def run_honest(proto: ProtocolDef, coins: Coins) -> tuple[Transcript, int]:
    rounds: list[Round] = []
    everyone = range(proto.n)
    for t in range(1, proto.r + 1):
        msgs = proto.round_messages(everyone, t, coins, Transcript(rounds))
        rounds.append(Round(msgs))
    tr = Transcript(rounds)
    return tr, int(proto.residual_output(proto.parties, coins, tr, proto.r))


def backup_value(proto: ProtocolDef, coins: Coins, U, i: int, transcript: Transcript | None = None) -> int:
    """Bckp(U, i): survivors U finish alone after round i of the honest run."""
    if not 0 <= i <= proto.r:
        raise ValueError(f"round {i} outside 0..{proto.r}")
    U = frozenset(U)
    if not U:
        raise ValueError("empty survivor set")
    if transcript is None:
        transcript, _ = run_honest(proto, coins)
    return int(proto.residual_output(U, coins, transcript.prefix(i), i))


def backup_matrix(proto: ProtocolDef, coins: Coins, tuples: "TupleSet", transcript: Transcript) -> np.ndarray:
    """(m, r+1) matrix of Bckp(U, i) along an honest transcript."""
    return np.stack([proto.backup_rows(coins, tuples, transcript, i) for i in range(proto.r + 1)], axis=1)


def avg_backup(proto: ProtocolDef, coins: Coins, S: "TupleSet", i: int, transcript: Transcript | None = None) -> float:
    if len(S) == 0:
        raise ValueError("average over an empty tuple set")
    if transcript is None:
        transcript, _ = run_honest(proto, coins)
    return float(np.mean(proto.backup_rows(coins, S, transcript, i)))


def iter_backup_samples(proto: ProtocolDef, tuples: "TupleSet", count: int, stream, chunk: int = 5000):
    """Yield (backups, outputs) in chunks, each chunk on its own derived stream."""
    base = stream if isinstance(stream, SeedStream) else SeedStream(int(as_rng(stream).integers(2 ** 62)))
    done, c = 0, 0
    while done < count:
        size = min(chunk, count - done)
        yield proto.sample_backups(tuples, size, base.derive(c))
        done += size
        c += 1


# Tuple sets

class TupleSet:
    """A set of equal-size party subsets."""

    __slots__ = ("tuples", "k", "_array", "_index")

    def __init__(self, tuples: Iterable[Iterable[int]], k: int | None = None):
        ts = sorted({frozenset(int(x) for x in U) for U in tuples}, key=lambda U: sorted(U))
        sizes = {len(U) for U in ts}
        if len(sizes) > 1:
            raise ValueError("tuples must share one arity")
        if k is None:
            k = sizes.pop() if sizes else 0
        elif sizes and sizes != {k}:
            raise ValueError(f"tuples must have size {k}")
        self.tuples = tuple(ts)
        self.k = int(k)
        self._array = None
        self._index = None

    @classmethod
    def empty(cls, k: int) -> "TupleSet":
        return cls((), k)

    def __len__(self):
        return len(self.tuples)

    def __iter__(self):
        return iter(self.tuples)

    def __contains__(self, U):
        return frozenset(U) in self.as_set()

    def __eq__(self, other):
        if isinstance(other, TupleSet):
            return self.tuples == other.tuples and (self.k == other.k or not self.tuples)
        return self.as_set() == {frozenset(U) for U in other}

    def __hash__(self):
        return hash(self.tuples)

    def __repr__(self):
        body = ", ".join("{" + ",".join(map(str, sorted(U))) + "}" for U in self.tuples[:6])
        more = ", ..." if len(self) > 6 else ""
        return f"TupleSet(k={self.k}, [{body}{more}], size={len(self)})"

    def as_set(self) -> frozenset:
        return frozenset(self.tuples)

    @property
    def base(self) -> frozenset:
        return frozenset().union(*self.tuples) if self.tuples else frozenset()

    @property
    def array(self) -> np.ndarray:
        if self._array is None:
            self._array = np.array([sorted(U) for U in self.tuples], dtype=np.int64).reshape(len(self), self.k)
        return self._array

    def index_of(self, U) -> int:
        if self._index is None:
            self._index = {U: j for j, U in enumerate(self.tuples)}
        return self._index[frozenset(U)]

    def members_mask(self, h: int) -> np.ndarray:
        return np.array([h in U for U in self.tuples], dtype=bool)

    def to_json(self) -> list:
        return [sorted(U) for U in self.tuples]

    @classmethod
    def from_json(cls, data, k: int | None = None) -> "TupleSet":
        return cls(data, k)


def tuple_select(S: TupleSet, h: int) -> TupleSet:
    """S(h): tuples containing h."""
    return TupleSet((U for U in S if h in U), S.k)


def tuple_remove(S: TupleSet, h: int) -> TupleSet:
    """S minus h: tuples not containing h."""
    return TupleSet((U for U in S if h not in U), S.k)


def tuple_concat(S1: TupleSet, S0: TupleSet) -> TupleSet:
    """{U1 | U0}: unions across two tuple sets over disjoint parties."""
    if S1.base & S0.base:
        raise ValueError("concatenation needs tuple sets over disjoint parties")
    return TupleSet((U1 | U0 for U1 in S1 for U0 in S0), S1.k + S0.k)


def choose_all(base: Iterable[int], k: int) -> TupleSet:
    """C(base, k); C(base, 0) is the set holding the empty tuple."""
    return TupleSet(itertools.combinations(sorted(base), k), k)


def singletons(base: Iterable[int]) -> TupleSet:
    return choose_all(base, 1)


# Rushing execution

@dataclass(frozen=True)
class Abort:
    """Every corrupted party outside ``survivors`` aborts in this round.

    ``placement="before"`` withholds their round messages and the
    survivors finish from the previous round; ``"after"`` lets the round
    complete first.
    """

    survivors: frozenset = frozenset()
    placement: str = "after"

    def __post_init__(self):
        object.__setattr__(self, "survivors", frozenset(self.survivors))
        if self.placement not in ("before", "after"):
            raise ValueError("placement must be 'before' or 'after'")


class RoundView:
    """What a rushing adversary sees in round t."""

    def __init__(self, proto: ProtocolDef, t: int, sealed: Transcript, honest_msgs: dict,
                 corrupted: frozenset, honest: frozenset, coins: RestrictedCoins):
        self.proto = proto
        self.t = t
        self.transcript = sealed
        self.honest_messages = dict(honest_msgs)
        self.corrupted = corrupted
        self.honest = honest
        self.coins = coins
        self._full = None

    def messages_at(self, rnd: int) -> dict:
        if rnd > self.t:
            raise RushingViolation(f"round {rnd} messages are not available in round {self.t}")
        if rnd == self.t:
            return self.full_round().messages
        return self.transcript.round(rnd).messages

    def full_round(self) -> Round:
        """Round t as it would look if every corrupted party sent honestly."""
        if self._full is None:
            mine = self.proto.round_messages(sorted(self.corrupted), self.t, self.coins, self.transcript)
            msgs = dict(self.honest_messages)
            msgs.update(mine)
            self._full = Round(msgs)
        return self._full

    def transcript_through(self, i: int) -> Transcript:
        if i > self.t:
            raise RushingViolation(f"cannot see round {i} in round {self.t}")
        if i == self.t:
            return Transcript(self.transcript.rounds + (self.full_round(),))
        return self.transcript.prefix(i)

    def backups(self, S: TupleSet, i: int) -> np.ndarray:
        """Bckp(U, i) for U in S; S may not touch honest parties."""
        for U in S:
            if U & self.honest:
                raise PermissionError("backups of tuples with honest members are not computable")
        return self.proto.backup_rows(self.coins, S, self.transcript_through(i), i)

    def avg_backup(self, S: TupleSet, i: int) -> float:
        if len(S) == 0:
            raise ValueError("average over an empty tuple set")
        return float(np.mean(self.backups(S, i)))


class Adversary:
    """Fail-stop rushing adversary. Override ``on_round``."""

    kind = "null"

    def start(self, proto: ProtocolDef, honest: frozenset, coins: RestrictedCoins, stream) -> None:
        pass

    def on_round(self, view: RoundView):
        return None


@dataclass
class Execution:
    out: int
    abort_round: int | None
    placement: str | None
    survivors: frozenset
    alive: frozenset
    transcript: Transcript
    coins: Coins
    info: dict = field(default_factory=dict)

    @property
    def completion_index(self) -> int | None:
        if self.abort_round is None:
            return None
        return self.abort_round - 1 if self.placement == "before" else self.abort_round

    def honest_outputs(self) -> dict:
        return {h: self.out for h in self.alive}


def run_with_adversary(proto: ProtocolDef, adversary: Adversary, honest, stream=None,
                       coins: Coins | None = None) -> Execution:
    """Execute with rushing fail-stop corruption of everyone outside ``honest``.

    The first abort ends the interactive phase; the alive parties then
    output Bckp(alive, t-1) for a before-send abort in round t and
    Bckp(alive, t) for an after-send abort.
    """
    honest = frozenset(honest)
    if not honest or not honest <= proto.parties:
        raise ValueError("honest set must be a non-empty subset of the parties")
    corrupted = proto.parties - honest
    if coins is None:
        if stream is None:
            raise ValueError("need coins or a stream")
        coins = proto.sample_coins(stream.derive(0) if isinstance(stream, SeedStream) else stream)
    adv_stream = stream.derive(1) if isinstance(stream, SeedStream) else stream
    view_coins = coins.restricted(corrupted)
    adversary.start(proto, honest, view_coins, adv_stream)

    rounds: list[Round] = []
    honest_sorted = sorted(honest)
    for t in range(1, proto.r + 1):
        sealed = Transcript(rounds)
        hmsgs = proto.round_messages(honest_sorted, t, coins, sealed)
        view = RoundView(proto, t, sealed, hmsgs, corrupted, honest, view_coins)
        dec = adversary.on_round(view) if corrupted else None
        if dec is None:
            rounds.append(Round(view.full_round().messages if corrupted else hmsgs))
            continue
        if not isinstance(dec, Abort):
            raise FailStopViolation(f"adversary returned {type(dec).__name__}; only Abort is allowed")
        if not dec.survivors <= corrupted:
            raise FailStopViolation("survivors must be corrupted parties")
        alive = honest | dec.survivors
        quitters = frozenset(corrupted - dec.survivors)
        if dec.placement == "before":
            msgs = {j: m for j, m in view.full_round().messages.items() if j not in quitters}
            i = t - 1
        else:
            msgs = dict(view.full_round().messages)
            i = t
        rounds.append(Round(msgs, quitters, dec.placement))
        tr = Transcript(rounds)
        out = int(proto.residual_output(alive, coins, tr.prefix(i), i))
        return Execution(out, t, dec.placement, dec.survivors, alive, tr, coins)
    tr = Transcript(rounds)
    out = int(proto.residual_output(proto.parties, coins, tr, proto.r))
    return Execution(out, None, None, frozenset(), proto.parties, tr, coins)
