"""Finding the nugget level k* and its tuple sets.

The search starts from a random three-way partition (A1, A0, P) of the
parties and the sets S_z = C(A_z, 1) | C(P, k-1). A top-level gap test
decides between the martingale route (k* = k+1) and a descent that
projects onto single parties until every pair of projections is similar.
All probabilities are Monte Carlo frequencies over sampled honest runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np

from ..prob_core import SeedStream, as_rng
from ..protocol_core import ProtocolDef, TupleSet, choose_all, singletons, tuple_concat, tuple_remove, tuple_select


def compute_k(n: int, r: int) -> int | None:
    """Smallest k with C(n, k) >= r * log2(r)^(2k); None if there is none."""
    lg = math.log2(r) if r > 1 else 0.0
    for k in range(1, n + 1):
        if comb(n, k) >= r * lg ** (2 * k):
            return k
    return None


def c_ell(n: int, k: int, ell: int) -> Fraction:
    """(n-1)(n-2)...(n-k+ell) / ((k-1)(k-2)...ell); c_k = 1."""
    if not 1 <= ell <= k:
        raise ValueError(f"ell must lie in 1..{k}")
    num = math.prod(range(n - k + ell, n))
    den = math.prod(range(ell, k))
    return Fraction(num, den)


def rho_grid(r: int, coarsen: float | None = None) -> np.ndarray:
    """R(r) = {1, 1 + 1/r, ..., r}; optionally a geometric grid with ratio ``coarsen``."""
    if coarsen is None:
        return 1.0 + np.arange(r * (r - 1) + 1) / r
    if coarsen <= 1:
        raise ValueError("coarsening ratio must exceed 1")
    pts = [1.0]
    while pts[-1] * coarsen < r:
        pts.append(pts[-1] * coarsen)
    pts.append(float(r))
    return np.array(pts)


def _log2r(r: int) -> float:
    if r < 2:
        raise ValueError("the nugget search needs r >= 2")
    return math.log2(r)


def top_threshold(rho, r: int):
    return np.asarray(rho) / (256.0 * math.sqrt(r))


def top_bound(rho, r: int):
    return 1.0 / (2.0 * np.asarray(rho) * _log2r(r))


def level_threshold(rho, r: int, n: int, k: int, ell: int):
    """Gap size tested when descending from level ell."""
    c = float(c_ell(n, k, ell - 1))
    return np.asarray(rho) / (256.0 * math.sqrt(r)) * math.sqrt(c) / (64.0 * _log2r(r)) ** (k - ell + 1)


def level_bound(rho, r: int, n: int, k: int, ell: int):
    c = float(c_ell(n, k, ell - 1))
    return 1.0 / (2.0 * np.asarray(rho) * _log2r(r)) * 64.0 ** (-k + ell - 1) / math.sqrt(c)


def gap_threshold(rho, r: int, n: int, k: int, k_star: int):
    """Item-1 gap size for nugget k* in 1..k."""
    c = float(c_ell(n, k, k_star))
    return np.asarray(rho) / (256.0 * math.sqrt(r)) * math.sqrt(c) / (64.0 * _log2r(r)) ** (k - k_star)


def gap_bound(rho, r: int, n: int, k: int, k_star: int):
    c = float(c_ell(n, k, k_star))
    return 1.0 / (2.0 * np.asarray(rho) * _log2r(r)) * 64.0 ** (-k + k_star) / math.sqrt(c)


@dataclass
class NuggetResult:
    k: int
    k_star: int
    rho_star: float
    S1: TupleSet
    S0: TupleSet
    H: frozenset
    partition: dict  # {"A1": [...], "A0": [...], "P": [...]}
    Q: tuple = ()
    p1: int | None = None
    p0: int | None = None
    C: str | None = None  # which of A1 / A0 the last coordinate ranges over
    H_by_z: dict | None = None  # per-direction party sets when one H cannot serve both
    steps: list = field(default_factory=list)
    budget: int = 0
    epsilon: float = 0.0
    posthoc: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return self.H_by_z is not None

    def honest_candidates(self, z: int) -> frozenset:
        if self.H_by_z is not None:
            return frozenset(self.H_by_z[z])
        return self.H

    def to_json(self) -> dict:
        return {
            "k": self.k, "k_star": self.k_star, "rho_star": self.rho_star,
            "S1": self.S1.to_json(), "S0": self.S0.to_json(), "H": sorted(self.H),
            "partition": self.partition, "Q": list(self.Q), "p1": self.p1, "p0": self.p0, "C": self.C,
            "H_by_z": None if self.H_by_z is None else {str(z): sorted(v) for z, v in self.H_by_z.items()},
            "steps": self.steps, "budget": self.budget, "epsilon": self.epsilon,
            "posthoc": self.posthoc, "meta": self.meta,
        }

    @classmethod
    def from_json(cls, d: dict) -> "NuggetResult":
        hz = d.get("H_by_z")
        # the arity of the stored sets may differ from k, so infer it when possible
        S1 = TupleSet(d["S1"], None if d["S1"] else d["k"])
        S0 = TupleSet(d["S0"], None if d["S0"] else d["k"])
        return cls(d["k"], d["k_star"], d["rho_star"], S1, S0,
                   frozenset(d["H"]), d["partition"], tuple(d.get("Q", ())), d.get("p1"), d.get("p0"),
                   d.get("C"), None if hz is None else {int(z): frozenset(v) for z, v in hz.items()},
                   d.get("steps", []), d.get("budget", 0), d.get("epsilon", 0.0), d.get("posthoc", {}),
                   d.get("meta", {}))


def random_partition(n: int, rng) -> dict:
    """A1 and A0 get ceil(n/3) parties each, P the rest."""
    if n < 3:
        raise ValueError("partition needs n >= 3")
    perm = [int(x) for x in rng.permutation(n)]
    a = -(-n // 3)
    return {"A1": sorted(perm[:a]), "A0": sorted(perm[a:2 * a]), "P": sorted(perm[2 * a:])}


def _avg_trajectories(proto: ProtocolDef, sets: list, N: int, stream) -> list:
    """Jointly sampled B^S_1..B^S_r for each S in ``sets``: list of (N, r)."""
    union = {}
    for S in sets:
        for U in S:
            union.setdefault(U, None)
    k = sets[0].k
    U_all = TupleSet(list(union), k)
    idx = [np.array([U_all.index_of(U) for U in S]) for S in sets]
    out = [np.zeros((N, proto.r)) for _ in sets]
    done, c = 0, 0
    base = stream if isinstance(stream, SeedStream) else SeedStream(int(as_rng(stream).integers(2 ** 62)))
    while done < N:
        size = min(2000, N - done)
        b, _ = proto.sample_backups(U_all, size, base.derive(c))
        b = b[:, :, 1:].astype(float)
        for j, ix in enumerate(idx):
            out[j][done:done + size] = b[:, ix, :].mean(axis=1)
        done += size
        c += 1
    return out


def _survival(gaps: np.ndarray, thr: np.ndarray) -> np.ndarray:
    """Fraction of ``gaps`` >= each threshold (gaps is 1-D)."""
    g = np.sort(gaps)
    return 1.0 - np.searchsorted(g, thr - 1e-15, side="left") / len(g)


def _best_rho(gaps: np.ndarray, rhos: np.ndarray, thr: np.ndarray, bound: np.ndarray):
    """Largest rho whose gap frequency reaches its bound, or None."""
    freq = _survival(gaps, thr)
    ok = np.nonzero(freq >= bound)[0]
    if len(ok) == 0:
        return None, freq
    return float(rhos[ok[-1]]), freq


def nugget_finder(proto: ProtocolDef, N: int = 100_000, epsilon: float = 0.01, stream=None,
                  partition: dict | None = None, k: int | None = None,
                  coarsen: float | None = None) -> NuggetResult:
    """Run the nugget search with N sampled executions per test."""
    if N < 1:
        raise ValueError("sample budget must be positive")
    n, r = proto.n, proto.r
    _log2r(r)
    if not isinstance(stream, SeedStream):
        stream = SeedStream(0 if stream is None else int(as_rng(stream).integers(2 ** 62)))
    meta = {"protocol": proto.describe()}
    if partition is None:
        partition = random_partition(n, as_rng(stream.derive(0)))
    A1, A0, P = (frozenset(partition[x]) for x in ("A1", "A0", "P"))
    # every P-party must sit in at most half of C(P', l-1) for each pool P' met in the descent
    k_max = len(P) // 2 + 1
    if k is None:
        k = compute_k(n, r)
        if k is None:
            k = 1
            meta["k_fallback"] = "no k satisfies C(n,k) >= r log2(r)^(2k); using k = 1"
        elif k > k_max:
            meta["k_clamped"] = f"k = {k} needs |P| >= {2 * (k - 1)}; using k = {k_max}"
            k = k_max
    elif k > k_max:
        raise ValueError(f"|P| = {len(P)} is too small for k = {k} (need |P| >= {2 * (k - 1)})")
    rhos = rho_grid(r, coarsen)
    if coarsen is not None:
        meta["rho_coarsening"] = coarsen
    base_P = choose_all(P, k - 1)
    S1 = tuple_concat(singletons(A1), base_P)
    S0 = tuple_concat(singletons(A0), base_P)
    common = dict(k=k, partition={key: sorted(v) for key, v in partition.items()}, budget=N,
                  epsilon=epsilon, meta=meta)

    # top-level gap test
    B1, B0 = _avg_trajectories(proto, [S1, S0], N, stream.derive(1))
    top_gap = np.abs(B1 - B0).max(axis=1)
    rho, freq = _best_rho(top_gap, rhos, top_threshold(rhos, r), top_bound(rhos, r))
    steps = [{"level": k + 1, "test": "top", "rho": rho, "max_freq_minus_bound": float(np.max(freq - top_bound(rhos, r)))}]
    if rho is None:
        return NuggetResult(k_star=k + 1, rho_star=1.0, S1=S1, S0=S0, H=A0, steps=steps, **common)

    pool = set(P)
    fixed = {1: (), 0: ()}  # fixed parties beyond the pool, per side
    C = None
    Q: tuple = ()
    cur1, cur0 = S1, S0
    rho_level = rho
    for ell in range(k, 1, -1):
        pick = _descent_pick(proto, cur1, cur0, sorted(pool), ell, k, rhos, N,
                             stream.derive(2, ell))
        if pick is None:
            H = frozenset(pool)
            steps.append({"level": ell, "test": "descent", "found": False})
            p1 = fixed[1][-1] if fixed[1] else None
            p0 = fixed[0][-1] if fixed[0] else None
            return NuggetResult(k_star=ell, rho_star=rho_level, S1=cur1, S0=cur0, H=H, Q=Q, p1=p1, p0=p0,
                                C=C, steps=steps, **common)
        z, h, hp, rho_next = pick
        src = cur1 if z == 1 else cur0
        if C is None:
            C = "A1" if z == 1 else "A0"
        Q = tuple(sorted(set(Q) | (set(fixed[z][-1:]) if fixed[z] else set())))
        cur1 = tuple_remove(tuple_select(src, h), hp)
        cur0 = tuple_remove(tuple_select(src, hp), h)
        pool -= {h, hp}
        fixed = {1: (h,), 0: (hp,)}
        rho_level = rho_next
        steps.append({"level": ell, "test": "descent", "found": True, "z": z, "h": h, "h_prime": hp,
                      "rho": rho_next})

    # fell through to k* = 1
    if C is None:
        # no descent happened (k = 1): S_z ranges over A_z, so each direction keeps its own H
        return NuggetResult(k_star=1, rho_star=rho_level, S1=cur1, S0=cur0, H=A1, C="A1",
                            H_by_z={1: A1, 0: A0}, steps=steps, **common)
    H = A1 if C == "A1" else A0
    return NuggetResult(k_star=1, rho_star=rho_level, S1=cur1, S0=cur0, H=H, Q=Q, p1=fixed[1][0],
                        p0=fixed[0][0], C=C, steps=steps, **common)


def _descent_pick(proto, S1, S0, pool, ell, k, rhos, N, stream):
    """Best (z, h, h', rho) violating similarity at level ell, or None."""
    n, r = proto.n, proto.r
    thr = level_threshold(rhos, r, n, k, ell)
    bnd = level_bound(rhos, r, n, k, ell)
    best = None
    for z, S in ((1, S1), (0, S0)):
        proj = {}
        for h in pool:
            for hp in pool:
                if h != hp:
                    proj[(h, hp)] = tuple_remove(tuple_select(S, h), hp)
        keys = [key for key, T in proj.items() if len(T)]
        if not keys:
            continue
        trajs = _avg_trajectories(proto, [proj[key] for key in keys], N, stream.derive(z))
        by_key = dict(zip(keys, trajs))
        for a, h in enumerate(pool):
            for hp in pool[a + 1:]:
                if (h, hp) not in by_key or (hp, h) not in by_key:
                    continue
                gap = np.abs(by_key[(h, hp)] - by_key[(hp, h)]).max(axis=1)
                rho, _ = _best_rho(gap, rhos, thr, bnd)
                if rho is not None and (best is None or rho > best[3]):
                    best = (z, h, hp, rho)
    return best


# exact structural checks

def _member_prob(S: TupleSet, h: int) -> Fraction:
    return Fraction(sum(1 for U in S if h in U), len(S))


def _projection_uniform(S: TupleSet, H) -> bool:
    """Pr_{h <- H, U <- S(h)}[U = U'] == Pr_{U <- S}[U = U'] for every U' in S."""
    H = sorted(H)
    sizes = {h: sum(1 for U in S if h in U) for h in H}
    if any(v == 0 for v in sizes.values()):
        return False
    target = Fraction(1, len(S))
    for U in S:
        p = sum((Fraction(1, len(H) * sizes[h]) for h in H if h in U), Fraction(0))
        if p != target:
            return False
    return True


def check_nugget_structure(res: NuggetResult, n: int) -> dict:
    """Exact set-combinatorial conditions for the found level; name -> bool."""
    k, ks = res.k, res.k_star
    S = {1: res.S1, 0: res.S0}
    checks = {"sizes_k": all(len(U) == k for z in (0, 1) for U in S[z])}
    if ks == k + 1:
        checks["S1(h) empty"] = all(len(tuple_select(res.S1, h)) == 0 for h in res.H)
        checks["S0 projection uniform"] = _projection_uniform(res.S0, res.H)
    elif ks == 1:
        for z in (0, 1):
            Hz = res.honest_candidates(z)
            checks[f"|H_{z}| >= n/3"] = 3 * len(Hz) >= n
            checks[f"|S_{z}| = |H_{z}|"] = len(S[z]) == len(Hz)
            checks[f"|S_{z}(h)| = 1"] = all(len(tuple_select(S[z], h)) == 1 for h in Hz)
        if not res.degenerate:
            checks["one H for both z"] = True
    else:
        H = sorted(res.H)
        ratio_min = Fraction(n - k + ks - 1, 4 * (ks - 1))
        for z in (0, 1):
            probs = {_member_prob(S[z], h) for h in H}
            checks[f"equal membership z={z}"] = len(probs) == 1
            checks[f"membership <= 1/2 z={z}"] = all(p <= Fraction(1, 2) for p in probs)
            checks[f"ratio z={z}"] = all(p > 0 and (1 - p) / p >= ratio_min for p in probs)
            checks[f"projection uniform z={z}"] = _projection_uniform(S[z], H)
        checks["membership equal across z"] = all(_member_prob(res.S1, h) == _member_prob(res.S0, h) for h in H)
        checks["H non-empty"] = len(H) > 0
    return checks


def verify_top_gap(proto: ProtocolDef, res: NuggetResult, N: int, stream) -> dict:
    """Re-estimate the gap condition of the found level on fresh samples."""
    r, n = proto.r, proto.n
    B1, B0 = _avg_trajectories(proto, [res.S1, res.S0], N, stream)
    gap = np.abs(B1 - B0).max(axis=1)
    rhos = rho_grid(r)
    if res.k_star == res.k + 1:
        freq = _survival(gap, top_threshold(rhos, r))
        excess = freq - top_bound(rhos, r)
        worst = int(np.argmax(excess))
        return {"condition": "gap small for every rho", "holds": bool(np.all(excess <= res.epsilon)),
                "worst_rho": float(rhos[worst]), "worst_excess": float(excess[worst]), "N": N}
    thr = gap_threshold(res.rho_star, r, n, res.k, res.k_star)
    bnd = gap_bound(res.rho_star, r, n, res.k, res.k_star)
    freq = float(_survival(gap, np.array([thr]))[0])
    return {"condition": "gap large at rho*", "holds": freq >= bnd - res.epsilon, "freq": freq,
            "bound": float(bnd), "N": N}
