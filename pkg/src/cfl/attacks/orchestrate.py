"""Dispatch from the nugget to an attack, sweep directions and parties,
and measure the resulting bias."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np

from ..prob_core import SeedStream
from ..protocol_core import ProtocolDef, run_honest, run_with_adversary
from ..stats import Proportion
from .adversaries import AttackConfigError, CI93Attack, DpAttack, MartAttack, SingAttack
from .gamevalue import build_x
from .nugget import NuggetResult, compute_k, gap_bound, gap_threshold, nugget_finder

DEFAULTS = {
    "sample_budget": 20_000,  # build_x / nugget Monte Carlo budget N
    "epsilon": 0.01,
    "trials": 10_000,  # confirmation trials for the selected configuration
    "pilot_trials": 2_000,
    "max_honest": 2,  # honest parties tried per direction
    "routes": None,  # restrict candidate routes, e.g. ["mart"]
}


@dataclass
class TrialOutcome:
    trial: int
    seed_path: list
    honest: int
    kind: str
    z: int
    abort_round: int | None
    placement: str | None
    out: int
    x_at_decision: float | None = None


@dataclass
class AttackResult:
    kind: str
    z: int
    h: int | None
    target: int
    trials: int
    hits: int
    bias: float
    se: float
    ci: tuple
    abort_rounds: dict
    bound: float | None = None
    selection_multiplicity: int = 1
    sweep: list = field(default_factory=list)
    nugget: dict | None = None
    notes: list = field(default_factory=list)
    outcomes: list = field(default_factory=list, repr=False)  # per-trial records, not serialised

    @property
    def z_score(self) -> float:
        return self.bias / self.se if self.se > 0 else (math.inf if self.bias > 0 else 0.0)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("outcomes")
        d["ci"] = list(self.ci)
        d["abort_rounds"] = {str(k): v for k, v in self.abort_rounds.items()}
        return d


def run_attack_trials(proto: ProtocolDef, factory, h: int, trials: int, stream: SeedStream,
                      kind: str = "", z: int = 0) -> list:
    """Fresh adversary per trial; trial j uses stream.derive(j)."""
    out = []
    for j in range(trials):
        adv = factory()
        s = stream.derive(j)
        ex = run_with_adversary(proto, adv, {h}, stream=s)
        xd = getattr(adv, "x_at_decision", None)
        out.append(TrialOutcome(j, list(s.path), h, kind or adv.kind, z, ex.abort_round, ex.placement,
                                ex.out, xd))
    return out


def honest_reference(proto: ProtocolDef, trials: int, stream: SeedStream) -> list:
    """Honest outputs under the same coin streams as run_attack_trials."""
    return [run_honest(proto, proto.sample_coins(stream.derive(j).derive(0)))[1] for j in range(trials)]


def summarize(outcomes: list, target: int) -> tuple:
    hits = sum(1 for o in outcomes if o.out == target)
    pr = Proportion(hits, len(outcomes))
    return hits, pr


def abort_histogram(outcomes: list) -> dict:
    hist: dict = {}
    for o in outcomes:
        key = "none" if o.abort_round is None else f"{o.abort_round}{o.placement[0]}"
        hist[key] = hist.get(key, 0) + 1
    return dict(sorted(hist.items()))


def lemma_bound(kind: str, n: int, r: int, k: int, k_star: int | None = None, rho: float = 1.0,
                gamma: float | None = None) -> float | None:
    """Explicit (asymptotic-regime) bias lower bound from the matching lemma."""
    if r < 2:
        return None
    lg = math.log2(r)
    if kind == "mart":
        return 1.0 / (40 * 128 * math.sqrt(r)) - 1.0 / (200 * r)
    if kind == "sing":
        return 1.0 / (1024 * math.sqrt(r) * lg) * (1.0 / (64 ** 2 * lg)) ** (k - 1) - 2.0 / r
    if kind == "dp" and k_star is not None and gamma is not None:
        delta = 0.5 * float(gap_bound(rho, r, n, k, k_star))
        return gamma * delta / 125.0 - 1.0 / (2 * r)
    return None


def sing_gamma(n: int, r: int, k: int, rho: float) -> float:
    """gamma = alpha / sqrt(n) with alpha as in the singletons analysis."""
    return rho / (256 * math.sqrt(r)) * math.sqrt(comb(n - 1, k - 1)) / (64 * math.log2(r)) ** (k - 1)


def sing_alpha(n: int, r: int, k: int, rho: float) -> float:
    return math.sqrt(n) * sing_gamma(n, r, k, rho)


def _pick_honest(cands, count, rng) -> list:
    cands = sorted(cands)
    if len(cands) <= count:
        return cands
    return sorted(int(x) for x in rng.choice(cands, size=count, replace=False))


def candidate_routes(proto: ProtocolDef, nug: NuggetResult, cfg: dict, stream: SeedStream,
                     disabled: bool = False) -> list:
    """(kind, z, h, factory, bound) for every configuration to sweep.

    ``disabled`` builds the same adversaries with their triggers switched
    off, for the coupling check.
    """
    n, r, k = proto.n, proto.r, nug.k
    rng = np.random.default_rng(stream.derive(0).rng.integers(2 ** 62))
    allowed = cfg.get("routes")
    out = []

    def want(kind):
        return allowed is None or kind in allowed

    mart_sets = None
    if nug.k_star == k + 1:
        mart_sets = (nug.S1, nug.S0, nug.H)
    elif nug.degenerate:
        # singleton sets over A1 / A0 also satisfy the martingale-route shape with H = A0
        mart_sets = (nug.S1, nug.S0, frozenset(nug.partition["A0"]))
    if mart_sets is not None and want("mart"):
        S, Sp, H = mart_sets
        table = build_x(proto, S, N=cfg["sample_budget"], stream=stream.derive(1))
        bnd = lemma_bound("mart", n, r, k)
        for z in (0, 1):
            for h in _pick_honest(H, cfg["max_honest"], rng):
                out.append(("mart", z, h, (lambda S=S, Sp=Sp, z=z, h=h: MartAttack(S, Sp, z, h, table, disabled)), bnd))
    if 2 <= nug.k_star <= k and want("dp"):
        gamma = float(gap_threshold(nug.rho_star, r, n, k, nug.k_star))
        bnd = lemma_bound("dp", n, r, k, nug.k_star, nug.rho_star, gamma)
        for z in (0, 1):
            for h in _pick_honest(nug.H, cfg["max_honest"], rng):
                out.append(("dp", z, h, (lambda z=z, h=h: DpAttack(nug.S1, nug.S0, z, h, gamma, r, disabled=disabled)), bnd))
    if nug.k_star == 1 and want("sing"):
        gamma = sing_gamma(n, r, k, nug.rho_star)
        bnd = lemma_bound("sing", n, r, k)
        for z in (0, 1):
            for h in _pick_honest(nug.honest_candidates(z), cfg["max_honest"], rng):
                try:
                    SingAttack(nug.S1, nug.S0, z, h, gamma)
                except AttackConfigError:
                    continue
                out.append(("sing", z, h, (lambda z=z, h=h: SingAttack(nug.S1, nug.S0, z, h, gamma, disabled)), bnd))
    return out


def _measure(proto, kind, z, h, factory, trials, stream):
    outcomes = run_attack_trials(proto, factory, h, trials, stream, kind, z)
    p1 = sum(o.out for o in outcomes) / max(len(outcomes), 1)
    return outcomes, p1


def _result(kind, z, h, target, outcomes, bound, mult, sweep, nug, notes) -> AttackResult:
    hits, pr = summarize(outcomes, target)
    lo, hi = pr.ci()
    return AttackResult(kind, z, h, target, len(outcomes), hits, pr.p - 0.5 if outcomes else 0.0, pr.se,
                        (lo - 0.5, hi - 0.5), abort_histogram(outcomes), bound, mult, sweep,
                        None if nug is None else nug.to_json(), notes, outcomes)


def main_attack(proto: ProtocolDef, config: dict | None = None, stream=None) -> AttackResult:
    """Nugget -> route -> sweep on pilot trials -> confirm on fresh trials.

    Every (route, z, h) is scored by |p1 - 1/2| on the pilot; the winner's
    target is the bit it pushes towards. Confirmation trials use a
    disjoint seed path, so the reported bias is not selection-inflated;
    the multiplicity of the sweep is reported alongside.
    """
    cfg = dict(DEFAULTS)
    cfg.update(config or {})
    stream = stream if isinstance(stream, SeedStream) else SeedStream(0 if stream is None else int(stream))
    notes = []
    if proto.r < 2:
        return _ci93_route(proto, cfg, stream, notes)
    k = compute_k(proto.n, proto.r)
    if k is None:
        notes.append("no k satisfies C(n,k) >= r log2(r)^(2k); nugget search uses k = 1")
    nug = nugget_finder(proto, cfg["sample_budget"], cfg["epsilon"], stream.derive(10), k=k)
    routes = candidate_routes(proto, nug, cfg, stream.derive(11))
    if not routes:
        notes.append("no eligible honest party for the dispatched route")
        return AttackResult("null", 0, None, 1, 0, 0, 0.0, 0.0, (0.0, 0.0), {}, None, 0, [],
                            nug.to_json(), notes)
    sweep = []
    for j, (kind, z, h, factory, bnd) in enumerate(routes):
        _, p1 = _measure(proto, kind, z, h, factory, cfg["pilot_trials"], stream.derive(12, j))
        sweep.append({"kind": kind, "z": z, "h": h, "pilot_trials": cfg["pilot_trials"], "p1": p1})
    best = max(range(len(routes)), key=lambda j: (abs(sweep[j]["p1"] - 0.5), -j))
    kind, z, h, factory, bnd = routes[best]
    target = 1 if sweep[best]["p1"] >= 0.5 else 0
    if target != z:
        notes.append(f"selected configuration pushes towards {target}, opposite its nominal direction z={z}")
    outcomes, _ = _measure(proto, kind, z, h, factory, cfg["trials"], stream.derive(13))
    return _result(kind, z, h, target, outcomes, bnd, 2 * len(routes), sweep, nug, notes)


def coupling_mismatches(proto: ProtocolDef, result: AttackResult, config: dict | None = None, stream=None,
                        trials: int | None = None) -> int:
    """Replay the confirmation streams of ``result`` with the triggers off.

    Counts trials whose output differs from the honest execution on the
    same coins; a correct engine and adversary give zero.
    """
    cfg = dict(DEFAULTS)
    cfg.update(config or {})
    stream = stream if isinstance(stream, SeedStream) else SeedStream(0 if stream is None else int(stream))
    trials = result.trials if trials is None else trials
    if result.kind == "null":
        return 0
    if result.kind == "ci93":
        adv = CI93Attack(proto, result.z, result.h, disabled=True)
        factory = lambda: adv  # noqa: E731
    else:
        nug = NuggetResult.from_json(result.nugget)
        routes = candidate_routes(proto, nug, dict(cfg, routes=[result.kind]), stream.derive(11), disabled=True)
        match = [f for kind, z, h, f, _ in routes if (kind, z, h) == (result.kind, result.z, result.h)]
        if not match:
            raise ValueError("selected configuration not found among the rebuilt routes")
        factory = match[0]
    sub = stream.derive(13)
    outs = run_attack_trials(proto, factory, result.h, trials, sub, result.kind, result.z)
    ref = honest_reference(proto, trials, sub)
    return sum(1 for o, h in zip(outs, ref) if o.out != h or o.abort_round is not None)


def _ci93_route(proto, cfg, stream, notes) -> AttackResult:
    notes.append("r = 1: the nugget search is undefined, using the exact transcript oracle")
    try:
        CI93Attack(proto, 1, 0)
    except AttackConfigError as exc:
        notes.append(str(exc))
        return AttackResult("null", 0, None, 1, 0, 0, 0.0, 0.0, (0.0, 0.0), {}, None, 0, [], None, notes)
    routes = [(z, h) for z in (0, 1) for h in range(min(proto.n, cfg["max_honest"]))]
    sweep = []
    oracles = {(z, h): CI93Attack(proto, z, h) for z, h in routes}  # stateless across trials
    for j, (z, h) in enumerate(routes):
        adv = oracles[(z, h)]
        _, p1 = _measure(proto, "ci93", z, h, lambda adv=adv: adv, cfg["pilot_trials"], stream.derive(12, j))
        sweep.append({"kind": "ci93", "z": z, "h": h, "pilot_trials": cfg["pilot_trials"], "p1": p1})
    best = max(range(len(routes)), key=lambda j: (abs(sweep[j]["p1"] - 0.5), -j))
    z, h = routes[best]
    target = 1 if sweep[best]["p1"] >= 0.5 else 0
    adv = oracles[(z, h)]
    outcomes, _ = _measure(proto, "ci93", z, h, lambda: adv, cfg["trials"], stream.derive(13))
    return _result("ci93", z, h, target, outcomes, None, 2 * len(routes), sweep, None, notes)
