"""Acceptance suite. Each test records one PASS/FAIL line, repeated in the
terminal summary."""

import math
import time

import numpy as np
import pytest

from cfl import martingale as mg
from cfl import oblivious_sampling as obs
from cfl.attacks import (MartAttack, NuggetResult, build_x, check_nugget_structure, coupling_mismatches,
                         exact_trajectories, half_sample_event_freq, main_attack, nugget_finder,
                         quality_violation, run_attack_trials)
from cfl.attacks.gamevalue import exact_conditional
from cfl.attacks.orchestrate import sing_alpha
from cfl.prob_core import SeedStream, random_bernoulli_pair, sample_laplace, verify_bernoulli_lemmas
from cfl.protocol_core import run_with_adversary, singletons
from cfl.protocols import MajorityCoin, NullProtocol, ParityCoin, PlantedGap, majority_coin, tabulate

SEED = 2024


@pytest.fixture(scope="module")
def majority_attack():
    proto = majority_coin(128, 9)
    cfg = {"trials": 10_000}
    t = time.perf_counter()
    res = main_attack(proto, cfg, SeedStream(SEED))
    return proto, cfg, res, time.perf_counter() - t


@pytest.fixture(scope="module")
def tiny_scripted():
    return tabulate(majority_coin(2, 3))


def test_laplace_tails(criterion):
    t = time.perf_counter()
    worst = 0.0
    for j, lam in enumerate((0.1, 1.0)):
        x = sample_laplace(lam, SeedStream(SEED, (1, j)), size=10**6)
        for a in (0.0, 0.5, 1.0, 2.0):
            emp = float(np.mean(x >= a * lam))
            worst = max(worst, abs(emp - 0.5 * math.exp(-a)))
            emp_lo = float(np.mean(x <= -a * lam))
            worst = max(worst, abs(emp_lo - 0.5 * math.exp(-a)))
    dt = time.perf_counter() - t
    criterion(1, worst <= 3e-3 and dt < 10, f"max tail error {worst:.2e} (tol 3e-3), {dt:.1f}s")


def test_bernoulli_lemmas(criterion):
    t = time.perf_counter()
    bad_a1 = bad_total = 0
    for j in range(1000):
        p, pp = random_bernoulli_pair(SeedStream(SEED, (2, j)))
        rep = verify_bernoulli_lemmas(p, pp)
        bad_a1 += not rep.a1
        bad_total += not rep.total
    dt = time.perf_counter() - t
    criterion(2, bad_a1 == 0 and bad_total == 0 and dt < 5,
              f"violations: first-success identity {bad_a1}, total variation {bad_total}; {dt:.1f}s")


def test_gap_theorem_majority_doob(criterion):
    t = time.perf_counter()
    parts, ok = [], True
    for j, r in enumerate((11, 51, 101)):
        ens = mg.majority_doob(r, 10**5, SeedStream(SEED, (3, j)))
        gs = mg.gap_stats(ens)
        ex = mg.check_ex_machina(ens, 0.0, 3.0)
        ms, mj = gs.margin_se("sos"), gs.margin_se("jump")
        ok &= ms >= 3 and mj >= 3 and ex.holds
        parts.append(f"r={r}: sos {gs.p_sos:.3f} ({ms:.0f} SE), jump {gs.p_jump:.3f} ({mj:.0f} SE), "
                     f"E[X_r^2-X_0^2]={ex.lhs - 0.25:.4f}+1/4 vs E[sumY^2]={ex.rhs:.4f}")
    dt = time.perf_counter() - t
    criterion(3, ok and dt < 120, "; ".join(parts) + f"; {dt:.1f}s")


def test_oblivious_sampling_separation(criterion):
    t = time.perf_counter()
    tsh, sigma = 0.15, 0.1
    inst = obs.adversarial_instance(100, tsh, sigma, 0.2)
    per_party = [obs.run_threshold(inst, tsh, True, h).reward for h in range(inst.n)]
    exact = all(v == tsh - sigma for v in per_party)
    hs, J, reward = obs.run_lapexp_batch(inst, 10**5, SeedStream(SEED, (4,)))
    mu = float(reward.mean())
    se = float(reward.std(ddof=1) / math.sqrt(len(reward)))
    bound = obs.halting_bound(inst, obs.exact_halt_probs(inst)).lower_bound
    tails_ok = 0
    for j in range(1000):
        v, w, alpha, beta, lam, p = obs.random_admissible_tail(SeedStream(SEED, (4, 1, j)))
        rep = obs.check_sigma_tail_bounds(v, w, alpha, beta, lam, p)
        tails_ok += bool(rep.precondition and rep.holds)
    dt = time.perf_counter() - t
    ok = exact and mu >= bound - 3 * se and mu - (tsh - sigma) >= 3 * se and tails_ok == 1000 and dt < 120
    criterion(4, ok, f"threshold reward {tsh - sigma:.2f} for all {inst.n} parties: {exact}; LapExp {mu:.4f} "
                     f"+- {se:.1e} (bound {bound:.4f}); tail bounds {tails_ok}/1000; {dt:.1f}s")


def test_buildx_against_exact(criterion, tiny_scripted):
    t = time.perf_counter()
    proto = tiny_scripted
    S = singletons([0, 1])
    r = proto.r
    delta = 1.0 / (200 * r)
    table = build_x(proto, S, N=100_000, stream=SeedStream(SEED, (5,)), exact=False)
    b, out = exact_trajectories(proto, S)
    checked, worst = 0, -math.inf
    ok = True
    for i in range(1, r + 1):
        truth = exact_conditional(table, b, out, i)
        rt = table.rounds[i]
        for ctx, x, q in zip(rt.ctx, rt.vals, rt.q):
            if q < 100:
                continue
            e, _ = truth[tuple(int(v) for v in ctx)]
            gap = abs(x * delta - e)
            tol = delta + 3 * math.sqrt(e * (1 - e) / q)
            checked += 1
            worst = max(worst, gap - tol)
            ok &= gap <= tol + 1e-12
    qv = quality_violation(table, b, out, cushion=3.0)
    exact_qv = quality_violation(build_x(proto, S), b, out)
    ok &= bool(np.all(qv <= 1.0 / r**2)) and bool(np.all(exact_qv == 0))
    dt = time.perf_counter() - t
    criterion(5, ok and dt < 60, f"{checked} contexts with q>=100, worst excess {worst:.2e}; quality per round "
                                 f"{np.round(qv[1:], 4).tolist()} (limit {1 / r**2:.3f}), exact table "
                                 f"{exact_qv[1:].tolist()}; {dt:.1f}s")


def test_mart_abort_and_optional_stopping(criterion, majority_attack, tiny_scripted):
    proto, cfg, res, _ = majority_attack
    nug = NuggetResult.from_json(res.nugget)
    A0 = sorted(nug.partition["A0"])
    S, Sp = nug.S1, nug.S0
    table = build_x(proto, S, N=50_000, stream=SeedStream(SEED, (6, 0)))
    h = A0[0]
    freqs, ses = [], []
    for z in (0, 1):
        outs = run_attack_trials(proto, lambda z=z: MartAttack(S, Sp, z, h, table), h, 10_000,
                                 SeedStream(SEED, (6, 1, z)), "mart", z)
        a = np.array([o.abort_round is not None for o in outs], float)
        freqs.append(a.mean())
        ses.append(a.std(ddof=1) / math.sqrt(len(a)))
    total = sum(freqs)
    se = math.sqrt(sum(s * s for s in ses))
    ok_abort = total >= 1 / 20 - 3 * se

    tiny = tiny_scripted
    S1, S0 = singletons([0]), singletons([1])
    tab = build_x(tiny, S1)
    band = 1.0 / (200 * tiny.r)
    exact_means, mc = [], []
    for z in (0, 1):
        xs = []
        for j, coins in enumerate(tiny.enumerate_coins(12)):
            adv = MartAttack(S1, S0, z, 1, tab)
            run_with_adversary(tiny, adv, {1}, stream=SeedStream(SEED, (6, 2, j)), coins=coins)
            xs.append(adv.x_at_decision)
        exact_means.append(float(np.mean(xs)))
        outs = run_attack_trials(tiny, lambda z=z: MartAttack(S1, S0, z, 1, tab), 1, 3000,
                                 SeedStream(SEED, (6, 3, z)), "mart", z)
        v = np.array([o.x_at_decision for o in outs])
        mc.append((float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))))
    ok_exact = all(abs(m - 0.5) <= band + 1e-12 for m in exact_means)
    ok_mc = all(abs(m - 0.5) <= band + 3 * s for m, s in mc)
    criterion(6, ok_abort and ok_exact and ok_mc,
              f"abort probabilities {freqs[0]:.4f} + {freqs[1]:.4f} = {total:.4f} (need >= 0.05 - 3SE); "
              f"E[X at decision] exact {[round(m, 6) for m in exact_means]}, sampled "
              f"{[f'{m:.4f}+-{s:.4f}' for m, s in mc]} (band 1/2 +- {band:.5f})")


def test_half_sample_event(criterion, majority_attack):
    proto, cfg, res, _ = majority_attack
    nug = NuggetResult.from_json(res.nugget)
    z = 1
    h = min(nug.honest_candidates(z))
    alpha = sing_alpha(proto.n, proto.r, nug.k, nug.rho_star)
    freq, _ = half_sample_event_freq(proto, nug.S1, nug.S0, h, alpha, 10_000, SeedStream(SEED, (7,)))
    bound = 4 * proto.r * math.exp(-alpha**2 / 192)
    note = " (bound above 1 at this scale)" if bound >= 1 else ""
    criterion(7, freq <= bound, f"alpha={alpha:.4f}, frequency {freq:.4f} <= {bound:.4g}{note}")


def test_end_to_end_bias(criterion, majority_attack):
    proto, cfg, res, dt = majority_attack
    t = time.perf_counter()
    mism = coupling_mismatches(proto, res, cfg, SeedStream(SEED))
    dt += time.perf_counter() - t
    ok = res.z_score >= 5 and mism == 0 and dt < 300
    criterion(8, ok, f"{res.kind} z={res.z} h={res.h} toward {res.target}: bias {res.bias:.4f} +- {res.se:.4f} "
                     f"({res.z_score:.1f} SE, {res.selection_multiplicity} configurations piloted); "
                     f"coupling mismatches {mism}/{res.trials}; {dt:.0f}s")


def _random_protocol(rng):
    kind = rng.integers(5)
    n = int(rng.integers(6, 31))
    if kind == 0:
        return MajorityCoin(n, int(rng.choice([3, 5, 7])))
    if kind == 1:
        return MajorityCoin(n, int(rng.choice([2, 4, 6])), tiebreak=True)
    if kind == 2:
        return ParityCoin(n, int(rng.integers(2, 7)))
    if kind == 3:
        return NullProtocol(n, int(rng.integers(2, 7)))
    marked = sorted(int(x) for x in rng.choice(n, size=int(rng.integers(1, 3)), replace=False))
    return PlantedGap(n, int(rng.integers(2, 7)), marked)


def test_nugget_structure(criterion):
    rng = np.random.default_rng(SEED)
    failures, seen = [], set()
    for j in range(20):
        proto = _random_protocol(rng)
        # k is overridden at random so the deeper levels are reached at small n too;
        # overrides are limited to what the partition can carry (|P| >= 2(k-1))
        P = proto.n - 2 * math.ceil(proto.n / 3)
        k = [None] + [c for c in (2, 3) if P >= 2 * (c - 1)]
        k = k[int(rng.integers(len(k)))]
        res = nugget_finder(proto, N=2000, stream=SeedStream(SEED, (9, j)), k=k)
        checks = check_nugget_structure(res, proto.n)
        seen.add(res.k_star == res.k + 1 and "mart" or res.k_star == 1 and "sing" or "dp")
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            failures.append(f"{proto.describe()}: {bad}")
    criterion(9, not failures, f"20 protocols, routes reached {sorted(seen)}; failures {failures or 'none'}")
