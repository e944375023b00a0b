import math

import numpy as np
import pytest

from cfl import oblivious_sampling as obs
from cfl.prob_core import SeedStream


@pytest.fixture
def inst():
    return obs.adversarial_instance(20, 0.15, 0.1, 0.2)


def test_instance_shape_and_defaults(inst):
    assert inst.r == 20 and inst.n == 19
    assert inst.p == pytest.approx(1 / 19)
    assert inst.lam == pytest.approx(0.2 / (4 * math.log2(20)))
    assert np.all(inst.values[-1] == 0.2)
    assert np.allclose(inst.sigma, inst.sigma[0])


def test_instance_validation():
    with pytest.raises(ValueError):
        obs.SamplingInstance(np.array([[0.1, 0.2], [0.3, 0.4]]), 0.2, 0.1, 0.5)
    with pytest.raises(ValueError):
        obs.SamplingInstance(np.array([[2.0], [0.3]]), 0.2, 0.1, 0.5)
    with pytest.raises(ValueError):
        obs.SamplingInstance(np.array([[0.1], [0.3]]), 0.2, 0.0, 0.5)
    with pytest.raises(ValueError):
        obs.adversarial_instance(1, 0.1, 0.1, 0.1)


def test_leave_out_means(inst):
    loo = inst.leave_out
    # mean = p * s^h + (1-p) * s^{\h}
    assert np.allclose(inst.p * inst.values + (1 - inst.p) * loo, inst.means[:, None])


def test_threshold_strategy_is_fooled(inst):
    for h in range(inst.n):
        out = obs.run_threshold(inst, 0.15, True, h)
        assert out.J == h + 1
        assert out.reward == 0.15 - 0.1
    assert obs.threshold_reward(inst, 0.15) == pytest.approx(0.05)


def test_lapexp_single_and_batch_agree(inst):
    single = np.mean([obs.run_lapexp(inst, SeedStream(0, (j,))).reward for j in range(4000)])
    _, _, rew = obs.run_lapexp_batch(inst, 40_000, SeedStream(1))
    se = rew.std() / math.sqrt(4000)
    assert abs(single - rew.mean()) < 4 * se


def test_halt_probabilities(inst):
    exact = obs.exact_halt_probs(inst)
    est = obs.estimate_halt_probs(inst, 4000, SeedStream(2))
    assert np.all(np.abs(exact - est) < 4 * np.sqrt(exact * (1 - exact) / 4000) + 1e-9)


def test_lapexp_beats_threshold_and_bound():
    inst = obs.adversarial_instance(50, 0.15, 0.1, 0.2)
    _, _, rew = obs.run_lapexp_batch(inst, 20_000, SeedStream(3))
    rep = obs.halting_bound(inst, obs.exact_halt_probs(inst))
    se = rew.std() / math.sqrt(len(rew))
    assert rew.mean() >= rep.lower_bound - 3 * se
    assert rew.mean() > 0.05 + 3 * se
    assert len(rep.similar) + len(rep.nonsimilar) == inst.n
    with pytest.raises(ValueError):
        obs.halting_bound(inst, np.zeros(3))


def test_corollary_regime_flag():
    r, gamma = 64, 0.2
    lam = gamma / (4 * math.log2(r))
    ok = obs.distribution_bound(1e-4, 1e-3, gamma, 0.5, lam, 0.1, r)
    assert ok.simplified_ok and ok.simplified == pytest.approx(gamma * 0.5 / 125 - 1 / (2 * r))
    off = obs.distribution_bound(1e-4, 1e-3, gamma, 0.5, lam * 2, 0.1, r)
    assert not off.simplified_ok and off.simplified is None
    warn = obs.distribution_bound(10.0, 1e-3, gamma, 0.5, lam, 0.1, r)
    assert warn.warning


@pytest.mark.parametrize("seed", range(50))
def test_sigma_tail_bounds_on_random_tails(seed):
    v, w, alpha, beta, lam, p = obs.random_admissible_tail(SeedStream(seed))
    rep = obs.check_sigma_tail_bounds(v, w, alpha, beta, lam, p)
    assert rep.precondition and rep.holds


def test_sigma_tail_precondition_detected():
    rep = obs.check_sigma_tail_bounds([0.0, 1.0], [0.5, 0.5], 0.1, 0.01, 0.1, 0.1)
    assert not rep.precondition and rep.holds is None
    with pytest.raises(ValueError):
        obs.check_sigma_tail_bounds([0.0, 1.0], [0.5, 0.6], 0.1, 0.01, 0.1, 0.1)
