import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfl.prob_core import (GRID_EPS, LaplaceParam, SeedStream, check_laplace_ratio, first_success_dist,
                           grid_index, halfsample_deviation_freq, hoeffding_halfsample_bound,
                           laplace_from_uniform, laplace_tail, random_bernoulli_pair, ratio_eps, round_down,
                           sample_laplace, sos_grid, verify_bernoulli_lemmas, x_grid)
from cfl.stats import Proportion, binomial_se, mean_se, wilson_interval

probs = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def test_seed_stream_is_reproducible_and_paths_differ():
    a = SeedStream(7, (1, 2)).rng.random(5)
    b = SeedStream(7, (1, 2)).rng.random(5)
    c = SeedStream(7, (1, 3)).rng.random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert SeedStream(7).derive(1, 2).path == (1, 2)


def test_laplace_param_rejects_bad_scale():
    for bad in (0.0, -1.0, math.inf):
        with pytest.raises(ValueError):
            LaplaceParam(bad)
    with pytest.raises(ValueError):
        sample_laplace(0.0, SeedStream(0))


def test_inverse_cdf_midpoint_and_symmetry():
    assert laplace_from_uniform(0.5, 1.0) == 0.0
    u = np.linspace(0.01, 0.49, 25)
    assert np.allclose(laplace_from_uniform(u, 2.0), -laplace_from_uniform(1 - u, 2.0))


@given(st.floats(min_value=1e-3, max_value=10), st.floats(min_value=-20, max_value=20))
def test_inverse_cdf_matches_tail(lam, t):
    # Pr[Lap >= t] = 1 - F(t), and F^{-1}(F(t)) = t
    F = 1.0 - laplace_tail(lam, t)
    if 1e-12 < F < 1 - 1e-12:
        assert laplace_from_uniform(F, lam) == pytest.approx(t, rel=1e-6, abs=1e-6 * lam)


@pytest.mark.parametrize("lam", [0.1, 1.0, 3.0])
def test_sampled_tails_match_closed_form(lam):
    x = sample_laplace(lam, SeedStream(1), size=200_000)
    for a in (0.0, 0.5, 1.0, 2.0):
        assert abs(np.mean(x >= a * lam) - 0.5 * math.exp(-a)) < 5e-3


@given(st.floats(min_value=0, max_value=5), st.floats(min_value=-1, max_value=1),
       st.floats(min_value=1e-2, max_value=5))
def test_laplace_ratio_bound_in_regime(gamma, eps, lam):
    rep = check_laplace_ratio(gamma, gamma + eps, lam)
    assert rep.in_regime and rep.holds


def test_grids():
    assert round_down(0.30000000000000004, 0.1) == pytest.approx(0.3)
    assert grid_index(1.0, 1 / 600) == 600
    g = x_grid(3)
    assert g.size == 601 and g.step == 1 / 600
    assert sos_grid(2).upper == 2.0
    with pytest.raises(ValueError):
        round_down(1.0, 0.0)
    # snapping is idempotent on grid points
    pts = np.arange(0, 601) / 600
    assert np.array_equal(grid_index(pts, 1 / 600), np.arange(601))
    assert GRID_EPS < 1 / (200 * 1000) ** 2


@given(st.lists(probs, min_size=0, max_size=9))
def test_first_success_sums_to_one(prefix):
    q = first_success_dist(prefix + [1.0])
    assert q.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(q >= 0)


def test_first_success_rejects_bad_input():
    with pytest.raises(ValueError):
        first_success_dist([0.5, 0.5])
    with pytest.raises(ValueError):
        first_success_dist([1.5, 1.0])


def test_ratio_eps():
    assert ratio_eps([0.5, 1.0], [0.5, 1.0]) == 0.0
    assert ratio_eps([0.5, 1.0], [0.25, 1.0]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ratio_eps([0.0, 1.0], [0.1, 1.0])


@settings(max_examples=200)
@given(st.integers(min_value=0, max_value=10**9), st.sampled_from([0.05, 0.3, 1.0]))
def test_bernoulli_lemmas_on_random_pairs(seed, spread):
    p, pp = random_bernoulli_pair(SeedStream(seed), spread=spread)
    assert p[-1] == pp[-1] == 1.0
    rep = verify_bernoulli_lemmas(p, pp)
    assert rep.holds, rep


def test_identical_sequences_have_zero_eps():
    rep = verify_bernoulli_lemmas([0.2, 0.4, 1.0], [0.2, 0.4, 1.0])
    assert rep.eps == 0.0 and rep.holds and rep.worst_total <= 0


@pytest.mark.parametrize("n,ones", [(20, 10), (50, 5), (100, 50)])
def test_half_sample_frequency_below_hoeffding(n, ones):
    x = np.zeros(n, int)
    x[:ones] = 1
    for eps in (0.5, 1.0, 1.5):
        freq = halfsample_deviation_freq(x, eps, 20_000, SeedStream(n))
        se = math.sqrt(max(freq * (1 - freq), 1e-12) / 20_000)
        assert freq <= hoeffding_halfsample_bound(n, eps) + 3 * se
    with pytest.raises(ValueError):
        hoeffding_halfsample_bound(7, 1.0)


def test_wilson_and_proportion():
    lo, hi = wilson_interval(0, 10)
    assert lo == 0.0 and 0 < hi < 0.35
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    pr = Proportion(30, 100)
    assert pr.p == 0.3 and pr.se == pytest.approx(binomial_se(30, 100))
    assert math.isnan(Proportion(0, 0).p)
    mu, se = mean_se([1.0, 2.0, 3.0])
    assert mu == 2.0 and se == pytest.approx(1 / math.sqrt(3))
