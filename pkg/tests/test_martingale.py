import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfl import martingale as mg
from cfl.prob_core import SeedStream


def test_ensemble_validation():
    with pytest.raises(ValueError):
        mg.as_ensemble([[0.5, 1.2]])
    assert mg.as_ensemble([0.5, 1.0]).shape == (1, 2)


def test_diffs_and_sums():
    x = np.array([0.5, 0.75, 0.25, 1.0])
    assert np.allclose(mg.diffs(x), [0.25, -0.5, 0.75])
    assert mg.sum_of_squares(x) == pytest.approx(0.0625 + 0.25 + 0.5625)
    assert np.allclose(mg.running_sos(x), [0, 0.0625, 0.3125, 0.875])


@pytest.mark.parametrize("r", [1, 3, 11])
def test_majority_doob_table_is_a_martingale(r):
    table = mg.majority_doob_table(r)
    assert table[0][0] == 0.5
    assert set(np.unique(table[r])) <= {0.0, 1.0}
    for i in range(r):
        for h in range(i + 1):
            assert table[i][h] == pytest.approx(0.5 * (table[i + 1][h] + table[i + 1][h + 1]))


def test_majority_doob_sequences():
    x = mg.majority_doob(11, 2000, SeedStream(0))
    assert np.all(x[:, 0] == 0.5)
    assert set(np.unique(x[:, -1])) == {0.0, 1.0}
    with pytest.raises(ValueError):
        mg.majority_doob(4, 10, SeedStream(0))


def test_gap_stats_majority_vs_constant():
    gs = mg.gap_stats(mg.majority_doob(11, 20_000, SeedStream(1)))
    assert gs.endpoint_violations == 0
    assert gs.margin_se("sos") > 3 and gs.margin_se("jump") > 3
    flat = mg.gap_stats(mg.constant_sequences(5, 100))
    assert flat.p_sos == 0 and flat.p_jump == 0
    assert flat.endpoint_violations == 100  # constant 1/2 never reaches {0, 1}
    assert flat.margin_se("sos") == -math.inf


def test_ex_machina_identity():
    ens = mg.majority_doob(21, 50_000, SeedStream(2))
    rep = mg.check_ex_machina(ens, 0.0)
    assert rep.holds
    assert rep.lhs == pytest.approx(0.25, abs=0.01) and rep.rhs == pytest.approx(0.25, abs=0.01)
    drift = mg.drift_sequences(5, 5000, SeedStream(3), drift=0.1)
    assert not mg.check_ex_machina(drift, 0.0).holds
    assert mg.check_ex_machina(drift, 0.1).holds  # inside +- 2 r delta


@pytest.mark.parametrize("flavor", ["weak", "sos_weak"])
def test_classify_accepts_martingale_and_flags_drift(flavor):
    ens = mg.majority_doob(9, 50_000, SeedStream(4))
    rep = mg.classify(ens, 1 / 1800, flavor)
    assert not rep.inconclusive and rep.violating_bins == 0 and rep.gamma_hat == 0.0
    drift = mg.drift_sequences(5, 20_000, SeedStream(5), drift=0.1)
    bad = mg.classify(drift, 0.05, flavor, delta_threshold=0.05)
    assert bad.violating_bins > 0 and bad.gamma_hat == 1.0
    assert bad.delta_hat == pytest.approx(0.1)


def test_classify_sparse_is_inconclusive():
    ens = mg.majority_doob(9, 10, SeedStream(6))
    rep = mg.classify(ens, 1e-6, "sos_weak", min_count=1000)
    assert rep.inconclusive
    with pytest.raises(ValueError):
        mg.classify(ens, 0.1, "strong")


@given(st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=2, max_size=12))
def test_coupled_u_freezes_after_threshold(xs):
    x = np.array(xs)
    u = mg.coupled_u_sequence(x)
    prior = mg.running_sos(x)
    for i in range(len(x)):
        if i == 0 or np.all(prior[:i] <= mg.SOS_THRESHOLD + 1e-15):
            assert u[i] == x[i]
        else:
            assert u[i] == u[i - 1]


def test_frozen_sequence_second_moment():
    # exact Doob construction, so delta = 0; U_0 = 1/2 contributes the 1/4 offset
    ens = mg.majority_doob(51, 20_000, SeedStream(12))
    u_last = mg.coupled_u_sequence(ens)[:, -1]
    m, se = np.mean(u_last ** 2), np.std(u_last ** 2) / math.sqrt(len(u_last))
    p_sos = mg.gap_stats(ens).p_sos
    assert m - 0.25 <= 0.18 + 3 * se
    assert m >= 0.5 - p_sos - 3 * se
