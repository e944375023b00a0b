import json

import numpy as np
import pytest

from cfl.prob_core import SeedStream
from cfl.protocol_core import ProtocolDef, backup_matrix, choose_all, run_honest, singletons
from cfl.protocols import (MajorityCoin, NullProtocol, ParityCoin, PlantedGap, XorRoundsProtocol,
                           exact_out_distribution, group_parties, honest_bias, make_protocol, majority_coin,
                           parity_coin, scripted, tabulate)


def _slow_sample(proto, S, count, seed):
    return ProtocolDef.sample_backups(proto, S, count, SeedStream(seed))


@pytest.mark.parametrize("proto", [MajorityCoin(6, 5), MajorityCoin(6, 4, tiebreak=True), ParityCoin(6, 3)],
                         ids=["maj5", "maj4tb", "parity3"])
def test_fast_backup_sampling_matches_generic_path(proto):
    S = choose_all(range(6), 2)
    b, out = proto.sample_backups(S, 20_000, SeedStream(1))
    b2, out2 = _slow_sample(proto, S, 3000, 2)
    assert np.array_equal(b[:, :, proto.r], np.broadcast_to(out[:, None], b[:, :, proto.r].shape))
    assert np.abs(b.mean(axis=0) - b2.mean(axis=0)).max() < 0.06
    # the counts shortcut must agree with the generic combiner on the same draws
    fast, _ = proto.sample_backups(S, 500, SeedStream(3))
    slow, _ = XorRoundsProtocol.sample_backups(_NoCounts(proto), S, 500, SeedStream(3))
    assert np.array_equal(fast, slow)


class _NoCounts(XorRoundsProtocol):
    def __init__(self, inner):
        self.inner = inner
        super().__init__(inner.n, inner.r)

    def combine(self, c):
        return self.inner.combine(c)


def test_majority_validation_and_describe():
    with pytest.raises(ValueError):
        MajorityCoin(5, 4)
    with pytest.raises(ValueError):
        MajorityCoin(1, 3)
    assert MajorityCoin(4, 4, tiebreak=True).describe()["tiebreak"] is True


@pytest.mark.parametrize("proto", [majority_coin(2, 3), parity_coin(3, 2), majority_coin(2, 2, True)])
def test_exact_output_is_unbiased(proto):
    assert exact_out_distribution(proto) == 0.5


def test_honest_bias_estimate():
    p, se = honest_bias(majority_coin(9, 5), 4000, SeedStream(0))
    assert abs(p - 0.5) < 4 * se


def test_null_and_planted_backups():
    nul = NullProtocol(5, 3)
    coins = nul.sample_coins(SeedStream(1))
    tr, out = run_honest(nul, coins)
    assert np.all(backup_matrix(nul, coins, singletons(range(5)), tr) == out)
    pl = PlantedGap(6, 4, [0])
    S = choose_all(range(6), 2)
    b, out = pl.sample_backups(S, 1000, SeedStream(2))
    hit = S.members_mask(0)
    assert np.all(b[:, ~hit, :] == out[:, None, None])
    assert np.all(b[:, hit, 0] == out[:, None]) and np.all(b[:, hit, -1] == out[:, None])
    assert 0.3 < np.mean(b[:, hit, 1] != out[:, None]) < 0.7


def test_tabulate_round_trips_through_json(tmp_path):
    base = majority_coin(2, 2, tiebreak=True)
    tab = tabulate(base)
    path = tmp_path / "p.json"
    path.write_text(json.dumps(tab.to_json()))
    again = scripted(str(path))
    assert again.source == str(path)
    for coins in base.enumerate_coins():
        tr, out = run_honest(base, coins)
        tr2, out2 = run_honest(again, coins)
        assert out == out2
        for U in [{0}, {1}, {0, 1}]:
            for i in range(base.r + 1):
                assert base.residual_output(frozenset(U), coins, tr.prefix(i), i) == \
                    again.residual_output(frozenset(U), coins, tr2.prefix(i), i)


def test_scripted_fast_sampling_matches_tables():
    tab = tabulate(majority_coin(2, 3))
    S = singletons([0, 1])
    b, out = tab.sample_backups(S, 5000, SeedStream(4))
    b2, _ = _slow_sample(tab, S, 1500, 5)
    assert np.abs(b.mean(axis=0) - b2.mean(axis=0)).max() < 0.06
    assert np.array_equal(b[:, 0, -1], out)


def test_scripted_rejects_malformed_specs():
    with pytest.raises(ValueError):
        scripted({"n": 1, "r": 1})
    with pytest.raises(ValueError):
        scripted({"n": 1, "r": 1, "coin_len": 1, "out": [0, 1, 1]})
    with pytest.raises(ValueError):
        scripted({"n": 1, "r": 1, "coin_len": 1, "out": [0, 1], "backups": [{"U": [0], "i": 1, "table": [1, 1]}]})


def test_grouping_preserves_outputs():
    base = majority_coin(6, 3)
    g = group_parties(base, 2)
    assert g.n == 3
    for j in range(20):
        bc = base.sample_coins(SeedStream(6, (j,)))
        gc = g.coins_from_base(bc)
        _, out = run_honest(base, bc)
        tr, gout = run_honest(g, gc)
        assert out == gout
        assert g.residual_output(frozenset({0}), gc, tr.prefix(1), 1) == \
            base.residual_output(frozenset({0, 1}), bc, run_honest(base, bc)[0].prefix(1), 1)
    with pytest.raises(ValueError):
        group_parties(base, 3)


def test_registry():
    assert make_protocol("majority", n=5, r=3).name == "majority"
    assert make_protocol("parity", n=3).r == 1
    assert make_protocol("planted", n=6, r=3, marked=[1]).marked == {1}
    with pytest.raises(ValueError):
        make_protocol("nope")
