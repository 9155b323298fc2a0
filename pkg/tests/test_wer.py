import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mddl.core import Action, decode_action
from mddl.wer import PositionTable, soft_expected_wer, wer, wer_table

K = 5


def random_table(rng, n=30, strictly_positive=True):
    lo = 1e-3 if strictly_positive else 0.0
    p = np.sort(rng.uniform(lo, 1.0, size=n))[::-1]
    ctr = rng.uniform(lo, 1.0, size=n)
    return PositionTable(p, ctr)


def test_all_zero_action_is_zero():
    table = random_table(np.random.default_rng(0))
    for t in range(6):
        assert wer((0,) * K, t, table) == 0.0


def test_unit_table_counts_videos():
    table = PositionTable(np.ones(30), np.ones(30))
    assert wer((1, 1, 1, 0, 0), 0, table) == 3.0


def test_direct_summation_example():
    table = PositionTable([1.0, 0.8, 0.6, 0.4, 0.2], [0.10, 0.09, 0.08, 0.07, 0.06])
    # 1.0*0.10 + 0.6*0.08
    assert wer((1, 0, 1, 0, 0), 0, table) == pytest.approx(0.148, abs=1e-15)


def test_screen_offset_uses_global_position():
    p = np.linspace(1.0, 0.1, 10)
    ctr = np.linspace(0.2, 0.05, 10)
    table = PositionTable(p, ctr)
    # t=1, k=2 -> j = 1*5 + 2 = 7 -> zero-based index 6
    assert wer((0, 1, 0, 0, 0), 1, table) == pytest.approx(p[6] * ctr[6])


def test_table_too_short():
    table = PositionTable(np.ones(5), np.ones(5))
    with pytest.raises(IndexError):
        wer((1, 0, 0, 0, 0), 1, table)


def test_table_invariants():
    with pytest.raises(ValueError):
        PositionTable([0.5, 0.9], [0.1, 0.1])       # increasing exposure
    with pytest.raises(ValueError):
        PositionTable([1.0, 0.5], [0.1, 1.5])


def test_additivity_exhaustive():
    rng = np.random.default_rng(1)
    table = random_table(rng)
    for t in range(6):
        for a in range(1 << K):
            for b in range(1 << K):
                if a & b:
                    continue
                lhs = wer(decode_action(a | b, K), t, table)
                rhs = wer(decode_action(a, K), t, table) + wer(decode_action(b, K), t, table)
                assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-15)


def test_range_bounds_and_maximum():
    rng = np.random.default_rng(2)
    table = random_table(rng)
    for t in range(6):
        upper = float((table.p[t * K:(t + 1) * K] * table.ctr[t * K:(t + 1) * K]).sum())
        values = [wer(decode_action(i, K), t, table) for i in range(1 << K)]
        assert min(values) >= 0
        assert max(values) <= upper + 1e-15
        assert values[(1 << K) - 1] == pytest.approx(upper)
        assert all(v < upper - 1e-12 for v in values[:-1])


@pytest.mark.parametrize("seed", range(20))
def test_full_beats_partial_beats_single(seed):
    table = random_table(np.random.default_rng(seed))
    a1, a2, a3 = (1, 1, 1, 0, 0), (0, 0, 1, 0, 0), (1, 1, 1, 1, 1)
    assert wer(a3, 0, table) > wer(a1, 0, table) > wer(a2, 0, table)


def test_wer_separates_equal_hamming_distances():
    table = PositionTable(0.85 ** np.arange(30), np.full(30, 0.12))
    a1, a2, a3 = (1, 1, 1, 0, 0), (0, 0, 1, 0, 0), (1, 1, 1, 1, 1)
    d12 = abs(wer(a1, 0, table) - wer(a2, 0, table))
    d13 = abs(wer(a1, 0, table) - wer(a3, 0, table))
    assert not math.isclose(d12, d13)
    # Hamming distances are equal; WER separates them
    assert sum(x != y for x, y in zip(a1, a2)) == sum(x != y for x, y in zip(a1, a3))


def test_wer_table_matches_scalar():
    table = random_table(np.random.default_rng(3))
    tab = wer_table(table, K, 6)
    assert tab.shape == (6, 32)
    for t in range(6):
        for i in range(32):
            assert tab[t, i] == pytest.approx(wer(Action.from_index(i), t, table), abs=1e-15)


# -- soft expected WER --------------------------------------------------------

def test_beta_zero_is_mean():
    assert soft_expected_wer([3.0, -1.0], [0.1, 0.3], 0.0) == pytest.approx(0.2)


@pytest.mark.parametrize("beta", [0.0, 1.0, 1e6])
def test_single_action(beta):
    assert soft_expected_wer([7.0], [0.42], beta) == 0.42


def test_scalar_evaluation():
    expected = math.exp(10) / (math.exp(10) + 1)
    assert soft_expected_wer([1.0, 0.0], [1.0, 0.0], 10.0) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.9999546, abs=1e-7)


def test_large_beta_q_does_not_overflow():
    assert soft_expected_wer([1e4, 0.0], [0.5, 0.1], 1e3) == 0.5


def test_length_mismatch():
    with pytest.raises(ValueError):
        soft_expected_wer([1.0, 2.0], [0.1], 1.0)


@settings(max_examples=200, deadline=None)
@given(q=st.lists(st.floats(-50, 50), min_size=1, max_size=32),
       beta=st.floats(0, 1e3), seed=st.integers(0, 1000))
def test_soft_within_range(q, beta, seed):
    wers = np.random.default_rng(seed).uniform(0, 1, size=len(q))
    s = soft_expected_wer(q, wers, beta)
    assert wers.min() - 1e-12 <= s <= wers.max() + 1e-12


def test_hard_limit():
    rng = np.random.default_rng(4)
    for _ in range(200):
        q = rng.normal(size=32)
        top2 = np.sort(q)[-2:]
        if top2[1] - top2[0] < 0.1:
            continue
        wers = rng.uniform(0, 0.5, size=32)
        assert abs(soft_expected_wer(q, wers, 1e3) - wers[np.argmax(q)]) < 1e-6
