import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vontrade.embedding import BPSK, QAM8, QPSK, VirtualLink
from vontrade.traffic import fs_needed, fs_needed_all, generate_demands, settle_slot


def vlink(i, mod, n_fs):
    return VirtualLink(i, 0, (0, 1), 0, 1, (0,), mod, tuple(range(n_fs)))


def test_demand_range():
    vls = [vlink(0, QPSK, 3)]  # X = 150
    d = generate_demands(np.random.default_rng(1), vls, 2000)
    assert d.shape == (1, 2000)
    assert d.min() >= 10 and d.max() <= 290


def test_demand_mean_is_capacity():
    vls = [vlink(0, BPSK, 2)]  # X = 50, draws on [10, 90]
    d = generate_demands(np.random.default_rng(2), vls, 100_000)
    assert d.min() >= 10 and d.max() <= 90
    assert abs(d.mean() - 50) / 50 < 0.02


def test_demands_deterministic():
    vls = [vlink(0, QPSK, 3), vlink(1, QAM8, 2)]
    a = generate_demands(np.random.default_rng(9), vls, 4)
    b = generate_demands(np.random.default_rng(9), vls, 4)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("gbps, expect", [(170, 4), (0, 0), (200, 4), (200.0001, 5), (1, 1)])
def test_fs_needed(gbps, expect):
    assert fs_needed(gbps, QPSK) == expect


def test_fs_needed_negative():
    with pytest.raises(ValueError):
        fs_needed(-1, QPSK)


def test_fs_needed_vectorized_agrees():
    vls = [vlink(0, QPSK, 3), vlink(1, QAM8, 2), vlink(2, BPSK, 4)]
    offered = np.array([170.0, 75.0, 0.0])
    assert list(fs_needed_all(offered, vls)) == [fs_needed(x, vl.modulation) for x, vl in zip(offered, vls)]


def test_blocked_quarter_without_trading():
    vls = [vlink(0, QPSK, 3)]
    r = settle_slot(0, np.array([200.0]), vls, np.array([3]), np.array([0]))
    assert r.total_blocked / r.total_offered == 0.25


def test_acquired_fs_clears_blocking():
    vls = [vlink(0, QPSK, 3)]
    r = settle_slot(0, np.array([200.0]), vls, np.array([3]), np.array([1]))
    assert r.total_blocked == 0
    assert r.traded_fs_used[0] == 1


def test_overprovisioned():
    vls = [vlink(0, BPSK, 2)]
    r = settle_slot(0, np.array([10.0]), vls, np.array([2]), np.array([0]))
    assert (r.total_carried, r.total_blocked) == (10.0, 0.0)
    assert r.own_fs_used[0] == 1


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.sampled_from([BPSK, QPSK, QAM8]),
            st.integers(1, 10),
            st.floats(0, 2000, allow_nan=False),
            st.integers(0, 10),
            st.integers(0, 10),
        ),
        min_size=1,
        max_size=8,
    )
)
def test_conservation_and_monotone(items):
    vls = [vlink(i, mod, n) for i, (mod, n, _, _, _) in enumerate(items)]
    offered = np.array([x[2] for x in items])
    own = np.array([min(x[3], x[1]) for x in items])
    acq = np.array([x[4] for x in items])
    r = settle_slot(0, offered, vls, own, acq)
    for o, c, b in zip(r.offered, r.carried, r.blocked):
        assert math.fsum([c, b]) == o
        assert 0 <= c <= o
    more = settle_slot(0, offered, vls, own, acq + 1)
    assert (more.carried >= r.carried).all()
