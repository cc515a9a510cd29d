import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import brute_select, engine_select, random_small_instance
from vontrade.embedding import QPSK, VirtualLink, VonSpec, all_vlinks, embed_von
from vontrade.engine import (
    CreditLedger,
    Request,
    TradingEngine,
    classify_roles,
    credit_of,
    eligible_offers,
    fill_request,
    to_micro,
)
from vontrade.errors import SpectrumError
from vontrade.scenarios import fig1
from vontrade.topology import SpectrumState, load_topology, topology_from_dict


def two_links(a_km, b_km):
    return topology_from_dict(
        {
            "nodes": [{"id": 0, "name": "A"}, {"id": 1, "name": "B"}, {"id": 2, "name": "C"}],
            "links": [
                {"id": 0, "a": 0, "b": 1, "length_km": a_km},
                {"id": 1, "a": 1, "b": 2, "length_km": b_km},
            ],
        }
    )


def test_credit_values():
    topo = load_topology("fig1")
    assert credit_of([(0, [1]), (1, [2])], topo) == to_micro(1.4)
    assert credit_of([], topo) == 0
    assert credit_of([(0, [0, 1]), (1, [0, 1, 2])], two_links(500, 1000)) == to_micro(4.0)


def fig1_engine(vcat=True, mu=-30.0):
    sc = fig1()
    vlinks = all_vlinks(sc.vons)
    ledger = CreditLedger([1, 2], mu)
    eng = TradingEngine(sc.topology, vlinks, sc.spectrum.copy(), ledger, vcat)
    return sc, eng, ledger


FIG1_NEED = [1, 2, 4]


def test_gating_boundary():
    sc, _, _ = fig1_engine()
    vlinks = all_vlinks(sc.vons)
    for credit, gated in ((-31.0, True), (-30.0, False), (-30.000001, True)):
        ledger = CreditLedger([1, 2], -30.0)
        ledger.balance[2] = to_micro(credit)
        roles = classify_roles(vlinks, FIG1_NEED, ledger)
        assert (2 in roles.rc_set) is not gated
        assert bool(roles.gated) is gated


def test_fig1_roles():
    _, eng, _ = fig1_engine()
    roles = eng.begin_slot(0, FIG1_NEED)
    assert roles.requests == [Request(2, 2, 1)]
    assert roles.offers == {0: {1: [1, 2]}, 1: {1: [2]}}
    assert roles.cc_set == {1}


def test_fig1_trade():
    _, eng, ledger = fig1_engine()
    eng.begin_slot(0, FIG1_NEED)
    (trade,) = eng.select_trades()
    assert trade.width == 1
    assert [(c.tc, c.grants) for c in trade.contributions] == [(1, ((0, (1,)), (1, (2,))))]
    assert trade.credit_delta == to_micro(1.4)
    assert ledger.balance == {1: 1_400_000, 2: -1_400_000}
    assert eng.spectrum.state(0, 1) == (1, 2)
    assert eng.spectrum.state(1, 2) == (1, 2)


def test_release_reverts_loans():
    _, eng, ledger = fig1_engine()
    eng.begin_slot(0, FIG1_NEED)
    eng.select_trades()
    eng.release_trades()
    assert eng.spectrum.n_loaned() == 0
    assert eng.spectrum.state(0, 1) == (1,)
    eng.spectrum.audit()
    # credit survives the release
    assert ledger.balance[1] == 1_400_000


def test_slot_without_trades():
    _, eng, ledger = fig1_engine()
    eng.begin_slot(0, [3, 3, 3])
    assert eng.select_trades() == []
    eng.release_trades()
    assert ledger.total() == 0 and eng.spectrum.n_loaned() == 0


def test_new_slot_requires_release():
    _, eng, _ = fig1_engine()
    eng.begin_slot(0, FIG1_NEED)
    eng.select_trades()
    with pytest.raises(SpectrumError):
        eng.begin_slot(1, FIG1_NEED)


def vl(i, von, route, fs):
    return VirtualLink(i, von, (0, 1), 0, 1, tuple(route), QPSK, tuple(fs))


def test_offer_off_route_excluded():
    rc = vl(0, 1, [0], [0, 1])
    elig = eligible_offers(rc, {0: {2: [5]}, 3: {3: [6]}})
    assert elig == {0: {2: [5]}}


def test_vcat_eligibility():
    rc = vl(0, 1, [0], [4, 5, 6])
    offers = {0: {2: [7, 9]}}
    assert eligible_offers(rc, offers, vcat_mode=True) == {0: {2: [7, 9]}}
    assert eligible_offers(rc, offers, vcat_mode=False) == {0: {2: [7]}}


def test_non_vcat_extends_both_sides():
    rc = vl(0, 1, [0], [4, 5, 6])
    offers = {0: {2: [2, 3, 7], 3: [0, 8]}}  # FS 1 is missing, so 0 is cut off
    assert eligible_offers(rc, offers, vcat_mode=False) == {0: {2: [2, 3, 7], 3: [8]}}


def test_lowest_credit_lender_first():
    rc = vl(0, 1, [0], [0])
    elig = {0: {2: [5, 6], 3: [7, 8]}}
    width, picks = fill_request(Request(1, 0, 2), rc, elig, {1: 0, 2: 5_000_000, 3: -2_000_000})
    assert width == 2
    assert picks[0] == [(3, 7), (3, 8)]


def test_self_surplus_first():
    rc = vl(0, 1, [0], [0])
    elig = {0: {1: [9], 3: [7]}}
    _, picks = fill_request(Request(1, 0, 1), rc, elig, {1: 0, 3: -9_000_000})
    assert picks[0] == [(1, 9)]


def test_zero_offers_on_a_route_link():
    rc = vl(0, 1, [0, 1], [0])
    assert fill_request(Request(1, 0, 2), rc, {0: {2: [3]}, 1: {}}, {1: 0, 2: 0}) == (0, {})


def test_uniform_width_is_min_over_links():
    rc = vl(0, 1, [0, 1], [0])
    width, picks = fill_request(Request(1, 0, 3), rc, {0: {2: [3, 4, 5]}, 1: {2: [3]}}, {1: 0, 2: 0})
    assert width == 1
    assert {link: len(c) for link, c in picks.items()} == {0: 1, 1: 1}


def test_non_vcat_picks_best_window():
    # below the block sits a poor lender; above, a cheap lender behind a mid-priced one
    rc = vl(0, 1, [0], [4, 5])
    elig = {0: {2: [3], 3: [6], 4: [7]}}
    credits = {1: 0, 2: 5_000_000, 3: 3_000_000, 4: -9_000_000}
    width, picks = fill_request(Request(1, 0, 2), rc, elig, credits, vcat_mode=False)
    assert width == 2
    assert sorted(fs for _, fs in picks[0]) == [6, 7]


def test_rc_order_by_credit():
    topo = load_topology("fig1")
    s = SpectrumState(topo.n_links, 30)
    v1 = embed_von(VonSpec(1, (0, 2), ((0, 1),)), topo, s, 2, 0, 0)
    v2 = embed_von(VonSpec(2, (0, 2), ((0, 1),)), topo, s, 2, 0, 1)
    v3 = embed_von(VonSpec(3, (0, 2), ((0, 1),)), topo, s, 2, 0, 2)
    ledger = CreditLedger([1, 2, 3], -30)
    ledger.balance = {1: -2, 2: 3, 3: -1}
    roles = classify_roles(all_vlinks([v1, v2, v3]), [3, 3, 3], ledger)
    assert [r.von for r in roles.requests] == [2, 3, 1]


# reclaim ----------------------------------------------------------------


def three_von_scenario():
    """The two-VON triangle plus a third VON on A-C-B whose 3-FS block can also lend."""
    sc = fig1(fs_total=16)
    spectrum = sc.spectrum
    topo = sc.topology
    v3 = embed_von(VonSpec(3, (0, 1), ((0, 1),)), topo, spectrum, 3, 0, 3, routes={(0, 1): [0, 1]})
    vons = sc.vons + [v3]
    return topo, vons, spectrum


def test_reclaim_reverses_credit():
    _, eng, ledger = fig1_engine()
    eng.begin_slot(0, FIG1_NEED)
    (trade,) = eng.select_trades()
    released, again = eng.reclaim(1, 0)
    assert released == [trade]
    assert again == []  # no other lender on A-C
    assert ledger.balance == {1: 0, 2: 0}
    assert eng.spectrum.n_loaned() == 0
    eng.spectrum.audit()


def test_reclaim_without_loans_is_noop():
    _, eng, ledger = fig1_engine()
    eng.begin_slot(0, [3, 3, 3])
    assert eng.reclaim(1, 0) == ([], [])
    assert ledger.total() == 0


def test_reclaim_wrong_owner():
    _, eng, _ = fig1_engine()
    eng.begin_slot(0, FIG1_NEED)
    with pytest.raises(SpectrumError):
        eng.reclaim(2, 0)


def test_reclaim_then_retrade_matches_fresh_run():
    topo, vons, spectrum = three_von_scenario()
    vlinks = all_vlinks(vons)
    need = [1, 2, 4, 2]
    ledger = CreditLedger([1, 2, 3], -30)
    eng = TradingEngine(topo, vlinks, spectrum.copy(), ledger)
    eng.begin_slot(0, need)
    (first,) = eng.select_trades()
    assert [c.tc for c in first.contributions] == [1]
    released, again = eng.reclaim(1, 0)
    assert released == [first] and len(again) == 1

    # the same slot with a1-c1 never offering its surplus
    fresh_ledger = CreditLedger([1, 2, 3], -30)
    fresh = TradingEngine(topo, vlinks, spectrum.copy(), fresh_ledger)
    fresh.begin_slot(0, [3, 2, 4, 2])
    (expect,) = fresh.select_trades()
    assert again[0].contributions == expect.contributions
    assert ledger.balance == fresh_ledger.balance
    assert sorted(eng.spectrum.loaned_cells()) == sorted(fresh.spectrum.loaned_cells())


# oracle and properties --------------------------------------------------


def test_matches_exhaustive_selector():
    for seed in range(400):
        inst = random_small_instance(np.random.default_rng([101, seed]))
        assert engine_select(inst) == brute_select(inst), f"seed {seed}"


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_exhaustive_selector_property(seed):
    inst = random_small_instance(np.random.default_rng(seed))
    assert engine_select(inst) == brute_select(inst)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(0, 5), min_size=1, max_size=5))
def test_zero_sum_through_slots_and_reclaims(seed, reclaims):
    rng = np.random.default_rng(seed)
    inst = random_small_instance(rng)
    if not inst.vlinks:
        return
    ledger = CreditLedger(inst.credits, inst.mu)
    ledger.balance = {v: 0 for v in inst.credits}
    spectrum = inst.spectrum.copy()
    spectrum.debug = True
    eng = TradingEngine(inst.topology, inst.vlinks, spectrum, ledger, inst.vcat)
    for slot in range(3):
        need = [int(rng.integers(0, 2 * v.fs_count + 2)) for v in inst.vlinks]
        eng.begin_slot(slot, need)
        eng.select_trades()
        for r in reclaims:
            target = inst.vlinks[r % len(inst.vlinks)]
            eng.reclaim(target.von, target.id)
            assert ledger.total() == 0
        # one owner and at most one borrower per cell
        for trade in eng.active:
            for link, fs, owner in trade.cells():
                assert spectrum.state(link, fs) == (owner, trade.rc)
        eng.release_trades()
        assert ledger.total() == 0
        assert spectrum.n_loaned() == 0
        spectrum.audit()
