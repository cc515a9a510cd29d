"""Credit accounting and centralized spectrum trading.

Credits are fixed-point integers in micro-credits (1e-6), so the ledger is
exactly zero-sum. A contribution of S_i FSs on link i earns S_i * l_i where
l_i is the link's normalized length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from vontrade.embedding import VirtualLink
from vontrade.errors import SpectrumError
from vontrade.topology import MICRO, SpectrumState, Topology


def to_micro(credit: float) -> int:
    return round(credit * MICRO)


def from_micro(micro: int) -> float:
    return micro / MICRO


class CreditLedger:
    """Cumulative credit per VON (micro-credits) and the forbidden threshold."""

    def __init__(self, vons: Iterable[int], threshold_mu: float) -> None:
        self.balance: dict[int, int] = {v: 0 for v in vons}
        self.threshold_mu = threshold_mu
        self.mu_micro = to_micro(threshold_mu)

    def __getitem__(self, von: int) -> int:
        return self.balance[von]

    def credit(self, von: int) -> float:
        return from_micro(self.balance[von])

    def total(self) -> int:
        return sum(self.balance.values())

    def is_gated(self, von: int) -> bool:
        # strict: forbidden only when the balance is below the threshold
        return self.balance[von] < self.mu_micro

    def transfer(self, payer: int, payee: int, amount: int) -> None:
        self.balance[payer] -= amount
        self.balance[payee] += amount

    def snapshot(self) -> dict[int, int]:
        return dict(self.balance)

    def copy(self) -> CreditLedger:
        other = CreditLedger([], self.threshold_mu)
        other.balance = dict(self.balance)
        return other


@dataclass(frozen=True)
class Contribution:
    tc: int
    grants: tuple[tuple[int, tuple[int, ...]], ...]  # (link, sorted FS indices)
    credit: int  # micro-credits earned

    @property
    def fs_count(self) -> int:
        return sum(len(fs) for _, fs in self.grants)


@dataclass(frozen=True)
class Trade:
    serial: int
    slot: int
    rc: int
    rc_vlink: int
    width: int
    contributions: tuple[Contribution, ...]
    # the RC's own surplus used on its deficit route: no credit changes hands
    self_grants: tuple[tuple[int, tuple[int, ...]], ...] = ()

    @property
    def credit_delta(self) -> int:
        return sum(c.credit for c in self.contributions)

    def cells(self) -> list[tuple[int, int, int]]:
        """(link, fs, owner) for every cell this trade borrows."""
        out = [(link, fs, c.tc) for c in self.contributions for link, fss in c.grants for fs in fss]
        out += [(link, fs, self.rc) for link, fss in self.self_grants for fs in fss]
        return out

    def to_dict(self) -> dict:
        return {
            "serial": self.serial,
            "slot": self.slot,
            "rc": self.rc,
            "rc_vlink": self.rc_vlink,
            "width": self.width,
            "contributions": [
                {"tc": c.tc, "credit": c.credit, "grants": [[link, list(fs)] for link, fs in c.grants]}
                for c in self.contributions
            ],
            "self_grants": [[link, list(fs)] for link, fs in self.self_grants],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Trade:
        def grants(raw):
            return tuple((int(link), tuple(int(x) for x in fs)) for link, fs in raw)

        contribs = tuple(
            Contribution(int(c["tc"]), grants(c["grants"]), int(c["credit"])) for c in d["contributions"]
        )
        return cls(
            int(d["serial"]), int(d["slot"]), int(d["rc"]), int(d["rc_vlink"]), int(d["width"]),
            contribs, grants(d.get("self_grants", ())),
        )


def credit_of(grants: Iterable[tuple[int, Iterable[int]]], topology: Topology) -> int:
    """Micro-credit earned for ``grants`` = sum over links of |FS set| * l_i."""
    return sum(len(tuple(fs)) * topology.normalized_micro(link) for link, fs in grants)


@dataclass(frozen=True)
class Request:
    von: int
    vlink: int
    deficit: int


@dataclass
class Roles:
    """Slot classification.

    ``offers[link][von]`` lists loanable FS indices ascending; ``source`` maps a
    loanable (link, fs) cell back to the virtual link lending it.
    """

    requests: list[Request]
    gated: list[Request]
    offers: dict[int, dict[int, list[int]]]
    source: dict[tuple[int, int], int]
    surplus: dict[int, int]

    @property
    def rc_set(self) -> set[int]:
        return {r.von for r in self.requests}

    @property
    def cc_set(self) -> set[int]:
        return {von for pools in self.offers.values() for von, fs in pools.items() if fs}


def loanable_fs(vl: VirtualLink, surplus: int) -> tuple[int, ...]:
    """Highest-index FSs of the block go out on loan first."""
    if surplus <= 0:
        return ()
    return tuple(sorted(vl.fs)[-surplus:])


def classify_roles(
    vlinks: Sequence[VirtualLink], needed: Sequence[int], ledger: CreditLedger
) -> Roles:
    requests: list[Request] = []
    gated: list[Request] = []
    offers: dict[int, dict[int, list[int]]] = {}
    source: dict[tuple[int, int], int] = {}
    surplus: dict[int, int] = {}
    for vl in vlinks:
        need = int(needed[vl.id])
        if need > vl.fs_count:
            req = Request(vl.von, vl.id, need - vl.fs_count)
            (gated if ledger.is_gated(vl.von) else requests).append(req)
        elif need < vl.fs_count:
            surplus[vl.id] = vl.fs_count - need
            cells = loanable_fs(vl, surplus[vl.id])
            for link in vl.route:
                offers.setdefault(link, {}).setdefault(vl.von, []).extend(cells)
                for fs in cells:
                    source[(link, fs)] = vl.id
    for pools in offers.values():
        for fs in pools.values():
            fs.sort()
    requests.sort(key=lambda r: (-ledger[r.von], r.von, r.vlink))
    gated.sort(key=lambda r: (r.von, r.vlink))
    return Roles(requests, gated, offers, source, surplus)


def eligible_offers(
    rc_vlink: VirtualLink,
    offers: Mapping[int, Mapping[int, Sequence[int]]],
    vcat_mode: bool = True,
) -> dict[int, dict[int, list[int]]]:
    """Per route link of the RC, the offered FS indices it may use.

    Without sub-band VCAT only FSs extending the RC's own block contiguously
    (on either side) qualify.
    """
    out: dict[int, dict[int, list[int]]] = {}
    lo, hi = min(rc_vlink.fs), max(rc_vlink.fs)
    for link in rc_vlink.route:
        pools = offers.get(link, {})
        if vcat_mode:
            out[link] = {von: list(fs) for von, fs in pools.items() if fs}
            continue
        owner_of = {fs: von for von, fss in pools.items() for fs in fss}
        keep: dict[int, list[int]] = {}
        for start, step in ((hi + 1, 1), (lo - 1, -1)):
            fs = start
            while fs in owner_of:
                keep.setdefault(owner_of[fs], []).append(fs)
                fs += step
        out[link] = {von: sorted(fs) for von, fs in keep.items()}
    return out


def fill_request(
    request: Request,
    rc_vlink: VirtualLink,
    eligible: Mapping[int, Mapping[int, Sequence[int]]],
    credits: Mapping[int, int],
    vcat_mode: bool = True,
) -> tuple[int, dict[int, list[tuple[int, int]]]]:
    """Choose the cells an RC virtual link borrows.

    Returns (width, {link: [(owner von, fs), ...]}). The RC's own surplus is
    used first; other owners are taken in ascending credit, then ascending von
    id, lowest FS index first. The same width is granted on every route link.
    Without VCAT each link takes the contiguous extension of the RC's block
    whose sorted priority keys compare smallest.
    """

    def key(von: int, fs: int) -> tuple:
        return (0, 0, 0, fs) if von == request.von else (1, credits[von], von, fs)

    lo, hi = min(rc_vlink.fs), max(rc_vlink.fs)
    pools: dict[int, list[tuple[int, int]]] = {}
    for link in rc_vlink.route:
        pools[link] = [(von, fs) for von, fss in eligible.get(link, {}).items() for fs in fss]
    width = min([request.deficit] + [len(pools[link]) for link in rc_vlink.route])
    if width <= 0:
        return 0, {}
    if vcat_mode:
        return width, {link: sorted(pools[link], key=lambda c: key(*c))[:width] for link in rc_vlink.route}
    return width, {link: _best_window(pools[link], lo, hi, width, key) for link in rc_vlink.route}


def _best_window(cells, lo, hi, width, key) -> list[tuple[int, int]]:
    """The ``width`` cells around [lo, hi], contiguous with it, whose sorted keys are smallest.

    ``cells`` must already be restricted to the runs adjacent to the block.
    """
    by_fs = {fs: von for von, fs in cells}
    best = None
    for below in range(width + 1):
        span = list(range(lo - below, lo)) + list(range(hi + 1, hi + 1 + width - below))
        if not all(fs in by_fs for fs in span):
            continue
        ranked = sorted((key(by_fs[fs], fs), (by_fs[fs], fs)) for fs in span)
        keys = [k for k, _ in ranked]
        if best is None or keys < best[0]:
            best = (keys, [c for _, c in ranked])
    assert best is not None, "eligible runs shorter than width"
    return best[1]


def take_cells(offers: dict[int, dict[int, list[int]]], link: int, von: int, fs: int) -> None:
    offers[link][von].remove(fs)


def build_trade(
    serial: int,
    slot: int,
    request: Request,
    width: int,
    picks: Mapping[int, Sequence[tuple[int, int]]],
    topology: Topology,
) -> Trade:
    per_tc: dict[int, dict[int, list[int]]] = {}
    own: dict[int, list[int]] = {}
    for link in sorted(picks):
        for von, fs in picks[link]:
            if von == request.von:
                own.setdefault(link, []).append(fs)
            else:
                per_tc.setdefault(von, {}).setdefault(link, []).append(fs)
    contributions = []
    for tc in sorted(per_tc):
        grants = tuple((link, tuple(sorted(fs))) for link, fs in sorted(per_tc[tc].items()))
        contributions.append(Contribution(tc, grants, credit_of(grants, topology)))
    self_grants = tuple((link, tuple(sorted(fs))) for link, fs in sorted(own.items()))
    return Trade(serial, slot, request.von, request.vlink, width, tuple(contributions), self_grants)


class TradingEngine:
    """Centralized trading over one simulation run.

    Call ``begin_slot``, then ``select_trades``, optionally ``reclaim``, then
    ``settle``-side queries, and finally ``release_trades``.
    """

    def __init__(
        self,
        topology: Topology,
        vlinks: Sequence[VirtualLink],
        spectrum: SpectrumState,
        ledger: CreditLedger,
        vcat_mode: bool = True,
    ) -> None:
        self.topology = topology
        self.vlinks = list(vlinks)
        self.spectrum = spectrum
        self.ledger = ledger
        self.vcat_mode = vcat_mode
        self.serial = 0
        self.slot = -1
        self.roles: Roles | None = None
        self.needed = np.zeros(len(self.vlinks), dtype=np.int64)
        self.active: list[Trade] = []
        self.log: list[Trade] = []  # surviving trades of every settled slot
        self.cell_map = cell_vlink_map(self.vlinks)
        self.withdrawn: set[int] = set()

    def begin_slot(self, slot: int, needed: Sequence[int]) -> Roles:
        if self.active:
            raise SpectrumError("previous slot's trades not released")
        self.slot = slot
        self.needed = np.array(needed, dtype=np.int64)
        self.withdrawn = set()
        self.roles = classify_roles(self.vlinks, self.needed, self.ledger)
        return self.roles

    def select_trades(self, requests: Sequence[Request] | None = None) -> list[Trade]:
        assert self.roles is not None, "begin_slot first"
        made = []
        for req in self.roles.requests if requests is None else requests:
            trade = self._serve(req)
            if trade is not None:
                made.append(trade)
        return made

    def _serve(self, req: Request) -> Trade | None:
        assert self.roles is not None
        rc_vl = self.vlinks[req.vlink]
        eligible = eligible_offers(rc_vl, self.roles.offers, self.vcat_mode)
        width, picks = fill_request(req, rc_vl, eligible, self.ledger.balance, self.vcat_mode)
        if width == 0:
            return None
        trade = build_trade(self.serial, self.slot, req, width, picks, self.topology)
        self.serial += 1
        self.execute(trade)
        return trade

    def execute(self, trade: Trade) -> None:
        assert self.roles is not None
        for link, fs, owner in trade.cells():
            take_cells(self.roles.offers, link, owner, fs)
        for c in trade.contributions:
            for link, fss in c.grants:
                self.spectrum.loan(link, fss, c.tc, trade.rc)
            self.ledger.transfer(trade.rc, c.tc, c.credit)
        for link, fss in trade.self_grants:
            self.spectrum.loan(link, fss, trade.rc, trade.rc)
        self.active.append(trade)

    def reclaim(self, tc: int, vlink: int) -> tuple[list[Trade], list[Trade]]:
        """The lender of ``vlink`` takes its spectrum back mid-slot.

        Every active trade borrowing a cell of ``vlink`` is released and its
        credit reversed; those RC requests are then served again from what is
        left. Returns (released trades, replacement trades).
        """
        assert self.roles is not None
        vl = self.vlinks[vlink]
        if vl.von != tc:
            raise SpectrumError(f"virtual link {vlink} does not belong to VON {tc}")
        source = self.roles.source
        hit = [
            t for t in self.active
            if any(o == tc and source.get((link, fs)) == vlink for link, fs, o in t.cells())
        ]
        if not hit:
            return [], []
        for trade in hit:
            self._undo(trade)
        # the lender now needs its whole block
        self.needed[vlink] = vl.fs_count
        self.roles.surplus.pop(vlink, None)
        self.withdrawn.add(vlink)
        for link in vl.route:
            pool = self.roles.offers.get(link, {}).get(tc, [])
            pool[:] = [fs for fs in pool if source.get((link, fs)) != vlink]
        order = {(r.von, r.vlink): i for i, r in enumerate(self.roles.requests)}
        again = sorted(
            (Request(t.rc, t.rc_vlink, self._deficit(t.rc_vlink)) for t in hit),
            key=lambda r: order[(r.von, r.vlink)],
        )
        return hit, self.select_trades(again)

    def _deficit(self, vlink: int) -> int:
        return int(self.needed[vlink]) - self.vlinks[vlink].fs_count

    def _undo(self, trade: Trade) -> None:
        assert self.roles is not None
        for c in trade.contributions:
            for link, fss in c.grants:
                self.spectrum.release(link, fss)
            self.ledger.transfer(c.tc, trade.rc, c.credit)
        for link, fss in trade.self_grants:
            self.spectrum.release(link, fss)
        for link, fs, owner in trade.cells():
            pool = self.roles.offers.setdefault(link, {}).setdefault(owner, [])
            pool.append(fs)
            pool.sort()
        self.active.remove(trade)

    def acquired(self) -> np.ndarray:
        return acquired_from(len(self.vlinks), self.active)

    def own_retained(self) -> np.ndarray:
        return own_retained(self.vlinks, self.active, self.cell_map)

    def release_trades(self) -> list[Trade]:
        """Slot end: every loan reverts to its owner; credits stay."""
        done = self.active
        self.log.extend(done)
        self.active = []
        self.spectrum.release_all()
        self.roles = None
        return done


def own_retained(
    vlinks: Sequence[VirtualLink], trades: Iterable[Trade], source: Mapping[tuple[int, int], int]
) -> np.ndarray:
    """FS width each virtual link keeps: its block minus the most it lent on any one link."""
    lent: dict[tuple[int, int], int] = {}
    for t in trades:
        for link, fs, _owner in t.cells():
            src = source[(link, fs)]
            lent[(src, link)] = lent.get((src, link), 0) + 1
    out = np.array([vl.fs_count for vl in vlinks], dtype=np.int64)
    worst: dict[int, int] = {}
    for (src, _link), n in lent.items():
        worst[src] = max(worst.get(src, 0), n)
    for src, n in worst.items():
        out[src] -= n
    return out


def cell_vlink_map(vlinks: Iterable[VirtualLink]) -> dict[tuple[int, int], int]:
    """(link, fs) -> the virtual link whose block holds that cell."""
    return {(link, fs): vl.id for vl in vlinks for link in vl.route for fs in vl.fs}


def acquired_from(n_vlinks: int, trades: Iterable[Trade]) -> np.ndarray:
    out = np.zeros(n_vlinks, dtype=np.int64)
    for t in trades:
        out[t.rc_vlink] += t.width
    return out


def earned_this_slot(trades: Iterable[Trade]) -> dict[int, int]:
    earned: dict[int, int] = {}
    for t in trades:
        for c in t.contributions:
            earned[c.tc] = earned.get(c.tc, 0) + c.credit
    return earned


__all__ = [
    "Contribution",
    "CreditLedger",
    "Request",
    "Roles",
    "Trade",
    "TradingEngine",
    "classify_roles",
    "credit_of",
    "earned_this_slot",
    "eligible_offers",
    "fill_request",
    "from_micro",
    "to_micro",
]
