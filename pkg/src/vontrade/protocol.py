"""Distributed trading between client controllers over a simulated control channel.

Each VON is a ``ClientActor``. Actors share nothing but messages; the
``SimBus`` delivers them in synchronous rounds, ordered by (round, sender id,
enqueue order). RC sessions run one at a time: Request -> Offer -> Commit ->
Ack. At slot end the proof-of-contribution creator announces a block that
every actor verifies before appending it to its own replica.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from vontrade import chain as chainmod
from vontrade.chain import Chain
from vontrade.embedding import VirtualLink
from vontrade.engine import (
    Contribution,
    Request,
    Trade,
    build_trade,
    credit_of,
    eligible_offers,
    fill_request,
    loanable_fs,
    to_micro,
)
from vontrade.errors import ProtocolError
from vontrade.topology import SpectrumState, Topology


class Kind(str, enum.Enum):
    TRADE_REQUEST = "TradeRequest"
    TRADE_OFFER = "TradeOffer"
    TRADE_COMMIT = "TradeCommit"
    TRADE_ACK = "TradeAck"
    RELEASE_NOTICE = "ReleaseNotice"
    RECLAIM_NOTICE = "ReclaimNotice"
    BLOCK_ANNOUNCE = "BlockAnnounce"
    BLOCK_CONFIRM = "BlockConfirm"


BROADCAST = None


@dataclass(frozen=True)
class Message:
    kind: Kind
    sender: int
    recipients: tuple[int, ...] | None  # None = every other actor
    payload: dict[str, Any]
    round: int = 0
    seq: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "seq": self.seq,
                "kind": self.kind.value,
                "sender": self.sender,
                "recipients": None if self.recipients is None else list(self.recipients),
                "payload": self.payload,
            },
            sort_keys=True,
        )


class SimBus:
    """Deterministic, lossless, synchronous-round message delivery."""

    def __init__(self) -> None:
        self.actors: dict[int, ClientActor] = {}
        self.round = 0
        self._seq = 0
        self._outbox: list[Message] = []
        self.trace: list[Message] = []
        self.record = True

    def attach(self, actor: ClientActor) -> None:
        self.actors[actor.von] = actor
        actor.bus = self

    def send(self, kind: Kind, sender: int, recipients: Iterable[int] | None, payload: dict) -> None:
        rcpt = None if recipients is None else tuple(sorted(recipients))
        self._outbox.append(Message(kind, sender, rcpt, payload, self.round + 1, self._seq))
        self._seq += 1

    def run(self) -> None:
        """Deliver rounds until nothing is in flight."""
        ordered = sorted(self.actors.items())
        while self._outbox or any(a.waiting() for a in self.actors.values()):
            self.round += 1
            batch = sorted(self._outbox, key=lambda m: (m.round, m.sender, m.seq))
            self._outbox = []
            for msg in batch:
                if self.record:
                    self.trace.append(msg)
                if msg.recipients is None:
                    for v, actor in ordered:
                        if v != msg.sender:
                            actor.receive(msg)
                else:
                    for v in msg.recipients:
                        self.actors[v].receive(msg)
            for _, actor in ordered:
                actor.end_of_round()

    def dump_trace(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.trace)


class Carrier:
    """Carrier controller stub: applies agreed loans to the physical spectrum."""

    def __init__(self, spectrum: SpectrumState) -> None:
        self.spectrum = spectrum

    def reconfigure(self, trade: Trade) -> None:
        for c in trade.contributions:
            for link, fss in c.grants:
                self.spectrum.loan(link, fss, c.tc, trade.rc)
        for link, fss in trade.self_grants:
            self.spectrum.loan(link, fss, trade.rc, trade.rc)

    def release(self, trade: Trade) -> None:
        for link, fs, _owner in trade.cells():
            self.spectrum.release(link, (fs,))

    def release_all(self) -> None:
        self.spectrum.release_all()


class Phase(enum.Enum):
    IDLE = "Idle"
    REQUESTING = "Requesting"
    OFFERING = "Offering"
    COMMITTING = "Committing"


def _trade_payload(trade: Trade) -> dict:
    return {
        "serial": trade.serial,
        "slot": trade.slot,
        "rc": trade.rc,
        "rc_vlink": trade.rc_vlink,
        "width": trade.width,
        "contributions": tuple({"tc": c.tc, "grants": c.grants} for c in trade.contributions),
        "self_grants": trade.self_grants,
    }


def _grants(raw) -> tuple[tuple[int, tuple[int, ...]], ...]:
    if isinstance(raw, tuple):
        return raw  # already immutable plain data
    return tuple((int(link), tuple(int(x) for x in fs)) for link, fs in raw)


_HANDLERS = {
    Kind.TRADE_REQUEST: "_on_request",
    Kind.TRADE_OFFER: "_on_offer",
    Kind.TRADE_COMMIT: "_on_commit",
    Kind.TRADE_ACK: "_on_ack",
    Kind.RELEASE_NOTICE: "_on_release",
    Kind.RECLAIM_NOTICE: "_on_reclaim",
    Kind.BLOCK_ANNOUNCE: "_on_block",
    Kind.BLOCK_CONFIRM: "_on_confirm",
}


class ClientActor:
    """Client SDN controller of one VON."""

    def __init__(
        self,
        von: int,
        vlinks: Sequence[VirtualLink],
        all_vons: Iterable[int],
        topology: Topology,
        threshold_mu: float,
        vcat_mode: bool = True,
        carrier: Carrier | None = None,
        creator_metric: str = "credit",
    ) -> None:
        self.von = von
        self.vlinks = {vl.id: vl for vl in vlinks}
        self.topology = topology
        self.mu_micro = to_micro(threshold_mu)
        self.vcat_mode = vcat_mode
        self.carrier = carrier
        self.creator_metric = creator_metric
        self.bus: SimBus | None = None
        self.ledger: dict[int, int] = {v: 0 for v in all_vons}
        self.chain = Chain()
        self.trade_log: list[Trade] = []  # surviving trades of finished slots
        self.slot_trades: dict[int, Trade] = {}  # serial -> trade, current slot
        self.next_serial = 0
        self.phase = Phase.IDLE
        self.slot = -1
        self.needed: dict[int, int] = {}
        self.offers: dict[int, list[int]] = {}  # link -> loanable FS indices
        self.source: dict[tuple[int, int], int] = {}
        self.withdrawn: set[int] = set()
        self.lent: dict[tuple[int, int], int] = {}  # (link, fs) -> serial of borrowing trade
        self.released: dict[int, int] = {}  # serial -> own vlink, trades undone by a reclaim
        self.session: dict[str, Any] | None = None
        self.pending_block: chainmod.Block | None = None
        self.pending_body: bytes | None = None
        self.confirms: dict[int, bool] = {}
        self.rejected: list[str] = []
        self.tamper: Callable[[bytes], bytes] | None = None
        self._expected: tuple = (None, None)

    # -- slot lifecycle -------------------------------------------------
    def begin_slot(self, slot: int, needed: dict[int, int]) -> None:
        self.slot = slot
        self.needed = dict(needed)
        self.offers = {}
        self.source = {}
        self.lent = {}
        self.withdrawn = set()
        self.released = {}
        self.slot_trades = {}
        for vl in self.vlinks.values():
            cells = loanable_fs(vl, vl.fs_count - self.needed[vl.id])
            for link in vl.route:
                self.offers.setdefault(link, []).extend(cells)
                for fs in cells:
                    self.source[(link, fs)] = vl.id
        for pool in self.offers.values():
            pool.sort()

    def gated(self) -> bool:
        return self.ledger[self.von] < self.mu_micro

    def requests(self) -> list[Request]:
        if self.gated():
            return []
        return [
            Request(self.von, vl.id, self.needed[vl.id] - vl.fs_count)
            for vl in sorted(self.vlinks.values(), key=lambda v: v.id)
            if self.needed[vl.id] > vl.fs_count
        ]

    # -- sending --------------------------------------------------------
    def _send(self, kind: Kind, recipients, payload: dict) -> None:
        assert self.bus is not None
        self.bus.send(kind, self.von, recipients, payload)

    def start_session(self, req: Request) -> None:
        if self.phase is not Phase.IDLE:
            raise ProtocolError(f"VON {self.von} starts a session while {self.phase.value}")
        vl = self.vlinks[req.vlink]
        self.phase = Phase.REQUESTING
        assert self.bus is not None
        # request is delivered next round, offers the round after; decide then
        self.session = {
            "request": req, "offers": {}, "credits": {}, "acks": set(), "trade": None,
            "decide_at": self.bus.round + 2,
        }
        self._send(
            Kind.TRADE_REQUEST,
            BROADCAST,
            {"rc": self.von, "vlink": vl.id, "deficit": req.deficit, "route": list(vl.route)},
        )

    # -- receiving ------------------------------------------------------
    def receive(self, msg: Message) -> None:
        getattr(self, _HANDLERS[msg.kind])(msg)

    def _on_request(self, msg: Message) -> None:
        if self.phase is not Phase.IDLE:
            raise ProtocolError(f"VON {self.von} got a request while {self.phase.value}")
        cells = {
            link: list(self.offers[link]) for link in msg.payload["route"] if self.offers.get(link)
        }
        if not cells:
            return  # not a candidate for this request
        self.phase = Phase.OFFERING
        self._send(
            Kind.TRADE_OFFER,
            (msg.sender,),
            {"cc": self.von, "credit": self.ledger[self.von], "cells": [[l, fs] for l, fs in sorted(cells.items())]},
        )

    def _on_offer(self, msg: Message) -> None:
        if self.phase is not Phase.REQUESTING or self.session is None:
            raise ProtocolError(f"VON {self.von} got an offer while {self.phase.value}")
        cc = msg.payload["cc"]
        self.session["offers"][cc] = {int(l): [int(x) for x in fs] for l, fs in msg.payload["cells"]}
        self.session["credits"][cc] = int(msg.payload["credit"])

    def waiting(self) -> bool:
        """True while this actor still has to decide its open session."""
        return self.phase is Phase.REQUESTING and self.session is not None and self.session["trade"] is None

    def end_of_round(self) -> None:
        s = self.session
        if (
            self.phase is Phase.REQUESTING and s is not None and s["trade"] is None
            and self.bus is not None and self.bus.round >= s["decide_at"]
        ):
            self._decide()

    def _decide(self) -> None:
        assert self.session is not None
        req: Request = self.session["request"]
        vl = self.vlinks[req.vlink]
        pools: dict[int, dict[int, list[int]]] = defaultdict(dict)
        for cc, cells in self.session["offers"].items():
            for link, fss in cells.items():
                pools[link][cc] = fss
        for link in vl.route:
            if self.offers.get(link):
                pools[link][self.von] = list(self.offers[link])
        credits = dict(self.session["credits"])
        credits[self.von] = self.ledger[self.von]
        eligible = eligible_offers(vl, pools, self.vcat_mode)
        width, picks = fill_request(req, vl, eligible, credits, self.vcat_mode)
        if width == 0:
            offerers = sorted(self.session["offers"])
            if offerers:
                self._send(Kind.TRADE_COMMIT, offerers, {"serial": None, "rc": self.von})
            self._end_session()
            return
        trade = build_trade(self.next_serial, self.slot, req, width, picks, self.topology)
        self.session["trade"] = trade
        self.phase = Phase.COMMITTING
        self._send(Kind.TRADE_COMMIT, BROADCAST, _trade_payload(trade))
        self._record_commit(trade)
        if not trade.contributions:
            self._complete(trade)

    def _record_commit(self, trade: Trade) -> None:
        """Every actor books a committed trade identically."""
        self.next_serial = trade.serial + 1
        self.slot_trades[trade.serial] = trade
        for c in trade.contributions:
            self.ledger[trade.rc] -= c.credit
            self.ledger[c.tc] += c.credit
        for link, fs, owner in trade.cells():
            if owner == self.von:
                self.offers[link].remove(fs)
                self.lent[(link, fs)] = trade.serial

    def _on_commit(self, msg: Message) -> None:
        p = msg.payload
        if p["serial"] is None:  # session closed without a trade
            self.phase = Phase.IDLE
            return
        contributions = []
        for c in p["contributions"]:
            grants = _grants(c["grants"])
            contributions.append(Contribution(int(c["tc"]), grants, credit_of(grants, self.topology)))
        trade = Trade(
            int(p["serial"]), int(p["slot"]), int(p["rc"]), int(p["rc_vlink"]), int(p["width"]),
            tuple(contributions), _grants(p["self_grants"]),
        )
        if trade.serial != self.next_serial:
            raise ProtocolError(f"VON {self.von}: commit serial {trade.serial} != {self.next_serial}")
        mine = [c for c in trade.contributions if c.tc == self.von]
        if mine:
            if self.phase is not Phase.OFFERING:
                raise ProtocolError(f"VON {self.von} named as TC without offering")
            for link, fss in mine[0].grants:
                if not set(fss) <= set(self.offers.get(link, ())):
                    raise ProtocolError(f"VON {self.von}: commit exceeds offer on link {link}")
        self._record_commit(trade)
        if mine:
            self._send(Kind.TRADE_ACK, (trade.rc,), {"serial": trade.serial, "tc": self.von})
        self.phase = Phase.IDLE

    def _on_ack(self, msg: Message) -> None:
        if self.phase is not Phase.COMMITTING or self.session is None:
            raise ProtocolError(f"VON {self.von} got an ack while {self.phase.value}")
        trade: Trade = self.session["trade"]
        if msg.payload["serial"] != trade.serial:
            raise ProtocolError("ack for a different trade")
        self.session["acks"].add(msg.payload["tc"])
        if self.session["acks"] == {c.tc for c in trade.contributions}:
            self._complete(trade)

    def _complete(self, trade: Trade) -> None:
        if self.carrier is not None:
            self.carrier.reconfigure(trade)
        self._end_session()

    def _end_session(self) -> None:
        self.session = None
        self.phase = Phase.IDLE

    # -- release and reclaim --------------------------------------------
    def reclaim(self, vlink: int) -> list[int]:
        """Take back the spectrum of ``vlink``; returns serials of trades it breaks."""
        if vlink not in self.vlinks:
            raise ProtocolError(f"virtual link {vlink} is not VON {self.von}'s")
        hit = sorted({s for cell, s in self.lent.items() if self.source.get(cell) == vlink})
        if not hit:
            return []
        self.withdrawn.add(vlink)
        self.needed[vlink] = self.vlinks[vlink].fs_count
        self.withdraw_offers()
        rcs = sorted({self.slot_trades[s].rc for s in hit})
        self._send(Kind.RECLAIM_NOTICE, rcs, {"tc": self.von, "vlink": vlink, "serials": hit})
        return hit

    def _on_reclaim(self, msg: Message) -> None:
        for serial in msg.payload["serials"]:
            trade = self.slot_trades.get(serial)
            if trade is not None and trade.rc == self.von:
                self._send(Kind.RELEASE_NOTICE, BROADCAST, {"serial": serial, "forced": True})
                self._undo(trade)

    def _on_release(self, msg: Message) -> None:
        if not msg.payload.get("forced"):
            return
        trade = self.slot_trades.get(msg.payload["serial"])
        if trade is not None:
            self._undo(trade)

    def _undo(self, trade: Trade) -> None:
        del self.slot_trades[trade.serial]
        for c in trade.contributions:
            self.ledger[trade.rc] += c.credit
            self.ledger[c.tc] -= c.credit
        for link, fs, owner in trade.cells():
            if owner != self.von:
                continue
            del self.lent[(link, fs)]
            if self.source.get((link, fs)) not in self.withdrawn:
                self.offers.setdefault(link, []).append(fs)
                self.offers[link].sort()
        if trade.rc == self.von:
            self.released[trade.serial] = trade.rc_vlink
            if self.carrier is not None:
                self.carrier.release(trade)

    def withdraw_offers(self) -> None:
        for link, pool in self.offers.items():
            pool[:] = [fs for fs in pool if self.source.get((link, fs)) not in self.withdrawn]

    def active_trades(self) -> list[Trade]:
        return [self.slot_trades[s] for s in sorted(self.slot_trades)]

    def end_slot(self) -> None:
        """Slot end: the agreement expires; RCs notify their TCs."""
        for trade in self.active_trades():
            if trade.rc == self.von and trade.contributions:
                tcs = sorted({c.tc for c in trade.contributions})
                self._send(Kind.RELEASE_NOTICE, tcs, {"serial": trade.serial, "forced": False})
        self.trade_log.extend(self.active_trades())

    # -- block creation -------------------------------------------------
    def slot_log(self, slot: int) -> list[Trade]:
        return [t for t in self.trade_log if t.slot == slot]

    def expected_block(self, slot: int) -> tuple[int | None, list[chainmod.Transaction]]:
        """(creator, transactions) this actor expects for ``slot``'s block."""
        key = (slot, self.chain.next_serial)
        if self._expected[0] != key:
            trades = self.slot_log(slot)
            txs = chainmod.transactions_for(trades, self.chain.next_serial)
            creator = chainmod.select_creator(trades, self.creator_metric) if txs else None
            self._expected = (key, (creator, txs))
        return self._expected[1]

    def creator_for(self, slot: int) -> int | None:
        return self.expected_block(slot)[0]

    def announce_block(self, slot: int) -> None:
        _, txs = self.expected_block(slot)
        block = chainmod.make_block(self.chain.head_hash, self.von, slot, txs)
        data = chainmod.encode_block(block, with_hash=True)
        if self.tamper is not None:
            data = self.tamper(data)
        self._send(Kind.BLOCK_ANNOUNCE, BROADCAST, {"slot": slot, "block": data.hex()})
        self._verify_and_confirm(data, slot)

    def _on_block(self, msg: Message) -> None:
        self._verify_and_confirm(bytes.fromhex(msg.payload["block"]), int(msg.payload["slot"]))

    def _verify_and_confirm(self, data: bytes, slot: int) -> None:
        reason = ""
        block = None
        creator, txs = self.expected_block(slot)
        if creator is not None:
            # Byte equality with the block this actor would have built settles
            # every check at once; decoding is only needed to explain a rejection.
            body = chainmod.encode_body(self.chain.head_hash, creator, slot, txs)
            digest = hashlib.sha256(body).digest()
            if data == body + digest:
                block = chainmod.Block(self.chain.head_hash, creator, slot, tuple(txs), digest)
                self._accept(block, body, slot)
                return
        try:
            block, end = chainmod.decode_block(data, 0, with_hash=True)
            if end != len(data):
                reason = "trailing bytes"
        except Exception as exc:  # any decode failure is a rejection
            reason = f"undecodable: {exc}"
        if block is not None and not reason:
            reason = chainmod.verify_block(
                block, self.chain.head_hash, slot, creator, txs, data[:-chainmod.DIGEST_SIZE]
            )
        if reason:
            self.pending_block = None
            self.pending_body = None
            self.rejected.append(f"slot {slot}: {reason}")
            self.confirms[self.von] = False
            self._send(Kind.BLOCK_CONFIRM, BROADCAST, {"slot": slot, "ok": False, "reason": reason})
        else:
            assert block is not None
            self._accept(block, data[:-chainmod.DIGEST_SIZE], slot)

    def _accept(self, block: chainmod.Block, body: bytes, slot: int) -> None:
        self.pending_block = block
        self.pending_body = body
        self.confirms[self.von] = True
        self._send(Kind.BLOCK_CONFIRM, BROADCAST, {"slot": slot, "ok": True, "reason": ""})

    def _on_confirm(self, msg: Message) -> None:
        self.confirms[msg.sender] = bool(msg.payload["ok"])

    def finish_block(self, n_actors: int) -> bool:
        ok = len(self.confirms) == n_actors and all(self.confirms.values())
        if ok and self.pending_block is not None:
            self.chain.append(self.pending_block, self.pending_body)
        self.pending_block = None
        self.confirms = {}
        return ok


@dataclass
class Network:
    """All actors of one run plus their bus and the carrier stub."""

    actors: dict[int, ClientActor]
    bus: SimBus
    carrier: Carrier | None
    rc_order: list[Request] = field(default_factory=list)
    block_failures: list[str] = field(default_factory=list)

    @classmethod
    def build(
        cls,
        topology: Topology,
        vlinks: Sequence[VirtualLink],
        von_ids: Sequence[int],
        threshold_mu: float,
        vcat_mode: bool = True,
        spectrum: SpectrumState | None = None,
        record_trace: bool = True,
        creator_metric: str = "credit",
    ) -> Network:
        bus = SimBus()
        bus.record = record_trace
        carrier = Carrier(spectrum) if spectrum is not None else None
        per_von: dict[int, list[VirtualLink]] = {v: [] for v in von_ids}
        for vl in vlinks:
            per_von[vl.von].append(vl)
        actors = {}
        for v in von_ids:
            actor = ClientActor(
                v, per_von[v], von_ids, topology, threshold_mu, vcat_mode, carrier, creator_metric
            )
            bus.attach(actor)
            actors[v] = actor
        return cls(actors, bus, carrier)

    def ledger(self) -> dict[int, int]:
        """Any actor's view; all views agree (checked)."""
        views = [a.ledger for a in self.actors.values()]
        for view in views[1:]:
            if view != views[0]:
                raise ProtocolError("actor ledger views diverged")
        return dict(views[0])

    def active_trades(self) -> list[Trade]:
        seen: dict[int, Trade] = {}
        for a in self.actors.values():
            for t in a.active_trades():
                seen[t.serial] = t
        return [seen[s] for s in sorted(seen)]


def run_slot_protocol(net: Network, slot: int, needed: Sequence[int]) -> list[Trade]:
    """Run every RC session of ``slot``; returns the committed trades."""
    for actor in net.actors.values():
        actor.begin_slot(slot, {vid: int(needed[vid]) for vid in actor.vlinks})
    # RCs are served in descending slot-start credit, then von id, then vlink id
    reqs = [r for v in sorted(net.actors) for r in net.actors[v].requests()]
    credits = net.ledger()
    net.rc_order = sorted(reqs, key=lambda r: (-credits[r.von], r.von, r.vlink))
    for req in net.rc_order:
        net.actors[req.von].start_session(req)
        net.bus.run()
    return net.active_trades()


def run_reclaim_protocol(net: Network, tc: int, vlink: int) -> tuple[list[int], list[Trade]]:
    """TC reclaims ``vlink`` mid-slot; affected RCs release and re-request.

    Returns (serials of released trades, replacement trades).
    """
    before = {t.serial for t in net.active_trades()}
    hit = net.actors[tc].reclaim(vlink)
    if not hit:
        return [], []
    net.bus.run()
    again = [
        req for req in net.rc_order
        if any(net.actors[req.von].released.get(s) == req.vlink for s in hit)
    ]
    for req in again:
        net.actors[req.von].start_session(req)
        net.bus.run()
    return hit, [t for t in net.active_trades() if t.serial not in before]


def finish_slot(net: Network, slot: int) -> chainmod.Block | None:
    """Expire loans, then run the proof-of-contribution block round."""
    for v in sorted(net.actors):
        net.actors[v].end_slot()
    net.bus.run()
    if net.carrier is not None:
        net.carrier.release_all()
    creators = {a.creator_for(slot) for a in net.actors.values()}
    if len(creators) != 1:
        raise ProtocolError("actors disagree on the block creator")
    creator = creators.pop()
    if creator is None:
        return None
    net.actors[creator].announce_block(slot)
    net.bus.run()
    results = [net.actors[v].finish_block(len(net.actors)) for v in sorted(net.actors)]
    if not all(results):
        reasons = sorted({r for a in net.actors.values() for r in a.rejected})
        net.block_failures.extend(reasons)
        return None
    # equal head hashes imply byte-identical replicas
    heads = {(len(a.chain), a.chain.head_hash) for a in net.actors.values()}
    if len(heads) != 1:
        raise ProtocolError("chain replicas diverged")
    return net.actors[creator].chain.blocks[-1]
