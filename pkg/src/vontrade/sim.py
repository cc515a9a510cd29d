"""One simulation run: T slots of demand over a fixed set of embedded VONs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from vontrade import chain as chainmod
from vontrade.chain import Chain
from vontrade.embedding import Von, all_vlinks
from vontrade.engine import (
    CreditLedger,
    Trade,
    TradingEngine,
    acquired_from,
    cell_vlink_map,
    own_retained,
)
from vontrade.errors import AuditError, ProtocolError
from vontrade.protocol import Network, finish_slot, run_slot_protocol
from vontrade.topology import SpectrumState, Topology
from vontrade.traffic import SlotResult, fs_needed_all, settle_slot

MODES = ("st", "nonst")
ENGINES = ("protocol", "central")


@dataclass
class RunResult:
    mode: str
    slots: list[SlotResult]
    trades: list[Trade] = field(default_factory=list)
    chain: Chain | None = None
    ledgers: list[dict[int, int]] = field(default_factory=list)  # after each slot
    trace: str = ""
    block_failures: list[str] = field(default_factory=list)
    audits: int = 0
    mutations: int = 0

    @property
    def offered(self) -> float:
        return sum(s.total_offered for s in self.slots)

    @property
    def carried(self) -> float:
        return sum(s.total_carried for s in self.slots)

    @property
    def blocked(self) -> float:
        return sum(s.total_blocked for s in self.slots)

    def zero_sum(self) -> bool:
        return all(sum(ledger.values()) == 0 for ledger in self.ledgers)


def simulate(
    topology: Topology,
    vons: Sequence[Von],
    demands: np.ndarray,
    spectrum: SpectrumState,
    *,
    mode: str = "st",
    engine: str = "protocol",
    threshold_mu: float = -30.0,
    vcat_mode: bool = True,
    creator_metric: str = "credit",
    record_trace: bool = False,
    debug: bool = False,
) -> RunResult:
    """Simulate every slot of ``demands`` (shape (n_vlinks, T)).

    ``spectrum`` is the post-embedding grid; it is copied, not mutated.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if engine not in ENGINES:
        raise ValueError(f"engine must be one of {ENGINES}")
    vlinks = all_vlinks(vons)
    von_ids = [v.id for v in vons]
    spectrum = spectrum.copy()
    spectrum.debug = debug
    n = len(vlinks)
    assigned = np.array([vl.fs_count for vl in vlinks], dtype=np.int64)
    result = RunResult(mode, [])

    if mode == "nonst":
        for t in range(demands.shape[1]):
            result.slots.append(settle_slot(t, demands[:, t], vlinks, assigned, np.zeros(n, np.int64)))
            result.ledgers.append({v: 0 for v in von_ids})
        return result

    ledger = CreditLedger(von_ids, threshold_mu)
    cells = cell_vlink_map(vlinks)
    eng: TradingEngine | None = None
    net: Network | None = None
    if engine == "central":
        eng = TradingEngine(topology, vlinks, spectrum, ledger, vcat_mode)
        result.chain = Chain()
    else:
        net = Network.build(
            topology, vlinks, von_ids, threshold_mu, vcat_mode, spectrum, record_trace, creator_metric
        )

    for t in range(demands.shape[1]):
        needed = fs_needed_all(demands[:, t], vlinks)
        if eng is not None:
            eng.begin_slot(t, needed)
            eng.select_trades()
            active = list(eng.active)
        else:
            assert net is not None
            active = run_slot_protocol(net, t, needed)
        own = own_retained(vlinks, active, cells)
        acquired = acquired_from(n, active)
        result.slots.append(settle_slot(t, demands[:, t], vlinks, own, acquired))
        if eng is not None:
            eng.release_trades()
            _central_block(result.chain, active, t, creator_metric)
            result.ledgers.append(ledger.snapshot())
        else:
            assert net is not None
            finish_slot(net, t)
            result.ledgers.append(net.ledger())
        result.trades.extend(active)
        if debug:
            spectrum.audit()
            if spectrum.n_loaned():
                raise AuditError("loans survived slot end")
        if sum(result.ledgers[-1].values()) != 0:
            raise AssertionError(f"credit ledger not zero-sum after slot {t}")

    if net is not None:
        result.chain = next(iter(net.actors.values())).chain
        result.block_failures = list(net.block_failures)
        if record_trace:
            result.trace = net.bus.dump_trace()
        if [t.serial for t in result.trades] != sorted(t.serial for t in result.trades):
            raise ProtocolError("trade serials out of order")
    result.audits = spectrum.audits
    result.mutations = spectrum.mutations
    return result


def _central_block(chain: Chain | None, trades: Sequence[Trade], slot: int, metric: str) -> None:
    assert chain is not None
    txs = chainmod.transactions_for(trades, chain.next_serial)
    if not txs:
        return
    creator = chainmod.select_creator(trades, metric)
    assert creator is not None
    chain.append(chainmod.make_block(chain.head_hash, creator, slot, txs))

