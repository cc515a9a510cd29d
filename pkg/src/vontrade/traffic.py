"""Per-slot demand generation and carried/blocked accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from vontrade.embedding import Modulation, VirtualLink

DEMAND_FLOOR_GBPS = 10.0


def generate_demands(rng: np.random.Generator, vlinks: Sequence[VirtualLink], slots: int) -> np.ndarray:
    """Offered Gb/s, shape (n_vlinks, slots), uniform on [10, 2X - 10] per virtual link."""
    cap = np.array([vl.capacity_gbps for vl in vlinks], dtype=float).reshape(-1, 1)
    low = np.full_like(cap, DEMAND_FLOOR_GBPS)
    return rng.uniform(low, 2 * cap - DEMAND_FLOOR_GBPS, size=(len(vlinks), slots))


def fs_needed(offered_gbps: float, modulation: Modulation) -> int:
    if offered_gbps < 0:
        raise ValueError("offered traffic must be nonnegative")
    return math.ceil(offered_gbps / modulation.fs_capacity_gbps)


def fs_needed_all(offered: np.ndarray, vlinks: Sequence[VirtualLink]) -> np.ndarray:
    cap = np.array([vl.modulation.fs_capacity_gbps for vl in vlinks], dtype=float)
    return np.ceil(offered / cap).astype(np.int64)


@dataclass
class SlotResult:
    """Per virtual link arrays for one slot."""

    slot: int
    offered: np.ndarray
    carried: np.ndarray
    blocked: np.ndarray
    own_fs_used: np.ndarray
    traded_fs_used: np.ndarray

    @property
    def total_offered(self) -> float:
        return float(self.offered.sum())

    @property
    def total_carried(self) -> float:
        return float(self.carried.sum())

    @property
    def total_blocked(self) -> float:
        return float(self.blocked.sum())


def settle_slot(
    slot: int,
    offered: np.ndarray,
    vlinks: Sequence[VirtualLink],
    own_fs: np.ndarray,
    acquired_fs: np.ndarray,
) -> SlotResult:
    """Carry min(offered, usable capacity); the rest is blocked.

    ``own_fs`` is what each virtual link kept after lending, ``acquired_fs``
    what it obtained by trading.
    """
    offered = np.asarray(offered, dtype=float)
    cap = np.array([vl.modulation.fs_capacity_gbps for vl in vlinks], dtype=float)
    usable = (own_fs + acquired_fs) * cap
    carried = np.minimum(offered, usable)
    blocked = offered - carried
    needed = np.ceil(offered / cap).astype(np.int64)
    own_used = np.minimum(needed, own_fs)
    traded_used = np.minimum(acquired_fs, needed - own_used)
    return SlotResult(slot, offered, carried, blocked, own_used, traded_used)
