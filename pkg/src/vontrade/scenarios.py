"""Hand-built scenarios with known outcomes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vontrade.embedding import Von, VonSpec, all_vlinks, embed_von
from vontrade.topology import SpectrumState, Topology, load_topology


@dataclass
class Scenario:
    topology: Topology
    vons: list[Von]
    spectrum: SpectrumState
    demands: np.ndarray  # (n_vlinks, slots) Gb/s


def fig1(fs_total: int = 16) -> Scenario:
    """Two VONs on the A/B/C triangle, every virtual link holding 3 FSs.

    VON 1: a1-c1 over A-C, b1-c1 over C-B. VON 2: a2-b2 over A-C-B.
    In the single slot the three links need 1, 2 and 4 FSs.
    """
    topo = load_topology("fig1")
    a, b, c = (topo.node_id(x) for x in "ABC")
    ac, cb = topo.link_between(a, c), topo.link_between(c, b)
    spectrum = SpectrumState(topo.n_links, fs_total)
    von1 = embed_von(VonSpec(1, (a, b, c), ((0, 2), (1, 2))), topo, spectrum, 3, 0, 0)
    von2 = embed_von(
        VonSpec(2, (a, b), ((0, 1),)), topo, spectrum, 3, 0, len(von1.links), routes={(0, 1): [ac, cb]}
    )
    vons = [von1, von2]
    need = {0: 1, 1: 2, 2: 4}
    vlinks = all_vlinks(vons)
    demands = np.array(
        [[need[vl.id] * vl.modulation.fs_capacity_gbps] for vl in vlinks], dtype=float
    )
    return Scenario(topo, vons, spectrum, demands)
