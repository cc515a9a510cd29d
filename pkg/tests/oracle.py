"""Small random trading instances and an exhaustive reference selector.

The reference selector shares no code with the engine: it recomputes roles,
enumerates every candidate cell set per route link with itertools, and keeps
the one whose sorted priority keys compare smallest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from vontrade.embedding import MODULATIONS, VirtualLink
from vontrade.engine import CreditLedger, TradingEngine
from vontrade.topology import PhysicalLink, PhysicalNode, SpectrumState, Topology

MICRO = 1_000_000


@dataclass
class SmallInstance:
    topology: Topology
    vlinks: list[VirtualLink]
    spectrum: SpectrumState
    needed: list[int]
    credits: dict[int, int]
    mu: float
    vcat: bool


def _small_topology(rng: np.random.Generator) -> Topology:
    n = int(rng.integers(2, 5))
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
    # spanning path first so the graph is connected, then extra edges up to 4 links
    perm = [int(x) for x in rng.permutation(n)]
    edges = {tuple(sorted((perm[i], perm[i + 1]))) for i in range(n - 1)}
    extra = [p for p in pairs if p not in edges]
    rng.shuffle(extra)
    room = 4 - len(edges)
    edges.update(extra[: int(rng.integers(0, room + 1))] if room > 0 else [])
    links = [
        PhysicalLink(i, a, b, float(rng.integers(1, 21) * 50))
        for i, (a, b) in enumerate(sorted(edges))
    ]
    return Topology("small", [PhysicalNode(i, f"n{i}") for i in range(n)], links)


def _simple_routes(topo: Topology, src: int, dst: int) -> list[list[int]]:
    out = []

    def walk(node, seen, route):
        if node == dst:
            out.append(list(route))
            return
        for nxt, link in topo.neighbors(node):
            if nxt not in seen:
                seen.add(nxt)
                route.append(link)
                walk(nxt, seen, route)
                route.pop()
                seen.discard(nxt)

    walk(src, {src}, [])
    return out


def random_small_instance(rng: np.random.Generator) -> SmallInstance:
    """At most 3 VONs, 4 physical links and 6 FSs per link."""
    topo = _small_topology(rng)
    fs_total = int(rng.integers(4, 7))
    spectrum = SpectrumState(topo.n_links, fs_total)
    n_vons = int(rng.choice([1, 2, 3, 3]))
    vlinks: list[VirtualLink] = []
    for von in range(n_vons):
        for _ in range(int(rng.integers(1, 4))):
            src, dst = (int(x) for x in rng.choice(topo.n_nodes, 2, replace=False))
            routes = _simple_routes(topo, src, dst)
            routes.sort(key=len)
            # favour short routes so that virtual links share physical links
            route = routes[0] if rng.random() < 0.6 else routes[int(rng.integers(len(routes)))]
            width = int(rng.integers(1, 4))
            starts = [
                s for s in range(fs_total - width + 1)
                if all(spectrum.owner[l, s + j] == -1 for l in route for j in range(width))
            ]
            if not starts:
                continue
            start = starts[int(rng.integers(len(starts)))]
            fs = tuple(range(start, start + width))
            for link in route:
                spectrum.assign(link, fs, von)
            mod = MODULATIONS[int(rng.integers(len(MODULATIONS)))]
            vlinks.append(VirtualLink(len(vlinks), von, (0, 1), src, dst, tuple(route), mod, fs))
    needed = [
        int(rng.integers(0, vl.fs_count)) if rng.random() < 0.5 else vl.fs_count + int(rng.integers(1, 4))
        for vl in vlinks
    ]
    credits = {v: int(rng.integers(-3, 4)) * MICRO // 2 for v in range(n_vons)}
    mu = float(rng.choice([-1.0, -0.5, 0.0, -100.0]))
    return SmallInstance(topo, vlinks, spectrum, needed, credits, mu, bool(rng.integers(2)))


def engine_select(inst: SmallInstance):
    """Trades and final balances from the engine under test."""
    ledger = CreditLedger(inst.credits, inst.mu)
    ledger.balance = dict(inst.credits)
    eng = TradingEngine(inst.topology, inst.vlinks, inst.spectrum.copy(), ledger, inst.vcat)
    eng.begin_slot(0, inst.needed)
    trades = eng.select_trades()
    summary = [
        (
            t.rc,
            t.rc_vlink,
            t.width,
            tuple((c.tc, c.grants, c.credit) for c in t.contributions),
            t.self_grants,
        )
        for t in trades
    ]
    return summary, dict(ledger.balance)


def brute_select(inst: SmallInstance):
    topo = inst.topology
    longest = max(l.length_km for l in topo.links)
    weight = {l.id: round(l.length_km / longest * MICRO) for l in topo.links}
    credits = dict(inst.credits)
    mu = round(inst.mu * MICRO)

    free: dict[tuple[int, int], int] = {}  # (link, fs) -> lending von
    rcs = []
    for vl, need in zip(inst.vlinks, inst.needed):
        have = len(vl.fs)
        if need < have:
            for fs in sorted(vl.fs)[need:]:
                for link in vl.route:
                    free[(link, fs)] = vl.von
        elif need > have and not credits[vl.von] < mu:
            rcs.append(vl)
    start = dict(credits)
    rcs.sort(key=lambda vl: (-start[vl.von], vl.von, vl.id))

    out = []
    for vl in rcs:
        deficit = inst.needed[vl.id] - len(vl.fs)

        def key(owner, fs, me=vl.von):
            return (0, 0, 0, fs) if owner == me else (1, credits[owner], owner, fs)

        chosen = None
        for w in range(deficit, 0, -1):
            per_link = {}
            for link in vl.route:
                cells = sorted(fs for (l, fs) in free if l == link)
                best = None
                for combo in itertools.combinations(cells, w):
                    if not inst.vcat:
                        span = sorted(set(combo) | set(vl.fs))
                        if span[-1] - span[0] + 1 != len(span):
                            continue
                    keys = sorted(key(free[(link, fs)], fs) for fs in combo)
                    if best is None or keys < best[0]:
                        best = (keys, combo)
                if best is None:
                    break
                per_link[link] = best[1]
            if len(per_link) == len(vl.route):
                chosen = (w, per_link)
                break
        if chosen is None:
            continue
        w, per_link = chosen
        by_tc: dict[int, dict[int, list[int]]] = {}
        own: dict[int, list[int]] = {}
        for link, combo in per_link.items():
            for fs in combo:
                owner = free.pop((link, fs))
                target = own if owner == vl.von else by_tc.setdefault(owner, {})
                target.setdefault(link, []).append(fs)
        contribs = []
        for tc in sorted(by_tc):
            grants = tuple((link, tuple(sorted(fs))) for link, fs in sorted(by_tc[tc].items()))
            credit = sum(len(fs) * weight[link] for link, fs in grants)
            credits[tc] += credit
            credits[vl.von] -= credit
            contribs.append((tc, grants, credit))
        self_grants = tuple((link, tuple(sorted(fs))) for link, fs in sorted(own.items()))
        out.append((vl.von, vl.id, w, tuple(contribs), self_grants))
    return out, credits
