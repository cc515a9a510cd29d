"""VON generation and embedding onto the physical EON."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from vontrade.errors import EmbeddingError, UnreachableError
from vontrade.topology import FREE, SpectrumState, Topology, shortest_paths


@dataclass(frozen=True)
class Modulation:
    name: str
    se_bits_per_symbol: int
    fs_capacity_gbps: float
    reach_km: float


BPSK = Modulation("BPSK", 1, 25.0, 4000.0)
QPSK = Modulation("QPSK", 2, 50.0, 2000.0)
QAM8 = Modulation("8QAM", 3, 75.0, 1000.0)
MODULATIONS = (BPSK, QPSK, QAM8)
MODULATION_BY_NAME = {m.name: m for m in MODULATIONS}

K_PATHS = 3
MAX_RETRIES = 50


def select_modulation(route_length_km: float) -> Modulation:
    """Most spectrally efficient format whose reach covers the route (inclusive)."""
    if not route_length_km > 0:
        raise ValueError("route length must be positive")
    for mod in sorted(MODULATIONS, key=lambda m: -m.se_bits_per_symbol):
        if route_length_km <= mod.reach_km:
            return mod
    raise UnreachableError(f"no modulation reaches {route_length_km} km")


@dataclass(frozen=True)
class VonSpec:
    """An unembedded VON: virtual node i sits on physical node ``node_map[i]``."""

    id: int
    node_map: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class VirtualLink:
    id: int
    von: int
    endpoints: tuple[int, int]
    src: int
    dst: int
    route: tuple[int, ...]
    modulation: Modulation
    fs: tuple[int, ...]

    @property
    def fs_count(self) -> int:
        return len(self.fs)

    @property
    def capacity_gbps(self) -> float:
        return self.fs_count * self.modulation.fs_capacity_gbps

    @property
    def assigned_fs(self) -> dict[int, frozenset[int]]:
        return {link: frozenset(self.fs) for link in self.route}

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "von": self.von,
            "endpoints": list(self.endpoints),
            "src": self.src,
            "dst": self.dst,
            "route": list(self.route),
            "modulation": self.modulation.name,
            "fs": list(self.fs),
        }


@dataclass
class Von:
    id: int
    node_map: tuple[int, ...]
    links: list[VirtualLink] = field(default_factory=list)
    retries: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "node_map": list(self.node_map),
            "retries": self.retries,
            "links": [vl.to_dict() for vl in self.links],
        }


def generate_von_spec(rng: np.random.Generator, topology: Topology, von_id: int) -> VonSpec:
    n, m = topology.n_nodes, topology.n_links
    if n < 2:
        raise EmbeddingError("need at least two physical nodes")
    v = int(rng.integers(math.ceil(n / 3), math.floor(2 * n / 3), endpoint=True))
    v = min(max(v, 2), n)
    e = int(rng.integers(math.ceil(m / 3), max(math.ceil(m / 3), math.floor(2 * m / 3)), endpoint=True))
    e = min(max(e, v - 1), v * (v - 1) // 2)

    node_map = tuple(int(x) for x in rng.choice(n, size=v, replace=False))

    order = [int(x) for x in rng.permutation(v)]
    edges: set[tuple[int, int]] = set()
    for i in range(1, v):
        j = order[int(rng.integers(0, i))]
        a, b = sorted((order[i], j))
        edges.add((a, b))
    rest = [(a, b) for a in range(v) for b in range(a + 1, v) if (a, b) not in edges]
    extra = e - (v - 1)
    if extra > 0:
        picks = rng.choice(len(rest), size=extra, replace=False)
        edges.update(rest[int(p)] for p in picks)
    return VonSpec(von_id, node_map, tuple(sorted(edges)))


def first_fit(
    spectrum: SpectrumState, route: Sequence[int], width: int, von: int, guard_fs: int = 0
) -> int | None:
    """Lowest start index of a block free on every route link, or None.

    Cells within ``guard_fs`` of another VON's cells are unusable.
    """
    owner = spectrum.owner[list(route)]
    forbidden = np.any(owner != FREE, axis=0)
    if guard_fs > 0:
        foreign = np.any((owner != FREE) & (owner != von), axis=0)
        padded = np.concatenate([np.zeros(guard_fs, bool), foreign, np.zeros(guard_fs, bool)])
        for shift in range(2 * guard_fs + 1):
            forbidden |= padded[shift : shift + spectrum.fs_total]
    # count of forbidden cells in each window via prefix sums
    csum = np.concatenate([[0], np.cumsum(forbidden)])
    windows = csum[width:] - csum[:-width]
    hits = np.flatnonzero(windows == 0)
    return int(hits[0]) if hits.size else None


def embed_von(
    spec: VonSpec,
    topology: Topology,
    spectrum: SpectrumState,
    fs_per_vlink: int,
    guard_fs: int = 0,
    first_vlink_id: int = 0,
    k: int = K_PATHS,
    routes: dict[tuple[int, int], list[int]] | None = None,
) -> Von:
    """Route and first-fit every virtual link of ``spec``.

    ``routes`` pins the physical route for given virtual edges. On failure all
    cells taken so far are returned and EmbeddingError is raised.
    """
    if fs_per_vlink < 1:
        raise EmbeddingError("fs_per_vlink must be positive")
    von = Von(spec.id, spec.node_map)
    try:
        for idx, (a, b) in enumerate(spec.edges):
            src, dst = spec.node_map[a], spec.node_map[b]
            if routes and (a, b) in routes:
                candidates = [list(routes[(a, b)])]
            else:
                candidates = shortest_paths(topology, src, dst, k)
            placed = None
            for route in candidates:
                try:
                    mod = select_modulation(topology.route_length(route))
                except UnreachableError:
                    continue
                start = first_fit(spectrum, route, fs_per_vlink, spec.id, guard_fs)
                if start is not None:
                    placed = (route, mod, start)
                    break
            if placed is None:
                raise EmbeddingError(f"VON {spec.id}: no feasible route/block for edge {a}-{b}")
            route, mod, start = placed
            fs = tuple(range(start, start + fs_per_vlink))
            for link in route:
                spectrum.assign(link, fs, spec.id)
            von.links.append(
                VirtualLink(first_vlink_id + idx, spec.id, (a, b), src, dst, tuple(route), mod, fs)
            )
    except Exception:
        for vl in von.links:
            for link in vl.route:
                spectrum.unassign(link, vl.fs, spec.id)
        raise
    return von


def embed_all(
    topology: Topology,
    spectrum: SpectrumState,
    n_vons: int,
    fs_per_vlink: int,
    rng_for: Callable[[int, int], np.random.Generator],
    guard_fs: int = 0,
    max_retries: int = MAX_RETRIES,
) -> list[Von]:
    """Generate and embed ``n_vons`` VONs.

    ``rng_for(von_id, attempt)`` supplies the random stream for each attempt; a
    failed attempt discards that draft and draws a fresh one.
    """
    vons: list[Von] = []
    next_id = 0
    for von_id in range(n_vons):
        for attempt in range(max_retries + 1):
            spec = generate_von_spec(rng_for(von_id, attempt), topology, von_id)
            try:
                von = embed_von(spec, topology, spectrum, fs_per_vlink, guard_fs, next_id)
            except EmbeddingError:
                continue
            von.retries = attempt
            break
        else:
            raise EmbeddingError(f"VON {von_id}: retry budget of {max_retries} exhausted")
        vons.append(von)
        next_id += len(von.links)
    return vons


def all_vlinks(vons: Sequence[Von]) -> list[VirtualLink]:
    out = [vl for von in vons for vl in von.links]
    assert [vl.id for vl in out] == list(range(len(out))), "virtual link ids must be dense"
    return out
