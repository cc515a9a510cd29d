"""Physical EON model: nodes, fiber links, routing and per-FS ownership state."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import networkx as nx
import numpy as np
import yaml

from vontrade.errors import AuditError, SpectrumError, TopologyError

FREE = -1
# Normalized lengths are fixed-point in units of 1e-6 so credit arithmetic is exact.
MICRO = 1_000_000


@dataclass(frozen=True)
class PhysicalNode:
    id: int
    name: str


@dataclass(frozen=True)
class PhysicalLink:
    id: int
    a: int
    b: int
    length_km: float

    def other(self, node: int) -> int:
        return self.b if node == self.a else self.a


@dataclass
class Topology:
    name: str
    nodes: list[PhysicalNode]
    links: list[PhysicalLink]
    norm_km: float | None = None
    _adj: dict[int, list[tuple[int, int]]] = field(default_factory=dict, repr=False)
    _pair: dict[frozenset[int], int] = field(default_factory=dict, repr=False)
    _norm_micro: list[int] = field(default_factory=list, repr=False)
    _graph: nx.Graph | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self._validate()
        self._adj = {n.id: [] for n in self.nodes}
        for link in self.links:
            self._adj[link.a].append((link.b, link.id))
            self._adj[link.b].append((link.a, link.id))
            self._pair[frozenset((link.a, link.b))] = link.id
        denom = self.norm_km if self.norm_km is not None else max(l.length_km for l in self.links)
        self._norm_micro = [round(l.length_km / denom * MICRO) for l in self.links]
        g = nx.Graph()
        g.add_nodes_from(n.id for n in self.nodes)
        for link in self.links:
            g.add_edge(link.a, link.b, length_km=link.length_km, id=link.id)
        self._graph = g

    def _validate(self) -> None:
        if not self.nodes:
            raise TopologyError("topology has no nodes")
        if [n.id for n in self.nodes] != list(range(len(self.nodes))):
            raise TopologyError("node ids must be dense 0..N-1 in file order")
        if len({n.name for n in self.nodes}) != len(self.nodes):
            raise TopologyError("duplicate node name")
        if [l.id for l in self.links] != list(range(len(self.links))):
            raise TopologyError("link ids must be dense 0..L-1 in file order")
        seen: set[frozenset[int]] = set()
        n = len(self.nodes)
        for link in self.links:
            if not (0 <= link.a < n and 0 <= link.b < n):
                raise TopologyError(f"link {link.id} references unknown node")
            if link.a == link.b:
                raise TopologyError(f"link {link.id} is a self-loop")
            if not link.length_km > 0:
                raise TopologyError(f"link {link.id} has nonpositive length")
            key = frozenset((link.a, link.b))
            if key in seen:
                raise TopologyError(f"duplicate edge between {link.a} and {link.b}")
            seen.add(key)
        if self.norm_km is not None and not self.norm_km > 0:
            raise TopologyError("normalization constant must be positive")
        if not self.links and n > 1:
            raise TopologyError("disconnected graph")
        # BFS connectivity
        adj: dict[int, list[int]] = {i: [] for i in range(n)}
        for link in self.links:
            adj[link.a].append(link.b)
            adj[link.b].append(link.a)
        reached = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in reached:
                    reached.add(v)
                    queue.append(v)
        if len(reached) != n:
            raise TopologyError("disconnected graph")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        """(neighbor node, link id) pairs incident to ``node``."""
        return self._adj[node]

    def link_between(self, a: int, b: int) -> int:
        try:
            return self._pair[frozenset((a, b))]
        except KeyError:
            raise TopologyError(f"no link between {a} and {b}") from None

    def node_id(self, name: str) -> int:
        for node in self.nodes:
            if node.name == name:
                return node.id
        raise TopologyError(f"unknown node name {name!r}")

    def route_length(self, route: Iterable[int]) -> float:
        return sum(self.links[i].length_km for i in route)

    def route_nodes(self, src: int, route: list[int]) -> list[int]:
        nodes = [src]
        for lid in route:
            nodes.append(self.links[lid].other(nodes[-1]))
        return nodes

    def normalized_micro(self, link: int) -> int:
        if not 0 <= link < len(self.links):
            raise TopologyError(f"unknown link id {link}")
        return self._norm_micro[link]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "nodes": [{"id": n.id, "name": n.name} for n in self.nodes],
            "links": [
                {"id": l.id, "a": l.a, "b": l.b, "length_km": l.length_km} for l in self.links
            ],
        }


def topology_from_dict(doc: dict[str, Any], norm_km: float | None = None) -> Topology:
    try:
        nodes = [PhysicalNode(int(n["id"]), str(n["name"])) for n in doc["nodes"]]
        links = [
            PhysicalLink(int(l["id"]), int(l["a"]), int(l["b"]), float(l["length_km"]))
            for l in doc["links"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"parse error: {exc}") from exc
    return Topology(str(doc.get("name", "")), nodes, links, norm_km=norm_km)


def load_topology(source: str | Path, norm_km: float | None = None) -> Topology:
    """Load a topology document (JSON or YAML).

    ``source`` is a path, or one of the bundled dataset names ``usnet`` / ``fig1``.
    """
    text: str
    if str(source) in BUNDLED:
        text = resources.files("vontrade.data").joinpath(BUNDLED[str(source)]).read_text()
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise TopologyError(f"cannot read topology: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise TopologyError(f"parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise TopologyError("parse error: document is not a mapping")
    return topology_from_dict(doc, norm_km=norm_km)


BUNDLED = {"usnet": "usnet.json", "fig1": "fig1.json"}


def normalized_length(topology: Topology, link: int) -> float:
    """Link length over the longest link (or over the configured constant)."""
    return topology.normalized_micro(link) / MICRO


def shortest_paths(topology: Topology, src: int, dst: int, k: int) -> list[list[int]]:
    """Up to ``k`` loop-free routes (lists of link ids), shortest first.

    Ties in total length are broken by the lexicographic link-id sequence.
    """
    if src == dst:
        raise TopologyError("src and dst must differ")
    if k < 1:
        raise TopologyError("k must be positive")
    g = topology._graph
    assert g is not None
    try:
        gen = nx.shortest_simple_paths(g, src, dst, weight="length_km")
        candidates: list[tuple[float, list[int]]] = []
        for path in gen:
            route = [g[u][v]["id"] for u, v in zip(path, path[1:])]
            length = topology.route_length(route)
            # Keep pulling past k while lengths tie with the k-th, so tie-break is total.
            if len(candidates) >= k and length > candidates[k - 1][0] + 1e-9:
                break
            candidates.append((length, route))
    except nx.NetworkXNoPath:
        raise TopologyError(f"no path between {src} and {dst}") from None
    candidates.sort(key=lambda c: (round(c[0], 6), c[1]))
    return [route for _, route in candidates[:k]]


class SpectrumState:
    """Ownership of every (link, FS) cell.

    A cell is Free, Owned(von) or Loaned(owner, borrower). Owner and borrower
    live in two int arrays; a per-link loan registry is kept separately so
    ``audit`` can cross-check it against the arrays. In debug mode each
    mutation audits the links it touched.
    """

    def __init__(self, n_links: int, fs_total: int, debug: bool = False) -> None:
        if fs_total <= 0:
            raise SpectrumError("fs_total must be positive")
        self.n_links = n_links
        self.fs_total = fs_total
        self.owner = np.full((n_links, fs_total), FREE, dtype=np.int32)
        self.borrower = np.full((n_links, fs_total), FREE, dtype=np.int32)
        self.loans: dict[int, dict[int, tuple[int, int]]] = {}
        self.debug = debug
        self.mutations = 0
        self.audits = 0

    def copy(self) -> SpectrumState:
        other = SpectrumState(self.n_links, self.fs_total, self.debug)
        other.owner = self.owner.copy()
        other.borrower = self.borrower.copy()
        other.loans = {k: dict(v) for k, v in self.loans.items()}
        return other

    def state(self, link: int, fs: int) -> tuple[int, ...]:
        """``()`` if free, ``(owner,)`` if owned, ``(owner, borrower)`` if loaned."""
        o = int(self.owner[link, fs])
        b = int(self.borrower[link, fs])
        if o == FREE:
            return ()
        if b == FREE:
            return (o,)
        return (o, b)

    def assign(self, link: int, indices: Iterable[int], von: int) -> None:
        idx = np.fromiter(indices, dtype=np.int64)
        if np.any(self.owner[link, idx] != FREE):
            raise SpectrumError(f"double booking on link {link}")
        self.owner[link, idx] = von
        self._mutated((link,))

    def unassign(self, link: int, indices: Iterable[int], von: int) -> None:
        idx = np.fromiter(indices, dtype=np.int64)
        if np.any(self.owner[link, idx] != von) or np.any(self.borrower[link, idx] != FREE):
            raise SpectrumError(f"unassign of cells not plainly owned by {von} on link {link}")
        self.owner[link, idx] = FREE
        self._mutated((link,))

    def loan(self, link: int, indices: Iterable[int], owner: int, borrower: int) -> None:
        idx = list(indices)
        row = self.loans.setdefault(link, {})
        for fs in idx:
            if self.owner[link, fs] != owner:
                raise SpectrumError(f"cell ({link},{fs}) is not owned by {owner}")
            if self.borrower[link, fs] != FREE:
                raise SpectrumError(f"cell ({link},{fs}) is already loaned")
        for fs in idx:
            self.borrower[link, fs] = borrower
            row[fs] = (owner, borrower)
        self._mutated((link,))

    def release(self, link: int, indices: Iterable[int]) -> None:
        row = self.loans.get(link, {})
        for fs in indices:
            if self.borrower[link, fs] == FREE:
                raise SpectrumError(f"cell ({link},{fs}) is not loaned")
            self.borrower[link, fs] = FREE
            del row[fs]
        self._mutated((link,))

    def release_all(self) -> int:
        n = self.n_loaned()
        if n:
            touched = tuple(self.loans)
            self.borrower.fill(FREE)
            self.loans.clear()
            self._mutated(touched)
        return n

    def n_loaned(self) -> int:
        return sum(len(row) for row in self.loans.values())

    def loaned_cells(self) -> list[tuple[int, int, int, int]]:
        """Sorted (link, fs, owner, borrower) for every loaned cell."""
        return sorted(
            (link, fs, o, b) for link, row in self.loans.items() for fs, (o, b) in row.items()
        )

    def _mutated(self, links: Iterable[int]) -> None:
        self.mutations += 1
        if self.debug:
            self.audit(links)

    def audit(self, links: Iterable[int] | None = None) -> None:
        """Raise AuditError unless every cell holds one consistent ownership value.

        ``links`` restricts the check to those rows; default is the whole grid.
        """
        self.audits += 1
        rows = range(self.n_links) if links is None else links
        for link in rows:
            owner = self.owner[link]
            borrower = self.borrower[link]
            loaned = borrower != FREE
            if np.any(loaned & (owner == FREE)):
                raise AuditError(f"loaned cell without an owner on link {link}")
            registry = self.loans.get(link, {})
            if int(np.count_nonzero(loaned)) != len(registry):
                raise AuditError(f"loan registry out of sync on link {link}")
            for fs, (o, b) in registry.items():
                if owner[fs] != o or borrower[fs] != b:
                    raise AuditError(f"loan registry mismatch at ({link},{fs})")
