"""Serving requests over whatever entanglement is currently alive.

Each slot the live resources form a multigraph over the nodes (one edge per
resource, whether link-level pair or swapped segment).  Requests are walked
in arrival order; each extracts up to ``redundancy`` edge-disjoint paths,
shortest first, and execution fuses the edges of a path with Bell-state
measurements until an end-to-end pair emerges or a measurement fails.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from qroute.errors import ContractError
from qroute.quantum import LIVE, PhysicsConfig, ResourcePool, swap

PENDING = "pending"
SERVED = "served"
DROPPED = "dropped"


@dataclass
class Request:
    id: int
    source: int
    destination: int
    arrival_slot: int
    ttl_slots: int | None = 10    # None means never dropped
    status: str = PENDING


class EntangledGraph:
    """Snapshot multigraph of live resources at one slot.

    ``edges`` maps a sorted node pair to resource ids ordered by
    (age, id) ascending, so the head of each list is the preferred edge.
    """

    def __init__(self, n_nodes: int, slot: int):
        self.n_nodes = n_nodes
        self.slot = slot
        self.edges: dict[tuple[int, int], list[int]] = {}
        self.age: dict[int, int] = {}
        self.covers: dict[int, frozenset[int]] = {}
        self._adj: dict[int, set[int]] = {}

    def add_resource(self, rid: int, endpoints: tuple[int, int], age: int,
                     covers=None) -> None:
        a, b = min(endpoints), max(endpoints)
        self.edges.setdefault((a, b), []).append(rid)
        self.age[rid] = age
        # A segment edge hides the interior nodes it was fused across; a
        # fusion chain may not revisit them, so the search needs them.
        self.covers[rid] = frozenset(covers if covers is not None else (a, b))
        self._adj.setdefault(a, set()).add(b)
        self._adj.setdefault(b, set()).add(a)

    def finalize(self) -> None:
        for ids in self.edges.values():
            ids.sort(key=lambda rid: (self.age[rid], rid))

    def neighbors(self, u: int) -> list[int]:
        return sorted(self._adj.get(u, ()))

    def n_edges(self) -> int:
        return sum(len(ids) for ids in self.edges.values())

    def multiplicity(self, u: int, v: int) -> int:
        return len(self.edges.get((min(u, v), max(u, v)), ()))


def build_entangled_graph(pool: ResourcePool) -> EntangledGraph:
    """Multigraph over all live resources, ordered for deterministic search."""
    g = EntangledGraph(pool.net.n_nodes, pool.current_slot)
    for res in pool.live_resources():
        g.add_resource(res.id, res.endpoints, res.age(pool.current_slot),
                       pool.node_path(res))
    g.finalize()
    return g


class _Residual:
    """Mutable view of the graph that select_paths consumes edges from."""

    def __init__(self, g: EntangledGraph):
        self.age = g.age
        self.edges = {pair: list(ids) for pair, ids in g.edges.items()}
        self.adj = {u: set(vs) for u, vs in g._adj.items()}
        self.covers = g.covers
        self._has_segments = any(len(c) > 2 for c in g.covers.values())

    def has_segments(self) -> bool:
        return self._has_segments

    def best_edge(self, u: int, v: int) -> tuple[int, int] | None:
        """(rid, age) of the youngest, lowest-id edge u-v, if any."""
        ids = self.edges.get((min(u, v), max(u, v)))
        if not ids:
            return None
        return ids[0], self.age[ids[0]]

    def edge_options(self, u: int, v: int, covered: frozenset[int]
                     ) -> list[tuple[int, int]]:
        """Usable parallel edges u-v as (rid, age), one per distinct node
        coverage (the (age, id)-smallest of each), given the nodes the
        partial path has already spanned."""
        out = []
        seen: set[frozenset[int]] = set()
        for rid in self.edges.get((min(u, v), max(u, v)), ()):
            cov = self.covers[rid]
            if cov in seen:
                continue
            seen.add(cov)
            if cov & covered == {u}:
                out.append((rid, self.age[rid]))
        return out

    def remove(self, u: int, v: int, rid: int) -> None:
        pair = (min(u, v), max(u, v))
        self.edges[pair].remove(rid)
        if not self.edges[pair]:
            del self.edges[pair]
            self.adj[pair[0]].discard(pair[1])
            self.adj[pair[1]].discard(pair[0])


def _reaches(res: _Residual, src: int, dst: int) -> bool:
    seen = {src}
    frontier = [src]
    while frontier:
        grown = []
        for node in frontier:
            for nxt in res.adj.get(node, ()):
                if nxt == dst:
                    return True
                if nxt not in seen:
                    seen.add(nxt)
                    grown.append(nxt)
        frontier = grown
    return False


def _shortest_path(res: _Residual, src: int, dst: int
                   ) -> tuple[list[int], list[int]] | None:
    """Min (hop count, total edge age, lexicographic node sequence) path.

    Returns (node sequence, resource ids) or None.  Among equivalent parallel
    edges the youngest (then lowest id) is taken, consistent with the age
    component.  Segment edges carry the nodes their fusion history spans, and
    a path may not cross any spanned node twice: anything else could not be
    fused left to right into a single end-to-end pair."""
    if src == dst:
        raise ContractError("request endpoints must differ")
    if not res.has_segments():
        return _shortest_path_plain(res, src, dst)
    if not _reaches(res, src, dst):
        return None
    start = (0, 0, (src,), src, (), frozenset((src,)))
    heap = [start]
    # Pareto dominance per node: an earlier-keyed arrival covering a subset
    # of this one's nodes can do anything this one can, cheaper.
    settled: dict[int, list[tuple[tuple[int, int, tuple[int, ...]],
                                  frozenset[int]]]] = {}
    while heap:
        hops, age_sum, nodes, node, eids, covered = heapq.heappop(heap)
        key = (hops, age_sum, nodes)
        entries = settled.setdefault(node, [])
        if any(k <= key and c <= covered for k, c in entries):
            continue
        entries.append((key, covered))
        if node == dst:
            return list(nodes), list(eids)
        for nxt in sorted(res.adj.get(node, ())):
            if nxt in covered:
                continue
            for rid, age in res.edge_options(node, nxt, covered):
                heapq.heappush(
                    heap, (hops + 1, age_sum + age, nodes + (nxt,), nxt,
                           eids + (rid,), covered | res.covers[rid]))
    return None


def _shortest_path_plain(res: _Residual, src: int, dst: int
                         ) -> tuple[list[int], list[int]] | None:
    """Same contract on a graph of link-level pairs only, where the covered
    set is exactly the node sequence and per-node dominance is sound."""
    start = (0, 0, (src,), src, ())
    heap = [start]
    settled: dict[int, tuple[int, int, tuple[int, ...]]] = {}
    while heap:
        hops, age_sum, nodes, node, eids = heapq.heappop(heap)
        key = (hops, age_sum, nodes)
        if node in settled and settled[node] <= key:
            continue
        settled[node] = key
        if node == dst:
            return list(nodes), list(eids)
        for nxt in sorted(res.adj.get(node, ())):
            if nxt in nodes:
                continue
            edge = res.best_edge(node, nxt)
            if edge is None:
                continue
            rid, age = edge
            heapq.heappush(heap, (hops + 1, age_sum + age, nodes + (nxt,),
                                  nxt, eids + (rid,)))
    return None


def select_paths(g: EntangledGraph, requests: list[Request], redundancy: int = 2,
                 rng: np.random.Generator | None = None
                 ) -> list[tuple[Request, list[tuple[list[int], list[int]]]]]:
    """Assign up to ``redundancy`` edge-disjoint paths per pending request.

    Requests are processed in (arrival_slot, id) order and paths extracted
    sequentially from a shared residual graph, so no resource appears twice
    across the whole assignment.  Tie-breaking is deterministic; ``rng`` is
    accepted for signature stability and unused.
    """
    del rng
    residual = _Residual(g)
    assignment = []
    for req in sorted(requests, key=lambda r: (r.arrival_slot, r.id)):
        if req.status != PENDING:
            continue
        paths = []
        for _ in range(redundancy):
            found = _shortest_path(residual, req.source, req.destination)
            if found is None:
                break
            nodes, eids = found
            for i, rid in enumerate(eids):
                residual.remove(nodes[i], nodes[i + 1], rid)
            paths.append((nodes, eids))
        if paths:
            assignment.append((req, paths))
    return assignment


@dataclass
class ExecutionResult:
    served: list[int] = field(default_factory=list)        # request ids
    used_ids: list[int] = field(default_factory=list)      # graph resources consumed
    swap_attempts: int = 0
    swap_failures: int = 0


def execute_paths(pool: ResourcePool, physics: PhysicsConfig,
                  assignment: list[tuple[Request, list[tuple[list[int], list[int]]]]],
                  rng: np.random.Generator) -> ExecutionResult:
    """Fuse assigned paths in order; the first fully successful path serves
    its request.  Every resource on an attempted path is consumed, whether
    its measurement chain succeeded or not."""
    out = ExecutionResult()
    seen: set[int] = set()
    for req, paths in assignment:
        if req.status != PENDING:
            raise ContractError(f"request {req.id} is {req.status}, not pending")
        for nodes, eids in paths:
            if req.status == SERVED:
                break  # leave redundant paths alive
            for rid in eids:
                if rid in seen:
                    raise ContractError(f"resource {rid} assigned twice")
                seen.add(rid)
                if pool.resources[rid].state != LIVE:
                    raise ContractError(f"assigned resource {rid} is not live")
            chain = [pool.resources[rid] for rid in eids]
            cur = chain[0]
            failed_at = None
            for i in range(1, len(chain)):
                out.swap_attempts += 1
                cur = swap(pool, physics, cur, chain[i], rng)
                if cur is None:
                    out.swap_failures += 1
                    failed_at = i
                    break
            out.used_ids.extend(eids)
            if failed_at is not None:
                for res in chain[failed_at + 1:]:
                    pool.consume(res)   # committed to the attempt, destroyed with it
                continue
            ends = set(cur.endpoints)
            if ends != {req.source, req.destination}:
                raise ContractError(
                    f"path for request {req.id} ends at {cur.endpoints}")
            pool.consume(cur)
            req.status = SERVED
            out.served.append(req.id)
    return out


def age_requests(requests: list[Request], current_slot: int) -> list[Request]:
    """Drop pending requests whose time-to-live elapsed; returns the drops."""
    dropped = []
    for req in requests:
        if req.status != PENDING or req.ttl_slots is None:
            continue
        if current_slot - req.arrival_slot >= req.ttl_slots:
            req.status = DROPPED
            dropped.append(req)
    return dropped
