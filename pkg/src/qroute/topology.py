"""Random Waxman topologies for repeater networks.

Nodes are placed uniformly in a service rectangle and each candidate link
(u, v) is kept with probability beta * exp(-l / (alpha * L)), where l is the
link length and L the maximum pairwise node distance.  Generation is retried
from scratch until the graph comes out connected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qroute.errors import ConfigError

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer, used to derive independent seeds."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return (z ^ (z >> 31)) & MASK64


@dataclass(frozen=True)
class TopologyConfig:
    n_nodes: int = 25
    area_width_km: float = 2000.0
    area_height_km: float = 4000.0
    waxman_alpha: float = 0.4
    waxman_beta: float = 0.6
    capacity_range: tuple[int, int] = (3, 7)
    memory_range: tuple[int, int] = (10, 14)
    seed: int = 0
    max_attempts: int = 1000

    def validate(self) -> None:
        if self.n_nodes < 1:
            raise ConfigError(f"n_nodes must be >= 1, got {self.n_nodes}")
        if self.area_width_km <= 0 or self.area_height_km <= 0:
            raise ConfigError("area_width_km and area_height_km must be positive")
        if not 0.0 < self.waxman_beta <= 1.0:
            raise ConfigError(f"waxman_beta must be in (0, 1], got {self.waxman_beta}")
        if self.waxman_alpha <= 0:
            raise ConfigError(f"waxman_alpha must be positive, got {self.waxman_alpha}")
        for name, rng in (("capacity_range", self.capacity_range),
                          ("memory_range", self.memory_range)):
            lo, hi = rng
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} must satisfy 1 <= lo <= hi, got {rng}")
        if self.max_attempts < 1:
            raise ConfigError(f"max_attempts must be >= 1, got {self.max_attempts}")


@dataclass(frozen=True)
class Link:
    u: int
    v: int
    length_km: float
    capacity: int


class Network:
    """Immutable physical topology: node positions, links, memory budgets.

    Construction validates the structural invariants (ids in range, no self
    loops or duplicate pairs, recorded lengths consistent with positions,
    graph connected) and raises ConfigError naming the offending field.
    """

    def __init__(self, positions: list[tuple[float, float]], links: list[Link],
                 node_memory: list[int]):
        self.positions = [(float(x), float(y)) for x, y in positions]
        self.n_nodes = len(self.positions)
        if len(node_memory) != self.n_nodes:
            raise ConfigError(
                f"memory has {len(node_memory)} entries for {self.n_nodes} nodes")
        for i, m in enumerate(node_memory):
            if m < 1:
                raise ConfigError(f"memory[{i}] must be >= 1, got {m}")
        self.node_memory = [int(m) for m in node_memory]
        self.links = list(links)
        self._pair_to_link: dict[tuple[int, int], int] = {}
        for idx, ln in enumerate(self.links):
            if not (0 <= ln.u < self.n_nodes and 0 <= ln.v < self.n_nodes):
                raise ConfigError(f"links[{idx}] endpoint out of range: {ln.u}, {ln.v}")
            if ln.u == ln.v:
                raise ConfigError(f"links[{idx}] is a self loop at node {ln.u}")
            key = (min(ln.u, ln.v), max(ln.u, ln.v))
            if key in self._pair_to_link:
                raise ConfigError(f"links[{idx}] duplicates pair {key}")
            if ln.capacity < 1:
                raise ConfigError(f"links[{idx}].capacity must be >= 1, got {ln.capacity}")
            d = self.distance_km(ln.u, ln.v)
            if abs(ln.length_km - d) > 1e-9 * max(1.0, d):
                raise ConfigError(
                    f"links[{idx}].length_km {ln.length_km} does not match "
                    f"node distance {d}")
            self._pair_to_link[key] = idx
        self._adjacency: list[list[tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
        for idx, ln in enumerate(self.links):
            self._adjacency[ln.u].append((ln.v, idx))
            self._adjacency[ln.v].append((ln.u, idx))
        for row in self._adjacency:
            row.sort()
        if not self._connected():
            raise ConfigError("links do not form a connected graph")
        self._diameter: float | None = None

    def _connected(self) -> bool:
        seen = [False] * self.n_nodes
        stack = [0]
        seen[0] = True
        while stack:
            u = stack.pop()
            for v, _ in self._adjacency[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return all(seen)

    def distance_km(self, u: int, v: int) -> float:
        """Euclidean distance between two nodes."""
        if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
            raise ConfigError(f"node id out of range: ({u}, {v})")
        (xu, yu), (xv, yv) = self.positions[u], self.positions[v]
        return math.hypot(xu - xv, yu - yv)

    def diameter_km(self) -> float:
        """Maximum pairwise node distance (not the graph diameter)."""
        if self._diameter is None:
            pts = np.asarray(self.positions)
            if self.n_nodes < 2:
                self._diameter = 0.0
            else:
                diff = pts[:, None, :] - pts[None, :, :]
                self._diameter = float(np.sqrt((diff ** 2).sum(axis=2)).max())
        return self._diameter

    def link_id(self, u: int, v: int) -> int | None:
        return self._pair_to_link.get((min(u, v), max(u, v)))

    def neighbors(self, u: int) -> list[tuple[int, int]]:
        """Sorted (neighbor, link id) pairs for a node."""
        return self._adjacency[u]

    def max_capacity(self) -> int:
        return max((ln.capacity for ln in self.links), default=1)


def generate_waxman(config: TopologyConfig) -> Network:
    """Sample a connected Waxman network; raise ConfigError when the
    configured density cannot produce one within config.max_attempts draws."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = config.n_nodes
    cap_lo, cap_hi = config.capacity_range
    mem_lo, mem_hi = config.memory_range
    for _ in range(config.max_attempts):
        xs = rng.uniform(0.0, config.area_width_km, size=n)
        ys = rng.uniform(0.0, config.area_height_km, size=n)
        positions = list(zip(xs.tolist(), ys.tolist()))
        if n == 1:
            return Network(positions, [], [int(rng.integers(mem_lo, mem_hi + 1))])
        pts = np.column_stack([xs, ys])
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        big_l = float(dist.max())
        links: list[Link] = []
        for u in range(n):
            for v in range(u + 1, n):
                p = config.waxman_beta * math.exp(-dist[u, v] / (config.waxman_alpha * big_l))
                if rng.random() < p:
                    cap = int(rng.integers(cap_lo, cap_hi + 1))
                    links.append(Link(u, v, float(dist[u, v]), cap))
        memory = [int(m) for m in rng.integers(mem_lo, mem_hi + 1, size=n)]
        # Cheap union-find connectivity check before paying for construction.
        parent = list(range(n))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for ln in links:
            ra, rb = find(ln.u), find(ln.v)
            if ra != rb:
                parent[ra] = rb
        if len({find(i) for i in range(n)}) == 1:
            return Network(positions, links, memory)
    raise ConfigError(
        f"no connected graph after {config.max_attempts} attempts; "
        f"increase waxman_beta/waxman_alpha or node density")


def network_to_dict(net: Network) -> dict:
    return {
        "n_nodes": net.n_nodes,
        "positions": [[x, y] for x, y in net.positions],
        "links": [
            {"u": ln.u, "v": ln.v, "length_km": ln.length_km, "capacity": ln.capacity}
            for ln in net.links
        ],
        "memory": list(net.node_memory),
    }


def network_from_dict(data: dict) -> Network:
    if not isinstance(data, dict):
        raise ConfigError("network document must be a JSON object")
    for key in ("n_nodes", "positions", "links", "memory"):
        if key not in data:
            raise ConfigError(f"network document missing field: {key}")
    n = data["n_nodes"]
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"n_nodes must be a positive integer, got {n!r}")
    positions = data["positions"]
    if not isinstance(positions, list) or len(positions) != n:
        raise ConfigError(f"positions must list {n} [x, y] entries")
    parsed_pos: list[tuple[float, float]] = []
    for i, p in enumerate(positions):
        if (not isinstance(p, list)) or len(p) != 2:
            raise ConfigError(f"positions[{i}] must be [x, y]")
        parsed_pos.append((float(p[0]), float(p[1])))
    links = []
    if not isinstance(data["links"], list):
        raise ConfigError("links must be a list")
    for i, raw in enumerate(data["links"]):
        if not isinstance(raw, dict):
            raise ConfigError(f"links[{i}] must be an object")
        for key in ("u", "v", "length_km", "capacity"):
            if key not in raw:
                raise ConfigError(f"links[{i}] missing field: {key}")
        if not isinstance(raw["u"], int) or not isinstance(raw["v"], int):
            raise ConfigError(f"links[{i}].u and .v must be integers")
        if not isinstance(raw["capacity"], int):
            raise ConfigError(f"links[{i}].capacity must be an integer")
        links.append(Link(raw["u"], raw["v"], float(raw["length_km"]), raw["capacity"]))
    memory = data["memory"]
    if not isinstance(memory, list) or not all(isinstance(m, int) for m in memory):
        raise ConfigError("memory must be a list of integers")
    return Network(parsed_pos, links, memory)


def save_network(net: Network, path: str | Path) -> None:
    """Write the network as JSON.  Full double precision, stable key order,
    so identical networks serialize to identical bytes."""
    doc = json.dumps(network_to_dict(net), indent=2) + "\n"
    Path(path).write_text(doc)


def load_network(path: str | Path) -> Network:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return network_from_dict(data)
