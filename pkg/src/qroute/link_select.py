"""Per-slot choice of how many entanglement channels to fire on each link.

The RL agent scores every physical link against a shared slot snapshot:
the state is [A; D; R; P] flattened, where A counts channels not currently
holding a live link-level pair, D is the distance matrix over the network
diameter, R the pending-request counts (clipped at 10, scaled to [0, 1]),
and P a two-hot indicator of the link under consideration.  The action is
the number of channels to fire, 0..max capacity.

Rewards are delayed: a resource created by the agent earns +1 when routing
consumes it (directly or after being fused into a segment) and -1 when it
expires unused, settled against the state at settlement time.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from qroute.dqn import QNetwork, ReplayBuffer, TrainConfig, Transition, sgd_step
from qroute.errors import ConfigError, ContractError
from qroute.quantum import PhysicsConfig, ResourcePool, link_success_prob
from qroute.routing import PENDING, Request
from qroute.topology import Network


@dataclass(frozen=True)
class LinkAction:
    u: int
    v: int
    n_channels: int


class StateEncoder:
    """Builds the flattened [A; D; R; P] vectors, dimension 3*N^2 + N."""

    def __init__(self, net: Network):
        self.net = net
        n = net.n_nodes
        self.dim = 3 * n * n + n
        diameter = net.diameter_km()
        scale = 1.0 / diameter if diameter > 0 else 0.0
        d = np.zeros((n, n))
        for u in range(n):
            for v in range(n):
                d[u, v] = net.distance_km(u, v) * scale
        self._d_flat = d.reshape(-1)
        self._cap = np.zeros((n, n))
        for ln in net.links:
            self._cap[ln.u, ln.v] = ln.capacity
            self._cap[ln.v, ln.u] = ln.capacity

    def slot_blocks(self, pool: ResourcePool, requests: list[Request]) -> np.ndarray:
        """Shared [A; D; R] prefix for the current slot, length 3*N^2."""
        n = self.net.n_nodes
        live = np.zeros((n, n))
        for res in pool.live_resources():
            if len(res.hop_links) == 1:
                a, b = res.endpoints
                live[a, b] += 1
                live[b, a] += 1
        free = self._cap - live
        r = np.zeros((n, n))
        for req in requests:
            if req.status == PENDING:
                r[req.source, req.destination] += 1
        np.clip(r, 0.0, 10.0, out=r)
        r *= 0.1
        return np.concatenate([free.reshape(-1), self._d_flat, r.reshape(-1)])

    def encode_pairs(self, blocks: np.ndarray,
                     pairs: list[tuple[int, int]]) -> np.ndarray:
        """Full state row per pair: shared blocks plus the pair indicator."""
        n = self.net.n_nodes
        out = np.zeros((len(pairs), self.dim))
        out[:, :3 * n * n] = blocks
        for i, (u, v) in enumerate(pairs):
            out[i, 3 * n * n + u] = 1.0
            out[i, 3 * n * n + v] = 1.0
        return out

    def encode_pair(self, pool: ResourcePool, requests: list[Request],
                    pair: tuple[int, int]) -> np.ndarray:
        return self.encode_pairs(self.slot_blocks(pool, requests), [pair])[0]


class LinkSelectAgent:
    """Epsilon-greedy per-link channel counts plus delayed-reward plumbing.

    ``pending`` maps a live resource id to the provenance entries that will
    be settled when the resource is used, expires, or is destroyed.  A
    segment produced by a proactive swap inherits the entries of everything
    fused into it.
    """

    def __init__(self, net: Network, cfg: TrainConfig,
                 init_rng: np.random.Generator, qnet: QNetwork | None = None):
        cfg.validate()
        self.net = net
        self.cfg = cfg
        self.encoder = StateEncoder(net)
        self.n_actions = net.max_capacity() + 1
        if qnet is None:
            qnet = QNetwork(self.encoder.dim, self.n_actions, cfg.hidden_sizes,
                            init_rng)
        if qnet.input_dim != self.encoder.dim or qnet.output_dim != self.n_actions:
            raise ConfigError(
                f"q-network shape ({qnet.input_dim}, {qnet.output_dim}) does not "
                f"match network ({self.encoder.dim}, {self.n_actions})")
        self.qnet = qnet
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.pending: dict[int, list[tuple[tuple[int, int], np.ndarray, int]]] = {}
        self.registered = 0
        self.settled_used = 0
        self.settled_expired = 0
        self.settled_destroyed = 0
        self.unknown_events = 0

    def select_actions(self, pool: ResourcePool, requests: list[Request],
                       epsilon: float, rng: np.random.Generator
                       ) -> list[tuple[LinkAction, np.ndarray, int]]:
        """One (action, state, action index) triple per physical link."""
        blocks = self.encoder.slot_blocks(pool, requests)
        pairs = [(ln.u, ln.v) for ln in self.net.links]
        states = self.encoder.encode_pairs(blocks, pairs)
        qvals = self.qnet.forward(states)
        out = []
        for i, (u, v) in enumerate(pairs):
            if rng.random() < epsilon:
                action = int(rng.integers(0, self.n_actions))
            else:
                action = int(np.argmax(qvals[i]))   # ties resolve to fewer channels
            out.append((LinkAction(u, v, action), states[i], action))
        return out

    # -- delayed rewards -------------------------------------------------

    def register(self, resource_ids: list[int], pair: tuple[int, int],
                 state: np.ndarray, action: int) -> None:
        for rid in resource_ids:
            if rid in self.pending:
                raise ContractError(f"resource {rid} already has provenance")
            self.pending[rid] = [(pair, state, action)]
            self.registered += 1

    def transfer(self, consumed_ids: list[int], new_id: int) -> None:
        """Move provenance from swap inputs onto the produced segment."""
        entries = []
        for rid in consumed_ids:
            entries.extend(self.pending.pop(rid, ()))
        if entries:
            merged = self.pending.setdefault(new_id, [])
            merged.extend(entries)

    def _settle(self, ids: list[int], reward: float, pool: ResourcePool,
                requests: list[Request]) -> int:
        todo = []
        for rid in ids:
            entries = self.pending.pop(rid, None)
            if entries is None:
                self.unknown_events += 1
                continue
            todo.extend(entries)
        if not todo:
            return 0
        blocks = self.encoder.slot_blocks(pool, requests)
        next_states = self.encoder.encode_pairs(blocks, [e[0] for e in todo])
        for (pair, state, action), s2 in zip(todo, next_states):
            self.buffer.push(Transition(state, action, reward, s2, False))
        return len(todo)

    def settle_used(self, ids, pool, requests) -> int:
        n = self._settle(ids, 1.0, pool, requests)
        self.settled_used += n
        return n

    def settle_expired(self, ids, pool, requests) -> int:
        n = self._settle(ids, -1.0, pool, requests)
        self.settled_expired += n
        return n

    def settle_destroyed(self, ids, pool, requests) -> int:
        """Inputs destroyed by a failed proactive fusion: no usage, no expiry."""
        n = self._settle(ids, 0.0, pool, requests)
        self.settled_destroyed += n
        return n

    def train_step(self, rng: np.random.Generator) -> float | None:
        if len(self.buffer) < self.cfg.batch_size:
            return None
        batch = self.buffer.sample(rng, self.cfg.batch_size)
        return sgd_step(self.qnet, batch, self.cfg)


# -- baselines ----------------------------------------------------------


def _hop_shortest_path(net: Network, src: int, dst: int) -> list[int] | None:
    """Fewest-hops path on the physical graph, lexicographic tie-break."""
    heap = [(0, (src,), src)]
    settled: dict[int, tuple[int, tuple[int, ...]]] = {}
    while heap:
        hops, nodes, node = heapq.heappop(heap)
        if node in settled and settled[node] <= (hops, nodes):
            continue
        settled[node] = (hops, nodes)
        if node == dst:
            return list(nodes)
        for nxt, _ in net.neighbors(node):
            if nxt in nodes:
                continue
            heapq.heappush(heap, (hops + 1, nodes + (nxt,), nxt))
    return None


def baseline_greedy_select(net: Network, requests: list[Request]
                           ) -> list[LinkAction]:
    """One channel per link per covering hop-shortest path, request by
    request, clamped to link capacity."""
    want: dict[int, int] = {}
    for req in requests:
        if req.status != PENDING:
            continue
        nodes = _hop_shortest_path(net, req.source, req.destination)
        if nodes is None:
            continue
        for a, b in zip(nodes[:-1], nodes[1:]):
            lid = net.link_id(a, b)
            want[lid] = want.get(lid, 0) + 1
    out = []
    for lid in sorted(want):
        ln = net.links[lid]
        out.append(LinkAction(ln.u, ln.v, min(want[lid], ln.capacity)))
    return out


def _simple_paths_ranked(net: Network, src: int, dst: int, limit: int
                         ) -> list[list[int]]:
    paths: list[list[int]] = []

    def walk(node: int, trail: list[int]) -> None:
        if node == dst:
            paths.append(list(trail))
            return
        for nxt, _ in net.neighbors(node):
            if nxt in trail:
                continue
            trail.append(nxt)
            walk(nxt, trail)
            trail.pop()

    walk(src, [src])
    paths.sort(key=lambda p: (len(p), p))
    return paths[:limit]


def baseline_exact_select(net: Network, pool: ResourcePool,
                          requests: list[Request], physics: PhysicsConfig, *,
                          max_nodes: int = 10, max_requests: int = 4,
                          paths_per_request: int = 2) -> list[LinkAction]:
    """Branch-and-bound allocation maximizing the expected number of served
    requests.

    Per request the search considers up to ``paths_per_request`` hop-ranked
    simple paths, each taken either with one dedicated channel per link or
    saturated (every link of the path filled to its remaining capacity), or
    two distinct paths with one channel each.  A path serves its request if
    every link produces at least one pair and all fusions succeed.  Intended
    for small instances only; exponential in the request count and guarded
    accordingly.
    """
    _, alloc = _exact_best(net, pool, requests, physics, max_nodes=max_nodes,
                           max_requests=max_requests,
                           paths_per_request=paths_per_request)
    out = []
    for lid in sorted(alloc):
        if alloc[lid] > 0:
            ln = net.links[lid]
            out.append(LinkAction(ln.u, ln.v, alloc[lid]))
    return out


def _exact_best(net: Network, pool: ResourcePool, requests: list[Request],
                physics: PhysicsConfig, *, max_nodes: int = 10,
                max_requests: int = 4, paths_per_request: int = 2
                ) -> tuple[float, dict[int, int]]:
    pending = [r for r in requests if r.status == PENDING]
    if net.n_nodes > max_nodes:
        raise ConfigError(
            f"exact selection limited to {max_nodes} nodes, got {net.n_nodes}")
    if len(pending) > max_requests:
        raise ConfigError(
            f"exact selection limited to {max_requests} requests, got {len(pending)}")
    link_p = [link_success_prob(net, physics, lid) for lid in range(len(net.links))]
    cap_left = [net.links[lid].capacity - pool.channels_used[lid]
                for lid in range(len(net.links))]
    mem_left = [pool.free_memory(n) for n in range(net.n_nodes)]

    def path_prob(nodes: list[int], mult: int = 1) -> float:
        prob = physics.swap_prob ** (len(nodes) - 2)
        for a, b in zip(nodes[:-1], nodes[1:]):
            p = link_p[net.link_id(a, b)]
            prob *= 1.0 - (1.0 - p) ** mult
        return prob

    # An option is (value, [(path nodes, channels per link)...]); ties in
    # value sort stably, so the cheaper unit-channel variant wins.
    options_per_req: list[list[tuple[float, list[tuple[list[int], int]]]]] = []
    for req in pending:
        cands = _simple_paths_ranked(net, req.source, req.destination,
                                     paths_per_request)
        opts: list[tuple[float, list[tuple[list[int], int]]]] = [(0.0, [])]
        for i, p in enumerate(cands):
            opts.append((path_prob(p), [(p, 1)]))
            sat = min(cap_left[net.link_id(a, b)]
                      for a, b in zip(p[:-1], p[1:]))
            if sat > 1:
                opts.append((path_prob(p, sat), [(p, sat)]))
            for q in cands[i + 1:]:
                pp, pq = path_prob(p), path_prob(q)
                opts.append((1.0 - (1.0 - pp) * (1.0 - pq), [(p, 1), (q, 1)]))
        opts.sort(key=lambda t: -t[0])
        options_per_req.append(opts)

    best_left = [max(o[0] for o in opts) for opts in options_per_req]
    tail = [0.0] * (len(pending) + 1)
    for i in range(len(pending) - 1, -1, -1):
        tail[i] = tail[i + 1] + best_left[i]

    best_value = -1.0
    best_alloc: dict[int, int] = {}
    alloc: dict[int, int] = {}

    def feasible(paths: list[tuple[list[int], int]]) -> list[int] | None:
        need_links: list[int] = []
        for nodes, mult in paths:
            for a, b in zip(nodes[:-1], nodes[1:]):
                need_links.extend([net.link_id(a, b)] * mult)
        for lid, extra in _counts(need_links).items():
            if alloc.get(lid, 0) + extra > cap_left[lid]:
                return None
        need_mem: dict[int, int] = {}
        for lid in need_links:
            ln = net.links[lid]
            need_mem[ln.u] = need_mem.get(ln.u, 0) + 1
            need_mem[ln.v] = need_mem.get(ln.v, 0) + 1
        used_mem = _mem_in_use(alloc, net)
        for node, extra in need_mem.items():
            if used_mem.get(node, 0) + extra > mem_left[node]:
                return None
        return need_links

    def rec(i: int, value: float) -> None:
        nonlocal best_value, best_alloc
        if value + tail[i] <= best_value:
            return
        if i == len(pending):
            if value > best_value:
                best_value = value
                best_alloc = dict(alloc)
            return
        for opt_value, paths in options_per_req[i]:
            need = feasible(paths)
            if need is None:
                continue
            for lid in need:
                alloc[lid] = alloc.get(lid, 0) + 1
            rec(i + 1, value + opt_value)
            for lid in need:
                alloc[lid] -= 1
                if alloc[lid] == 0:
                    del alloc[lid]

    rec(0, 0.0)
    return best_value, best_alloc


def _counts(items: list[int]) -> dict[int, int]:
    out: dict[int, int] = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return out


def _mem_in_use(alloc: dict[int, int], net: Network) -> dict[int, int]:
    out: dict[int, int] = {}
    for lid, k in alloc.items():
        ln = net.links[lid]
        out[ln.u] = out.get(ln.u, 0) + k
        out[ln.v] = out.get(ln.v, 0) + k
    return out
