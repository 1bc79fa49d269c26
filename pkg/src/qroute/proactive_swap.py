"""Speculative fusion of cached entanglement into longer segments.

Between entanglement generation and routing, this agent looks at every
node pair reachable by chaining 2..max_chain live resources, scores each
candidate with a two-output Q-network (swap vs leave), and greedily
commits the highest-scoring fusions.  A fraction of the youngest live
resources is reserved and never consumed proactively, so sudden requests
in later slots still find raw material.

The candidate state is [G; R; P] flattened: G counts live resources per
endpoint pair, R is the pending-request matrix (same scaling as the link
agent), and P marks the candidate pair.  A committed segment earns +1
when routing consumes it and -1 when it expires or a mid-chain fusion
fails; declined candidates are zero-reward transitions.  Every outcome
settles terminally, so the network regresses the immediate payoff of
each decision rather than bootstrapping value across slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from qroute.dqn import QNetwork, ReplayBuffer, TrainConfig, Transition, sgd_step
from qroute.errors import ConfigError, ContractError
from qroute.quantum import PhysicsConfig, ResourcePool, swap
from qroute.routing import PENDING, Request
from qroute.topology import Network


@dataclass(frozen=True)
class ReserveConfig:
    reserve_fraction: float = 0.25
    max_chain: int = 4

    def validate(self) -> None:
        if not 0.0 <= self.reserve_fraction < 1.0:
            raise ConfigError(
                f"reserve_fraction must be in [0, 1), got {self.reserve_fraction}")
        if self.max_chain < 2:
            raise ConfigError(f"max_chain must be >= 2, got {self.max_chain}")


@dataclass
class SwapCandidate:
    """One fusable chain, the witness for its endpoint pair."""
    pair: tuple[int, int]
    chain: list[int]
    q_value: float = 0.0
    state: np.ndarray | None = field(default=None, repr=False)


@dataclass
class SwapEvent:
    """Outcome of one candidate during the commit pass."""
    candidate: SwapCandidate
    accepted: bool
    executed: bool = False
    destroyed: bool = False
    segment_id: int | None = None


class SwapStateEncoder:
    """Builds the flattened [G; R; P] vectors, dimension 2*N^2 + N."""

    def __init__(self, net: Network):
        self.net = net
        self.dim = 2 * net.n_nodes * net.n_nodes + net.n_nodes

    def slot_blocks(self, pool: ResourcePool, requests: list[Request]) -> np.ndarray:
        """Shared [G; R] prefix for the current slot, length 2*N^2."""
        n = self.net.n_nodes
        g = np.zeros((n, n))
        for res in pool.live_resources():
            a, b = res.endpoints
            g[a, b] += 1
            g[b, a] += 1
        r = np.zeros((n, n))
        for req in requests:
            if req.status == PENDING:
                r[req.source, req.destination] += 1
        np.clip(r, 0.0, 10.0, out=r)
        r *= 0.1
        return np.concatenate([g.reshape(-1), r.reshape(-1)])

    def encode_pairs(self, blocks: np.ndarray,
                     pairs: list[tuple[int, int]]) -> np.ndarray:
        n = self.net.n_nodes
        out = np.zeros((len(pairs), self.dim))
        out[:, :2 * n * n] = blocks
        for i, (u, v) in enumerate(pairs):
            out[i, 2 * n * n + u] = 1.0
            out[i, 2 * n * n + v] = 1.0
        return out

    def encode_pair(self, pool: ResourcePool, requests: list[Request],
                    pair: tuple[int, int]) -> np.ndarray:
        return self.encode_pairs(self.slot_blocks(pool, requests), [pair])[0]


def reserved_resource_ids(pool: ResourcePool, fraction: float) -> frozenset[int]:
    """Ids of the youngest ceil(fraction * live) resources, kept off-limits."""
    live = pool.live_resources()
    keep = math.ceil(fraction * len(live))
    if keep <= 0:
        return frozenset()
    ranked = sorted(live, key=lambda r: (-r.birth_slot, r.id))
    return frozenset(r.id for r in ranked[:keep])


def enumerate_candidates(pool: ResourcePool, config: ReserveConfig,
                         reserved: frozenset[int] | None = None
                         ) -> list[SwapCandidate]:
    """All endpoint pairs reachable by fusing 2..max_chain unreserved live
    resources along a simple node path, one witness chain per pair.

    The witness is the shortest chain; ties break on the lexicographically
    smallest id tuple (the chain and its reverse count as one).
    """
    config.validate()
    if reserved is None:
        reserved = reserved_resource_ids(pool, config.reserve_fraction)
    usable = [res for res in pool.live_resources() if res.id not in reserved]
    cover = {res.id: frozenset(pool.node_path(res)) for res in usable}
    by_node: dict[int, list] = {}
    for res in usable:
        a, b = res.endpoints
        by_node.setdefault(a, []).append(res)
        by_node.setdefault(b, []).append(res)

    # Frontier of oriented partial chains, deduplicated per (left end,
    # right end, covered node set): only the lexicographically smallest id
    # tuple can ever be part of a winning witness.  Covered sets include
    # segment interiors, which a chain may not touch again: the fusions
    # would not compose.
    frontier: dict[tuple[int, int, frozenset[int]], tuple[int, ...]] = {}
    for res in usable:
        a, b = res.endpoints
        for left, right in ((a, b), (b, a)):
            key = (left, right, cover[res.id])
            old = frontier.get(key)
            if old is None or (res.id,) < old:
                frontier[key] = (res.id,)

    best: dict[tuple[int, int], tuple[int, tuple[int, ...]]] = {}
    for length in range(2, config.max_chain + 1):
        grown: dict[tuple[int, int, frozenset[int]], tuple[int, ...]] = {}
        for (left, right, covered), ids in frontier.items():
            for res in by_node.get(right, ()):
                a, b = res.endpoints
                other = b if a == right else a
                if cover[res.id] & covered != {right}:
                    continue
                key = (left, other, covered | cover[res.id])
                tup = ids + (res.id,)
                old = grown.get(key)
                if old is None or tup < old:
                    grown[key] = tup
        for (left, right, _), ids in grown.items():
            pair = (left, right) if left < right else (right, left)
            entry = (length, min(ids, ids[::-1]))
            old = best.get(pair)
            if old is None or entry < old:
                best[pair] = entry
        frontier = grown
        if not frontier:
            break
    return [SwapCandidate(pair=pair, chain=list(ids))
            for pair, (_, ids) in sorted(best.items())]


def evaluate_candidates(candidates: list[SwapCandidate], qnet: QNetwork,
                        encoder: SwapStateEncoder, pool: ResourcePool,
                        requests: list[Request]) -> list[SwapCandidate]:
    """Fill q_value = Q[swap] - Q[leave] for every candidate, all against
    the same slot snapshot (order cannot matter)."""
    if not candidates:
        return candidates
    blocks = encoder.slot_blocks(pool, requests)
    states = encoder.encode_pairs(blocks, [c.pair for c in candidates])
    qvals = qnet.forward(states)
    for i, cand in enumerate(candidates):
        cand.q_value = float(qvals[i, 1] - qvals[i, 0])
        cand.state = states[i]
    return candidates


def _unreserved_live(pool: ResourcePool, reserved: frozenset[int]) -> int:
    return sum(1 for rid in pool.live_ids if rid not in reserved)


def commit_swaps(pool: ResourcePool, physics: PhysicsConfig,
                 candidates: list[SwapCandidate], epsilon: float,
                 rng: np.random.Generator, *,
                 reserved: frozenset[int] = frozenset(),
                 hooks: tuple = (), requests: list[Request] | None = None
                 ) -> list[SwapEvent]:
    """Greedy pass over candidates in descending q_value order.

    Each decision (accept iff q_value > 0) is flipped with probability
    epsilon.  An accepted chain runs only if all its resources are still
    live and unreserved; fusions execute left to right and may fail per
    BSM.  ``hooks`` are agents notified of consumed inputs: on success
    ``hook.transfer(consumed, new_id)``, on a failed fusion
    ``hook.settle_destroyed(consumed, pool, requests)``.
    """
    requests = requests if requests is not None else []
    order = sorted(candidates, key=lambda c: (-c.q_value, c.pair, tuple(c.chain)))
    events = []
    for cand in order:
        if _unreserved_live(pool, reserved) < 2:
            break
        accept = cand.q_value > 0.0
        if rng.random() < epsilon:
            accept = not accept
        event = SwapEvent(cand, accept)
        events.append(event)
        if not accept:
            continue
        if any(rid not in pool.live_ids or rid in reserved
               for rid in cand.chain):
            continue                # lost a resource to an earlier chain
        event.executed = True
        cur = pool.resources[cand.chain[0]]
        for rid in cand.chain[1:]:
            nxt = pool.resources[rid]
            fused = swap(pool, physics, cur, nxt, rng)
            if fused is None:
                for hook in hooks:
                    hook.settle_destroyed([cur.id, nxt.id], pool, requests)
                event.destroyed = True
                break
            for hook in hooks:
                hook.transfer([cur.id, nxt.id], fused.id)
            cur = fused
        if not event.destroyed:
            if set(cur.endpoints) != set(cand.pair):
                raise ContractError(
                    f"segment endpoints {cur.endpoints} do not match "
                    f"candidate pair {cand.pair}")
            event.segment_id = cur.id
    return events


class ProactiveSwapAgent:
    """Scores and commits fusions, and learns from what becomes of them.

    ``pending`` maps a live proactive segment id to the decision states
    that produced it; a segment fused into a bigger one passes its entries
    along.  Ids the agent never created are ignored on settlement (most
    consumed or expired resources are plain link pairs).
    """

    def __init__(self, net: Network, cfg: TrainConfig,
                 init_rng: np.random.Generator,
                 reserve: ReserveConfig = ReserveConfig(),
                 qnet: QNetwork | None = None):
        cfg.validate()
        reserve.validate()
        self.net = net
        self.cfg = cfg
        self.reserve = reserve
        self.encoder = SwapStateEncoder(net)
        if qnet is None:
            qnet = QNetwork(self.encoder.dim, 2, cfg.hidden_sizes, init_rng)
        if qnet.input_dim != self.encoder.dim or qnet.output_dim != 2:
            raise ConfigError(
                f"q-network shape ({qnet.input_dim}, {qnet.output_dim}) does "
                f"not match network ({self.encoder.dim}, 2)")
        self.qnet = qnet
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.pending: dict[int, list[tuple[tuple[int, int], np.ndarray]]] = {}
        self.committed = 0
        self.settled_used = 0
        self.settled_expired = 0
        self.settled_destroyed = 0
        self.destroyed_candidates = 0

    def step(self, pool: ResourcePool, physics: PhysicsConfig,
             requests: list[Request], epsilon: float,
             rng: np.random.Generator, link_agent=None) -> list[SwapEvent]:
        """Full per-slot pass: enumerate, score, commit, record transitions."""
        reserved = reserved_resource_ids(pool, self.reserve.reserve_fraction)
        candidates = enumerate_candidates(pool, self.reserve, reserved)
        evaluate_candidates(candidates, self.qnet, self.encoder, pool, requests)
        hooks = (self,) if link_agent is None else (link_agent, self)
        events = commit_swaps(pool, physics, candidates, epsilon, rng,
                              reserved=reserved, hooks=hooks, requests=requests)
        zero = np.zeros(self.encoder.dim)
        for event in events:
            cand = event.candidate
            if event.segment_id is not None:
                self.pending.setdefault(event.segment_id, []).append(
                    (cand.pair, cand.state))
                self.committed += 1
            elif not event.destroyed:
                # Declined, or beaten to its resources: terminal no-op.
                action = 1 if event.accepted else 0
                self.buffer.push(
                    Transition(cand.state, action, 0.0, zero, True))
        for event in events:
            if event.destroyed:
                self.buffer.push(
                    Transition(event.candidate.state, 1, -1.0, zero, True))
                self.settled_destroyed += 1
                self.destroyed_candidates += 1
        return events

    # -- delayed rewards -------------------------------------------------

    def transfer(self, consumed_ids: list[int], new_id: int) -> None:
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
            todo.extend(self.pending.pop(rid, ()))
        if not todo:
            return 0
        # Each commit is a one-shot decision: its return is fully realized
        # once the segment resolves, so settles are terminal and carry no
        # bootstrap.  A bootstrapped target would tilt accept upward against
        # the exactly-zero value of declining.
        zero = np.zeros(self.encoder.dim)
        for pair, state in todo:
            self.buffer.push(Transition(state, 1, reward, zero, True))
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
        """A later fusion failed on top of this segment: wasted work."""
        n = self._settle(ids, -1.0, pool, requests)
        self.settled_destroyed += n
        return n

    def train_step(self, rng: np.random.Generator) -> float | None:
        if len(self.buffer) < self.cfg.batch_size:
            return None
        batch = self.buffer.sample(rng, self.cfg.batch_size)
        return sgd_step(self.qnet, batch, self.cfg)
