"""Entangled-resource bookkeeping: generation, swapping, caching, expiry.

A resource is an EPR pair held between two endpoint nodes.  Link-level pairs
span one physical link; swapping two adjacent resources at their shared node
fuses them into a longer segment spanning the concatenated links.  Every live
resource occupies one memory slot at each of its two endpoints and nothing at
interior nodes, and survives at most ``lifetime`` slots from its birth slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from qroute.errors import ConfigError, ContractError
from qroute.topology import Link, Network

LIVE = "live"
CONSUMED = "consumed"
EXPIRED = "expired"


@dataclass(frozen=True)
class PhysicsConfig:
    alpha: float = 0.002          # fiber loss coefficient, 1/km
    swap_prob: float = 0.9        # BSM success probability
    lifetime: int = 10            # max slots a resource stays usable

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ConfigError(f"swap_prob must be in [0, 1], got {self.swap_prob}")
        if self.lifetime < 1:
            raise ConfigError(f"lifetime must be >= 1, got {self.lifetime}")


@dataclass
class EntangledResource:
    id: int
    endpoints: tuple[int, int]
    hop_links: tuple[int, ...]    # physical link ids, ordered endpoint to endpoint
    birth_slot: int
    state: str = LIVE

    def age(self, current_slot: int) -> int:
        return current_slot - self.birth_slot


def link_success_prob(net: Network, physics: PhysicsConfig, link_id: int) -> float:
    """Per-attempt success probability exp(-alpha * length) for one link."""
    return math.exp(-physics.alpha * net.links[link_id].length_km)


class ResourcePool:
    """All entangled resources of one trial plus the per-slot budgets.

    Memory usage and channel usage are maintained incrementally; the
    ``recompute_*`` helpers rebuild them from scratch for invariant checks.
    """

    def __init__(self, net: Network):
        self.net = net
        self.resources: dict[int, EntangledResource] = {}
        self.live_ids: dict[int, None] = {}   # insertion-ordered id set
        self.memory_used = [0] * net.n_nodes
        self.channels_used = [0] * len(net.links)
        self.current_slot = 0
        self.truncated_attempts = 0           # attempts dropped for lack of memory
        self.n_created = 0                    # cumulative, fusion products included
        self.n_consumed = 0
        self.n_expired = 0
        self._next_id = 0

    # -- bookkeeping ---------------------------------------------------

    def free_memory(self, node: int) -> int:
        return self.net.node_memory[node] - self.memory_used[node]

    def live_resources(self) -> list[EntangledResource]:
        """Live resources in creation order."""
        return [self.resources[rid] for rid in self.live_ids]

    def live_count(self) -> int:
        return len(self.live_ids)

    def node_path(self, res: EntangledResource) -> tuple[int, ...]:
        """Ordered node sequence spanned by a resource's hop links."""
        a, b = res.endpoints
        path = [a]
        cur = a
        for lid in res.hop_links:
            ln = self.net.links[lid]
            cur = ln.v if ln.u == cur else ln.u
            path.append(cur)
        if cur != b:
            raise ContractError(f"resource {res.id} hop links do not reach {b}")
        return tuple(path)

    def insert_live(self, endpoints: tuple[int, int], hop_links: tuple[int, ...],
                    birth_slot: int) -> EntangledResource:
        a, b = endpoints
        if a == b:
            raise ContractError("resource endpoints must differ")
        if self.free_memory(a) < 1 or self.free_memory(b) < 1:
            raise ContractError(
                f"no free memory for resource at ({a}, {b}): "
                f"{self.free_memory(a)}, {self.free_memory(b)}")
        res = EntangledResource(self._next_id, (a, b), tuple(hop_links), birth_slot)
        self._next_id += 1
        self.resources[res.id] = res
        self.live_ids[res.id] = None
        self.memory_used[a] += 1
        self.memory_used[b] += 1
        self.n_created += 1
        return res

    def _release(self, res: EntangledResource, new_state: str) -> None:
        if res.state != LIVE:
            raise ContractError(f"resource {res.id} is {res.state}, not live")
        res.state = new_state
        del self.live_ids[res.id]
        a, b = res.endpoints
        self.memory_used[a] -= 1
        self.memory_used[b] -= 1
        if new_state == CONSUMED:
            self.n_consumed += 1
        elif new_state == EXPIRED:
            self.n_expired += 1

    def consume(self, res: EntangledResource) -> None:
        self._release(res, CONSUMED)

    def recompute_memory(self) -> list[int]:
        used = [0] * self.net.n_nodes
        for res in self.live_resources():
            used[res.endpoints[0]] += 1
            used[res.endpoints[1]] += 1
        return used


def attempt_entanglement(pool: ResourcePool, physics: PhysicsConfig, link_id: int,
                         n_attempts: int, rng: np.random.Generator
                         ) -> list[EntangledResource]:
    """Fire the entanglement source on one link ``n_attempts`` times.

    Each attempt consumes one channel for the slot whether or not it succeeds.
    Attempts beyond the free memory of either endpoint are truncated (counted
    in ``pool.truncated_attempts``); exceeding the channel capacity is a
    caller bug and raises.
    """
    if n_attempts < 0:
        raise ContractError(f"n_attempts must be >= 0, got {n_attempts}")
    link = pool.net.links[link_id]
    if pool.channels_used[link_id] + n_attempts > link.capacity:
        raise ContractError(
            f"link {link_id}: {n_attempts} attempts exceed remaining capacity "
            f"{link.capacity - pool.channels_used[link_id]}")
    made = min(n_attempts, pool.free_memory(link.u), pool.free_memory(link.v))
    made = max(made, 0)
    pool.truncated_attempts += n_attempts - made
    pool.channels_used[link_id] += made
    p = link_success_prob(pool.net, physics, link_id)
    created = []
    for _ in range(made):
        if rng.random() < p:
            created.append(pool.insert_live((link.u, link.v), (link_id,),
                                            pool.current_slot))
    return created


def swap(pool: ResourcePool, physics: PhysicsConfig, r1: EntangledResource,
         r2: EntangledResource, rng: np.random.Generator
         ) -> EntangledResource | None:
    """Bell-state measurement fusing two adjacent resources.

    Both inputs are consumed either way.  On success (probability
    ``swap_prob``) a new resource spanning the concatenated hop links is
    inserted, aged as the older of the two inputs.  Returns the new resource
    or None on failure.
    """
    if r1.state != LIVE or r2.state != LIVE:
        raise ContractError("swap inputs must both be live")
    if r1.id == r2.id:
        raise ContractError("cannot swap a resource with itself")
    shared = set(r1.endpoints) & set(r2.endpoints)
    if len(shared) != 1:
        raise ContractError(
            f"swap inputs must share exactly one endpoint, got {shared}")
    mid = shared.pop()
    path1, path2 = pool.node_path(r1), pool.node_path(r2)
    if (set(path1) & set(path2)) != {mid}:
        raise ContractError("swap inputs overlap beyond the shared endpoint")
    a = r1.endpoints[0] if r1.endpoints[1] == mid else r1.endpoints[1]
    c = r2.endpoints[0] if r2.endpoints[1] == mid else r2.endpoints[1]
    hops1 = r1.hop_links if path1[-1] == mid else tuple(reversed(r1.hop_links))
    hops2 = r2.hop_links if path2[0] == mid else tuple(reversed(r2.hop_links))
    birth = min(r1.birth_slot, r2.birth_slot)
    pool.consume(r1)
    pool.consume(r2)
    if rng.random() < physics.swap_prob:
        return pool.insert_live((a, c), hops1 + hops2, birth)
    return None


def expire_cache(pool: ResourcePool, physics: PhysicsConfig) -> list[int]:
    """Expire every live resource whose age reached the lifetime.

    Meant to run once per slot right after the slot counter advances; with
    lifetime 1 this clears everything born in earlier slots.  Returns the
    expired ids in creation order.
    """
    expired = []
    for res in pool.live_resources():
        if res.age(pool.current_slot) >= physics.lifetime:
            pool._release(res, EXPIRED)
            expired.append(res.id)
    return expired


def reset_slot_channels(pool: ResourcePool) -> None:
    """Return every link's channel budget for a new slot."""
    for i in range(len(pool.channels_used)):
        pool.channels_used[i] = 0
