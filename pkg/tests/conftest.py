"""Shared test helpers: tiny hand-built networks and pools."""

from __future__ import annotations

import numpy as np

from qroute.quantum import PhysicsConfig, ResourcePool
from qroute.topology import Link, Network


def line_network(lengths: list[float], capacity: int = 3,
                 memory: int = 10) -> Network:
    """Chain of nodes along the x axis with the given edge lengths."""
    xs = [0.0]
    for l in lengths:
        xs.append(xs[-1] + l)
    positions = [(x, 0.0) for x in xs]
    links = [Link(i, i + 1, lengths[i], capacity) for i in range(len(lengths))]
    return Network(positions, links, [memory] * len(positions))


def grid_positions(n: int, spacing: float = 100.0) -> list[tuple[float, float]]:
    """n points on a spaced horizontal line (distinct, easy distances)."""
    return [(i * spacing, 0.0) for i in range(n)]


def make_pool(net: Network) -> ResourcePool:
    return ResourcePool(net)


def sure_physics(lifetime: int = 10) -> PhysicsConfig:
    """Deterministic physics: every attempt and every swap succeeds."""
    return PhysicsConfig(alpha=0.0, swap_prob=1.0, lifetime=lifetime)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def manual_pair(pool: ResourcePool, u: int, v: int, birth: int | None = None):
    """Insert a link-level pair directly, bypassing the stochastic attempt."""
    lid = pool.net.link_id(u, v)
    if lid is None:
        raise ValueError(f"no physical link between {u} and {v}")
    return pool.insert_live((u, v), (lid,),
                            pool.current_slot if birth is None else birth)
