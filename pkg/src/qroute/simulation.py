"""Time-slotted simulation engine.

Wires topology, entanglement physics, the two learning agents, and routing
into a fixed per-slot pipeline, and aggregates multi-trial experiments and
parameter sweeps.  The slot order is a contract: channel reset, cache
expiry, request aging, request injection, link selection and entanglement,
proactive fusion, routing, reward settlement, one training step per agent,
periodic target sync.

Seeding: each trial derives its seed from the master seed through a 64-bit
mix, and every stochastic concern inside a trial (topology, agent inits,
entanglement attempts, request arrivals, exploration, fusion, routing,
replay draws) owns a separate generator, so one phase's draw count never
shifts another's stream.  Identical configs therefore reproduce identical
slot reports, which is checked by hashing the per-slot stream; wall-clock
timings are kept out of the hash and out of the deterministic report dict.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from qroute.dqn import TrainConfig, epsilon_at
from qroute.errors import ConfigError, ContractError
from qroute.link_select import (
    LinkSelectAgent,
    baseline_exact_select,
    baseline_greedy_select,
)
from qroute.proactive_swap import ProactiveSwapAgent, ReserveConfig
from qroute.quantum import (
    PhysicsConfig,
    ResourcePool,
    attempt_entanglement,
    expire_cache,
    reset_slot_channels,
)
from qroute.routing import (
    PENDING,
    Request,
    age_requests,
    build_entangled_graph,
    execute_paths,
    select_paths,
)
from qroute.topology import Network, TopologyConfig, generate_waxman, splitmix64

LINK_SELECTORS = ("rl", "greedy", "exact")
ABLATION_MODES = ("greedy", "rl", "rl+cache", "rl+cache+proactive")
SWEEP_AXES = ("lifetime", "requests", "swap_prob", "alpha", "mode")

# Substream indices, one per stochastic concern within a trial.
_S_TOPOLOGY = 0
_S_LINK_INIT = 1
_S_SWAP_INIT = 2
_S_PHYSICS = 3
_S_REQUESTS = 4
_S_LINK_EXPLORE = 5
_S_SWAP_COMMIT = 6
_S_ROUTING = 7
_S_LINK_REPLAY = 8
_S_SWAP_REPLAY = 9


def trial_seed(master: int, trial_index: int) -> int:
    # Mix the master first so (master, index) pairs like (0, 1) and (1, 0)
    # land in unrelated streams.
    return splitmix64(splitmix64(master) + trial_index)


def substream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(splitmix64(seed + index)))


def default_link_train(slots: int) -> TrainConfig:
    """Exploration decays over the first tenth of the run."""
    return TrainConfig(epsilon_decay_steps=max(1, slots // 10))


def default_swap_train(slots: int) -> TrainConfig:
    """The fusion agent explores by flipping decisions, so epsilon starts at
    the maximum-entropy 0.5 rather than 1.0 (which would just invert the
    policy deterministically).  The floor is zero: a residual flip rate
    would force a steady trickle of fusions whether or not the learned
    policy wants them, and every forced fusion gambles two cached pairs."""
    return TrainConfig(epsilon_start=0.5, epsilon_end=0.0,
                       epsilon_decay_steps=max(1, slots // 10))


@dataclass(frozen=True)
class SimConfig:
    topology: TopologyConfig = TopologyConfig()
    physics: PhysicsConfig = PhysicsConfig()
    link_train: TrainConfig | None = None     # None: default_link_train(slots)
    swap_train: TrainConfig | None = None     # None: default_swap_train(slots)
    requests_per_slot: int = 4
    request_model: str = "fixed"              # or "poisson"
    request_ttl: int | None = 10
    slots: int = 5000
    trials: int = 5
    link_selector: str = "rl"
    caching: bool = True
    proactive: bool = False
    seed: int = 0
    warmup_frac: float = 0.1
    redundancy: int = 2
    reserve: ReserveConfig = ReserveConfig()
    exact_limits: tuple[int, int] = (10, 4)   # (max nodes, max requests)
    deep_checks: bool = False

    def validate(self) -> None:
        self.topology.validate()
        self.physics.validate()
        self.reserve.validate()
        if self.link_train is not None:
            self.link_train.validate()
        if self.swap_train is not None:
            self.swap_train.validate()
        if self.slots < 1:
            raise ConfigError(f"slots must be >= 1, got {self.slots}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.requests_per_slot < 0:
            raise ConfigError(
                f"requests_per_slot must be >= 0, got {self.requests_per_slot}")
        n = self.topology.n_nodes
        if self.requests_per_slot > n * (n - 1):
            raise ConfigError(
                f"requests_per_slot {self.requests_per_slot} exceeds the "
                f"{n * (n - 1)} ordered node pairs")
        if self.request_model not in ("fixed", "poisson"):
            raise ConfigError(
                f"request_model must be 'fixed' or 'poisson', got "
                f"{self.request_model!r}")
        if self.request_ttl is not None and self.request_ttl < 1:
            raise ConfigError(f"request_ttl must be >= 1 or None, got "
                              f"{self.request_ttl}")
        if self.link_selector not in LINK_SELECTORS:
            raise ConfigError(
                f"link_selector must be one of {LINK_SELECTORS}, got "
                f"{self.link_selector!r}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(
                f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.redundancy < 1:
            raise ConfigError(f"redundancy must be >= 1, got {self.redundancy}")
        if len(self.exact_limits) != 2 or min(self.exact_limits) < 1:
            raise ConfigError(f"exact_limits must be two positive bounds, got "
                              f"{self.exact_limits}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.link_selector == "exact":
            if self.topology.n_nodes > self.exact_limits[0]:
                raise ConfigError(
                    f"exact selection limited to {self.exact_limits[0]} nodes, "
                    f"configured topology has {self.topology.n_nodes}")
            if self.requests_per_slot > self.exact_limits[1]:
                raise ConfigError(
                    f"exact selection limited to {self.exact_limits[1]} "
                    f"requests, got {self.requests_per_slot} per slot")

    def effective_physics(self) -> PhysicsConfig:
        """With caching off no resource may outlive its slot."""
        if self.caching:
            return self.physics
        return dataclasses.replace(self.physics, lifetime=1)

    def effective_link_train(self) -> TrainConfig:
        return self.link_train or default_link_train(self.slots)

    def effective_swap_train(self) -> TrainConfig:
        return self.swap_train or default_swap_train(self.slots)


def mode_name(config: SimConfig) -> str:
    parts = [config.link_selector]
    if config.caching:
        parts.append("cache")
    if config.proactive:
        parts.append("proactive")
    return "+".join(parts)


def config_for_mode(config: SimConfig, mode: str) -> SimConfig:
    """'greedy', 'rl', 'rl+cache', 'rl+cache+proactive' and friends."""
    parts = mode.split("+")
    selector, extras = parts[0], set(parts[1:])
    if selector not in LINK_SELECTORS or not extras <= {"cache", "proactive"}:
        raise ConfigError(f"unknown mode {mode!r}")
    return dataclasses.replace(config, link_selector=selector,
                               caching="cache" in extras,
                               proactive="proactive" in extras)


def config_for_axis(config: SimConfig, axis: str, value) -> SimConfig:
    if axis == "lifetime":
        physics = dataclasses.replace(config.physics, lifetime=int(value))
        return dataclasses.replace(config, physics=physics)
    if axis == "requests":
        return dataclasses.replace(config, requests_per_slot=int(value))
    if axis == "swap_prob":
        physics = dataclasses.replace(config.physics, swap_prob=float(value))
        return dataclasses.replace(config, physics=physics)
    if axis == "alpha":
        physics = dataclasses.replace(config.physics, alpha=float(value))
        return dataclasses.replace(config, physics=physics)
    if axis == "mode":
        return config_for_mode(config, str(value))
    raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")


def config_to_dict(config: SimConfig) -> dict:
    return dataclasses.asdict(config)


@dataclass
class SlotReport:
    slot: int
    new_requests: int
    served: int
    dropped: int
    pending_start: int
    pending_end: int
    resources_created: int      # every insertion, fusion products included
    resources_consumed: int
    resources_expired: int
    segments_created: int
    link_loss: float | None
    swap_loss: float | None
    link_epsilon: float | None
    swap_epsilon: float | None
    link_select_ms: float

    def digest_dict(self) -> dict:
        """Deterministic view: everything except wall-clock timing."""
        d = dataclasses.asdict(self)
        del d["link_select_ms"]
        return d


class Engine:
    """Mutable state of one trial plus the per-slot pipeline."""

    def __init__(self, config: SimConfig, trial_index: int = 0,
                 net: Network | None = None):
        config.validate()
        self.config = config
        self.trial_index = trial_index
        self.seed = trial_seed(config.seed, trial_index)
        self.physics = config.effective_physics()
        if net is None:
            topo = dataclasses.replace(
                config.topology, seed=splitmix64(self.seed + _S_TOPOLOGY))
            net = generate_waxman(topo)
        self.net = net
        self.pool = ResourcePool(net)
        self.rng_physics = substream(self.seed, _S_PHYSICS)
        self.rng_requests = substream(self.seed, _S_REQUESTS)
        self.rng_link = substream(self.seed, _S_LINK_EXPLORE)
        self.rng_swap = substream(self.seed, _S_SWAP_COMMIT)
        self.rng_routing = substream(self.seed, _S_ROUTING)
        self.rng_link_replay = substream(self.seed, _S_LINK_REPLAY)
        self.rng_swap_replay = substream(self.seed, _S_SWAP_REPLAY)
        self.link_train = config.effective_link_train()
        self.swap_train = config.effective_swap_train()
        self.link_agent = None
        if config.link_selector == "rl":
            self.link_agent = LinkSelectAgent(
                net, self.link_train, substream(self.seed, _S_LINK_INIT))
        self.swap_agent = None
        if config.proactive:
            self.swap_agent = ProactiveSwapAgent(
                net, self.swap_train, substream(self.seed, _S_SWAP_INIT),
                config.reserve)
        self.requests: list[Request] = []
        self.slot = 0
        self._next_request_id = 0

    def _inject_requests(self) -> list[Request]:
        n = self.net.n_nodes
        total = n * (n - 1)
        k = self.config.requests_per_slot
        if self.config.request_model == "poisson":
            k = int(min(self.rng_requests.poisson(k), total))
        if k == 0:
            return []
        flat = self.rng_requests.choice(total, size=k, replace=False)
        batch = []
        for idx in np.sort(flat):
            src = int(idx) // (n - 1)
            rem = int(idx) % (n - 1)
            dst = rem if rem < src else rem + 1
            req = Request(self._next_request_id, src, dst, self.slot,
                          self.config.request_ttl)
            self._next_request_id += 1
            batch.append(req)
            self.requests.append(req)
        return batch

    def _select_links(self):
        """Returns (picks, epsilon, elapsed ms); picks are triples of
        (action, state, action index) with None placeholders for baselines."""
        cfg = self.config
        t0 = time.perf_counter()
        if cfg.link_selector == "rl":
            eps = epsilon_at(self.link_train, self.slot)
            picks = self.link_agent.select_actions(
                self.pool, self.requests, eps, self.rng_link)
        elif cfg.link_selector == "greedy":
            eps = None
            picks = [(a, None, None)
                     for a in baseline_greedy_select(self.net, self.requests)]
        else:
            eps = None
            mn, mr = cfg.exact_limits
            actions = baseline_exact_select(
                self.net, self.pool, self.requests, self.physics,
                max_nodes=mn, max_requests=mr)
            picks = [(a, None, None) for a in actions]
        return picks, eps, (time.perf_counter() - t0) * 1000.0

    def run_slot(self) -> SlotReport:
        cfg = self.config
        pool = self.pool
        pool.current_slot = self.slot
        reset_slot_channels(pool)
        created0 = pool.n_created
        consumed0 = pool.n_consumed
        expired0 = pool.n_expired
        pending_start = sum(1 for r in self.requests if r.status == PENDING)

        expired_ids = expire_cache(pool, self.physics)
        dropped = age_requests(self.requests, self.slot)
        new = self._inject_requests()

        picks, link_eps, link_select_ms = self._select_links()
        for action, state, aidx in picks:
            lid = self.net.link_id(action.u, action.v)
            room = self.net.links[lid].capacity - pool.channels_used[lid]
            made = attempt_entanglement(pool, self.physics, lid,
                                        min(action.n_channels, room),
                                        self.rng_physics)
            if made and aidx is not None:
                self.link_agent.register([r.id for r in made],
                                         (action.u, action.v), state, aidx)

        swap_eps = None
        segments_created = 0
        if self.swap_agent is not None:
            swap_eps = epsilon_at(self.swap_train, self.slot)
            events = self.swap_agent.step(pool, self.physics, self.requests,
                                          swap_eps, self.rng_swap,
                                          link_agent=self.link_agent)
            segments_created = sum(1 for e in events
                                   if e.segment_id is not None)

        graph = build_entangled_graph(pool)
        assignment = select_paths(graph, self.requests, cfg.redundancy)
        result = execute_paths(pool, self.physics, assignment, self.rng_routing)

        for agent in (self.link_agent, self.swap_agent):
            if agent is not None:
                agent.settle_used(result.used_ids, pool, self.requests)
                agent.settle_expired(expired_ids, pool, self.requests)

        link_loss = swap_loss = None
        if self.link_agent is not None:
            link_loss = self.link_agent.train_step(self.rng_link_replay)
            if (self.slot + 1) % self.link_train.target_sync_period == 0:
                self.link_agent.qnet.sync_target()
        if self.swap_agent is not None:
            swap_loss = self.swap_agent.train_step(self.rng_swap_replay)
            if (self.slot + 1) % self.swap_train.target_sync_period == 0:
                self.swap_agent.qnet.sync_target()

        pending_end = sum(1 for r in self.requests if r.status == PENDING)
        if pending_start + len(new) != len(result.served) + len(dropped) + pending_end:
            raise ContractError(
                f"slot {self.slot}: request conservation violated: "
                f"{pending_start} + {len(new)} != {len(result.served)} + "
                f"{len(dropped)} + {pending_end}")
        self.requests = [r for r in self.requests if r.status == PENDING]
        if cfg.deep_checks:
            self._deep_check()

        report = SlotReport(
            slot=self.slot,
            new_requests=len(new),
            served=len(result.served),
            dropped=len(dropped),
            pending_start=pending_start,
            pending_end=pending_end,
            resources_created=pool.n_created - created0,
            resources_consumed=pool.n_consumed - consumed0,
            resources_expired=pool.n_expired - expired0,
            segments_created=segments_created,
            link_loss=link_loss,
            swap_loss=swap_loss,
            link_epsilon=link_eps,
            swap_epsilon=swap_eps,
            link_select_ms=link_select_ms,
        )
        self.slot += 1
        return report

    def _deep_check(self) -> None:
        pool = self.pool
        if pool.recompute_memory() != pool.memory_used:
            raise ContractError(f"slot {self.slot}: memory ledger out of sync")
        for node in range(self.net.n_nodes):
            if not 0 <= pool.memory_used[node] <= self.net.node_memory[node]:
                raise ContractError(
                    f"slot {self.slot}: node {node} memory {pool.memory_used[node]} "
                    f"outside [0, {self.net.node_memory[node]}]")
        for lid, used in enumerate(pool.channels_used):
            if not 0 <= used <= self.net.links[lid].capacity:
                raise ContractError(
                    f"slot {self.slot}: link {lid} channels {used} outside "
                    f"[0, {self.net.links[lid].capacity}]")
        for res in pool.live_resources():
            if res.age(pool.current_slot) >= self.physics.lifetime:
                raise ContractError(
                    f"slot {self.slot}: resource {res.id} outlived the cache")


@dataclass
class TrialReport:
    trial_index: int
    trial_seed: int
    slots: int
    served: int
    dropped: int
    served_warm: int
    dropped_warm: int
    success_ratio: float        # warmup slots excluded
    success_ratio_full: float
    zero_denominator: bool
    resources_created: int
    resources_consumed: int
    resources_expired: int
    segments_created: int
    truncated_attempts: int
    digest: str                 # sha256 over the timing-free slot stream
    link_select_ms_mean: float


def _canon(d: dict) -> bytes:
    return (json.dumps(d, sort_keys=True, separators=(",", ":")) + "\n").encode()


def run_trial(config: SimConfig, trial_index: int = 0,
              collect_slots: bool = False, net: Network | None = None):
    """One full trial; returns a TrialReport (plus the slot reports when
    ``collect_slots`` is set)."""
    engine = Engine(config, trial_index, net=net)
    digest = hashlib.sha256()
    slot_reports: list[SlotReport] | None = [] if collect_slots else None
    served = dropped = served_warm = dropped_warm = segments = 0
    ms_total = 0.0
    warmup = int(config.slots * config.warmup_frac)
    for s in range(config.slots):
        rep = engine.run_slot()
        digest.update(_canon(rep.digest_dict()))
        served += rep.served
        dropped += rep.dropped
        if s >= warmup:
            served_warm += rep.served
            dropped_warm += rep.dropped
        segments += rep.segments_created
        ms_total += rep.link_select_ms
        if slot_reports is not None:
            slot_reports.append(rep)
    denom_warm = served_warm + dropped_warm
    denom_full = served + dropped
    report = TrialReport(
        trial_index=trial_index,
        trial_seed=engine.seed,
        slots=config.slots,
        served=served,
        dropped=dropped,
        served_warm=served_warm,
        dropped_warm=dropped_warm,
        success_ratio=served_warm / denom_warm if denom_warm else 1.0,
        success_ratio_full=served / denom_full if denom_full else 1.0,
        zero_denominator=denom_warm == 0,
        resources_created=engine.pool.n_created,
        resources_consumed=engine.pool.n_consumed,
        resources_expired=engine.pool.n_expired,
        segments_created=segments,
        truncated_attempts=engine.pool.truncated_attempts,
        digest=digest.hexdigest(),
        link_select_ms_mean=ms_total / config.slots,
    )
    if collect_slots:
        return report, slot_reports
    return report


@dataclass
class RunReport:
    config: dict
    mode: str
    seed: int
    slots: int
    trials: list[TrialReport]
    success_ratio_mean: float
    success_ratio_std: float
    success_ratio_full_mean: float
    link_select_ms_mean: float

    def to_dict(self, include_timing: bool = True) -> dict:
        trials = []
        for t in self.trials:
            td = dataclasses.asdict(t)
            if not include_timing:
                del td["link_select_ms_mean"]
            trials.append(td)
        out = {
            "config": self.config,
            "mode": self.mode,
            "seed": self.seed,
            "slots": self.slots,
            "trials": trials,
            "success_ratio_mean": self.success_ratio_mean,
            "success_ratio_std": self.success_ratio_std,
            "success_ratio_full_mean": self.success_ratio_full_mean,
        }
        if include_timing:
            out["link_select_ms_mean"] = self.link_select_ms_mean
        return out

    def timing_dict(self) -> dict:
        return {
            "link_select_ms_mean": self.link_select_ms_mean,
            "per_trial_link_select_ms": {
                str(t.trial_index): t.link_select_ms_mean for t in self.trials},
        }


def run_experiment(config: SimConfig, jobs: int = 1) -> RunReport:
    """All trials of one config; results do not depend on ``jobs``."""
    config.validate()
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    indices = list(range(config.trials))
    if jobs == 1 or config.trials == 1:
        trials = [run_trial(config, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, config.trials)) as ex:
            trials = list(ex.map(run_trial, [config] * config.trials, indices))
    ratios = [t.success_ratio for t in trials]
    return RunReport(
        config=config_to_dict(config),
        mode=mode_name(config),
        seed=config.seed,
        slots=config.slots,
        trials=trials,
        success_ratio_mean=float(np.mean(ratios)),
        success_ratio_std=float(np.std(ratios, ddof=1)) if len(ratios) > 1 else 0.0,
        success_ratio_full_mean=float(np.mean([t.success_ratio_full
                                               for t in trials])),
        link_select_ms_mean=float(np.mean([t.link_select_ms_mean
                                           for t in trials])),
    )


def sweep(config: SimConfig, axis: str, values, jobs: int = 1
          ) -> list[tuple[object, RunReport]]:
    """run_experiment per value with everything else fixed, same seed."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    return [(v, run_experiment(config_for_axis(config, axis, v), jobs))
            for v in values]


def sweep_rows(results: list[tuple[object, RunReport]]) -> list[dict]:
    """Rows matching the CSV contract: axis_value,mode,success_ratio,
    success_std,link_select_ms_mean,slots,trials,seed."""
    return [{
        "axis_value": value,
        "mode": report.mode,
        "success_ratio": report.success_ratio_mean,
        "success_std": report.success_ratio_std,
        "link_select_ms_mean": report.link_select_ms_mean,
        "slots": report.slots,
        "trials": len(report.trials),
        "seed": report.seed,
    } for value, report in results]
