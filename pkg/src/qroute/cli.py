"""Command-line front end: config ingestion, runs, sweeps, ablations.

Config files are YAML documents mirroring SimConfig (nested sections for
topology, physics, link_train, swap_train, reserve); command-line flags
override file values, and unknown keys at any level are rejected.  Exit
codes: 0 on success, 1 on any configuration problem, 2 when a runtime
invariant trips mid-run.  Output files are written only under --out, and
never on a config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import yaml

from qroute.dqn import TrainConfig
from qroute.errors import ConfigError, ContractError
from qroute.proactive_swap import ReserveConfig
from qroute.quantum import PhysicsConfig
from qroute.simulation import (
    ABLATION_MODES,
    SWEEP_AXES,
    RunReport,
    SimConfig,
    config_for_mode,
    mode_name,
    run_experiment,
    sweep,
    sweep_rows,
)
from qroute.topology import TopologyConfig, generate_waxman, save_network

CSV_COLUMNS = ("axis_value", "mode", "success_ratio", "success_std",
               "link_select_ms_mean", "slots", "trials", "seed")

_SECTIONS = {
    "topology": TopologyConfig,
    "physics": PhysicsConfig,
    "link_train": TrainConfig,
    "swap_train": TrainConfig,
    "reserve": ReserveConfig,
}
# Dataclass fields that YAML hands over as lists.
_TUPLE_FIELDS = {"capacity_range", "memory_range", "hidden_sizes",
                 "exact_limits"}


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
              for k, v in data.items()}
    return cls(**kwargs)


def build_config(data: dict) -> SimConfig:
    """Nested plain dict (parsed YAML) to a validated-shape SimConfig."""
    if not isinstance(data, dict):
        raise ConfigError(f"config document must be a mapping, got "
                          f"{type(data).__name__}")
    names = {f.name for f in dataclasses.fields(SimConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS and value is not None:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return SimConfig(**kwargs)


def load_config_file(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return data


def _resolve_seed(args, file_data: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in file_data:
        return int(file_data["seed"])
    env = os.environ.get("QROUTE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"QROUTE_SEED must be an integer, got {env!r}")
    return 0


# Flag destination -> SimConfig field for the scalar overrides.
_SCALAR_OVERRIDES = ("slots", "trials", "requests_per_slot", "request_model",
                     "request_ttl", "link_selector", "caching", "proactive",
                     "warmup_frac", "redundancy")


def resolve_config(args) -> SimConfig:
    """Defaults <- config file <- CLI flags, then validate."""
    data = load_config_file(args.config) if getattr(args, "config", None) else {}
    data = dict(data)
    data["seed"] = _resolve_seed(args, data)
    cfg = build_config(data)
    overrides = {}
    for field in _SCALAR_OVERRIDES:
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "nodes", None) is not None:
        overrides["topology"] = dataclasses.replace(cfg.topology,
                                                    n_nodes=args.nodes)
    physics_over = {k: getattr(args, k) for k in ("alpha", "swap_prob", "lifetime")
                    if getattr(args, k, None) is not None}
    if physics_over:
        overrides["physics"] = dataclasses.replace(cfg.physics, **physics_over)
    if getattr(args, "paper_scale", False):
        overrides["topology"] = dataclasses.replace(
            overrides.get("topology", cfg.topology), n_nodes=50)
        overrides.setdefault("slots", 200_000)
        overrides.setdefault("trials", 10)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def parse_values(axis: str, text: str) -> list:
    """Sweep value lists: 'a,b,c', 'lo:hi' (step 1), or 'lo:hi:step'."""
    if axis == "mode":
        return [v.strip() for v in text.split(",") if v.strip()]
    conv = float if axis in ("swap_prob", "alpha") else int
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"range syntax is lo:hi or lo:hi:step, got {text!r}")
        try:
            lo, hi = conv(parts[0]), conv(parts[1])
            step = conv(parts[2]) if len(parts) == 3 else conv(1)
        except ValueError:
            raise ConfigError(f"non-numeric sweep range {text!r}")
        if step <= 0 or hi < lo:
            raise ConfigError(f"empty sweep range {text!r}")
        values, v, k = [], lo, 0
        while v <= hi + (1e-9 if conv is float else 0):
            values.append(round(v, 10) if conv is float else v)
            k += 1
            v = lo + k * step
        return values
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"non-numeric sweep values {text!r}")


def _canon_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def _write_report(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_report.json").write_text(_canon_json(report.to_dict(False)))
    (out / "run_timing.json").write_text(_canon_json(report.timing_dict()))


def _write_csv(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides config "
                   "and QROUTE_SEED)")
    p.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    p.add_argument("--slots", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--nodes", type=int, help="topology node count")
    p.add_argument("--requests-per-slot", type=int, dest="requests_per_slot")
    p.add_argument("--request-model", choices=("fixed", "poisson"),
                   dest="request_model")
    p.add_argument("--request-ttl", type=int, dest="request_ttl")
    p.add_argument("--link-selector", choices=("rl", "greedy", "exact"),
                   dest="link_selector")
    p.add_argument("--caching", action="store_true", default=None)
    p.add_argument("--no-caching", action="store_false", dest="caching")
    p.add_argument("--proactive", action="store_true", default=None)
    p.add_argument("--no-proactive", action="store_false", dest="proactive")
    p.add_argument("--alpha", type=float, help="per-km attenuation")
    p.add_argument("--swap-prob", type=float, dest="swap_prob")
    p.add_argument("--lifetime", type=int, help="entanglement lifetime in slots")
    p.add_argument("--warmup-frac", type=float, dest="warmup_frac")
    p.add_argument("--redundancy", type=int)
    p.add_argument("--paper-scale", action="store_true", dest="paper_scale",
                   help="50 nodes, 200000 slots, 10 trials")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qroute",
        description="Entanglement routing simulator: learned link selection, "
                    "cached entanglement, proactive fusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-topology", help="generate and save a random "
                       "waxman topology")
    _add_common(p)

    p = sub.add_parser("run", help="run one experiment, write "
                       "run_report.json plus a timing sidecar")
    _add_common(p)

    p = sub.add_parser("sweep", help="run one experiment per axis value, "
                       "write sweep.csv")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma list or lo:hi[:step] range")

    p = sub.add_parser("ablation", help="run the four canonical modes on one "
                       "seed, write ablation.csv")
    _add_common(p)

    p = sub.add_parser("validate-config", help="validate the merged config "
                       "and exit")
    _add_common(p)
    return parser


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError(f"{args.command} writes files; --out is required")
    return Path(args.out)


def _cmd_gen_topology(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    topo = dataclasses.replace(cfg.topology, seed=cfg.seed)
    net = generate_waxman(topo)
    out.mkdir(parents=True, exist_ok=True)
    save_network(net, out / "topology.json")
    print(f"wrote {out / 'topology.json'}: {net.n_nodes} nodes, "
          f"{len(net.links)} links")
    return 0


def _cmd_run(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    report = run_experiment(cfg, jobs=args.jobs)
    _write_report(report, out)
    print(f"mode {report.mode}: success ratio "
          f"{report.success_ratio_mean:.4f} +/- {report.success_ratio_std:.4f} "
          f"over {len(report.trials)} trials")
    print(f"wrote {out / 'run_report.json'} and {out / 'run_timing.json'}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = parse_values(args.axis, args.values)
    if not values:
        raise ConfigError(f"sweep over {args.axis} got no values")
    if args.axis == "mode":
        for v in values:
            config_for_mode(cfg, v)     # fail fast before any run
    out = _require_out(args)
    results = sweep(cfg, args.axis, values, jobs=args.jobs)
    _write_csv(sweep_rows(results), out / "sweep.csv")
    print(f"wrote {out / 'sweep.csv'}: {len(results)} rows over {args.axis}")
    return 0


def _cmd_ablation(args) -> int:
    cfg = resolve_config(args)
    out = _require_out(args)
    results = sweep(cfg, "mode", list(ABLATION_MODES), jobs=args.jobs)
    _write_csv(sweep_rows(results), out / "ablation.csv")
    for value, rep in results:
        print(f"{value}: {rep.success_ratio_mean:.4f} "
              f"+/- {rep.success_ratio_std:.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def _cmd_validate(args) -> int:
    cfg = resolve_config(args)
    print(f"ok: mode={mode_name(cfg)} nodes={cfg.topology.n_nodes} "
          f"slots={cfg.slots} trials={cfg.trials} seed={cfg.seed}")
    return 0


_COMMANDS = {
    "gen-topology": _cmd_gen_topology,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "ablation": _cmd_ablation,
    "validate-config": _cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
