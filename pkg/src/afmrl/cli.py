"""Command-line experiment runner.

    afmrl run --config exp.json [--mode mcts] [--seeds 0 1 2]
    afmrl bench-partition --config bench.json
    afmrl ablate --config exp.json

Outputs go to ``--out``, else ``$AFMRL_OUTPUT_DIR``, else ``./runs``. Every
file name carries the config hash and, where it applies, the seed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from .feudal import FeudalConfig, FeudalTrainer, episode_seed
from .gnn import GraphPool, harden
from .nn import no_grad
from .mcts import MCTS, Evaluator, SearchConfig, exhaustive_best
from .partition import ENUM_MAX_NODES, Partition, PartitionSpace, ncut, quadrant_partition
from .scenarios import shifting_demand_scenario
from .sim import SOTL, FixedTime, MaxPressure, Scenario, flow_snapshot, reset, run_episode, scenario_from_dict, step

OUTPUT_ENV = "AFMRL_OUTPUT_DIR"
LEARNED_MODES = ("static", "gnn", "mcts", "enum")
BASELINES = {"fixed": FixedTime, "sotl": SOTL, "maxpressure": MaxPressure}
EPISODE_COLUMNS = ("episode", "mean_reward", "average_travel_time", "average_queue", "partition_changes",
                   "mean_ncut", "reference_ncut", "alpha", "epsilon")
FEUDAL_KEYS = {f.name for f in fields(FeudalConfig)} - {"mode", "static_partition"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


def parse_mode(mode: str) -> tuple[str, Optional[str]]:
    """('feudal', partition mode) or ('baseline', controller name)."""
    kind, _, name = mode.partition(":")
    if kind == "baseline":
        if name not in BASELINES:
            raise ConfigError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}")
        return "baseline", name
    if mode in BASELINES:
        return "baseline", mode
    if mode in LEARNED_MODES:
        return "feudal", mode
    raise ConfigError(f"unknown mode {mode!r}")


def build_scenario(spec, base_dir: Optional[Path] = None) -> Scenario:
    if isinstance(spec, str):
        p = Path(spec)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        with open(p, encoding="utf-8") as fh:
            return build_scenario(json.load(fh), p.parent)
    if not isinstance(spec, dict):
        raise ConfigError("scenario must be an object or a path")
    if "builtin" in spec:
        params = {k: v for k, v in spec.items() if k != "builtin"}
        if spec["builtin"] != "shifting":
            raise ConfigError(f"unknown builtin scenario {spec['builtin']!r}")
        try:
            return shifting_demand_scenario(**params)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return scenario_from_dict(spec, base_dir)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad scenario: {exc!r}") from exc


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg.setdefault("scenario", {"builtin": "shifting"})
    if isinstance(cfg["scenario"], str):
        # inline the file so the hash covers its content
        p = Path(cfg["scenario"])
        p = p if p.is_absolute() else path.parent / p
        try:
            with open(p, encoding="utf-8") as fh:
                cfg["scenario"] = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {p}: {exc}") from exc
    cfg.setdefault("mode", "mcts")
    cfg.setdefault("seeds", [0])
    cfg.setdefault("episodes", 1)
    cfg.setdefault("feudal", {})
    return cfg


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def feudal_config(cfg: dict, mode: str, scenario: Scenario) -> FeudalConfig:
    knobs = dict(cfg.get("feudal", {}))
    unknown = set(knobs) - FEUDAL_KEYS
    if unknown:
        raise ConfigError(f"unknown feudal settings: {sorted(unknown)}")
    static = None
    if mode == "static":
        spec = cfg.get("static_partition")
        if spec is None:
            raise ConfigError("static mode needs 'static_partition' (region lists or \"quadrants\")")
        if spec == "quadrants":
            if scenario.network.shape is None:
                raise ConfigError("quadrants need a grid network")
            static = quadrant_partition(*scenario.network.shape).regions
        else:
            try:
                static = Partition.from_regions(spec, scenario.network.n).regions
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad static_partition: {exc}") from exc
        if len(static) > knobs.get("m_max", 4):
            raise ConfigError("static_partition has more regions than m_max")
    if mode == "enum" and scenario.network.n > ENUM_MAX_NODES:
        raise ConfigError(f"enum mode needs at most {ENUM_MAX_NODES} intersections, got {scenario.network.n}")
    try:
        return FeudalConfig(mode=mode, static_partition=static, **knobs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def apply_overrides(cfg: dict, args) -> dict:
    cfg = json.loads(json.dumps(cfg))
    if getattr(args, "mode", None):
        cfg["mode"] = args.mode
    if getattr(args, "seeds", None):
        cfg["seeds"] = list(args.seeds)
    if getattr(args, "episodes", None):
        cfg["episodes"] = args.episodes
    knobs = {"mcts_budget": "mcts_budget", "mcts_c": "mcts_c", "m_max": "m_max", "min_region": "min_region",
             "alpha_max": "alpha_max", "alpha_ramp": "alpha_ramp"}
    for attr, key in knobs.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg["feudal"][key] = val
    return cfg


def output_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# run


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def baseline_series(scenario: Scenario, name: str, seed: int, episodes: int) -> list[dict]:
    out = []
    for e in range(episodes):
        m = run_episode(BASELINES[name](), scenario, seed=episode_seed(seed, e))
        out.append({
            "episode": e,
            "mean_reward": -float(m.queue_trace.mean()) / scenario.network.n,
            "average_travel_time": m.average_travel_time,
            "average_queue": m.average_queue_length,
            "partition_changes": 0,
            "mean_ncut": float("nan"),
            "reference_ncut": float("nan"),
            "alpha": 0.0,
            "epsilon": 0.0,
        })
    return out


def run_seed(cfg: dict, mode: str, seed: int, out: str, tag: str, dump_assignment: bool = False,
             timings: bool = False, checkpoints: bool = False) -> list[dict]:
    """Train or evaluate one seed; writes the per-seed CSV and partition trace."""
    out = Path(out)
    scenario = build_scenario(cfg["scenario"])
    kind, name = parse_mode(mode)
    episodes = int(cfg["episodes"])
    stem = out / f"{tag}_{mode.replace(':', '-')}_seed{seed}"
    if kind == "baseline":
        rows = baseline_series(scenario, name, seed, episodes)
    else:
        fc = feudal_config(cfg, name, scenario)
        trainer = FeudalTrainer(scenario, fc, seed=seed, episodes=episodes)
        rows = []
        with open(f"{stem}_partitions.jsonl", "w", encoding="utf-8") as trace:
            def record(log):
                rows.append({k: getattr(log, k) for k in EPISODE_COLUMNS})
                for t, regions, nc, value in log.partitions:
                    item = {"episode": log.episode, "step": t, "regions": [list(r) for r in regions],
                            "ncut": nc, "value": None if value is None or math.isnan(value) else value}
                    if dump_assignment:
                        item["labels"] = Partition.from_regions(regions, scenario.network.n).labels().tolist()
                    trace.write(json.dumps(item) + "\n")

            trainer.train(episodes, callback=record)
        if timings:
            with open(f"{stem}_timings.json", "w", encoding="utf-8") as fh:
                json.dump({**trainer.timings, "fallbacks": trainer.fallbacks}, fh, indent=1)
        if checkpoints:
            trainer.save(out, stem.name)
    _write_rows(Path(f"{stem}.csv"), EPISODE_COLUMNS, [[r[k] for k in EPISODE_COLUMNS] for r in rows])
    return rows


def summarize(per_seed: dict[int, list[dict]], path: Path):
    """Mean and standard deviation across seeds, per episode."""
    seeds = sorted(per_seed)
    metrics = EPISODE_COLUMNS[1:]
    header = ["episode"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    rows = []
    for e in range(len(per_seed[seeds[0]])):
        row = [e]
        for m in metrics:
            vals = np.array([per_seed[s][e][m] for s in seeds], dtype=np.float64)
            row += [float(vals.mean()), float(vals.std())]
        rows.append(row)
    _write_rows(path, header, rows)


def run_mode(cfg: dict, mode: str, out: Path, tag: str, jobs: int = 1, **kw) -> dict[int, list[dict]]:
    seeds = [int(s) for s in cfg["seeds"]]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {s: pool.submit(run_seed, cfg, mode, s, str(out), tag, **kw) for s in seeds}
            per_seed = {s: f.result() for s, f in futs.items()}
    else:
        per_seed = {s: run_seed(cfg, mode, s, str(out), tag, **kw) for s in seeds}
    summarize(per_seed, out / f"{tag}_{mode.replace(':', '-')}_summary.csv")
    return per_seed


def final_window(rows: list[dict], metric: str = "average_travel_time", window: int = 50) -> float:
    return float(np.mean([r[metric] for r in rows[-window:]]))


def validate(cfg: dict, modes) -> Scenario:
    scenario = build_scenario(cfg["scenario"])
    if not cfg["seeds"]:
        raise ConfigError("need at least one seed")
    if int(cfg["episodes"]) < 1:
        raise ConfigError("episodes must be >= 1")
    for mode in modes:
        kind, name = parse_mode(mode)
        if kind == "feudal":
            feudal_config(cfg, name, scenario)
    return scenario


def cmd_run(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    validate(cfg, [cfg["mode"]])
    out = output_dir(args)
    tag = config_hash(cfg)
    per_seed = run_mode(cfg, cfg["mode"], out, tag, args.jobs, dump_assignment=args.dump_assignment,
                        timings=args.timings, checkpoints=args.checkpoints)
    window = min(50, int(cfg["episodes"]))
    for s, rows in per_seed.items():
        print(f"{cfg['mode']} seed {s}: final-{window} travel time {final_window(rows, window=window):.2f} s")
    print(f"outputs: {out}/{tag}_*")
    return 0


def cmd_ablate(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    modes = cfg.get("ablate", {}).get("modes", ["static", "gnn", "mcts", "enum"])
    baselines = cfg.get("ablate", {}).get("baselines", ["fixed"])
    modes = list(modes) + [b if ":" in b else f"baseline:{b}" for b in baselines]
    validate(cfg, modes)
    out = output_dir(args)
    tag = config_hash({**cfg, "ablate": {"modes": modes}})
    window = min(int(cfg.get("ablate", {}).get("window", 50)), int(cfg["episodes"]))
    results = {}
    for mode in modes:
        per_seed = run_mode(cfg, mode, out, tag, args.jobs, timings=args.timings)
        results[mode] = {s: final_window(rows, window=window) for s, rows in per_seed.items()}
    seeds = [int(s) for s in cfg["seeds"]]
    ref = results.get("static")
    rows = []
    for mode, vals in results.items():
        arr = np.array([vals[s] for s in seeds])
        wins = sum(vals[s] < ref[s] for s in seeds) if ref is not None else ""
        rows.append([mode, float(arr.mean()), float(arr.std()), wins] + [vals[s] for s in seeds])
        print(f"{mode:>20}: {arr.mean():8.2f} +- {arr.std():6.2f} s" + (f"  beats static {wins}/{len(seeds)}"
                                                                          if ref is not None else ""))
    _write_rows(out / f"{tag}_ablation.csv", ["mode", "att_mean", "att_std", "wins_vs_static"] +
                [f"seed{s}" for s in seeds], rows)
    return 0


# ---------------------------------------------------------------------------
# partition-search benchmark


def bench_snapshots(scenario: Scenario, count: int, seed: int, warmup: int, source: str) -> list[tuple]:
    """(flow density, lane queues) pairs from random-phase simulation, or
    uniform random edge weights with random queues."""
    rng = np.random.default_rng(seed)
    net = scenario.network
    snaps = []
    for k in range(count):
        if source == "random":
            F = np.where(net.adjacency, rng.random((net.n, net.n)), 0.0)
            obs = rng.integers(0, 10, size=(net.n, 12)).astype(np.float64)
        elif source == "sim":
            state = reset(scenario, int(rng.integers(2**31)))
            for _ in range(warmup):
                step(state, rng.integers(0, 8, size=net.n))
            F = flow_snapshot(state).density
            obs = state.queue.astype(np.float64)
        else:
            raise ConfigError(f"unknown snapshot source {source!r}")
        snaps.append((F, obs))
    return snaps


def bench_partition(scenario: Scenario, budgets=(0.25,), count: int = 10, seed: int = 0, warmup: int = 60,
                    source: str = "sim", m_max: int = 4, min_region: int = 2, c: float = math.sqrt(2.0),
                    gnn: bool = True) -> list[dict]:
    """Best value, evaluations and wall time of enum, mcts at budget fractions and gnn.

    A budget fraction is relative to the number of candidates enumeration
    evaluates; ``None`` means unlimited. ``ratio`` is enum value / method
    value: with the non-positive heuristic value, 1 means optimal and 0.95
    means 5% worse. It is left empty when the method's partition is outside
    the candidate set (the untrained pooling network may return fewer
    regions than a terminal partition has).
    """
    net = scenario.network
    if net.n > ENUM_MAX_NODES:
        raise ConfigError(f"enumeration needs at most {ENUM_MAX_NODES} intersections, got {net.n}")
    space = PartitionSpace(net, m_max, min_region)
    tic = time.perf_counter()
    n_candidates = len(space.enumerate(terminal_only=True))
    build_time = time.perf_counter() - tic
    pool = GraphPool(12, m_max, rng=np.random.default_rng(seed)) if gnn else None
    rows = []

    def row(k, method, budget, value, evaluations, secs, P):
        cand = P is not None and space.is_terminal(P)
        return dict(snapshot=k, method=method, budget=budget, value=value,
                    ratio=_ratio(best, value) if cand else float("nan"), evaluations=evaluations, seconds=secs,
                    ncut=ncut(F, P) if P is not None else float("nan"), candidate=cand,
                    regions=json.dumps(P.regions if P is not None else None))

    for k, (F, obs) in enumerate(bench_snapshots(scenario, count, seed, warmup, source)):
        tic = time.perf_counter()
        P, best, _ = exhaustive_best(space, F)
        secs = time.perf_counter() - tic + (build_time if k == 0 else 0.0)
        rows.append(row(k, "enum", n_candidates, best, n_candidates, secs, P))
        for frac in budgets:
            budget = None if frac is None else max(1, math.ceil(frac * n_candidates))
            cfg = SearchConfig(eval_budget=budget, c=c, m_max=m_max, min_region=min_region)
            tic = time.perf_counter()
            res = MCTS(space, cfg).search(F)
            name = "mcts@all" if frac is None else f"mcts@{frac:g}"
            rows.append(row(k, name, budget, res.value, res.evaluations, time.perf_counter() - tic, res.partition))
        if pool is not None:
            tic = time.perf_counter()
            with no_grad():
                Pg, _ = harden(pool(F, obs * 0.1))
            v = Evaluator(F).value(Pg)
            rows.append(row(k, "gnn", 1, v, 1, time.perf_counter() - tic, Pg))
    return rows


def _ratio(best: float, value: float) -> float:
    if value == best:
        return 1.0
    if not math.isfinite(value) or value == 0.0:
        return 0.0
    return best / value


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    scenario = build_scenario(cfg["scenario"])
    b = dict(cfg.get("bench", {}))
    if args.budgets:
        try:
            b["budgets"] = [None if x == "all" else float(x) for x in args.budgets]
        except ValueError as exc:
            raise ConfigError(f"bad budget: {exc}") from exc
    for key in ("m_max", "min_region"):
        if getattr(args, key, None) is not None:
            b[key] = getattr(args, key)
    if args.mcts_c is not None:
        b["c"] = args.mcts_c
    allowed = {"budgets", "count", "seed", "warmup", "source", "m_max", "min_region", "c", "gnn"}
    if set(b) - allowed:
        raise ConfigError(f"unknown bench settings: {sorted(set(b) - allowed)}")
    rows = bench_partition(scenario, **b)
    out = output_dir(args)
    tag = config_hash({**cfg, "bench": b})
    cols = ["snapshot", "method", "budget", "value", "ratio", "evaluations", "seconds", "ncut", "candidate",
            "regions"]
    _write_rows(out / f"{tag}_bench_partition.csv", cols, [[r[c] for c in cols] for r in rows])
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for m in methods:
        sel = [r for r in rows if r["method"] == m]
        hit = sum(r["ratio"] >= 0.95 for r in sel)
        ratios = [r["ratio"] for r in sel if not math.isnan(r["ratio"])]
        mean = f"{np.mean(ratios):.4f}" if ratios else "n/a"
        print(f"{m:>10}: ratio mean {mean}, >=0.95 on {hit}/{len(sel)}, "
              f"evals {max(r['evaluations'] for r in sel)}, {np.mean([r['seconds'] for r in sel]):.3f} s")
    print(f"outputs: {out}/{tag}_bench_partition.csv")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="afmrl", description="Feudal multi-agent signal control experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON")
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        sp.add_argument("--mcts-c", type=float, default=None, dest="mcts_c")
        sp.add_argument("--m-max", type=int, default=None, dest="m_max")
        sp.add_argument("--min-region", type=int, default=None, dest="min_region")

    def training(sp):
        sp.add_argument("--seeds", type=int, nargs="+", default=None)
        sp.add_argument("--episodes", type=int, default=None)
        sp.add_argument("--mcts-budget", type=int, default=None, dest="mcts_budget")
        sp.add_argument("--alpha-max", type=float, default=None, dest="alpha_max")
        sp.add_argument("--alpha-ramp", type=int, default=None, dest="alpha_ramp")
        sp.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
        sp.add_argument("--timings", action="store_true", help="also write wall-clock per component")

    r = sub.add_parser("run", help="train or evaluate one mode over all seeds")
    common(r)
    training(r)
    r.add_argument("--mode", default=None, help="static|gnn|mcts|enum|baseline:{fixed,sotl,maxpressure}")
    r.add_argument("--dump-assignment", action="store_true", help="add per-intersection labels to traces")
    r.add_argument("--checkpoints", action="store_true", help="save network weights per seed")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="every partition mode plus baselines on the same seeds")
    common(a)
    training(a)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench-partition", help="enumeration vs tree search vs pooling on snapshots")
    common(b)
    b.add_argument("--budgets", nargs="+", default=None,
                   help="fractions of the enumeration size; 'all' for unlimited")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"afmrl: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
