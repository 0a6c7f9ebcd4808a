"""Command line entry point: ``expa {gen,train,eval,sortstats,tree} CONFIG.json``.

Every command reads one JSON config (unknown keys are rejected), accepts
``--seed``/``--out`` overrides and writes ``manifest.json`` next to its
outputs. Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction

import numpy as np

from . import __version__
from .core import ConfigError, FixedPolicy
from .optim import (
    TrainConfig,
    TrainingAbort,
    evaluate,
    load_tasks,
    oracle_actions,
    train,
)
from .policy import CheckpointError, NeuralPolicy, load_checkpoint
from .sortlab import (
    ExtractionError,
    extract_decision_tree,
    pivot_sort4_tree,
    prune_redundant,
    sort_stats,
    stats_csv,
    tree_stats,
    tree_to_dot,
)
from .tasks import GENERATORS, RewardConfig, task_catalog, write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

STRATEGY_NAMES = {"policy": "policy-greedy", "pivot_sort4": "pivot_sort4", "insertion": "insertion", "optimal": "optimal-tree"}


def _check_keys(cfg: dict, allowed: set[str], required: set[str] = frozenset(), where: str = "config") -> None:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {unknown}")
    missing = sorted(required - set(cfg))
    if missing:
        raise ConfigError(f"missing {where} keys: {missing}")


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out: str, command: str, config: dict, seed: int, outputs: list[str], **extra) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": _code_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": sorted(outputs),
        **extra,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


# --------------------------------------------------------------------------
# gen


def cmd_gen(cfg: dict, seed: int, out: str, jobs: int = 1) -> list[str]:
    """Write one JSONL file per split: ``{generator}_{split}.jsonl``."""
    _check_keys(cfg, {"generator", "cfg", "splits"}, {"generator", "splits"})
    name = cfg["generator"]
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    gcfg = dict(cfg.get("cfg", {}))
    if "mix" in gcfg:
        gcfg["mix"] = {int(k): v for k, v in gcfg["mix"].items()}
    splits = cfg["splits"]
    streams = np.random.SeedSequence(seed).spawn(len(splits))
    written = []
    extra = {}
    for (split, count), ss in zip(splits.items(), streams):
        if int(count) < 0:
            raise ConfigError(f"split {split!r} has a negative size")
        try:
            tasks = GENERATORS[name]({**gcfg, "n_instances": int(count)}, np.random.default_rng(ss))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        path = os.path.join(out, f"{name}_{split}.jsonl")
        write_jsonl(path, tasks)
        written.append(os.path.basename(path))
    if name == "sort":
        from .tasks import SORT_MIX

        extra["mix"] = {str(k): v for k, v in (gcfg.get("mix") or SORT_MIX).items()}
    write_manifest(out, "gen", cfg, seed, written, **extra)
    return written


# --------------------------------------------------------------------------
# train


def cmd_train(cfg: dict, seed: int | None, out: str, jobs: int = 1, log=None):
    cfg = dict(cfg)
    if seed is not None:
        cfg["seed"] = seed
    cfg["out"] = out
    tc = TrainConfig.from_dict(cfg)
    result = train(tc, log=log)
    outputs = sorted(f for f in os.listdir(out) if f != "manifest.json")
    write_manifest(out, "train", tc.to_dict(), tc.seed, outputs, episodes=result.episodes, steps=result.steps)
    return result


# --------------------------------------------------------------------------
# eval

_EVAL_KEYS = {"checkpoint", "oracle", "catalog", "test", "decoding", "max_steps", "reward"}


def _eval_chunk(args):
    params, catalog_cfg, test, greedy, seed, max_steps, oracle, reward = args
    catalog = task_catalog(**catalog_cfg)
    tasks = load_tasks(test, np.random.default_rng(seed), RewardConfig(**reward))
    policy_for = (lambda t: FixedPolicy(catalog, oracle_actions(t, catalog))) if oracle else None
    return evaluate(params, catalog, tasks, greedy=greedy, seed=seed, max_steps=max_steps, policy_for=policy_for)


def cmd_eval(cfg: dict, seed: int, out: str, jobs: int = 1) -> dict:
    """Greedy and/or sampled evaluation of a checkpoint (or the oracle script) on a test set."""
    _check_keys(cfg, _EVAL_KEYS, {"test"})
    oracle = bool(cfg.get("oracle", False))
    params, catalog_cfg = None, cfg.get("catalog")
    if not oracle:
        if "checkpoint" not in cfg:
            raise ConfigError("eval needs a checkpoint unless oracle is true")
        params, extra, _ = load_checkpoint(cfg["checkpoint"])
        catalog_cfg = catalog_cfg or extra.get("catalog")
    if catalog_cfg is None:
        raise ConfigError("eval needs a catalog config")
    catalog = task_catalog(**catalog_cfg)
    if params is not None and params.catalog_hash != catalog.hash():
        raise CheckpointError(f"checkpoint catalog {params.catalog_hash} does not match {catalog.hash()}")
    modes = {"greedy": [True], "sampled": [False], "both": [True, False]}.get(cfg.get("decoding", "greedy"))
    if modes is None:
        raise ConfigError("decoding must be greedy, sampled or both")
    args = [(params, catalog_cfg, cfg["test"], g, seed, cfg.get("max_steps", 96), oracle, cfg.get("reward", {})) for g in modes]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            reports = list(pool.map(_eval_chunk, args))
    else:
        reports = [_eval_chunk(a) for a in args]
    report = {r["decoding"]: r for r in reports}
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    write_manifest(out, "eval", cfg, seed, ["report.json"])
    return report


# --------------------------------------------------------------------------
# sortstats / tree


def _policy_from(cfg: dict):
    params, extra, _ = load_checkpoint(cfg["checkpoint"])
    catalog = task_catalog(**(cfg.get("catalog") or extra.get("catalog")))
    if params.catalog_hash != catalog.hash():
        raise CheckpointError(f"checkpoint catalog {params.catalog_hash} does not match {catalog.hash()}")
    return NeuralPolicy(params, catalog), catalog


def cmd_sortstats(cfg: dict, seed: int, out: str, jobs: int = 1) -> list[dict]:
    _check_keys(cfg, {"n", "strategies", "checkpoint", "catalog", "samples"}, {"n"})
    n = int(cfg["n"])
    names = cfg.get("strategies", ["pivot_sort4", "insertion", "optimal"] + (["policy"] if "checkpoint" in cfg else []))
    rows = []
    for name in names:
        if name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {name!r}; choose from {sorted(STRATEGY_NAMES)}")
        policy = catalog = None
        if name == "policy":
            if "checkpoint" not in cfg:
                raise ConfigError("the policy row needs a checkpoint")
            policy, catalog = _policy_from(cfg)
        row = sort_stats(STRATEGY_NAMES[name], n, policy=policy, catalog=catalog, samples=cfg.get("samples", 10000),
                         rng=np.random.default_rng(seed))
        rows.append({**row, "strategy": name, "n": n})
    with open(os.path.join(out, "sort_stats.csv"), "w") as fh:
        fh.write(stats_csv(rows))
    write_manifest(out, "sortstats", cfg, seed, ["sort_stats.csv"])
    return rows


def cmd_tree(cfg: dict, seed: int, out: str, jobs: int = 1) -> dict:
    """DOT of the extracted tree with redundant comparisons marked, plus the pruned tree."""
    _check_keys(cfg, {"n", "source", "checkpoint", "catalog", "direction", "max_steps"})
    n = int(cfg.get("n", 4))
    direction = cfg.get("direction", "asc")
    source = cfg.get("source", "checkpoint" if "checkpoint" in cfg else "pivot_sort4")
    if source == "pivot_sort4":
        if n != 4:
            raise ConfigError("the pivot sorter is defined for n = 4")
        tree = pivot_sort4_tree(direction)
    elif source == "checkpoint":
        policy, catalog = _policy_from(cfg)
        tree = extract_decision_tree(policy, n, catalog, direction=direction, max_steps=cfg.get("max_steps", 96))
    else:
        raise ConfigError(f"unknown tree source {source!r}")
    removed: list = []
    pruned = prune_redundant(tree, removed)
    with open(os.path.join(out, "tree.dot"), "w") as fh:
        fh.write(tree_to_dot(tree, redundant=removed, name="extracted"))
    with open(os.path.join(out, "tree_pruned.dot"), "w") as fh:
        fh.write(tree_to_dot(pruned, name="pruned"))
    summary = {
        "nodes_before": len(tree.nodes()),
        "nodes_after": len(pruned.nodes()),
        "pruned": len(removed),
        "stats_before": {k: str(v) if isinstance(v, Fraction) else v for k, v in tree_stats(tree).items()},
        "stats_after": {k: str(v) if isinstance(v, Fraction) else v for k, v in tree_stats(pruned).items()},
    }
    with open(os.path.join(out, "tree.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    write_manifest(out, "tree", cfg, seed, ["tree.dot", "tree_pruned.dot", "tree.json"])
    return summary


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sortstats": cmd_sortstats, "tree": cmd_tree}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (default: ./out/<command>)")
        p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
        out = args.out or cfg.pop("out", None) or os.path.join("out", args.command)
        os.makedirs(out, exist_ok=True)
        if args.command == "train":
            cmd_train(cfg, args.seed, out, args.jobs, log=lambda s: print(s, file=sys.stderr))
        else:
            seed = args.seed if args.seed is not None else int(cfg.pop("seed", 0))
            COMMANDS[args.command](cfg, seed, out, args.jobs)
    except (ConfigError, CheckpointError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ExtractionError as exc:
        print(f"tree extraction failed on permutation {exc.perm}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    print(f"wrote {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
