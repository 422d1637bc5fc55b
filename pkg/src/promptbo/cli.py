"""Command-line entry point: ``promptbo run|bench|inspect``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import load_config
from .dataset import load_examples, partition, save_manifest
from .exceptions import ConfigError, ContractError, DataValidationError, ParseError, PartitionError, RunAborted
from .expansion import DEFAULT_TEMPLATES, load_templates
from .optimizer import Trajectory, TrajectoryWriter, run
from .scorer import ClarificationBackend, EvalCache, Scorer
from .annotator import make_backend

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_EARLY_STOP = 4

log = logging.getLogger("promptbo")


def _fmt_round(rec):
    sel = rec.selected[0] if rec.selected else {}
    return (f"round {rec.round_index:2d}  kappa={rec.kappa:.3f}  "
            f"selected mu={sel.get('mu', float('nan')):.3f}+-{sel.get('sigma', float('nan')):.3f}  "
            f"acc={sel.get('accuracy', float('nan')):.3f}  best={rec.best_so_far:.3f}")


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, args.override)
        if args.fixed_hypers:
            from dataclasses import replace
            cfg = replace(cfg, run=replace(cfg.run, optimize_hypers=False))
        data_path = cfg.resolve(cfg.dataset.path)
        if not data_path.exists():
            raise ConfigError(f"file {data_path} does not exist", "dataset.path")
        examples = load_examples(data_path, cfg.dataset.format)
        stratify = cfg.dataset.format != "clarification"
        part = partition(examples, cfg.dataset.control_size, cfg.dataset.eval_size,
                         cfg.dataset.seed, stratify=stratify)
        templates = load_templates(cfg.resolve(cfg.templates)) if cfg.templates else DEFAULT_TEMPLATES
        backend = make_backend(cfg.backend, cfg.oracle)
    except (ConfigError, ParseError, DataValidationError, PartitionError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.dataset.format == "clarification":
        backend = ClarificationBackend(backend)

    run_dir = cfg.resolve(cfg.output.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.output.cache_path:
        cache = EvalCache.load(cfg.resolve(cfg.output.cache_path))
    else:
        cache_file = run_dir / "cache.jsonl"
        cache_file.write_text("")
        cache = EvalCache(cache_file)
    scorer = Scorer(backend, cache, max_workers=cfg.backend.max_concurrency)
    manifest_hash = save_manifest(part, run_dir / "partition.json")
    writer = TrajectoryWriter(run_dir / "trajectory.jsonl")
    started = time.time()
    status = EXIT_OK
    try:
        traj = run(cfg.run, part, scorer, templates, writer=writer,
                   on_round=lambda rec: print(_fmt_round(rec), flush=True))
    except RunAborted as exc:
        print(f"run aborted: {exc}; backend calls so far: {scorer.backend_calls}", file=sys.stderr)
        traj, status = exc.trajectory, EXIT_BACKEND
    if traj is not None:
        with open(run_dir / "surrogate.jsonl", "w", encoding="utf-8") as fh:
            for rec in traj.rounds:
                fh.write(json.dumps({"round": rec.round_index, **rec.surrogate,
                                     "candidates": rec.candidates}, sort_keys=True) + "\n")
        if status == EXIT_OK and traj.summary.get("early_termination"):
            print(f"stopped early: {traj.summary['early_termination']}", file=sys.stderr)
            status = EXIT_EARLY_STOP
        if status == EXIT_OK:
            s = traj.summary
            print(f"best prompt ({s['best_eval_accuracy']:.3f} eval"
                  + (f", {s['test_accuracy']:.3f} test" if "test_accuracy" in s else "")
                  + f"): {s['best_prompt']['text']}")
    meta = {"started": started, "finished": time.time(), "version": __version__,
            "partition": manifest_hash, "exit_status": status, "cache": cache.stats}
    (run_dir / "metadata.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return status


def cmd_bench(args) -> int:
    from .bench import bench_matrix

    kappa_fn = None
    if args.force_kappa is not None:
        kappa_fn = lambda t, T: args.force_kappa  # noqa: E731
    rows = bench_matrix(args.seeds, kappa_fn=kappa_fn)
    width = max(len(name) for name, _, _ in rows)
    failed = False
    for name, passed, detail in rows:
        failed |= not passed
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}  {json.dumps(detail, default=str)}")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.run_directory) / "trajectory.jsonl"
    if not path.exists():
        print(f"no trajectory file in {args.run_directory}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        traj = Trajectory.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    s = traj.summary
    if s.get("best_prompt"):
        print(f"best prompt: {s['best_prompt']['text']}")
        line = f"eval accuracy {s['best_eval_accuracy']:.3f}"
        if "test_accuracy" in s:
            line += f", test accuracy {s['test_accuracy']:.3f}"
        print(line)
    print()
    print(f"{'iter':>4}  {'accuracy':>8}  prompt")
    texts, best = {}, -1.0
    for rec in [traj.bootstrap] + traj.rounds:
        for sel in rec.selected:
            texts[sel["id"]] = (sel["text"], sel["accuracy"])
        if rec.best_so_far > best and rec.best_prompt_id in texts:
            best = rec.best_so_far
            text, acc = texts[rec.best_prompt_id]
            excerpt = text if len(text) <= 90 else text[:87] + "..."
            print(f"{rec.round_index:>4}  {acc:>8.3f}  {excerpt}")
    events = [e for rec in [traj.bootstrap] + traj.rounds for e in rec.reversal_events]
    if events:
        print("\nreversal events:")
        for e in events:
            print(f"  round {e['round']}: {e['id']} accuracy {e['control_accuracy']:.3f} "
                  f"flipped {e['flipped_accuracy']:.3f} disagreement {e['disagreement']:.3f}")
    calls = s.get("backend_calls") or (traj.rounds[-1].backend_calls if traj.rounds else {})
    print(f"\nbackend calls: {calls.get('classify', 0)} classify, {calls.get('complete', 0)} complete")
    if s.get("early_termination"):
        print(f"early termination: {s['early_termination']}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML run configuration")
    common.add_argument("--override", action="append", default=argparse.SUPPRESS,
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="promptbo", parents=[common],
                                     description="Bayesian optimization of classification prompts.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="run the optimizer from a config file")
    p_run.add_argument("--fixed-hypers", action="store_true",
                       help="keep kernel parameters fixed and use incremental Cholesky updates")
    p_run.set_defaults(func=cmd_run)

    p_bench = sub.add_parser("bench", parents=[common], help="simulated-oracle benchmark matrix")
    p_bench.add_argument("--seeds", type=int, default=10, help="number of rng seeds")
    p_bench.add_argument("--force-kappa", type=float, default=None, help=argparse.SUPPRESS)
    p_bench.set_defaults(func=cmd_bench)

    p_inspect = sub.add_parser("inspect", parents=[common], help="summarize a finished run")
    p_inspect.add_argument("run_directory")
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.config = getattr(args, "config", None)
    args.override = getattr(args, "override", None) or []
    args.verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and not args.config:
        print("config error: --config is required for run", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
