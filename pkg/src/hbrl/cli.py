"""Command-line entry point.

    hbrl phase1       [--config F] [--set k=v ...] [--seed S | --seeds 0,1,2] [--out DIR]
    hbrl train        --channels both|none|belief|buffer|bc [--phase1 DIR] ...
    hbrl ablate       --suite NAME ...
    hbrl appendix-a   ...
    hbrl export-belief [--phase1-episodes K] ...

Exit status: 0 on success, 1 on missing inputs or I/O errors, 2 on usage or
configuration errors, 3 if any run aborted on a numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import artifacts as io
from .belief import NumericalFailure
from .config import ConfigError, RunConfig, appendix_scenario, config_hash, desk_scenario, load_config
from .pipeline import (CHANNELS, SUITES, ArmResult, arm_summary, median_by, run_ablation, run_appendix_a,
                       run_bc_baseline, run_phase1, run_phase2)
from .world import GridSpec

log = logging.getLogger("hbrl")

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
EPISODE_HEADER = ["arm", "method", "seed", "episode", "reward", "mean_variance", "correlation"]
RUN_HEADER = ["arm", "method", "seed", "final_reward", "convergence_episode", "buffer_start", "newton_failures",
              "skipped_updates", "aborted"]


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="plain-text key = value file (or a run manifest)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value; repeatable, applied after --config")
    seeds = common.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="run a single seed")
    seeds.add_argument("--seeds", type=_parse_seeds, help="comma-separated seed list")
    common.add_argument("--out", type=Path, help="output directory (default: $HBRL_OUTPUT_DIR or ./hbrl-out)")
    common.add_argument("--full", action="store_true", help="start from the full-scale defaults, not desk scale")
    common.add_argument("--workers", type=int, default=1, help="parallel jobs for suites")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hbrl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phase1", parents=[common], help="planner-driven exploration; saves belief + demonstrations")
    train = sub.add_parser("train", parents=[common], help="phase-2 SAC training")
    train.add_argument("--channels", choices=[*CHANNELS, "bc"], default="both")
    train.add_argument("--phase1", type=Path, help="directory written by `hbrl phase1` (seed*/ subdirectories)")
    train.add_argument("--checkpoint", action="store_true", help="also save the trained agents")
    ablate = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    ablate.add_argument("--suite", choices=SUITES, required=True)
    sub.add_parser("appendix-a", parents=[common], help="exploration strategy comparison")
    export = sub.add_parser("export-belief", parents=[common], help="belief and truth grids per phase-1 episode")
    export.add_argument("--episodes", type=int, help="phase-1 episodes to record (default warm_episodes)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.command == "appendix-a":
        base = appendix_scenario()
    else:
        base = RunConfig() if args.full else desk_scenario()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds = {args.seed}")
    elif args.seeds:
        overrides.append("seeds = " + ",".join(map(str, args.seeds)))
    return load_config(args.config, overrides, base=base)


def output_dir(args: argparse.Namespace) -> Path:
    return args.out or Path(os.environ.get("HBRL_OUTPUT_DIR", "hbrl-out"))


def _episode_rows(results: Sequence[ArmResult]):
    for r in results:
        if r.metrics is None:
            continue
        m = r.metrics
        for k, (rew, var, cor) in enumerate(zip(m.rewards, m.mean_variance, m.correlation)):
            yield r.arm, r.method, r.seed, k, rew, var, cor


def _run_rows(results: Sequence[ArmResult], config: RunConfig):
    w, sm = config.convergence_window, config.smoothing_window
    for r in results:
        m = r.metrics
        if m is None:
            yield r.arm, r.method, r.seed, None, None, None, None, None, True
        else:
            yield (r.arm, r.method, r.seed, m.final_reward(w), m.convergence(w, sm), m.buffer_start,
                   m.newton_failures, m.skipped_updates, False)


def _timing_rows(results: Sequence[ArmResult]):
    for r in results:
        if r.metrics is not None:
            for k, sec in enumerate(r.metrics.wall_clock):
                yield r.arm, r.seed, k, sec


def emit_results(out: Path, name: str, results: Sequence[ArmResult], config: RunConfig, kind: str) -> list[Path]:
    """Per-run, per-arm-median, per-episode and timing CSVs plus the manifest."""
    chash = config_hash(config)
    runs = list(_run_rows(results, config))
    summary = arm_summary(results, config.convergence_window, config.smoothing_window)
    median_rows = [(s["arm"], s["method"], "median", s["median_final_reward"], s["median_convergence"],
                    None, None, None, s["aborted"]) for s in summary]
    files = [
        io.write_csv(out / f"{name}.csv", RUN_HEADER, runs + median_rows, chash),
        io.write_csv(out / f"{name}_episodes.csv", EPISODE_HEADER, _episode_rows(results), chash),
    ]
    timing = io.write_csv(out / f"{name}_timing.csv", ["arm", "seed", "episode", "seconds"],
                          _timing_rows(results), chash)
    io.write_manifest(out / "manifest.json", config, kind, files,
                      extra={"timing_file": timing.name, "aborted_runs": sum(r.aborted for r in results)})
    return files


# ----------------------------------------------------------------------

def cmd_phase1(args, config: RunConfig, out: Path) -> int:
    files = []
    for seed in config.seeds:
        log.info("phase 1, seed %d", seed)
        res = run_phase1(config, seed)
        files += io.save_phase1(out / f"seed{seed}", res, config, seed)
    io.write_manifest(out / "manifest.json", config, "phase1", files)
    return EXIT_OK


def _load_phase1_for(directory: Path, seed: int, config: RunConfig):
    path = directory / f"seed{seed}"
    if not path.exists() and (directory / "meta.json").exists():
        path = directory
    result, saved, saved_seed = io.load_phase1(path)
    if saved_seed != seed:
        raise ValueError(f"{path} holds seed {saved_seed}, expected {seed}")
    if (saved.n_agents, saved.length_x, saved.length_y, saved.resolution) != \
            (config.n_agents, config.length_x, config.length_y, config.resolution):
        raise ValueError(f"{path}: phase-1 scenario does not match the training config")
    if config_hash(saved) != config_hash(config):
        log.warning("%s was produced under config %s, training uses %s", path, config_hash(saved),
                    config_hash(config))
    return result


def cmd_train(args, config: RunConfig, out: Path) -> int:
    method = args.channels
    results = []
    for seed in config.seeds:
        phase1 = None
        if method == "bc" or any(CHANNELS.get(method, (False, False))):
            phase1 = _load_phase1_for(args.phase1, seed, config) if args.phase1 else run_phase1(config, seed)
        log.info("training %s, seed %d", method, seed)
        try:
            if method == "bc":
                metrics, agent = run_bc_baseline(config, seed, phase1)
            else:
                metrics, agent = run_phase2(config, seed, phase1, channels=CHANNELS[method])
        except NumericalFailure as exc:
            log.error("seed %d aborted: %s", seed, exc)
            results.append(ArmResult(method, method, seed, None, str(exc)))
            continue
        results.append(ArmResult(method, method, seed, metrics))
        if args.checkpoint:
            agent.save(out / f"agent_seed{seed}.npz")
    emit_results(out, f"train_{method}", results, config, "train")
    return EXIT_NUMERIC if any(r.aborted for r in results) else EXIT_OK


def cmd_ablate(args, config: RunConfig, out: Path) -> int:
    results = run_ablation(args.suite, config, workers=args.workers, progress=log.info)
    emit_results(out, args.suite, results, config, f"ablate:{args.suite}")
    for s in arm_summary(results, config.convergence_window, config.smoothing_window):
        log.info("%-22s final %.1f  convergence %.1f", s["arm"], s["median_final_reward"], s["median_convergence"])
    return EXIT_NUMERIC if any(r.aborted for r in results) else EXIT_OK


def cmd_appendix_a(args, config: RunConfig, out: Path) -> int:
    runs = run_appendix_a(config, progress=log.info)
    chash = config_hash(config)
    files = [io.write_csv(out / "strategies.csv", ["strategy", "seed", "correlation", "mean_variance"],
                          [(r.strategy, r.seed, r.correlation, r.mean_variance) for r in runs], chash)]
    medians = median_by(runs)
    files.append(io.write_csv(out / "strategies_summary.csv", ["strategy", "median_correlation"],
                              medians.items(), chash))
    timing = io.write_csv(out / "strategies_timing.csv", ["strategy", "seed", "seconds"],
                          [(r.strategy, r.seed, r.runtime) for r in runs], chash)
    io.write_manifest(out / "manifest.json", config, "appendix-a", files, extra={"timing_file": timing.name})
    for name, value in medians.items():
        log.info("%-10s median correlation %.3f", name, value)
    return EXIT_OK


def cmd_export_belief(args, config: RunConfig, out: Path) -> int:
    grid = GridSpec(config.length_x, config.length_y, config.resolution)
    chash = config_hash(config)
    files = []
    for seed in config.seeds:
        res = run_phase1(config, seed, episodes=args.episodes, record_beliefs=True)
        for k, (belief, truth) in enumerate(zip(res.episode_beliefs, res.episode_truths)):
            d = out / f"seed{seed}"
            files += io.write_belief(d, belief, grid, chash, prefix=f"ep{k:03d}")
            files.append(io.write_grid(d / f"ep{k:03d}_truth.csv", truth, grid, chash))
    io.write_manifest(out / "manifest.json", config, "export-belief", files)
    return EXIT_OK


COMMANDS = {
    "phase1": cmd_phase1,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "appendix-a": cmd_appendix_a,
    "export-belief": cmd_export_belief,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"hbrl: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_INPUT
    out = output_dir(args) / args.command
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, config, out)
    except NumericalFailure as exc:
        print(f"hbrl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"hbrl: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
