"""Command-line entry point: generate, train, steer, evaluate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every subcommand is deterministic under a fixed --seed; --jobs enables
order-preserving process parallelism with identical results.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from needleroll.config import (
    CONFIG_FILENAME,
    RunConfig,
    load_config_file,
    resolve_config,
    write_resolved_config,
)
from needleroll.dataset import (
    GenerationStalled,
    generate_dataset,
    load_manifest,
    save_manifest,
    split,
    to_training_sequences,
)
from needleroll.evaluate import report, run_batch, run_trial, summarize
from needleroll.lstm import Diverged, load_model, save_model, train
from needleroll.plant import sample_target


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here is exit code 1
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file; flags override it")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--jobs", type=int,
                     help="process parallelism (default 1)")


def _parse_target(text):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("target must be x,y,z")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="needleroll",
                     description="steerable-needle roll estimation pipeline")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate", help="collect a steering dataset")
    _add_common(p)
    p.add_argument("--n", type=int, help="episode count (default 70)")
    p.add_argument("--medium", choices=["gelatin", "brain", "lung"])
    p.add_argument("--rigid", action="store_const", const=True)
    p.add_argument("--jitter", type=float)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)

    p = commands.add_parser("train", help="fit the roll estimator")
    _add_common(p)
    p.add_argument("--dataset", help="dataset directory from generate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--hidden-size", dest="hidden_size", type=int)

    p = commands.add_parser("steer", help="run one closed-loop insertion")
    _add_common(p)
    p.add_argument("--estimator", choices=["truth", "ekf", "lstm"])
    p.add_argument("--medium", choices=["gelatin", "brain", "lung"])
    p.add_argument("--rigid", action="store_const", const=True)
    p.add_argument("--model", help="trained model file (lstm)")
    p.add_argument("--target", type=_parse_target,
                   help="x,y,z in mm; sampled from the workspace if omitted")

    p = commands.add_parser("evaluate", help="batch trials and report")
    _add_common(p)
    p.add_argument("--n", type=int, help="trial count (default 30)")
    p.add_argument("--medium", choices=["gelatin", "brain", "lung"])
    p.add_argument("--rigid", action="store_const", const=True)
    p.add_argument("--model", help="trained model file (lstm)")
    p.add_argument("--estimators",
                   type=lambda t: tuple(t.split(",")),
                   help="comma-separated subset of truth,ekf,lstm")
    p.add_argument("--bin-width", dest="bin_width", type=float)

    p = commands.add_parser("report",
                            help="re-render report.txt from persisted CSVs")
    _add_common(p)
    p.add_argument("--bin-width", dest="bin_width", type=float)

    return parser


def _mapper(jobs: int):
    if jobs <= 1:
        return map

    def run(fn, items):
        items = list(items)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items, chunksize=1))

    return run


def _resolve(ns) -> RunConfig:
    file_values = load_config_file(ns.config) if ns.config else {}
    flag_values = {k: v for k, v in vars(ns).items()
                   if k not in ("command", "config")}
    return resolve_config(file_values, flag_values)


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required for this command")
    return value


def _load_lstm(config: RunConfig, needed: bool):
    if not needed:
        return None
    path = _require(config.model, "--model")
    return load_model(path)


def cmd_generate(config: RunConfig) -> int:
    out = Path(_require(config.out, "--out"))
    n = config.n if config.n is not None else 70
    manifest = generate_dataset(
        n=n, medium=config.make_medium(), workspace=config.make_workspace(),
        controller=config.make_controller(), seed=config.seed, root=out,
        z_max=config.z_max, jitter=config.jitter,
        depth_cap=config.depth_cap, mapper=_mapper(config.jobs),
    )
    manifest = split(manifest, config.train_fraction, config.seed)
    save_manifest(manifest, out)
    write_resolved_config(config, out)
    n_train = len(manifest.with_ids("train"))
    n_val = len(manifest.with_ids("val"))
    print(f"generated {n} episodes to {out} "
          f"(train {n_train} / val {n_val}, hash {manifest.config_hash[:12]})")
    return 0


def cmd_train(config: RunConfig) -> int:
    out = Path(_require(config.out, "--out"))
    dataset_root = Path(_require(config.dataset, "--dataset"))
    manifest = load_manifest(dataset_root)
    train_seqs = to_training_sequences(dataset_root, manifest, "train")
    val_seqs = to_training_sequences(dataset_root, manifest, "val")
    model, log = train(train_seqs, val_seqs, config.make_train_config())
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    with open(out / "training_log.csv", "w") as fh:
        fh.write("epoch,train_loss,val_rmse\n")
        for row in log:
            fh.write(f"{row.epoch},{row.train_loss!r},{row.val_rmse!r}\n")
    write_resolved_config(config, out)
    best = min(row.val_rmse for row in log)
    print(f"trained {len(log)} epochs on {len(train_seqs)} episodes; "
          f"val RMSE last {log[-1].val_rmse:.4f}, best {best:.4f}")
    print(f"model written to {out / 'model.json'}")
    return 0


def cmd_steer(config: RunConfig) -> int:
    out = Path(_require(config.out, "--out"))
    model = _load_lstm(config, config.estimator == "lstm")
    if config.target is not None:
        target = np.array(config.target, dtype=float)
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, 0x7467]))
        target = sample_target(config.make_workspace(), rng)
    record, trace, summary = run_trial(
        config.estimator, config.make_medium(), config.make_controller(),
        target, seed=(config.seed, 0, 0), model=model,
        depth_cap=config.depth_cap,
    )
    report([record], [trace], [summary], out, config.bin_width)
    write_resolved_config(config, out)
    print(f"{summary.estimator} on {summary.medium}: {summary.outcome}, "
          f"targeting error {summary.targeting_error:.3f} mm, "
          f"mean angular error {summary.mean_angular_error:.4f} rad")
    return 0


def cmd_evaluate(config: RunConfig) -> int:
    out = Path(_require(config.out, "--out"))
    n = config.n if config.n is not None else 30
    model = _load_lstm(config, "lstm" in config.estimators)
    _, _, summaries = run_batch(
        config.estimators, config.make_medium(), config.make_controller(),
        config.make_workspace(), n_trials=n, seed=config.seed, model=model,
        out_dir=out, depth_cap=config.depth_cap, bin_width=config.bin_width,
        mapper=_mapper(config.jobs),
    )
    write_resolved_config(config, out)
    for name in config.estimators:
        err, omega = summarize(summaries, name)
        print(f"{name}: mean targeting error {err:.3f} mm, "
              f"mean angular error {omega:.4f} rad over {n} trials")
    print(f"report written to {out / 'report.txt'}")
    return 0


def cmd_report(config: RunConfig) -> int:
    from needleroll.evaluate import render_report

    out = Path(_require(config.out, "--out"))
    render_report(out, config.bin_width)
    print(f"report regenerated at {out / 'report.txt'}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "steer": cmd_steer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        config = _resolve(ns)
        return COMMANDS[ns.command](config)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (GenerationStalled, Diverged, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
