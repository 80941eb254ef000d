# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

import argparse
import concurrent.futures
import dataclasses
import json
import os
import pathlib
import sys
from typing import Optional

from .check import DEFAULT_LAYER_TOL, DEFAULT_NETWORK_TOL, CheckResult, check_network, check_norm_layer, legal_shapes
from .data import Context, TrainConfig
from .dataset import load_dataset
from .errors import NormLabError
from .geomsim import CenterConfig, SamplePoint, iterate
from .metrics import LabeledFeatures, angle_report
from .model import parse_placement, train
from .norm import NormKind, parse_norm_kind
from .print import print_error_exit, print_info, print_init, print_plain, print_success, print_warning
from .read import load_csv, read_log, read_train_config
from .report import SWEEP_COLUMNS, SweepRun, report_angles, report_compare, report_gradcheck, report_sweep, summarize_sweep
from .tensor import Rng, Tensor
from .write import export_trajectory, make_manifest, make_run_dir, save_checkpoint, write_log, write_manifest, write_rows

_PROG = "normlab"
__version__ = "0.3.0"  # NOTE: Also update setup.cfg when updating version.

CHECKPOINT_NAME = "checkpoint.nlab"


def _layer_arg(s: str) -> str:
    s = s.strip().lower()
    if s in ("all", "net") or s in {k.value for k in NormKind}:
        return s
    raise argparse.ArgumentTypeError(
        f"'{s}' is not a normalization kind, 'all' or 'net'")


def _shape_arg(s: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in s.strip().strip("[]").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 6,4 or 4,3,2,2; got '{s}'")
    if len(dims) not in (2, 4) or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape must have 2 or 4 positive dims; got '{s}'")
    return dims


def _seeds_arg(s: str) -> list[int]:
    try:
        if "-" in s:
            first, last = (int(part) for part in s.split("-", 1))
            seeds = list(range(first, last + 1))
        else:
            seeds = [int(part) for part in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must look like 121-125 or 121,122; got '{s}'")
    if not seeds or min(seeds) < 0:
        raise argparse.ArgumentTypeError(f"no non-negative seeds in '{s}'")
    return seeds


# Command-line arguments:
parser = argparse.ArgumentParser(
    prog=_PROG,
    description=("Normalization lab: l2-then-batch normalization layers, gradient checks, "
                 "center-geometry simulations and angle-metric training experiments."))
parser.add_argument("--version", action="version", version=__version__)
parser.add_argument("-v", "--verbose", action=argparse.BooleanOptionalAction,
                    help="Print per-epoch and per-step progress")
commands = parser.add_subparsers(dest="command", required=True)

sim_parser = commands.add_parser("sim", help="Iterate BN or L2BN over a set of class centers")
sim_parser.add_argument("--norm", choices=["bn", "l2bn"], required=True)
sim_parser.add_argument("--classes", type=int, default=3, help="Number of centers C")
sim_parser.add_argument("--dim", type=int, default=2, help="Center dimension d")
sim_parser.add_argument("--iters", type=int, default=200, help="Maximum iterations")
sim_parser.add_argument("--seed", type=int, default=0)
sim_parser.add_argument("--tol", type=float, default=1e-4,
                        help="Convergence tolerance in degrees")
sim_parser.add_argument("--sample-point", choices=["after_bn", "after_l2"], default="after_bn")
sim_parser.add_argument("--record-centers", action=argparse.BooleanOptionalAction, default=False,
                        help="Also export every iterate's centers")
sim_parser.add_argument("--no-early-stop", action="store_true",
                        help="Run all iterations even after convergence")
sim_parser.add_argument("--out", required=True, help="Output directory")

gradcheck_parser = commands.add_parser(
    "gradcheck", help="Compare analytic gradients with central finite differences")
gradcheck_parser.add_argument("--layer", type=_layer_arg, required=True,
                              help="Normalization kind, 'all' kinds, or 'net' for whole stacks")
gradcheck_parser.add_argument("--shape", type=_shape_arg,
                              help="Input shape such as 6,4 (defaults to every legal shape)")
gradcheck_parser.add_argument("--seed", type=int, default=0)
gradcheck_parser.add_argument("--tol", type=float,
                              help=f"Relative error bound (default {DEFAULT_LAYER_TOL}, "
                                   f"{DEFAULT_NETWORK_TOL} for net)")

train_parser = commands.add_parser("train", help="Train one model from a YAML config")
train_parser.add_argument("--config", required=True)
train_parser.add_argument("--out", required=True, help="Output directory")

angles_parser = commands.add_parser("angles", help="Angle metrics of a feature CSV")
angles_parser.add_argument("--features", required=True, help="Training features CSV")
angles_parser.add_argument("--labels-column", required=True)
angles_parser.add_argument("--test-features", help="Test features CSV (uses training centers)")

compare_parser = commands.add_parser("compare", help="Per-epoch deltas of two training runs")
compare_parser.add_argument("--run-a", required=True)
compare_parser.add_argument("--run-b", required=True)

sweep_parser = commands.add_parser("sweep", help="One config across seeds and placements")
sweep_parser.add_argument("--config", required=True)
sweep_parser.add_argument("--seeds", type=_seeds_arg, default=_seeds_arg("121-125"))
sweep_parser.add_argument("--placements",
                          help="Comma-separated placement policies (default: the config's)")
sweep_parser.add_argument("--out", required=True, help="Output directory")


def _cmd_sim(ctx: Context, args) -> int:
    if args.classes < 2 or args.dim < 2:
        raise NormLabError("sim needs --classes >= 2 and --dim >= 2")
    centers = Tensor(Rng(args.seed).normal((args.classes, args.dim)))
    sample_point = SamplePoint.AFTER_L2 if args.sample_point == "after_l2" else SamplePoint.AFTER_BN
    config = CenterConfig(centers, parse_norm_kind(args.norm), max_iters=args.iters,
                          convergence_tol=args.tol, stop_on_convergence=not args.no_early_stop,
                          sample_point=sample_point, record_centers=args.record_centers)

    trajectory = iterate(config)
    if trajectory.degenerate_start:
        print_warning("initial centers are degenerate (e.g. collinear); separation may not grow")
    ctx.maybe_print_verbose(f"initial_min_angle_deg={trajectory.initial_min_angle!r}")

    out_dir = make_run_dir(ctx.out_dir)
    export_trajectory(trajectory, out_dir / "trajectory.csv")
    resolved = {
        "norm": args.norm, "classes": args.classes, "dim": args.dim, "iters": args.iters,
        "tol": args.tol, "sample_point": args.sample_point,
        "record_centers": args.record_centers, "early_stop": not args.no_early_stop,
    }
    write_manifest(make_manifest("sim", resolved, args.seed, __version__), out_dir)

    converged = "none" if trajectory.converged_at is None else str(trajectory.converged_at)
    print_plain(f"final_min_angle_deg={trajectory.final_min_angle()!r} converged_at={converged}")
    return 0


def _cmd_gradcheck(ctx: Context, args) -> int:
    results: list[CheckResult] = []
    if args.layer == "net":
        if args.shape is not None:
            raise NormLabError("--shape does not apply to --layer net")
        tol = DEFAULT_NETWORK_TOL if args.tol is None else args.tol
        for kind in NormKind:
            ctx.maybe_print_verbose(f"checking network with {kind} ...")
            results.append(check_network(kind, args.seed, tol))
    else:
        tol = DEFAULT_LAYER_TOL if args.tol is None else args.tol
        kinds = list(NormKind) if args.layer == "all" else [parse_norm_kind(args.layer)]
        for kind in kinds:
            shapes = legal_shapes(kind) if args.shape is None else [args.shape]
            for shape in shapes:
                if len(shape) != 4 and kind.requires_rank4():
                    raise NormLabError(f"{kind} needs a rank-4 shape, got {list(shape)}")
                ctx.maybe_print_verbose(f"checking {kind} on {list(shape)} ...")
                results.append(check_norm_layer(kind, shape, args.seed, tol))

    report_gradcheck(results)
    worst = max(result.max_error() for result in results)
    if all(result.passed() for result in results):
        print_success(f"all gradients within {tol} (max relative error {worst:.3e})")
        return 0
    print_warning(f"gradient check failed: max relative error {worst:.3e} > {tol}")
    return 1


def _run_training(ctx: Context, config: TrainConfig, base_dir: pathlib.Path,
                  out_dir: pathlib.Path) -> list[dict]:
    """Trains and writes log, checkpoint and manifest; returns the log rows."""
    dataset = load_dataset(config.dataset, base_dir)
    records, stack = train(config, dataset, ctx)

    out_dir = make_run_dir(out_dir)
    write_log(records, out_dir / f"log.{config.log_format}", config.log_format)
    save_checkpoint(stack, out_dir / CHECKPOINT_NAME)
    resolved = dict(config.to_dict(), config_dir=str(base_dir))
    write_manifest(make_manifest("train", resolved, config.seed, __version__), out_dir)
    return [record.to_row() for record in records]


def _summary_line(rows: list[dict]) -> str:
    last = rows[-1]
    test_acc = "none" if last["test_acc"] is None else repr(last["test_acc"])
    return (f"final_train_acc={last['train_acc']!r} final_test_acc={test_acc} "
            f"final_iir_train={last['iir_train']!r}")


def _cmd_train(ctx: Context, args) -> int:
    config_path = pathlib.Path(args.config).resolve()
    config = read_train_config(config_path)
    rows = _run_training(ctx, config, config_path.parent, ctx.out_dir)
    print_plain(_summary_line(rows))
    return 0


def _load_labeled(path: str, labels_column: str, num_classes: Optional[int] = None):
    features, labels = load_csv(pathlib.Path(path), labels_column)
    data, dropped = LabeledFeatures(features, labels, num_classes).without_zero_rows()
    if dropped:
        print_warning(f"{path}: ignoring {dropped} zero-norm feature rows")
    return data


def _cmd_angles(ctx: Context, args) -> int:
    train_data = _load_labeled(args.features, args.labels_column)
    test_data = None
    if args.test_features:
        test_data = _load_labeled(args.test_features, args.labels_column, train_data.num_classes)
    report = angle_report(train_data, test_data)

    print_plain(json.dumps(report.to_dict(), sort_keys=True))
    report_angles(report)
    return 0


def _find_log(run_dir: pathlib.Path) -> pathlib.Path:
    for name in ("log.csv", "log.jsonl"):
        if (run_dir / name).is_file():
            return run_dir / name
    raise NormLabError(f"no log.csv or log.jsonl in run directory '{run_dir}'")


def _cmd_compare(ctx: Context, args) -> int:
    dir_a, dir_b = pathlib.Path(args.run_a), pathlib.Path(args.run_b)
    rows_a, rows_b = read_log(_find_log(dir_a)), read_log(_find_log(dir_b))
    if not rows_a or not rows_b:
        raise NormLabError("both runs must have at least one logged epoch")
    report_compare(str(dir_a), str(dir_b), rows_a, rows_b)
    return 0


def _sweep_job(job: tuple) -> list[dict]:
    """Runs one (placement, seed) of a sweep; top level so worker processes can load it."""
    config, base_dir, out_dir, verbose = job
    return _run_training(Context(out_dir, verbose), config, base_dir, out_dir)


def _sweep_workers(config: TrainConfig, num_jobs: int) -> int:
    if config.deterministic:
        return 1
    try:
        threads = int(os.environ.get("NORMLAB_THREADS", "1"))
    except ValueError:
        raise NormLabError(f"NORMLAB_THREADS must be an integer, got "
                           f"'{os.environ['NORMLAB_THREADS']}'")
    return max(1, min(threads, num_jobs))


def _cmd_sweep(ctx: Context, args) -> int:
    config_path = pathlib.Path(args.config).resolve()
    config = read_train_config(config_path)

    placements = [config.norm.placement]
    if args.placements:
        if config.norm.kinds is not None:
            raise NormLabError("--placements cannot be combined with an explicit norm.kinds list")
        placements = [parse_placement(p).value for p in args.placements.split(",")]

    jobs, labels = [], []
    for placement in placements:
        for seed in args.seeds:
            run_config = dataclasses.replace(
                config, seed=seed, norm=dataclasses.replace(config.norm, placement=placement))
            run_dir = ctx.out_dir / f"{placement}_seed{seed}"
            jobs.append((run_config, config_path.parent, run_dir, ctx.verbose))
            labels.append((placement, seed))

    workers = _sweep_workers(config, len(jobs))
    print_info(f"Running {len(jobs)} training runs with {workers} worker(s)")
    if workers == 1:
        all_rows = [_sweep_job(job) for job in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            all_rows = list(executor.map(_sweep_job, jobs))

    runs = [SweepRun(placement, seed, rows) for (placement, seed), rows in zip(labels, all_rows)]
    out_dir = make_run_dir(ctx.out_dir)
    write_rows(SWEEP_COLUMNS, [run.to_row() for run in runs], out_dir / "summary.csv")
    resolved = dict(config.to_dict(), config_dir=str(config_path.parent),
                    seeds=args.seeds, placements=placements)
    write_manifest(make_manifest("sweep", resolved, None, __version__), out_dir)
    report_sweep(summarize_sweep(runs))
    return 0


_COMMANDS = {
    "sim": _cmd_sim,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "angles": _cmd_angles,
    "compare": _cmd_compare,
    "sweep": _cmd_sweep,
}


def run(argv: Optional[list[str]] = None) -> int:
    """Parses argv and runs one command. Returns its exit status.

    Usage errors exit 2 (from argparse); runtime failures exit 1.
    """
    args = parser.parse_args(argv)
    out = getattr(args, "out", None)
    ctx = Context(pathlib.Path(out) if out else None, args.verbose or False)
    try:
        return _COMMANDS[args.command](ctx, args)
    except (NormLabError, OSError) as e:
        print_error_exit(str(e))


def cli():
    """Command-line interface."""
    print_init()
    sys.exit(run())
