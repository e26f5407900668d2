"""Command-line frontend: gen-data | train | sample | eval.

Every run is driven by a RunConfig: defaults, overridden by an optional
--config JSON file, overridden again by command-line flags named after the
config fields. The effective config is echoed into the output directory so
any run can be reproduced from its artifacts.

Machine-readable output (loss logs, metric reports) is line-delimited or
plain JSON in files; the human summary goes to standard error.

Heavy numerical imports happen inside the command handlers so that
--threads can cap the BLAS pool before the first array is touched.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig

logger = logging.getLogger(__name__)

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One override flag per RunConfig field (None means 'not given')."""
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "csv_paths":
            parser.add_argument(flag, dest=f.name, nargs="+", default=None)
        elif f.name == "marginal_times":
            parser.add_argument(flag, dest=f.name, nargs="+", type=float, default=None)
        elif f.type in ("bool", bool):
            parser.add_argument(
                flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None
            )
        elif f.type in ("float", float):
            parser.add_argument(flag, dest=f.name, type=float, default=None)
        elif f.type in ("str", str):
            parser.add_argument(flag, dest=f.name, type=str, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasebridge",
        description="Smooth stochastic interpolation between population "
        "snapshots via phase-space half-bridge training.",
    )
    parser.add_argument("--config", type=str, default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="write a builtin dataset as CSV + manifest")
    p_train = sub.add_parser("train", help="run the projection schedule")
    p_train.add_argument("--resume", type=str, default=None, help="checkpoint dir")
    p_sample = sub.add_parser("sample", help="push snapshot positions through a "
                              "trained forward policy")
    p_sample.add_argument("--ckpt", type=str, default=None, help="checkpoint dir "
                          "(default: output_dir)")
    p_sample.add_argument("--n-samples", type=int, default=2000)
    p_sample.add_argument(
        "--format", choices=("bin", "csv", "npz"), default="bin",
        help="trajectory dump format",
    )
    p_sample.add_argument("--out", type=str, default=None, help="dump path "
                          "(default: output_dir/trajectory.<format>)")
    p_eval = sub.add_parser("eval", help="score a trajectory dump against the dataset")
    p_eval.add_argument("--traj", type=str, required=True, help="trajectory dump "
                        "(.npz or .bin with sidecar)")
    p_eval.add_argument("--out", type=str, default=None, help="report path "
                        "(default: output_dir/report.json)")
    group = p_eval.add_mutually_exclusive_group()
    group.add_argument("--positions-only", action="store_true", default=True)
    group.add_argument(
        "--with-velocities", dest="positions_only", action="store_false",
        help="include velocity columns in the plot data",
    )
    for p in (p_gen, p_train, p_sample, p_eval):
        _add_config_flags(p)
    return parser


def build_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ConfigError("config JSON must be an object")
    cfg = RunConfig.from_dict(doc)
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    cfg.validate()
    return cfg


def _cap_threads(n: int) -> None:
    if n > 0:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(n)


def _resolve_dataset(cfg: RunConfig):
    from .data import GENERATORS, DataError, leave_out, load_csv

    if cfg.dataset == "csv":
        if not cfg.csv_paths:
            raise DataError("dataset 'csv' requires csv_paths")
        if len(cfg.csv_paths) == 1:
            ds = load_csv(cfg.csv_paths[0], times=cfg.marginal_times)
        else:
            ds = load_csv(list(cfg.csv_paths), times=cfg.marginal_times)
    elif cfg.dataset in GENERATORS:
        ds = GENERATORS[cfg.dataset](cfg.n_per_marginal, cfg.seed)
    else:
        raise DataError(
            f"unknown dataset {cfg.dataset!r}; expected one of "
            f"{sorted(GENERATORS)} or 'csv'"
        )
    if cfg.leave_out_index is not None:
        ds = leave_out(ds, cfg.leave_out_index)
    return ds


def cmd_gen_data(cfg: RunConfig) -> int:
    from .data import GENERATORS, DataError, save_csv, save_csv_marginals, save_manifest

    if cfg.dataset not in GENERATORS:
        raise DataError(
            f"gen-data needs a builtin dataset, got {cfg.dataset!r} "
            f"(builtins: {sorted(GENERATORS)})"
        )
    ds = GENERATORS[cfg.dataset](cfg.n_per_marginal, cfg.seed)
    out = Path(cfg.output_dir)
    paths = save_csv_marginals(ds, out)
    save_csv(ds, out / f"{ds.name}.csv")
    save_manifest(ds, out / "manifest.json")
    print(
        f"wrote {len(paths)} marginal files, {ds.name}.csv, and manifest.json "
        f"to {out}",
        file=sys.stderr,
    )
    return 0


def cmd_train(cfg: RunConfig, resume: str | None) -> int:
    from .bregman import train

    data = _resolve_dataset(cfg)
    state = train(cfg, data, resume_from=resume)
    print(
        f"finished {state.bi_done} iterations; checkpoints in {cfg.output_dir}",
        file=sys.stderr,
    )
    return 0


def cmd_sample(cfg: RunConfig, args: argparse.Namespace) -> int:
    import numpy as np

    from .bregman import load_state, sample
    from .dynamics import save_cache, save_cache_binary, save_cache_csv

    ckpt_dir = args.ckpt or cfg.output_dir
    state = load_state(ckpt_dir)
    data = _resolve_dataset(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(cfg.seed)))
    traj = sample(state, data, cfg, args.n_samples, rng, use_ema=True)
    out = Path(args.out or Path(cfg.output_dir) / f"trajectory.{args.format}")
    if args.format == "csv":
        save_cache_csv(traj, out)
    elif args.format == "npz":
        save_cache(traj, out)
    else:
        save_cache_binary(traj, out)
    print(
        f"sampled {traj.batch_size} trajectories over {traj.n_steps} steps -> {out}",
        file=sys.stderr,
    )
    return 0


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    import csv as csv_mod

    import numpy as np

    from .dynamics import load_cache_any
    from .metrics import MetricConfig, evaluate

    traj = load_cache_any(args.traj)
    data = _resolve_dataset(cfg)
    metric_cfg = MetricConfig(n_proj=cfg.metric_projections, seed=cfg.seed)
    report = evaluate(traj, data, metric_cfg)
    out = Path(args.out or Path(cfg.output_dir) / "report.json")
    report.save(out)

    plot_path = out.with_name("plot_data.csv")
    d = traj.dim
    header = ["time", "sample_id"] + [f"x_{j}" for j in range(d)]
    if not args.positions_only:
        header += [f"v_{j}" for j in range(d)]
    with open(plot_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(header)
        for time in data.times:
            k = int(np.flatnonzero(np.isclose(traj.times, time, atol=1e-6))[0])
            for i in range(traj.batch_size):
                row = [float(time), i] + [float(x) for x in traj.positions[i, k]]
                if not args.positions_only:
                    row += [float(x) for x in traj.velocities[i, k]]
                writer.writerow(row)

    print(report.to_json())
    print(
        f"averages: {report.averages}; report -> {out}, plot data -> {plot_path}",
        file=sys.stderr,
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = build_config(args)
        _cap_threads(cfg.threads)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "sample":
            return cmd_sample(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        from .data import DataError

        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, (ConfigError, DataError, FileNotFoundError)):
            return 2
        return 1


if __name__ == "__main__":
    sys.exit(main())
