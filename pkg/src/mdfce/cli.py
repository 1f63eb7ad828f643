"""Command-line front end: ``mdfce generate | train | eval``.

Exit codes: 0 on success, 2 on a usage error, 1 on any runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .channel import DatasetFormatError, generate_dataset, read_dataset, write_dataset
from .config import ConfigError, RunConfig, parse_density, parse_float_list
from .evaluation import EvalReport, evaluate
from .model import (CheckpointError, MdfceModel, load_checkpoint, save_checkpoint,
                    system_fingerprint)
from .pilots import LSBaseline, PilotConfig
from .training import TrainingDiverged, train, write_history_csv

__all__ = ["main", "build_parser", "UsageError"]

log = logging.getLogger("mdfce")


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int, help="base seed (overrides [run] seed)")
    p.add_argument("--out", type=Path, help="output directory (overrides [run] out_dir)")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for byte-identical outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdfce",
                                     description="Dual-band channel extrapolation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dual-band dataset")
    _common(g)
    g.add_argument("--count", type=int, help="number of samples (default: [data] train_count)")
    g.add_argument("--split", choices=("train", "val"), default="train",
                   help="which [data] file and seed range to produce")

    t = sub.add_parser("train", help="train a model on a dataset")
    _common(t)
    t.add_argument("--data", type=Path, help="training dataset (default: [data] train)")
    t.add_argument("--no-tfem", action="store_true", help="train the variant without TFEM")
    t.add_argument("--epochs", type=int, help="override [train] epochs")

    e = sub.add_parser("eval", help="evaluate a checkpoint and/or LS baselines")
    _common(e)
    e.add_argument("--data", type=Path, help="evaluation dataset (default: [data] val)")
    e.add_argument("--checkpoint", type=Path, help="trained model; omit for baselines only")
    e.add_argument("--snr", help="comma-separated SNR list in dB (default: [pilots] snr_db)")
    e.add_argument("--pd", action="append",
                   help="mmWave LS pilot density, e.g. 1/4; repeatable (default: [pilots])")
    e.add_argument("--sub6-pd", help="pilot density of the model's sub-6 input")
    e.add_argument("--no-baselines", action="store_true", help="skip LS baselines")
    return parser


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 1 << 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _data_path(cfg: RunConfig, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(cfg.out_dir) / p


def cmd_generate(cfg: RunConfig, args) -> int:
    count = args.count if args.count is not None else (
        cfg.train_count if args.split == "train" else cfg.val_count)
    if count < 1:
        raise UsageError(f"--count must be >= 1, got {count}")
    seed = cfg.seed if args.split == "train" else cfg.seed + cfg.val_seed
    path = _data_path(cfg, cfg.train_data if args.split == "train" else cfg.val_data)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = generate_dataset(cfg.system, count, seed)
    write_dataset(samples, path, cfg.system)
    print(f"wrote {count} samples (seeds {seed}..{seed + count - 1}) to {path}")
    print(f"  sub-6 CSI {cfg.system.sub6.csi_shape}, mmWave CSI {cfg.system.mmwave.csi_shape}, "
          f"{path.stat().st_size} bytes")
    return 0


def _load_data(cfg: RunConfig, path: Path):
    file_system, samples = read_dataset(path)
    if file_system != cfg.system:
        raise ValueError(f"dataset {path} was generated for system "
                         f"{system_fingerprint(file_system)}, but the config describes "
                         f"{system_fingerprint(cfg.system)}")
    return samples


def cmd_train(cfg: RunConfig, args) -> int:
    tcfg = cfg.train
    if args.epochs is not None:
        if args.epochs < 1:
            raise UsageError("--epochs must be >= 1")
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    mcfg = dataclasses.replace(cfg.model, use_tfem=cfg.model.use_tfem and not args.no_tfem)
    samples = _load_data(cfg, args.data or _data_path(cfg, cfg.train_data))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variant = "full" if mcfg.use_tfem else "no-tfem"
    ckpt = out / f"checkpoint-{variant}.ckpt"
    model = MdfceModel(mcfg, seed=cfg.seed)

    def report(rec):
        log.info("epoch %d  loss %.6f  nmse %.6f  aux %.4f", rec["epoch"], rec["total_loss"],
                 rec["nmse_loss"], rec["aux_loss"])

    try:
        result = train(model, samples, tcfg, checkpoint_path=ckpt, system=cfg.system,
                       on_epoch=report)
    except TrainingDiverged as exc:
        write_history_csv(exc.result.history, out / f"history-{variant}.csv")
        raise
    write_history_csv(result.history, out / f"history-{variant}.csv")
    save_checkpoint(model, ckpt, system=cfg.system)
    cfg.save(out / "run.ini")
    last = result.history[-1]
    print(f"trained {variant} model for {len(result.history)} epochs, final NMSE loss "
          f"{last['nmse_loss']:.6f}; checkpoint {ckpt}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    snr = parse_float_list(args.snr) if args.snr is not None else list(cfg.snr_db)
    if not snr:
        raise UsageError("the SNR list is empty")
    densities = [parse_density(p) for item in args.pd for p in item.split(",") if p.strip()] \
        if args.pd else list(cfg.mmwave_densities)
    if args.no_baselines:
        densities = []
    if args.checkpoint is None and not densities:
        raise UsageError("nothing to evaluate: give --checkpoint or at least one --pd")
    sub6_pd = parse_density(args.sub6_pd) if args.sub6_pd else cfg.sub6_pilot_density

    model = None
    if args.checkpoint is not None:
        model, manifest = load_checkpoint(args.checkpoint)
        want = system_fingerprint(cfg.system)
        if manifest.get("system_fingerprint") != want:
            raise CheckpointError(
                f"checkpoint {args.checkpoint} has system fingerprint "
                f"{manifest.get('system_fingerprint')}, config has {want}")
    samples = _load_data(cfg, args.data or _data_path(cfg, cfg.val_data))

    report = EvalReport()
    if model is not None:
        report.rows += evaluate(model, samples, snr, seed=cfg.seed,
                                sub6_pilot_density=sub6_pd).rows
    mm = cfg.system.mmwave
    for pd in densities:
        ls = LSBaseline(PilotConfig("mmwave", pd, mm.ue_antennas, mm.subcarriers))
        report.rows += evaluate(ls, samples, snr, seed=cfg.seed).rows
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "eval.csv")
    print(report.to_text())
    print(f"wrote {out / 'eval.csv'}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = _resolve(args)
        limit = 1 if cfg.deterministic else cfg.threads
        ctx = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
        with ctx:
            return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"mdfce {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetFormatError, TrainingDiverged,
            OSError, ValueError) as exc:
        print(f"mdfce {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
