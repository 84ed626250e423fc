"""Command-line entry point: ``shared-dml {generate,train,ablate,eval,gap}``.

Every subcommand validates its inputs before touching the output location, so
a failing invocation leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
import tempfile
from pathlib import Path

import yaml

from . import evaluation
from .dataset import SynthConfig, generate_synthetic, load_dataset, save_dataset, split_by_class
from .errors import ConfigError, DatasetFormatError
from .experiment import (
    ABLATION_REPRESENTATIONS,
    ExperimentConfig,
    config_to_dict,
    load_config,
    prepare_data,
    run_ablation,
    run_training,
)
from .grouping import save_grouping
from .model import load_checkpoint, save_checkpoint

logger = logging.getLogger("shared_dml")

DEFAULT_ABLATION = ("discr_only", "shared_only", "both_sep_decor")


class CliError(Exception):
    pass


def _load(args) -> tuple:
    if args.config is None:
        cfg, variants = ExperimentConfig(), []
    else:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        cfg, variants = load_config(path)
    if args.seed is not None:
        cfg = cfg.replace(seeds=(args.seed,))
    cfg.validate()
    return cfg, variants


def _atomic_write(path: Path, writer) -> None:
    """Write through a temporary sibling so readers never observe a half-written file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path: Path, text: str) -> None:
    _atomic_write(path, lambda tmp: Path(tmp).write_text(text, encoding="utf-8"))


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def cmd_generate(args) -> None:
    cfg, _ = _load(args)
    synth = cfg.dataset if isinstance(cfg.dataset, SynthConfig) else SynthConfig()
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    ds = generate_synthetic(synth)
    _atomic_write(Path(args.out), lambda tmp: save_dataset(ds, tmp))
    logger.info("wrote %d samples to %s", len(ds), args.out)


def cmd_train(args) -> None:
    cfg, _ = _load(args)
    params, log = run_training(cfg, cfg.seeds[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "metrics.csv", log.to_csv())
    _write_text(out / "config.yaml", yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    _atomic_write(out / "checkpoint_final.npz", lambda tmp: save_checkpoint(params, tmp))
    _atomic_write(out / "checkpoint_best.npz", lambda tmp: save_checkpoint(log.best_params, tmp))
    if log.grouping is not None:
        _atomic_write(out / "grouping.csv", lambda tmp: save_grouping(log.grouping, tmp))
    logger.info("best epoch %d; outputs in %s", log.best_epoch, out)


def _sweep_variants(gammas) -> list:
    return [(f"gamma={g!r}", {"mode": "both_sep_decor", "gamma": g}) for g in gammas]


def cmd_ablate(args) -> None:
    cfg, variants = _load(args)
    if args.gammas:
        variants = _sweep_variants(args.gammas)
    elif not variants:
        variants = list(DEFAULT_ABLATION)
    if args.seeds:
        cfg = cfg.replace(seeds=tuple(args.seeds))
    table = run_ablation(cfg, variants, workers=args.workers)
    _write_text(Path(args.out), table.to_csv())
    logger.info("wrote %d rows to %s", len(table.rows), args.out)


def _eval_data(args, cfg):
    if args.dataset is not None:
        path = Path(args.dataset)
        if not path.is_file():
            raise CliError(f"dataset file not found: {path}")
        return split_by_class(load_dataset(path))
    return prepare_data(cfg)


def _load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args) -> None:
    cfg, _ = _load(args)
    params = _load_checkpoint(args.checkpoint)
    train, test = _eval_data(args, cfg)
    ds = train if args.split == "train" else test
    restarts = cfg.nmi_restarts if cfg.nmi_schedule != "never" else 0
    reports = evaluation.evaluate(
        params, ds, args.split, args.representations, epoch=0, ks=cfg.recall_ks,
        nmi_restarts=restarts, shared_recall=True, seed=cfg.seeds[0],
    )
    rows = [row for rep in reports for row in rep.rows()]
    _write_text(Path(args.out), _rows_csv(("epoch", "split", "representation", "metric", "value"), rows))


def cmd_gap(args) -> None:
    cfg, _ = _load(args)
    params = _load_checkpoint(args.checkpoint)
    train, test = _eval_data(args, cfg)
    seed = cfg.seeds[0]
    rows = []
    for rep in ABLATION_REPRESENTATIONS:
        r_train = evaluation.evaluate(params, train, "train", [rep], ks=(1,), seed=seed)[0].recall_at[1]
        r_test = evaluation.evaluate(params, test, "test", [rep], ks=(1,), seed=seed)[0].recall_at[1]
        gap = evaluation.generalization_gap(r_train, r_test)
        rows.append((rep, "train", r_train, gap))
        rows.append((rep, "test", r_test, gap))
    _write_text(Path(args.out), _rows_csv(("representation", "split", "recall@1", "gap"), rows))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shared-dml", description="Shared-feature metric learning: data, training, ablations, probes."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config (defaults are used when omitted)")
        p.add_argument("--seed", type=int, help="override the config's seed list with this single seed")
        return p

    p = common(sub.add_parser("generate", help="write a synthetic dataset CSV"))
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train one configuration"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("ablate", help="run an ablation grid or a gamma sweep"))
    p.add_argument("--out", required=True, help="output ablation CSV path")
    p.add_argument("--gammas", type=float, nargs="+", help="sweep gamma in both_sep_decor mode")
    p.add_argument("--seeds", type=int, nargs="+", help="seed list for every variant")
    p.add_argument("--workers", type=int, help="parallel runs (default: SHARED_DML_THREADS or CPU count)")
    p.set_defaults(func=cmd_ablate)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint on one split"),
        ("gap", cmd_gap, "train/test Recall@1 and gap for every representation"),
    ):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="dataset CSV (default: the config's dataset)")
        p.add_argument("--out", required=True, help="output CSV path")
        if name == "eval":
            p.add_argument("--split", choices=("train", "test"), default="test")
            p.add_argument("--representations", nargs="+", default=list(ABLATION_REPRESENTATIONS),
                           choices=ABLATION_REPRESENTATIONS)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (CliError, ConfigError, DatasetFormatError, ValueError, OSError, ArithmeticError) as exc:
        print(f"shared-dml {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


cli_main = main


if __name__ == "__main__":
    sys.exit(main())
