"""Command-line entry point: ``nullbus {synth,split,train,eval,ablate}``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from .config import ABLATIONS, ConfigError, TrainConfig, load_config, save_config
from .data import (
    DatasetPool,
    FoldAssignment,
    FoldError,
    ManifestError,
    load_manifests,
    stratified_folds,
    synth_pool,
    write_manifest,
)
from .metrics import aggregate, format_table, read_results, write_results, write_table, mean_row, METRIC_NAMES
from .model import CheckpointError, load_checkpoint
from .training import TrainingError, evaluate, fit, load_samples

logger = logging.getLogger("nullbus")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ConfigError, ManifestError, FoldError, CheckpointError, FileNotFoundError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("NULLBUS_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"NULLBUS_SEED must be an integer, got {raw!r}") from None


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _parse_sets(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _config_from_args(args) -> TrainConfig:
    overrides = _parse_sets(args.set or [])
    for name in ("scale", "output_dir", "epochs", "seed", "fold_index", "ablation", "folds_path"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "manifest", None):
        overrides["manifest"] = list(args.manifest)
    if "seed" not in overrides:
        env = os.environ.get("NULLBUS_SEED")
        if env is not None:
            overrides["seed"] = _default_seed()
    return load_config(args.config, overrides)


def _pool_and_folds(config: TrainConfig) -> tuple[DatasetPool, FoldAssignment]:
    if not config.manifest:
        raise ConfigError("no manifest given (config key 'manifest' or --manifest)")
    pool = load_manifests(config.manifest)
    if config.folds_path:
        folds = FoldAssignment.load(config.folds_path, seed=config.seed)
        if folds.k != config.k:
            raise FoldError(f"fold map has k={folds.k}, config has k={config.k}")
    else:
        folds = stratified_folds(pool, config.k, config.seed)
    return pool, folds


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    out_dir = Path(args.out_dir)
    pool = synth_pool(args.n, seed, args.prompt_fraction, out_dir, size=args.size,
                      distractor_fraction=args.distractor_fraction)
    path = write_manifest(pool, out_dir / "manifest.csv")
    print(path)
    return EXIT_OK


def cmd_split(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    pool = load_manifests(args.manifest)
    folds = stratified_folds(pool, args.k, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    folds.save(out)
    print(out)
    return EXIT_OK


def run_dir_for(config: TrainConfig) -> Path:
    return Path(config.output_dir) / config.model.ablation / f"fold{config.fold_index}"


def cmd_train(args) -> int:
    config = _config_from_args(args)
    pool, folds = _pool_and_folds(config)
    run_dir = run_dir_for(config)
    record = fit(config, pool, folds, run_dir)
    print(run_dir)
    logger.info("best epoch %d, validation Dice %.4f", record.best_epoch, record.best_dice)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.results:
        rows = []
        for path in args.results:
            if not Path(path).exists():
                raise FileNotFoundError(f"results table not found: {path}")
            rows.extend(read_results(path))
    else:
        if not args.checkpoint or not args.manifest or not args.folds:
            raise UsageError("eval needs --checkpoint, --manifest and --folds (or --results)")
        pool = load_manifests(args.manifest)
        folds = FoldAssignment.load(args.folds)
        rows = []
        for ckpt in args.checkpoint:
            model, extra = load_checkpoint(ckpt, force=args.force)
            fold = extra.get("fold_index")
            if fold is None:
                raise CheckpointError(f"{ckpt}: checkpoint does not record its fold")
            _, val_ids = folds.split(int(fold))
            samples = load_samples(pool, val_ids, model.config.image_size)
            metrics = evaluate(model, samples, args.threshold)
            rows.extend((s.id, int(fold), m) for s, m in zip(samples, metrics))
        write_results(out / "results.rows", rows)
    summary = aggregate((fold, row) for _, fold, row in rows)
    table = summary.table()
    write_table(out / "summary.rows", table)
    print(format_table(table))
    return EXIT_OK


ABLATION_LABELS = {
    "zero_text": "Zero Text-Guidance",
    "zero_local": "Zero Local Features",
    "zero_global": "Zero Global Features",
    "full": "NullBUS",
}


def run_ablation(config: TrainConfig, pool: DatasetPool, folds: FoldAssignment,
                 variants: Sequence[str] = ("zero_text", "zero_local", "zero_global", "full"),
                 out_dir: Path | None = None) -> dict[str, dict]:
    """Train and validate each variant on the identical fold split."""
    cache: dict = {}
    results: dict[str, dict] = {}
    split = folds.split(config.fold_index)
    for variant in variants:
        vconfig = load_config(None, {**config.to_dict(), "ablation": variant})
        assert folds.split(vconfig.fold_index) == split
        run_dir = None if out_dir is None else out_dir / variant / f"fold{config.fold_index}"
        record = fit(vconfig, pool, folds, run_dir, cache=cache)
        metrics = evaluate(record.model, [cache[i] for i in record.val_ids], config.threshold)
        results[variant] = {"row": mean_row(metrics), "val_ids": record.val_ids, "record": record}
    return results


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    pool, folds = _pool_and_folds(config)
    out_dir = Path(config.output_dir) / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.snapshot")
    folds.save(out_dir / "folds.map")
    results = run_ablation(config, pool, folds, out_dir=out_dir)
    table = [["Experiment", *METRIC_NAMES]]
    for variant, res in results.items():
        table.append([ABLATION_LABELS[variant], *(f"{v:.4f}" for v in res["row"].as_tuple())])
    write_table(out_dir / "ablation.rows", table)
    print(format_table(table))
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--manifest", nargs="+", help="manifest file(s); overrides the config")
    p.add_argument("--folds", dest="folds_path", help="fold map (id,fold); default: stratified split from the seed")
    p.add_argument("--scale", choices=("desk", "paper"))
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nullbus", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic phantom pool and its manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--prompt-fraction", type=_fraction, default=0.5)
    p.add_argument("--distractor-fraction", type=_fraction, default=0.0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--out-dir", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a class-stratified id,fold map")
    p.add_argument("--manifest", nargs="+", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="folds.map")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold")
    _add_run_options(p)
    p.add_argument("--fold", dest="fold_index", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints, or re-aggregate a results table")
    p.add_argument("--checkpoint", nargs="+")
    p.add_argument("--manifest", nargs="+")
    p.add_argument("--folds")
    p.add_argument("--results", nargs="+", help="existing id,fold,IoU,Dice,FPR,FNR table(s) to aggregate")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--force", action="store_true", help="load checkpoints despite config mismatch")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train full / zero_text / zero_local / zero_global on one split")
    _add_run_options(p)
    p.add_argument("--fold", dest="fold_index", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nullbus: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"nullbus: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"nullbus: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"nullbus: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
