"""Command-line entry points: dataset generation, training, evaluation, and
report emission.

Exit codes: 0 success, 1 usage or config error, 2 runtime abort (numerical
failure, corrupt checkpoint).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import configio
from .configio import ConfigError
from .datapipe import (
    DataError,
    BatchSpec,
    DatasetConfig,
    build_mlr_split,
    generate_toy_dataset,
    load_dataset_dir,
    mask_labels,
    write_dataset_dir,
)
from .losses import LossWeights

ABLATIONS = ("f_only", "g_only", "no_rec", "no_advF", "no_advI", "no_consist", "single_scale")


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="crossreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a toy identity dataset directory")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override every configured seed")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory (see gen-data)")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ablate", choices=ABLATIONS, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--setting", required=True,
                   help="cross | standard | unseen:<r>")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report",
                       help="emit plots and a summary for a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# Run directory management
# ---------------------------------------------------------------------------

def resolve_run_dir(raw: str) -> Path:
    """Relative run dirs resolve under $CRR_RUN_ROOT when it is set."""
    path = Path(raw)
    root = os.environ.get("CRR_RUN_ROOT")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def prepare_out_dir(path: Path, force: bool, allow_existing: bool = False) -> Path:
    if path.exists() and any(path.iterdir()) and not (force or allow_existing):
        raise CliUsageError(
            f"refusing to rerun into non-empty directory {path} (use --force)"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(out_dir: Path, command: str, config_text: str, seed) -> Path:
    digest = hashlib.sha256(config_text.encode()).hexdigest()
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    body = (
        f"command = {command}\n"
        f"created_utc = {stamp}\n"
        f"seed = {seed}\n"
        f"config_sha256 = {digest}\n"
        "--- config snapshot ---\n"
        f"{config_text}"
    )
    path = out_dir / "run_manifest.txt"
    path.write_text(body)
    return path


def _load_settings_with_seed(config_path: str, seed_override):
    settings = configio.load_settings(config_path)
    if seed_override is not None:
        settings["dataset"]["seed"] = int(seed_override)
        settings["train"]["seed"] = int(seed_override)
    return settings


def _dataset_config(settings) -> DatasetConfig:
    return DatasetConfig.from_mapping(settings["dataset"])


def _apply_ablation(settings, ablate: str | None):
    if ablate is None:
        return settings
    loss = settings["loss"]
    net = settings["network"]
    if ablate == "no_rec":
        loss["lambda_rec"] = 0.0
    elif ablate == "no_advF":
        loss["lambda_adv_f"] = 0.0
    elif ablate == "no_advI":
        loss["lambda_adv_i"] = 0.0
    elif ablate == "no_consist":
        loss["lambda_consist"] = 0.0
    elif ablate in ("f_only", "g_only"):
        net["embed"] = ablate
    elif ablate == "single_scale":
        net["align_levels"] = (min(net["align_levels"]),)
    return settings


def _bundle_config(settings, num_classes):
    from .network import BackboneConfig, BundleConfig

    net = settings["network"]
    ds = settings["dataset"]
    backbone = BackboneConfig(
        channels=tuple(net["channels"]),
        strides=tuple(net["strides"]),
        height=ds["height"],
        width=ds["width"],
    )
    return BundleConfig(
        backbone=backbone,
        align_levels=tuple(net["align_levels"]),
        embed=net["embed"],
        num_classes=num_classes,
    )


def _train_config(settings):
    from .trainer import TrainConfig

    t = settings["train"]
    l = settings["loss"]
    return TrainConfig(
        lr_main=t["lr_main"], momentum=t["momentum"], weight_decay=t["weight_decay"],
        lr_disc=t["lr_disc"], disc_momentum=t["disc_momentum"],
        disc_weight_decay=t["disc_weight_decay"],
        batch=BatchSpec(p=t["batch_p"], k=t["batch_k"]),
        iterations=t["iterations"],
        inner_crgan_steps=t["inner_crgan_steps"], inner_disc_steps=t["inner_disc_steps"],
        weights=LossWeights(
            adv_f=l["lambda_adv_f"], rec=l["lambda_rec"], adv_i=l["lambda_adv_i"],
            consist=l["lambda_consist"], margin=l["margin"],
            dedup_image_real=l["dedup_image_real"],
        ),
        seed=t["seed"], eval_every=t["eval_every"], checkpoint_every=t["checkpoint_every"],
        deterministic=t["deterministic"],
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    settings = _load_settings_with_seed(args.config, args.seed)
    dcfg = _dataset_config(settings)
    out = prepare_out_dir(Path(args.out), args.force)
    config_text = configio.serialize_settings(settings)
    write_run_manifest(out, "gen-data", config_text, dcfg.seed)

    records = generate_toy_dataset(dcfg)
    split = build_mlr_split(records, dcfg)  # validates & fixes the id split
    n = write_dataset_dir(records, out)
    (out / "dataset_config.txt").write_text(
        configio.serialize_settings({"dataset": settings["dataset"]})
    )
    (out / "split_manifest.txt").write_text(
        f"lr_camera = {split.lr_camera}\n"
        f"train_ids = {','.join(str(i) for i in split.train_ids)}\n"
        f"query_ids = {','.join(str(i) for i in split.test_ids)}\n"
        f"gallery_ids = {','.join(str(i) for i in split.test_ids)}\n"
    )
    print(f"wrote {n} images and split manifest to {out}")
    return 0


def _load_split(data_dir: Path, settings):
    ds_cfg_path = data_dir / "dataset_config.txt"
    if ds_cfg_path.exists():
        ds_settings = configio.load_settings(ds_cfg_path)
        settings["dataset"] = ds_settings["dataset"]
    dcfg = _dataset_config(settings)
    records = load_dataset_dir(data_dir, dcfg)
    return build_mlr_split(records, dcfg), dcfg


def cmd_train(args) -> int:
    from .evaluator import evaluate_setting
    from .network import build_bundle
    from .trainer import Trainer

    settings = _apply_ablation(_load_settings_with_seed(args.config, args.seed), args.ablate)
    run_dir = resolve_run_dir(args.run_dir)
    prepare_out_dir(run_dir, args.force, allow_existing=args.resume is not None)

    split, dcfg = _load_split(Path(args.data), settings)
    label_pct = settings["train"]["label_percent"]
    if label_pct < 100.0:
        split.train = mask_labels(split.train, label_pct, seed=settings["train"]["seed"])

    config_text = configio.serialize_settings(settings)
    write_run_manifest(run_dir, "train", config_text, settings["train"]["seed"])
    (run_dir / "config.txt").write_text(config_text)

    tcfg = _train_config(settings)
    if args.resume is not None:
        trainer = Trainer.from_checkpoint(args.resume, tcfg, run_dir=run_dir)
    else:
        bcfg = _bundle_config(settings, split.train.num_classes)
        trainer = Trainer(build_bundle(bcfg, seed=tcfg.seed), tcfg, run_dir=run_dir)

    def eval_fn(bundle, split_):
        outcome = evaluate_setting(bundle, split_, "cross", out_dir=run_dir)
        print(outcome.summary_line())

    trainer.train_loop(split, evaluate_fn=eval_fn)
    print(f"run complete: {run_dir}")
    return 0


def cmd_eval(args) -> int:
    from .evaluator import evaluate_setting
    from .trainer import load_checkpoint

    settings = _load_settings_with_seed_default(args.seed)
    out = prepare_out_dir(Path(args.out), args.force)
    split, dcfg = _load_split(Path(args.data), settings)
    ckpt = load_checkpoint(args.ckpt)
    bundle = ckpt.build_bundle()
    write_run_manifest(out, "eval", ckpt.config.manifest().__repr__() + "\n", dcfg.seed)
    outcome = evaluate_setting(bundle, split, args.setting, out_dir=out)
    print(outcome.summary_line())
    return 0


def _load_settings_with_seed_default(seed_override):
    settings = configio.default_settings()
    if seed_override is not None:
        settings["dataset"]["seed"] = int(seed_override)
        settings["train"]["seed"] = int(seed_override)
    return settings


def cmd_report(args) -> int:
    from . import report
    from .trainer import load_checkpoint

    run_dir = resolve_run_dir(args.run_dir)
    losses_csv = run_dir / "losses.csv"
    eval_csv = run_dir / "eval.csv"
    if not losses_csv.exists():
        raise CliUsageError(f"missing {losses_csv}")
    out = prepare_out_dir(Path(args.out), args.force)
    config_text = (run_dir / "config.txt").read_text() if (run_dir / "config.txt").exists() else ""
    write_run_manifest(out, "report", config_text, args.seed)

    report.write_loss_plot(losses_csv, out / "loss_curves.png")
    cmc_csvs = sorted(run_dir.glob("cmc_*.csv"))
    if cmc_csvs:
        report.write_cmc_plot(cmc_csvs, out / "cmc_curves.png")
    if eval_csv.exists():
        report.write_summary(eval_csv, out / "summary.txt")

    final_ckpt = run_dir / "final.ckpt"
    if final_ckpt.exists() and config_text:
        settings = configio.parse_settings(config_text)
        dcfg = _dataset_config(settings)
        records = generate_toy_dataset(dcfg)
        split = build_mlr_split(records, dcfg)
        samples = []
        seen_ids = set()
        for rec in split.gallery:
            if rec.identity not in seen_ids:
                samples.append(rec)
                seen_ids.add(rec.identity)
            if len(samples) == 3:
                break
        bundle = load_checkpoint(final_ckpt).build_bundle()
        report.write_recovery_grid(bundle, samples, out / "recovery_grid.png")
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    from .evaluator import EvalError
    from .network import NonFiniteError, ShapeError
    from .trainer import CheckpointError, TrainAbort

    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "eval": cmd_eval,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (CliUsageError, ConfigError, DataError, ShapeError, EvalError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainAbort as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        if exc.dump_path is not None:
            print(f"state dump: {exc.dump_path}", file=sys.stderr)
        return 2
    except (CheckpointError, NonFiniteError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
