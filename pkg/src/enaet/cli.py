"""Command-line entry point: prepare, train, evaluate, compare, inspect-data.

Exit codes: 0 success, 2 bad arguments or missing/invalid inputs, 3 training
aborted on a non-finite loss, 4 class vocabulary mismatch.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import torch

from .data import (
    SPLIT_NAMES,
    ManifestError,
    class_distribution,
    export_splits,
    import_splits,
    load_labeled,
    load_manifest,
    split_dataset,
)
from .evaluator import VocabularyMismatch, compare_runs, evaluate, render_table, rows_to_csv, write_curve, write_report
from .trainer import CheckpointError, NonFiniteLossError, load_checkpoint, load_config, train

EXIT_OK, EXIT_USAGE, EXIT_NAN, EXIT_VOCAB = 0, 2, 3, 4
DEVICE_ENV = "ENAET_DEVICE"
LOCK_NAME = ".lock"
RUN_ARTIFACTS = ("config.snapshot", "history.csv", "splits.csv", "curve.csv", "abort_report.json", "checkpoints")


class UsageError(Exception):
    pass


def resolve_device() -> torch.device:
    name = os.environ.get(DEVICE_ENV, "cpu").strip() or "cpu"
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise UsageError(f"{DEVICE_ENV}={name!r} is not a valid device: {exc}") from None
    if device.type == "cuda" and not torch.cuda.is_available():
        raise UsageError(f"{DEVICE_ENV}={name!r} requested but CUDA is not available")
    return device


@contextmanager
def run_lock(directory: Path, force: bool):
    """Advisory lock: a file holding the owner's pid, removed on exit."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    if force:
        lock.unlink(missing_ok=True)
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = lock.read_text().strip() or "?"
        raise UsageError(f"{directory} is locked by process {owner} (delete {lock} if stale, or pass --force)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def refuse_overwrite(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _fractions(text: str):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _histogram_rows(plan, manifest):
    by_path = {r.path: r for r in manifest.records}
    per_split = {}
    for name, recs in plan.items():
        # Look labels up in the manifest so masked records stay unread.
        counts = [0] * len(manifest.classes)
        if recs:
            counts = class_distribution([by_path[r.path] for r in recs], manifest.classes).counts
        per_split[name] = counts
    total = class_distribution(manifest.records, manifest.classes)
    rows = [[c, total.counts[i], *[per_split[n][i] for n in SPLIT_NAMES]] for i, c in enumerate(manifest.classes)]
    return total, rows


def _print_histogram(total, rows):
    width = max(len("class"), *(len(r[0]) for r in rows))
    print(f"{'class':<{width}}  {'total':>6}  " + "  ".join(f"{n:>10}" for n in SPLIT_NAMES))
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:>6}  " + "  ".join(f"{v:>10}" for v in r[2:]))
    print(f"imbalance ratio: {total.imbalance_ratio:.4g}")


# --- subcommands -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    targets = [out / "splits.csv", out / "class_histogram.csv"]
    refuse_overwrite(targets, args.force)
    plan = split_dataset(manifest, args.portion, args.fractions, args.seed)
    with run_lock(out, args.force):
        export_splits(plan, targets[0])
        total, rows = _histogram_rows(plan, manifest)
        with open(targets[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "total", *SPLIT_NAMES])
            w.writerows(rows)
    for warning in plan.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    pool = len(plan.labeled_train) + len(plan.unlabeled_train)
    print(f"labeled: {len(plan.labeled_train)} of {pool} training records (portion {args.portion:g})")
    print(f"validation: {len(plan.validation)}  test: {len(plan.test)}")
    print(f"imbalance ratio: {total.imbalance_ratio:.4g}")
    print(f"wrote {targets[0]} and {targets[1]}")
    return EXIT_OK


def cmd_train(args) -> int:
    device = resolve_device()
    config = load_config(args.config)
    overrides = {k: v for k, v in (("mode", args.mode), ("seed", args.seed), ("epochs", args.epochs)) if v is not None}
    manifest = load_manifest(args.manifest)
    plan = import_splits(args.splits, manifest, seed=overrides.get("seed", config.seed))
    overrides["data_portion"] = plan.portion
    config = type(config)(**{**config.__dict__, **overrides})
    out = Path(args.out_dir)
    if args.resume is None:
        clash = [out / a for a in RUN_ARTIFACTS if (out / a).exists()]
        refuse_overwrite(clash, args.force)
    elif not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    with run_lock(out, args.force):
        if args.resume is None and args.force:
            for a in RUN_ARTIFACTS:
                p = out / a
                shutil.rmtree(p) if p.is_dir() else p.unlink(missing_ok=True)
        try:
            run = train(config, plan, run_dir=out, resume=args.resume, device=device)
        except NonFiniteLossError as exc:
            print(f"error: {exc}", file=sys.stderr)
            print(f"last finite state: {exc.checkpoint}", file=sys.stderr)
            print(f"diagnostic report: {out / 'abort_report.json'}", file=sys.stderr)
            return EXIT_NAN
        write_curve(run.history, out / "curve.csv")
    if run.already_complete:
        print(f"already complete: {out} finished {run.state.epoch} of {run.config.epochs} epochs")
        return EXIT_OK
    last = run.history[-1]
    val = "n/a" if last.get("val_acc") is None else f"{last['val_acc']:.4f}"
    print(f"trained {run.config.mode} for {run.state.epoch} epochs; final val_acc {val}")
    if run.skipped_images:
        print(f"skipped {len(run.skipped_images)} unreadable images", file=sys.stderr)
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    device = resolve_device()
    state = load_checkpoint(args.checkpoint, device=device)
    manifest = load_manifest(args.manifest)
    if list(state.classes) != list(manifest.classes):
        raise VocabularyMismatch(f"checkpoint classes ({len(state.classes)}) do not match the manifest "
                                 f"vocabulary ({len(manifest.classes)})")
    plan = import_splits(args.splits, manifest)
    records = plan.test if args.split == "test" else plan.validation
    if not records:
        raise UsageError(f"the {args.split} split in {args.splits} is empty")
    out = Path(args.out)
    refuse_overwrite([out / "report.json", out / "confusion.csv", out / "per_class.csv"], args.force)
    images, targets, skipped = load_labeled(plan, records, state.config.image_size)
    report = evaluate(state.eval_model, images.to(device), targets, manifest.classes, args.batch_size)
    name = args.name or Path(args.checkpoint).resolve().parent.parent.name
    with run_lock(out, args.force):
        write_report(report, out, {"name": name, "portion": plan.portion, "split": args.split,
                                   "mode": state.config.mode, "epoch": state.epoch, "skipped_images": skipped})
    print(f"{name}: top-1 accuracy {report.top1_accuracy:.4f} on {report.num_samples} {args.split} images")
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def _read_report(path: Path) -> dict:
    p = path / "report.json" if path.is_dir() else path
    if not p.is_file():
        raise UsageError(f"report not found: {p}")
    data = json.loads(p.read_text())
    missing = [k for k in ("name", "top1_accuracy", "portion") if k not in data]
    if missing:
        raise UsageError(f"{p}: missing fields {', '.join(missing)}")
    return data


def cmd_compare(args) -> int:
    rows = compare_runs([_read_report(Path(p)) for p in args.reports])
    print(render_table(rows))
    if args.out:
        refuse_overwrite([args.out], args.force)
        Path(args.out).write_text(rows_to_csv(rows))
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest = load_manifest(args.manifest)
    print(f"{len(manifest.records)} records, {len(manifest.classes)} classes")
    if args.splits:
        _print_histogram(*_histogram_rows(import_splits(args.splits, manifest), manifest))
        return EXIT_OK
    total = class_distribution(manifest.records, manifest.classes)
    width = max(len("class"), *(len(c) for c in manifest.classes))
    print(f"{'class':<{width}}  {'count':>6}")
    for c, n in zip(total.classes, total.counts):
        print(f"{c:<{width}}  {n:>6}")
    print(f"imbalance ratio: {total.imbalance_ratio:.4g}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enaet",
        description="Semi-supervised image classification with an ensemble of transformation-prediction "
                    f"regularizers. Set {DEVICE_ENV} (e.g. cpu, cuda:0) to choose the compute device.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split a manifest and write splits.csv + class_histogram.csv")
    p.add_argument("--manifest", required=True, help="CSV with header path,label[,split]")
    p.add_argument("--portion", type=float, default=1.0, help="labeled fraction of the training pool, in (0, 1]")
    p.add_argument("--fractions", type=_fractions, default=(0.58, 0.13, 0.29),
                   help="train,validation,test fractions for records without a split hint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train an EnAET or supervised-baseline model")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True, help="splits.csv written by 'prepare'")
    p.add_argument("--out-dir", required=True, help="run directory")
    p.add_argument("--mode", choices=("enaet", "supervised_baseline"), help="override the config's mode")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="replace an existing run in --out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test (or validation) split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.add_argument("--out", required=True, help="directory for report.json, confusion.csv, per_class.csv")
    p.add_argument("--name", help="run name recorded in the report (default: run directory name)")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="tabulate several evaluation reports")
    p.add_argument("reports", nargs="+", help="report.json files or directories containing one")
    p.add_argument("--out", help="also write the table as CSV here")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect-data", help="print the class histogram of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", help="also break counts down by split")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except VocabularyMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VOCAB
    except (UsageError, FileNotFoundError, ManifestError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
