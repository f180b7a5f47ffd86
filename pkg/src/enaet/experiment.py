"""Desk-scale experiments: EnAET vs supervised baseline under label scarcity,
and test accuracy as the labeled portion grows.

Run as ``python -m enaet.experiment --manifest M --out DIR``. Every run is a
regular trainer run; results land in ``DIR/results.csv`` (one row per run)
and ``DIR/summary.json``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .data import load_labeled, load_manifest, make_batches, split_dataset
from .evaluator import evaluate
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# Small enough to finish a 30-epoch run in minutes on one CPU core. With only
# 1200 steps the unlabeled consistency term locks in early wrong guesses, so
# lambda_u is far below the full-scale default and ramps over the whole run.
DESK_CONFIG = dict(
    epochs=30,
    depth=10,
    width=1,
    base_channels=16,
    batch_size=64,
    steps_per_epoch=40,
    ema_alpha=0.99,
    lambda_u=1.0,
    lambda_u_rampup=30.0,
    aet_batch=32,
    image_size=32,
)


@dataclass
class RunResult:
    mode: str
    seed: int
    portion: float
    test_acc: float
    val_acc: float | None
    seconds: float
    masked_label_reads: int


def run_one(manifest, mode: str, seed: int, portion: float, overrides=None, run_dir=None) -> RunResult:
    plan = split_dataset(manifest, portion=portion, seed=seed)
    cfg = TrainConfig(**{**DESK_CONFIG, **(overrides or {}), "mode": mode, "seed": seed, "data_portion": portion})
    stream = make_batches(plan, cfg.batch_size, cfg.image_size, cfg.seed, cfg.drop_last, cfg.steps_per_epoch)
    t0 = time.time()
    run = train(cfg, plan, run_dir=run_dir, stream=stream)
    seconds = time.time() - t0
    images, targets, _ = load_labeled(plan, plan.test, cfg.image_size)
    report = evaluate(run.state.eval_model, images, targets, plan.classes, cfg.eval_batch_size)
    result = RunResult(mode, seed, portion, report.top1_accuracy, run.history[-1]["val_acc"], seconds,
                       run.masked_label_reads)
    log.info("%s seed=%d portion=%g test_acc=%.4f (%.0fs)", mode, seed, portion, result.test_acc, seconds)
    return result


def median_acc(results, mode: str, portion: float) -> float:
    return statistics.median(r.test_acc for r in results if r.mode == mode and r.portion == portion)


def label_scarcity(manifest, seeds=(0, 1, 2), portion=0.1, overrides=None, out_dir=None) -> dict:
    """Both modes on the same splits; gap = median EnAET - median baseline."""
    results = []
    for seed in seeds:
        for mode in ("supervised_baseline", "enaet"):
            run_dir = Path(out_dir) / f"{mode}_p{portion:g}_s{seed}" if out_dir else None
            results.append(run_one(manifest, mode, seed, portion, overrides, run_dir))
    enaet, base = median_acc(results, "enaet", portion), median_acc(results, "supervised_baseline", portion)
    return {"results": results, "enaet_median": enaet, "baseline_median": base, "gap": enaet - base}


def portion_trend(manifest, portions=(0.1, 0.5), seeds=(0, 1, 2), mode="enaet", overrides=None, out_dir=None,
                  reuse=()) -> dict:
    """Median test accuracy per portion over the same seeds.

    ``reuse`` holds RunResults already computed (e.g. by ``label_scarcity``)
    that are picked up instead of retraining.
    """
    done = {(r.mode, r.seed, r.portion): r for r in reuse}
    results = []
    for portion in portions:
        for seed in seeds:
            key = (mode, seed, portion)
            if key not in done:
                run_dir = Path(out_dir) / f"{mode}_p{portion:g}_s{seed}" if out_dir else None
                done[key] = run_one(manifest, mode, seed, portion, overrides, run_dir)
            results.append(done[key])
    medians = {p: median_acc(results, mode, p) for p in portions}
    return {"results": results, "medians": medians}


def write_results(results, path) -> None:
    fields = list(RunResult.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow(asdict(r))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m enaet.experiment", description=__doc__.splitlines()[0])
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--portion", type=float, default=0.1)
    p.add_argument("--trend-portion", type=float, default=0.5)
    p.add_argument("--keep-runs", action="store_true", help="write run directories and checkpoints")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    runs_dir = out / "runs" if args.keep_runs else None
    scarcity = label_scarcity(manifest, seeds, args.portion, out_dir=runs_dir)
    trend = portion_trend(manifest, (args.portion, args.trend_portion), seeds, out_dir=runs_dir,
                          reuse=scarcity["results"])
    everything = {(r.mode, r.seed, r.portion): r for r in scarcity["results"] + trend["results"]}
    write_results(list(everything.values()), out / "results.csv")
    summary = {
        "enaet_median": scarcity["enaet_median"], "baseline_median": scarcity["baseline_median"],
        "gap": scarcity["gap"], "portion_medians": {str(k): v for k, v in trend["medians"].items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
