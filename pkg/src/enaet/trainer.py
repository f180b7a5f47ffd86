"""EnAET training loop, supervised baseline loop, config files and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .data import BatchStream, SplitPlan, export_splits, flip_and_crop, load_labeled, make_batches, stream_rng
from .evaluator import predict
from .losses import LambdaSchedule, LossTerms
from .networks import NetworkBundle, build_networks, ema_update, forward
from .transforms import FAMILIES, SamplingRanges, apply_transform, param_count, sample_transforms

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "enaet-checkpoint"
CHECKPOINT_VERSION = 1
MODES = ("enaet", "supervised_baseline")

# Seed streams owned by the trainer (data ordering uses 1 and 2).
STREAM_LABELED_AUG = 3
STREAM_UNLABELED = 4
STREAM_TRANSFORMS = 5


@dataclass
class TrainConfig:
    epochs: int = 100
    lr_backbone: float = 0.002
    lr_aet: float = 0.1
    batch_size: int = 128
    kl_lambda: float = 1.0
    warm_lambda: tuple = losses.DEFAULT_WARM
    max_lambda: tuple = losses.DEFAULT_MAX
    data_portion: float = 1.0
    lambda_u: float = 75.0
    ema_alpha: float = 0.999
    image_size: int = 32
    seed: int = 0
    mode: str = "enaet"
    # Not fixed by the method description; defaults follow common practice.
    depth: int = 28
    width: int = 2
    base_channels: int = 16
    temperature: float = 0.5
    k_aug: int = 2
    mixup_alpha: float = 0.75
    lambda_u_rampup: float = 0.0
    aet_momentum: float = 0.9
    aet_weight_decay: float = 5e-4
    lr_schedule: str = "constant"
    steps_per_epoch: int = 0
    aet_batch: int = 0
    drop_last: bool = False
    eval_batch_size: int = 256
    guess_with: str = "teacher"

    def __post_init__(self):
        self.warm_lambda = tuple(float(v) for v in self.warm_lambda)
        self.max_lambda = tuple(float(v) for v in self.max_lambda)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_backbone <= 0 or self.lr_aet <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.warm_lambda) != len(FAMILIES) or len(self.max_lambda) != len(FAMILIES):
            raise ValueError(f"warm_lambda and max_lambda need {len(FAMILIES)} entries")
        if not 0 <= self.ema_alpha <= 1:
            raise ValueError(f"ema_alpha must be in [0, 1], got {self.ema_alpha}")
        if self.guess_with not in ("teacher", "student"):
            raise ValueError(f"guess_with must be 'teacher' or 'student', got {self.guess_with!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not 0 < self.data_portion <= 1:
            raise ValueError(f"data_portion must be in (0, 1], got {self.data_portion}")

    @property
    def schedule(self) -> LambdaSchedule:
        return LambdaSchedule(self.warm_lambda, self.max_lambda, self.kl_lambda)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, default):
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(",") if x.strip())
    return type(default)(text)


def config_to_text(config: TrainConfig) -> str:
    return "".join(f"{f.name}={_format_value(getattr(config, f.name))}\n" for f in dataclasses.fields(config))


def config_from_text(text: str, source: str = "<config>") -> TrainConfig:
    defaults = TrainConfig()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(value, getattr(defaults, key))
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    path = Path(path)
    return config_from_text(path.read_text(encoding="utf-8"), str(path))


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(config_to_text(config), encoding="utf-8")


class NonFiniteLossError(RuntimeError):
    def __init__(self, component: str, value: float, checkpoint=None):
        self.component, self.value, self.checkpoint = component, value, checkpoint
        super().__init__(f"non-finite loss in {component}: {value}")


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    classes: list
    student: NetworkBundle
    teacher: NetworkBundle | None
    opt_backbone: torch.optim.Optimizer
    opt_aet: torch.optim.Optimizer | None
    scheduler: torch.optim.lr_scheduler.LambdaLR | None
    rngs: dict
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def eval_model(self) -> NetworkBundle:
        return self.teacher if self.teacher is not None else self.student


def init_rngs(seed: int) -> dict:
    return {
        "labeled_aug": stream_rng(seed, STREAM_LABELED_AUG),
        "unlabeled": stream_rng(seed, STREAM_UNLABELED),
        "transforms": stream_rng(seed, STREAM_TRANSFORMS),
    }


def init_state(config: TrainConfig, classes, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), total_steps=None,
               device="cpu") -> TrainState:
    torch.manual_seed(config.seed)
    enaet = config.mode == "enaet"
    counts = [param_count(f) for f in FAMILIES] if enaet else []
    student, teacher = build_networks(len(classes), counts, config.width, config.depth, config.base_channels,
                                      mean, std, ema=enaet)
    student.to(device)
    if teacher is not None:
        teacher.to(device)
    opt_b = torch.optim.Adam(student.backbone_parameters(), lr=config.lr_backbone)
    opt_a = None
    if enaet:
        opt_a = torch.optim.SGD(student.decoder_parameters(), lr=config.lr_aet, momentum=config.aet_momentum,
                                weight_decay=config.aet_weight_decay)
    scheduler = None
    if config.lr_schedule == "cosine":
        total = max(1, total_steps or 1)
        opts = [o for o in (opt_b, opt_a) if o is not None]
        scheduler = [torch.optim.lr_scheduler.LambdaLR(o, lambda s: 0.5 * (1 + math.cos(math.pi * min(s / total, 1.0))))
                     for o in opts]
    return TrainState(config, list(classes), student, teacher, opt_b, opt_a, scheduler, init_rngs(config.seed))


def _finite(component: str, value: torch.Tensor):
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise NonFiniteLossError(component, v)
    return v


def train_step(state: TrainState, labeled, targets: torch.Tensor, unlabeled, epoch: float) -> LossTerms:
    """One optimization step; returns the loss components.

    ``labeled`` and ``unlabeled`` are ImageBatch objects (or raw [0, 1]
    tensors). ``epoch`` is fractional and drives the lambda schedules.
    """
    cfg = state.config
    x_l = getattr(labeled, "values", labeled)
    student = state.student
    student.train()
    y = losses.one_hot(targets, state.num_classes, x_l.dtype)

    if cfg.mode == "supervised_baseline":
        x_hat = flip_and_crop(x_l, state.rngs["labeled_aug"])
        l_x = losses.soft_cross_entropy(student(x_hat), y)
        terms = LossTerms(l_x=_finite("l_x", l_x))
        terms.l_mix = terms.l_total = terms.l_x
        state.opt_backbone.zero_grad(set_to_none=True)
        l_x.backward()
        state.opt_backbone.step()
        _advance(state)
        return terms

    if unlabeled is None:
        raise ValueError("enaet mode needs an unlabeled batch")
    x_u = getattr(unlabeled, "values", unlabeled)
    lambda_u = cfg.lambda_u * losses.linear_rampup(epoch, cfg.lambda_u_rampup)
    lambdas = losses.lambda_at(cfg.schedule, epoch)
    guesser = state.teacher if state.teacher is not None and cfg.guess_with == "teacher" else student
    was_training = guesser.training
    guesser.eval()
    mm = losses.mixmatch_build(x_l, y, x_u, guesser, cfg.temperature, cfg.k_aug, cfg.mixup_alpha,
                               state.rngs["unlabeled"], augment=flip_and_crop, labeled_rng=state.rngs["labeled_aug"])
    guesser.train(was_training)

    n_l = len(mm.x_mixed)
    if lambda_u > 0:
        logits = student(torch.cat([mm.x_mixed, mm.u_mixed]))
        logits_x, logits_u = logits[:n_l], logits[n_l:]
    else:
        logits_x, logits_u = student(mm.x_mixed), None
    l_x, l_u, l_mix = losses.mixmatch_loss(mm, logits_x, logits_u, lambda_u)

    zero = l_mix.new_zeros(())
    l_kl, l_aet = zero, [zero] * len(FAMILIES)
    if cfg.kl_lambda > 0 or any(lambdas):
        x = mm.u_views[0]
        if cfg.aet_batch > 0:
            x = x[: cfg.aet_batch]
        ranges = SamplingRanges.default()
        specs = [sample_transforms(f, len(x), ranges, state.rngs["transforms"]) for f in FAMILIES]
        transformed = [apply_transform(x, s) for s in specs]
        # With every AET weight at zero the decoders are not run at all, so
        # neither their weights nor their batch-norm statistics move.
        decode = any(lambdas)
        pred, preds_t, params = forward(student, x, transformed, decode=decode)
        l_kl = losses.kl_consistency_loss(pred, preds_t)
        if decode:
            l_aet = [losses.aet_loss(p, s) for p, s in zip(params, specs)]

    terms = LossTerms(
        l_x=_finite("l_x", l_x), l_u=_finite("l_u", l_u), l_mix=_finite("l_mix", l_mix),
        l_kl=_finite("l_kl", l_kl),
        l_aet=[_finite(f"l_aet_{f.value}", l) for f, l in zip(FAMILIES, l_aet)],
        lambdas=lambdas, kl_lambda=cfg.kl_lambda,
    )
    total = losses.weighted_total(l_mix, l_kl, l_aet, lambdas, cfg.kl_lambda)
    terms.l_total = _finite("l_total", total)

    state.opt_backbone.zero_grad(set_to_none=True)
    state.opt_aet.zero_grad(set_to_none=True)
    total.backward()
    state.opt_backbone.step()
    # Skipping the step while the decoders are idle keeps weight decay from
    # moving them.
    if any(lambdas):
        state.opt_aet.step()
    ema_update(state.teacher, student, cfg.ema_alpha)
    _advance(state)
    return terms


def _advance(state: TrainState):
    state.step += 1
    if state.scheduler:
        # The schedule follows the global step even while the decoder
        # optimizer is idle, which torch warns about.
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Detected call of")
            for s in state.scheduler:
                s.step()


# --- checkpoints ---------------------------------------------------------------

def _rng_states(rngs: dict) -> str:
    return json.dumps({k: g.bit_generator.state for k, g in rngs.items()}, sort_keys=True)


def _restore_rngs(text: str) -> dict:
    out = {}
    for k, st in json.loads(text).items():
        g = np.random.default_rng()
        g.bit_generator.state = st
        out[k] = g
    return out


def save_checkpoint(state: TrainState, path) -> Path:
    """Versioned key -> value archive (torch.save) of everything needed to resume.

    Keys: format, version, epoch, step, config (key=value text), classes,
    student, teacher, opt_backbone, opt_aet, scheduler (state dicts or None),
    rngs (JSON of numpy bit-generator states), torch_rng, history and trace
    (JSON).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        "config": config_to_text(state.config),
        "classes": list(state.classes),
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict() if state.teacher is not None else None,
        "opt_backbone": state.opt_backbone.state_dict(),
        "opt_aet": state.opt_aet.state_dict() if state.opt_aet is not None else None,
        "scheduler": [s.state_dict() for s in state.scheduler] if state.scheduler else None,
        "rngs": _rng_states(state.rngs),
        "torch_rng": torch.get_rng_state(),
        "history": json.dumps(state.history),
        "trace": json.dumps(state.trace),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(archive, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, total_steps=None, device="cpu") -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of types for corrupt archives
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an enaet checkpoint")
    if archive.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {archive.get('version')} != supported {CHECKPOINT_VERSION}")
    config = config_from_text(archive["config"], f"{path}:config")
    student_sd = archive["student"]
    state = init_state(config, archive["classes"], total_steps=total_steps, device=device)
    state.student.load_state_dict(student_sd)
    if state.teacher is not None:
        state.teacher.load_state_dict(archive["teacher"])
    state.opt_backbone.load_state_dict(archive["opt_backbone"])
    if state.opt_aet is not None:
        state.opt_aet.load_state_dict(archive["opt_aet"])
    if state.scheduler and archive["scheduler"]:
        for s, sd in zip(state.scheduler, archive["scheduler"]):
            s.load_state_dict(sd)
    state.rngs = _restore_rngs(archive["rngs"])
    torch.set_rng_state(archive["torch_rng"])
    state.epoch, state.step = archive["epoch"], archive["step"]
    state.history = json.loads(archive["history"])
    state.trace = json.loads(archive["trace"])
    return state


def weights_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- training loop ---------------------------------------------------------------

@dataclass
class TrainingRun:
    config: TrainConfig
    state: TrainState
    history: list
    trace: list
    checkpoints: list = field(default_factory=list)
    masked_label_reads: int = 0
    skipped_images: list = field(default_factory=list)
    already_complete: bool = False


HISTORY_FIELDS = ["epoch", "l_total", "l_mix", "l_x", "l_u", "l_kl",
                  *[f"l_aet_{f.value}" for f in FAMILIES], "val_acc", "seconds"]


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in HISTORY_FIELDS})


def validation_accuracy(model: NetworkBundle, images: torch.Tensor, targets: torch.Tensor, batch_size: int):
    if len(images) == 0:
        return None
    pred = predict(model, images, batch_size)
    return float((pred == targets.cpu()).double().mean())


def train(config: TrainConfig, plan: SplitPlan, run_dir=None, resume=None, stream: BatchStream | None = None,
          validation=None, epochs_to_run: int | None = None, device="cpu") -> TrainingRun:
    """Run (or resume) training and return the run record.

    ``stream`` and ``validation`` (images, targets) may be passed to reuse
    already-decoded images. ``epochs_to_run`` stops early after that many
    epochs in this call, which is how interrupted runs are simulated.
    ``device`` is any torch device string; cpu is the tested default.
    """
    config.validate()
    if stream is None:
        stream = make_batches(plan, config.batch_size, config.image_size, config.seed,
                              config.drop_last, config.steps_per_epoch)
    if validation is None:
        v_img, v_tgt, _ = load_labeled(plan, plan.validation, config.image_size)
        validation = (v_img, v_tgt)
    device = torch.device(device)
    if device.type != "cpu":
        stream.labeled, stream.targets = stream.labeled.to(device), stream.targets.to(device)
        stream.unlabeled = stream.unlabeled.to(device) if stream.unlabeled is not None else None
        validation = (validation[0].to(device), validation[1])
    steps = len(stream)
    total_steps = steps * config.epochs

    if resume is not None:
        state = load_checkpoint(resume, total_steps, device)
        if state.classes != list(plan.classes):
            raise ValueError("checkpoint class vocabulary does not match the split plan")
    else:
        state = init_state(config, plan.classes, stream.mean, stream.std, total_steps, device)
    config = state.config

    run_dir = Path(run_dir) if run_dir is not None else None
    checkpoints = []
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_config(config, run_dir / "config.snapshot")
        export_splits(plan, run_dir / "splits.csv")
        checkpoints = sorted(str(p) for p in (run_dir / "checkpoints").glob("epoch_*"))

    if state.epoch >= config.epochs:
        return TrainingRun(config, state, state.history, state.trace, checkpoints,
                           plan.label_guard.reads, stream.skipped, already_complete=True)

    last = config.epochs if epochs_to_run is None else min(config.epochs, state.epoch + epochs_to_run)
    while state.epoch < last:
        epoch = state.epoch
        t0 = time.time()
        sums: dict[str, float] = {}
        n = 0
        for i, (lab, tgt, unl) in enumerate(stream.epoch(epoch)):
            try:
                terms = train_step(state, lab, tgt, unl, epoch + i / steps)
            except NonFiniteLossError as exc:
                if run_dir is not None:
                    exc.checkpoint = str(save_checkpoint(state, run_dir / "checkpoints" / f"abort_epoch_{epoch}"))
                    (run_dir / "abort_report.json").write_text(json.dumps({
                        "epoch": epoch, "step_in_epoch": i, "component": exc.component,
                        "value": repr(exc.value), "checkpoint": exc.checkpoint}, indent=2))
                raise
            row = terms.as_row([f.value for f in FAMILIES])
            state.trace.append(row)
            for k, v in row.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        record = {k: v / n for k, v in sums.items()}
        record["epoch"] = epoch + 1
        record["val_acc"] = validation_accuracy(state.eval_model, validation[0], validation[1], config.eval_batch_size)
        record["seconds"] = time.time() - t0
        state.history.append(record)
        state.epoch += 1
        log.info("epoch %d/%d loss %.4f val_acc %s (%.1fs)", state.epoch, config.epochs, record["l_total"],
                 record["val_acc"], record["seconds"])
        if run_dir is not None:
            checkpoints.append(str(save_checkpoint(state, run_dir / "checkpoints" / f"epoch_{state.epoch}")))
            write_history(state.history, run_dir / "history.csv")

    return TrainingRun(config, state, state.history, state.trace, checkpoints,
                       plan.label_guard.reads, stream.skipped)
