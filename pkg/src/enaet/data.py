"""Dataset manifests, stratified labeled/unlabeled splits, and batch streams.

Manifest format: comma-separated text with the header ``path,label`` or
``path,label,split``. Optional leading ``# class: <name>`` lines fix the class
vocabulary and its order; otherwise the vocabulary is the sorted set of labels.
Relative image paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

HEADER = ["path", "label"]
SPLIT_NAMES = ("labeled", "unlabeled", "validation", "test")
SPLIT_HINTS = {"train": "train", "val": "validation", "validation": "validation", "test": "test"}
DEFAULT_FRACTIONS = (0.58, 0.13, 0.29)

# Independent seed streams; see stream_rng.
STREAM_LABELED_ORDER = 1
STREAM_UNLABELED_ORDER = 2


class ManifestError(ValueError):
    pass


def stream_rng(seed: int, stream: int, epoch: int = 0) -> np.random.Generator:
    """Generator for one named random stream at one epoch.

    Streams are keyed by (seed, stream, epoch) so that consumers never perturb
    each other and any epoch can be replayed without the history before it.
    """
    return np.random.default_rng([int(seed), int(stream), int(epoch)])


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    split: str | None = None


class LabelGuard:
    """Counts reads of labels that are supposed to be hidden from training."""

    def __init__(self):
        self.reads = 0


class MaskedRecord:
    """A record whose label is retained but counted on every read."""

    __slots__ = ("path", "split", "_label", "_guard")

    def __init__(self, record: Record, guard: LabelGuard):
        self.path = record.path
        self.split = record.split
        self._label = record.label
        self._guard = guard

    @property
    def label(self) -> str:
        self._guard.reads += 1
        return self._label

    def __repr__(self):
        return f"MaskedRecord(path={self.path!r})"


@dataclass
class DatasetManifest:
    records: list
    classes: list
    root: Path = Path(".")

    def class_index(self) -> dict:
        return {c: i for i, c in enumerate(self.classes)}

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    vocab: list[str] = []
    records: list[Record] = []
    seen: dict[str, int] = {}
    header = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if header is None and row[0].startswith("#"):
                text = ",".join(row)[1:].strip()
                if text.startswith("class:"):
                    vocab.append(text[len("class:"):].strip())
                continue
            if header is None:
                if row[:2] != HEADER or len(row) > 3 or (len(row) == 3 and row[2] != "split"):
                    raise ManifestError(f"{path}:{lineno}: expected header 'path,label[,split]', got {','.join(row)!r}")
                header = row
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rpath, label = row[0].strip(), row[1].strip()
            if not rpath or not label:
                raise ManifestError(f"{path}:{lineno}: empty path or label")
            if rpath in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {rpath!r} (first seen on line {seen[rpath]})")
            split = None
            if len(header) == 3 and row[2].strip():
                split = SPLIT_HINTS.get(row[2].strip().lower())
                if split is None:
                    raise ManifestError(f"{path}:{lineno}: unknown split hint {row[2]!r}")
            if vocab and label not in vocab:
                raise ManifestError(f"{path}:{lineno}: unknown class {label!r}")
            seen[rpath] = lineno
            records.append(Record(rpath, label, split))
    if header is None:
        raise ManifestError(f"{path}: missing header 'path,label[,split]'")
    if len(set(vocab)) != len(vocab):
        raise ManifestError(f"{path}: duplicate names in class vocabulary")
    classes = vocab or sorted({r.label for r in records})
    return DatasetManifest(records, classes, path.parent)


def write_manifest(manifest: DatasetManifest, path, explicit_vocab=True) -> None:
    with_split = any(r.split for r in manifest.records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if explicit_vocab:
            for c in manifest.classes:
                fh.write(f"# class: {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER + (["split"] if with_split else []))
        for r in manifest.records:
            w.writerow([r.path, r.label] + ([r.split or ""] if with_split else []))


@dataclass
class ClassHistogram:
    classes: list
    counts: list

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def imbalance_ratio(self) -> float:
        nz = [c for c in self.counts if c > 0]
        return max(nz) / min(nz)


def class_distribution(records, classes=None) -> ClassHistogram:
    if not records:
        raise ValueError("class_distribution needs at least one record")
    counts = Counter(r.label for r in records)
    classes = list(classes) if classes is not None else sorted(counts)
    return ClassHistogram(classes, [counts.get(c, 0) for c in classes])


@dataclass
class SplitPlan:
    labeled_train: list
    unlabeled_train: list
    validation: list
    test: list
    portion: float
    seed: int
    classes: list
    root: Path = Path(".")
    warnings: list = field(default_factory=list)
    label_guard: LabelGuard = field(default_factory=LabelGuard)

    def items(self):
        return zip(SPLIT_NAMES, (self.labeled_train, self.unlabeled_train, self.validation, self.test))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p


def _cut(n: int, fractions) -> list[int]:
    """Boundaries of consecutive chunks of ``n`` items by cumulative rounding."""
    bounds, acc = [], 0.0
    for f in fractions:
        acc += f
        bounds.append(min(n, int(math.floor(n * acc + 0.5))))
    return bounds


def _labeled_quotas(sizes: dict, portion: float) -> dict:
    """Per-class labeled counts: proportional, summing to ceil(portion * N), >= 1 per nonempty class."""
    total = sum(sizes.values())
    target = min(total, math.ceil(portion * total - 1e-9))
    exact = {c: portion * n for c, n in sizes.items()}
    quota = {c: min(n, math.floor(exact[c] + 1e-9)) for c, n in sizes.items()}
    remaining = target - sum(quota.values())
    order = sorted(sizes, key=lambda c: (-(exact[c] - quota[c]), list(sizes).index(c)))
    for c in order:
        if remaining <= 0:
            break
        if quota[c] < sizes[c]:
            quota[c] += 1
            remaining -= 1
    for c, n in sizes.items():
        if n > 0 and quota[c] == 0:
            quota[c] = 1
    return quota


def split_dataset(manifest: DatasetManifest, portion: float = 1.0, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> SplitPlan:
    """Stratified train/validation/test split, then a labeled subsample of train.

    Records carrying a split hint keep it; the rest are divided per class by
    ``fractions`` (train, validation, test). Of the training pool,
    ceil(portion * size) records are labeled, allocated per class in
    proportion to class size; the remainder is unlabeled.
    """
    if not 0 < portion <= 1:
        raise ValueError(f"portion must be in (0, 1], got {portion}")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or sum(fractions) > 1 + 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to <= 1, got {fractions}")
    rng = np.random.default_rng(seed)
    by_class: dict[str, list] = {c: [] for c in manifest.classes}
    for r in manifest.records:
        by_class[r.label].append(r)

    pool: dict[str, list] = {}
    validation, test = [], []
    for c in manifest.classes:
        recs = by_class[c]
        hinted = {"train": [], "validation": [], "test": []}
        free = []
        for r in recs:
            (hinted[r.split] if r.split else free).append(r)
        free = [free[i] for i in rng.permutation(len(free))]
        b = _cut(len(free), fractions)
        pool[c] = hinted["train"] + free[: b[0]]
        validation += hinted["validation"] + free[b[0]: b[1]]
        test += hinted["test"] + free[b[1]: b[2]]

    quotas = _labeled_quotas({c: len(pool[c]) for c in manifest.classes}, portion)
    guard = LabelGuard()
    labeled, unlabeled, warnings = [], [], []
    for c in manifest.classes:
        recs = [pool[c][i] for i in rng.permutation(len(pool[c]))]
        if not recs:
            warnings.append(f"class {c!r} has no training records")
        labeled += recs[: quotas[c]]
        unlabeled += [MaskedRecord(r, guard) for r in recs[quotas[c]:]]
    return SplitPlan(labeled, unlabeled, validation, test, portion, seed, list(manifest.classes),
                     manifest.root, warnings, guard)


def export_splits(plan: SplitPlan, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "assigned_split"])
        for name, recs in plan.items():
            for r in recs:
                w.writerow([r.path, name])


def import_splits(path, manifest: DatasetManifest, seed: int = 0) -> SplitPlan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"splits file not found: {path}")
    by_path = {r.path: r for r in manifest.records}
    groups = {name: [] for name in SPLIT_NAMES}
    guard = LabelGuard()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["path", "assigned_split"]:
            raise ManifestError(f"{path}:1: expected header 'path,assigned_split'")
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != 2 or row[1] not in groups:
                raise ManifestError(f"{path}:{lineno}: malformed row {row!r}")
            if row[0] not in by_path:
                raise ManifestError(f"{path}:{lineno}: path {row[0]!r} not in manifest")
            rec = by_path[row[0]]
            groups[row[1]].append(MaskedRecord(rec, guard) if row[1] == "unlabeled" else rec)
    n_train = len(groups["labeled"]) + len(groups["unlabeled"])
    portion = len(groups["labeled"]) / n_train if n_train else 1.0
    return SplitPlan(groups["labeled"], groups["unlabeled"], groups["validation"], groups["test"],
                     portion, seed, list(manifest.classes), manifest.root, [], guard)


# --- images -----------------------------------------------------------------

@dataclass
class ImageBatch:
    """(N, 3, H, W) images in [0, 1] plus the dataset normalization constants."""

    values: torch.Tensor
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1] != 3 or self.values.shape[2] != self.values.shape[3]:
            raise ValueError(f"expected (N, 3, S, S) images, got {tuple(self.values.shape)}")

    def __len__(self):
        return self.values.shape[0]

    def normalized(self) -> torch.Tensor:
        m = torch.tensor(self.mean, dtype=self.values.dtype, device=self.values.device).view(1, 3, 1, 1)
        s = torch.tensor(self.std, dtype=self.values.dtype, device=self.values.device).view(1, 3, 1, 1)
        return (self.values - m) / s


def read_image(path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


@dataclass
class LoadedSplit:
    images: torch.Tensor      # (N, 3, S, S) float32 in [0, 1]
    paths: list
    skipped: list


def load_images(paths, image_size: int) -> LoadedSplit:
    """Decode and resize; unreadable files are skipped with a warning."""
    arrays, kept, skipped = [], [], []
    for p in paths:
        try:
            arrays.append(read_image(p, image_size))
            kept.append(p)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
            skipped.append(str(p))
    if arrays:
        images = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float().div_(255.0)
    else:
        images = torch.zeros(0, 3, image_size, image_size)
    return LoadedSplit(images.contiguous(), kept, skipped)


def load_labeled(plan: SplitPlan, records, image_size: int):
    """Images and class-index targets for labeled records (never masked ones)."""
    index = {c: i for i, c in enumerate(plan.classes)}
    paths = [plan.resolve(r.path) for r in records]
    loaded = load_images(paths, image_size)
    keep = set(map(str, loaded.paths))
    targets = [index[r.label] for r, p in zip(records, paths) if str(p) in keep]
    return loaded.images, torch.tensor(targets, dtype=torch.long), loaded.skipped


def load_unlabeled(plan: SplitPlan, image_size: int):
    loaded = load_images([plan.resolve(r.path) for r in plan.unlabeled_train], image_size)
    return loaded.images, loaded.skipped


def channel_stats(*image_sets: torch.Tensor) -> tuple[tuple, tuple]:
    imgs = torch.cat([s for s in image_sets if len(s)]).double()
    mean = imgs.mean((0, 2, 3))
    std = imgs.std((0, 2, 3)).clamp_min(1e-6)
    return tuple(mean.tolist()), tuple(std.tolist())


class BatchStream:
    """Per-epoch sequence of (labeled batch, targets, unlabeled batch).

    By default an epoch is one pass over the labeled images (last batch may
    be short unless ``drop_last``). With ``steps_per_epoch`` > 0 the labeled
    order is cycled to produce exactly that many steps. The unlabeled side
    follows its own shuffled order, reshuffled when exhausted, and always
    matches the labeled batch size. Each epoch is a pure function of
    (seed, epoch).
    """

    def __init__(self, labeled, targets, unlabeled, batch_size, seed=0, mean=(0.0, 0.0, 0.0),
                 std=(1.0, 1.0, 1.0), drop_last=False, steps_per_epoch=0, skipped=()):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if len(labeled) == 0:
            raise ValueError("no labeled images")
        self.labeled, self.targets, self.unlabeled = labeled, targets, unlabeled
        self.batch_size, self.seed = batch_size, seed
        self.mean, self.std = tuple(mean), tuple(std)
        self.drop_last, self.steps_per_epoch = drop_last, steps_per_epoch
        self.skipped = list(skipped)

    def _labeled_batches(self, rng):
        n, b = len(self.labeled), self.batch_size
        if self.steps_per_epoch > 0:
            need = self.steps_per_epoch * b
            order = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))])
            return [order[i * b:(i + 1) * b] for i in range(self.steps_per_epoch)]
        order = rng.permutation(n)
        stop = n - n % b if self.drop_last else n
        return [order[i:i + b] for i in range(0, stop, b)]

    def __len__(self):
        if self.steps_per_epoch > 0:
            return self.steps_per_epoch
        n, b = len(self.labeled), self.batch_size
        return n // b if self.drop_last else -(-n // b)

    def epoch(self, epoch: int):
        lab_rng = stream_rng(self.seed, STREAM_LABELED_ORDER, epoch)
        unl_rng = stream_rng(self.seed, STREAM_UNLABELED_ORDER, epoch)
        pool = self.unlabeled if self.unlabeled is not None and len(self.unlabeled) else self.labeled
        u_order = np.empty(0, dtype=np.int64)
        for idx in self._labeled_batches(lab_rng):
            if len(u_order) < len(idx):
                u_order = np.concatenate([u_order, unl_rng.permutation(len(pool))])
            u_idx, u_order = u_order[: len(idx)], u_order[len(idx):]
            yield (ImageBatch(self.labeled[idx], self.mean, self.std), self.targets[idx],
                   ImageBatch(pool[u_idx], self.mean, self.std))


def make_batches(plan: SplitPlan, batch_size: int, image_size: int = 32, seed: int = 0,
                 drop_last=False, steps_per_epoch=0) -> BatchStream:
    labeled, targets, skipped_l = load_labeled(plan, plan.labeled_train, image_size)
    unlabeled, skipped_u = load_unlabeled(plan, image_size)
    mean, std = channel_stats(labeled, unlabeled)
    return BatchStream(labeled, targets, unlabeled, batch_size, seed, mean, std, drop_last,
                       steps_per_epoch, skipped_l + skipped_u)


# --- augmentation -------------------------------------------------------------

def flip_and_crop(images: torch.Tensor, rng: np.random.Generator, pad: int = 4) -> torch.Tensor:
    """Random horizontal flip (p = 0.5) and random crop after reflect padding."""
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    dx = rng.integers(0, 2 * pad + 1, size=n)
    dy = rng.integers(0, 2 * pad + 1, size=n)
    padded = torch.nn.functional.pad(images, (pad, pad, pad, pad), mode="reflect")
    out = torch.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out
