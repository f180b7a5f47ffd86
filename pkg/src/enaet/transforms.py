"""Parametric image transformations used as AET regression targets.

Five families are supported. The four spatial ones form the containment
chain Euclidean < Similarity < Affine < Projective and are expressed as 3x3
homographies in a size-independent coordinate frame: the image center is the
origin and one unit equals the image side. The fifth family is photometric
(saturation, contrast, brightness, sharpness).

Every family has a raw parameter vector and a normalized one in [-1, 1]; the
normalized vector is what the decoders regress.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F


class TransformFamily(str, enum.Enum):
    PROJECTIVE = "projective"
    AFFINE = "affine"
    SIMILARITY = "similarity"
    EUCLIDEAN = "euclidean"
    PHOTOMETRIC = "photometric"

    @property
    def is_spatial(self) -> bool:
        return self is not TransformFamily.PHOTOMETRIC


# Order matters: it is the decoder order and the order of the lambda weights.
FAMILIES = (
    TransformFamily.PROJECTIVE,
    TransformFamily.AFFINE,
    TransformFamily.SIMILARITY,
    TransformFamily.EUCLIDEAN,
    TransformFamily.PHOTOMETRIC,
)

PARAM_NAMES = {
    TransformFamily.EUCLIDEAN: ("rotation", "tx", "ty"),
    TransformFamily.SIMILARITY: ("rotation", "tx", "ty", "log_scale"),
    TransformFamily.AFFINE: ("a11", "a12", "a13", "a21", "a22", "a23"),
    TransformFamily.PROJECTIVE: ("dx_tl", "dy_tl", "dx_tr", "dy_tr", "dx_br", "dy_br", "dx_bl", "dy_bl"),
    TransformFamily.PHOTOMETRIC: ("color", "contrast", "brightness", "sharpness"),
}

# Corners of the unit image in the centered frame: TL, TR, BR, BL.
CORNERS = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])

LUMA = (0.299, 0.587, 0.114)


def as_family(family) -> TransformFamily:
    if isinstance(family, TransformFamily):
        return family
    try:
        return TransformFamily(str(family).lower())
    except ValueError:
        raise ValueError(f"unknown transform family: {family!r}") from None


def param_count(family) -> int:
    return len(PARAM_NAMES[as_family(family)])


class RangeError(ValueError):
    """A normalized parameter lies outside [-1, 1]."""


@dataclass
class SamplingRanges:
    """Per-family (low, high) bounds for every raw parameter."""

    bounds: dict = field(default_factory=dict)

    @classmethod
    def default(cls) -> "SamplingRanges":
        rot = (-math.pi / 6, math.pi / 6)
        shift = (-0.125, 0.125)
        entry = (-0.15, 0.15)
        factor = (0.6, 1.4)
        return cls({
            TransformFamily.EUCLIDEAN: [rot, shift, shift],
            TransformFamily.SIMILARITY: [rot, shift, shift, (math.log(0.8), math.log(1.25))],
            TransformFamily.AFFINE: [entry] * 6,
            TransformFamily.PROJECTIVE: [shift] * 8,
            TransformFamily.PHOTOMETRIC: [factor, factor, factor, (0.0, 1.0)],
        })

    @classmethod
    def identity(cls) -> "SamplingRanges":
        """Degenerate ranges that only ever produce the identity transform."""
        return cls({f: [(v, v) for v in identity_raw(f)] for f in FAMILIES})

    def for_family(self, family) -> np.ndarray:
        family = as_family(family)
        if family not in self.bounds:
            raise ValueError(f"no sampling ranges for family {family.value}")
        b = np.asarray(self.bounds[family], dtype=np.float64)
        if b.shape != (param_count(family), 2):
            raise ValueError(f"{family.value}: expected {param_count(family)} (low, high) pairs, got shape {b.shape}")
        return b

    def validate(self) -> None:
        for family in self.bounds:
            b = self.for_family(family)
            if np.any(b[:, 0] > b[:, 1]):
                raise ValueError(f"{as_family(family).value}: low > high in sampling ranges")
            ident = identity_raw(family)
            if np.any(ident < b[:, 0]) or np.any(ident > b[:, 1]):
                raise ValueError(f"{as_family(family).value}: identity transform outside sampling ranges")


def identity_raw(family) -> np.ndarray:
    family = as_family(family)
    if family is TransformFamily.PHOTOMETRIC:
        return np.array([1.0, 1.0, 1.0, 0.0])
    return np.zeros(param_count(family))


@dataclass
class TransformSpec:
    """One sampled transformation.

    ``raw`` holds the family's natural parameters (radians, fractions of the
    image side, log-scale, photometric factors); ``params`` is the same vector
    mapped onto [-1, 1] by the sampling box it was drawn from.
    """

    family: TransformFamily
    raw: np.ndarray
    params: np.ndarray

    @classmethod
    def from_raw(cls, family, raw, ranges: SamplingRanges | None = None) -> "TransformSpec":
        family = as_family(family)
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (param_count(family),):
            raise ValueError(f"{family.value} expects {param_count(family)} parameters, got {raw.shape}")
        ranges = ranges or SamplingRanges.default()
        return cls(family, raw, _normalize(raw, ranges.for_family(family)))

    @classmethod
    def identity(cls, family, ranges: SamplingRanges | None = None) -> "TransformSpec":
        return cls.from_raw(family, identity_raw(family), ranges)


def _normalize(raw: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    lo, hi = bounds[:, 0], bounds[:, 1]
    width = hi - lo
    degenerate = width == 0
    out = 2.0 * (raw - lo) / np.where(degenerate, 1.0, width) - 1.0
    return np.where(degenerate, 0.0, out)


def encode_params(spec: TransformSpec, ranges: SamplingRanges | None = None) -> np.ndarray:
    """Regression target for ``spec``: raw coordinates mapped affinely onto [-1, 1]."""
    if ranges is None:
        return spec.params.copy()
    return _normalize(spec.raw, ranges.for_family(spec.family))


def decode_params(family, vector, ranges: SamplingRanges | None = None) -> TransformSpec:
    family = as_family(family)
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (param_count(family),):
        raise ValueError(f"{family.value} expects {param_count(family)} parameters, got {vector.shape}")
    bad = np.abs(vector) > 1.0
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise RangeError(f"{family.value}.{PARAM_NAMES[family][idx]} = {vector[idx]!r} outside [-1, 1]")
    bounds = (ranges or SamplingRanges.default()).for_family(family)
    lo, hi = bounds[:, 0], bounds[:, 1]
    raw = lo + (vector + 1.0) * (hi - lo) / 2.0
    return TransformSpec(family, raw, vector.copy())


def sample_transform(family, ranges: SamplingRanges, rng: np.random.Generator) -> TransformSpec:
    family = as_family(family)
    bounds = ranges.for_family(family)
    raw = rng.uniform(bounds[:, 0], bounds[:, 1])
    return TransformSpec(family, raw, _normalize(raw, bounds))


def sample_transforms(family, n: int, ranges: SamplingRanges, rng: np.random.Generator) -> list[TransformSpec]:
    """Draw ``n`` independent specs (one per image in a batch)."""
    family = as_family(family)
    bounds = ranges.for_family(family)
    raw = rng.uniform(bounds[:, 0], bounds[:, 1], size=(n, len(bounds)))
    return [TransformSpec(family, r, _normalize(r, bounds)) for r in raw]


# --- homographies ---------------------------------------------------------

def homography_from_corners(displacements: np.ndarray) -> np.ndarray:
    """Homography taking the unit-square corners to corners + displacements."""
    dst = CORNERS + np.asarray(displacements, dtype=np.float64).reshape(4, 2)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(CORNERS, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def to_matrix(spec: TransformSpec) -> np.ndarray:
    """3x3 homography (source -> destination) in the centered unit frame."""
    family, p = spec.family, spec.raw
    if family is TransformFamily.PHOTOMETRIC:
        raise ValueError("photometric transforms have no matrix form")
    if family is TransformFamily.PROJECTIVE:
        if not np.any(p):
            return np.eye(3)
        return homography_from_corners(p)
    if family is TransformFamily.AFFINE:
        m = np.eye(3)
        m[:2] += p.reshape(2, 3)
        return m
    theta, tx, ty = p[:3]
    scale = math.exp(p[3]) if family is TransformFamily.SIMILARITY else 1.0
    c, s = scale * math.cos(theta), scale * math.sin(theta)
    return np.array([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])


def embed(spec: TransformSpec, family, ranges: SamplingRanges | None = None) -> TransformSpec:
    """Re-express a spatial spec in a larger family with the same matrix.

    The result's raw parameters may fall outside the target family's sampling
    box; its normalized params are then outside [-1, 1] as well.
    """
    family = as_family(family)
    order = [TransformFamily.EUCLIDEAN, TransformFamily.SIMILARITY, TransformFamily.AFFINE, TransformFamily.PROJECTIVE]
    if not spec.family.is_spatial or not family.is_spatial:
        raise ValueError("only spatial families can be embedded")
    if order.index(family) < order.index(spec.family):
        raise ValueError(f"cannot embed {spec.family.value} into smaller family {family.value}")
    if family is spec.family:
        return spec
    m = to_matrix(spec)
    if family is TransformFamily.SIMILARITY:
        raw = np.append(spec.raw, 0.0)
    elif family is TransformFamily.AFFINE:
        raw = (m[:2] - np.eye(3)[:2]).ravel()
    else:
        pts = np.c_[CORNERS, np.ones(4)] @ m.T
        raw = (pts[:, :2] / pts[:, 2:] - CORNERS).ravel()
    return TransformSpec.from_raw(family, raw, ranges)


# --- application ----------------------------------------------------------

def _source_coords(matrices: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates for every output pixel, per batch element."""
    inv = np.linalg.inv(matrices)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    x = (u - cx) / width
    y = (v - cy) / height
    pts = np.stack([x, y, np.ones_like(x)])  # (3, H, W)
    src = np.einsum("nij,jhw->nihw", inv, pts)
    xs = src[:, 0] / src[:, 2] * width + cx
    ys = src[:, 1] / src[:, 2] * height + cy
    # Snap round-off so that grid-aligned warps (identity, 180 degree turns) are exact.
    for a in (xs, ys):
        r = np.rint(a)
        near = np.abs(a - r) < 1e-9
        a[near] = r[near]
    return xs, ys


def warp(images: torch.Tensor, matrices: np.ndarray) -> torch.Tensor:
    """Bilinear warp with zero padding; ``matrices`` is (N, 3, 3) or (3, 3)."""
    n, c, h, w = images.shape
    matrices = np.broadcast_to(np.asarray(matrices, dtype=np.float64), (n, 3, 3))
    xs, ys = _source_coords(matrices, h, w)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = torch.from_numpy(xs - x0).to(images.device, images.dtype)
    fy = torch.from_numpy(ys - y0).to(images.device, images.dtype)
    x0 = torch.from_numpy(x0).long().to(images.device)
    y0 = torch.from_numpy(y0).long().to(images.device)

    flat = images.reshape(n, c, h * w)
    out = torch.zeros_like(images)
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(n, 1, h * w).expand(n, c, h * w)
        vals = torch.gather(flat, 2, idx).reshape(n, c, h, w)
        out = out + vals * (wgt * valid).unsqueeze(1)
    return out


def _per_sample(values, n: int, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.array(np.broadcast_to(values, (n,))), dtype=like.dtype, device=like.device).view(n, 1, 1, 1)


def photometric(images: torch.Tensor, raw: np.ndarray) -> torch.Tensor:
    """Saturation, contrast, brightness, then unsharp-mask sharpening.

    ``raw`` is (4,) or (N, 4). Each blend is written as f*x + (1-f)*ref so
    that unit factors reproduce the input bit-exactly.
    """
    n = images.shape[0]
    raw = np.broadcast_to(np.asarray(raw, dtype=np.float64), (n, 4))
    color, contrast, bright, sharp = (_per_sample(raw[:, i], n, images) for i in range(4))
    luma = torch.tensor(LUMA, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)

    x = images
    gray = (x * luma).sum(1, keepdim=True)
    x = color * x + (1 - color) * gray
    mean = (x * luma).sum(1, keepdim=True).mean((2, 3), keepdim=True)
    x = contrast * x + (1 - contrast) * mean
    x = bright * x
    kernel = torch.tensor([[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]], dtype=x.dtype, device=x.device) / 13.0
    kernel = kernel.expand(x.shape[1], 1, 3, 3)
    blur = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel, groups=x.shape[1])
    x = (1 + sharp) * x - sharp * blur
    return x.clamp(0.0, 1.0)


def apply_transform(images: torch.Tensor, spec) -> torch.Tensor:
    """Apply one spec to the whole batch, or a list of specs (one per image)."""
    specs = spec if isinstance(spec, (list, tuple)) else None
    if specs is not None:
        if len(specs) != images.shape[0]:
            raise ValueError(f"got {len(specs)} specs for a batch of {images.shape[0]}")
        families = {s.family for s in specs}
        if len(families) != 1:
            raise ValueError("all specs in one call must share a family")
        family = families.pop()
    else:
        family = spec.family
    if images.ndim != 4:
        raise ValueError(f"expected a (N, C, H, W) batch, got shape {tuple(images.shape)}")

    if family is TransformFamily.PHOTOMETRIC:
        raw = np.stack([s.raw for s in specs]) if specs is not None else spec.raw
        return photometric(images, raw)
    mats = np.stack([to_matrix(s) for s in specs]) if specs is not None else to_matrix(spec)
    return warp(images, mats)
