"""Procedural 10-style "painting" dataset for desk-scale experiments.

Each class is a rendering process (dots, brush strokes, color fields, ...)
rather than an object, so classes differ by texture and composition while
palette, orientation, placement and scale are random nuisance factors. A
fraction of images is blended with a render of another style, which gives
the ambiguity between neighbouring styles that makes labels expensive.

    python -m enaet.synthetic --out data/toy --per-class 650
"""
from __future__ import annotations

import argparse
import colorsys
import math
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

STYLES = (
    "pointillism",
    "brushwork",
    "color_field",
    "cubism",
    "orphism",
    "grid",
    "op_art",
    "drip",
    "sfumato",
    "sketch",
)


def _palette(rng, k):
    base = rng.random()
    out = []
    for _ in range(k):
        h = (base + rng.normal(0, 0.18)) % 1.0
        s = rng.uniform(0.3, 1.0)
        v = rng.uniform(0.35, 1.0)
        out.append(colorsys.hsv_to_rgb(h, s, v))
    return np.array(out)


def _canvas(rng, size, pal):
    return np.broadcast_to(pal[0], (size, size, 3)).copy()


def _pointillism(rng, size, pal):
    img = _canvas(rng, size, pal)
    n = rng.integers(120, 260)
    r = rng.uniform(0.8, 1.8)
    for _ in range(n):
        rr, cc = draw.disk((rng.uniform(0, size), rng.uniform(0, size)), r, shape=(size, size))
        img[rr, cc] = pal[rng.integers(1, len(pal))]
    return img


def _brushwork(rng, size, pal):
    img = _canvas(rng, size, pal)
    theta = rng.uniform(0, math.pi)
    for _ in range(rng.integers(25, 45)):
        t = theta + rng.normal(0, 0.25)
        length = rng.uniform(5, 11)
        y, x = rng.uniform(0, size, 2)
        dy, dx = math.sin(t) * length / 2, math.cos(t) * length / 2
        col = pal[rng.integers(1, len(pal))]
        for off in (-0.7, 0.0, 0.7):
            oy, ox = off * math.cos(t), -off * math.sin(t)
            rr, cc, val = draw.line_aa(int(y - dy + oy), int(x - dx + ox), int(y + dy + oy), int(x + dx + ox))
            keep = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
            rr, cc, val = rr[keep], cc[keep], val[keep, None]
            img[rr, cc] = img[rr, cc] * (1 - val) + col * val
    return img


def _color_field(rng, size, pal):
    img = _canvas(rng, size, pal)
    bands = rng.integers(2, 4)
    edges = np.sort(rng.uniform(0.1, 0.9, bands * 2)) * size
    vertical = rng.random() < 0.5
    for b in range(bands):
        lo, hi = int(edges[2 * b]), int(edges[2 * b + 1]) + 2
        margin = rng.integers(2, 6)
        if vertical:
            img[margin:size - margin, lo:hi] = pal[1 + b % (len(pal) - 1)]
        else:
            img[lo:hi, margin:size - margin] = pal[1 + b % (len(pal) - 1)]
    return ndimage.gaussian_filter(img, (1.2, 1.2, 0))


def _cubism(rng, size, pal):
    img = _canvas(rng, size, pal)
    for _ in range(rng.integers(7, 14)):
        cy, cx = rng.uniform(0, size, 2)
        rad = rng.uniform(4, 12)
        k = rng.integers(3, 5)
        ang = np.sort(rng.uniform(0, 2 * math.pi, k))
        rr, cc = draw.polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), shape=(size, size))
        img[rr, cc] = pal[rng.integers(1, len(pal))] * rng.uniform(0.7, 1.0)
    return img


def _orphism(rng, size, pal):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ring = rng.uniform(2.0, 4.0)
    d = np.hypot(yy - cy, xx - cx)
    idx = (d / ring).astype(int) % (len(pal))
    return pal[idx]


def _grid(rng, size, pal):
    img = np.ones((size, size, 3)) * rng.uniform(0.85, 1.0)
    xs = np.sort(rng.choice(np.arange(3, size - 3), rng.integers(2, 4), replace=False))
    ys = np.sort(rng.choice(np.arange(3, size - 3), rng.integers(2, 4), replace=False))
    bx, by = np.r_[0, xs, size], np.r_[0, ys, size]
    for i in range(len(by) - 1):
        for j in range(len(bx) - 1):
            if rng.random() < 0.35:
                img[by[i]:by[i + 1], bx[j]:bx[j + 1]] = pal[rng.integers(1, len(pal))]
    dark = rng.uniform(0.0, 0.15)
    for x in xs:
        img[:, x:x + 1] = dark
    for y in ys:
        img[y:y + 1, :] = dark
    return img


def _op_art(rng, size, pal):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    t = rng.uniform(0, math.pi)
    f = rng.uniform(0.35, 0.8)
    warp = rng.uniform(0, 2.0) * np.sin(yy * rng.uniform(0.1, 0.3))
    w = 0.5 + 0.5 * np.sin(f * (xx * math.cos(t) + yy * math.sin(t)) + warp)
    return w[..., None] * pal[1] + (1 - w[..., None]) * pal[0] * 0.3


def _drip(rng, size, pal):
    img = _canvas(rng, size, pal)
    for _ in range(rng.integers(6, 12)):
        steps = rng.integers(20, 60)
        pos = np.cumsum(rng.normal(0, 1.2, (steps, 2)), 0) + rng.uniform(0, size, 2)
        col = pal[rng.integers(1, len(pal))]
        p = np.clip(pos.astype(int), 0, size - 1)
        img[p[:, 0], p[:, 1]] = col
    return img


def _sfumato(rng, size, pal):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    img = _canvas(rng, size, pal)
    for _ in range(rng.integers(3, 6)):
        cy, cx = rng.uniform(0, size, 2)
        s = rng.uniform(3, 8)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))[..., None]
        img = img * (1 - w) + pal[rng.integers(1, len(pal))] * w
    return img


def _sketch(rng, size, pal):
    img = np.ones((size, size, 3)) * (0.75 + 0.25 * pal[0])
    ink = pal[1] * 0.3
    for _ in range(rng.integers(3, 7)):
        pts = rng.uniform(0, size, (4, 2))
        t = np.linspace(0, 1, 60)[:, None]
        curve = ((1 - t) ** 3 * pts[0] + 3 * (1 - t) ** 2 * t * pts[1] + 3 * (1 - t) * t ** 2 * pts[2]
                 + t ** 3 * pts[3])
        p = np.clip(curve.astype(int), 0, size - 1)
        img[p[:, 0], p[:, 1]] = ink
    return img


RENDERERS = (_pointillism, _brushwork, _color_field, _cubism, _orphism,
             _grid, _op_art, _drip, _sfumato, _sketch)


def render(style: int, rng: np.random.Generator, size: int = 32, blend: float = 0.35,
           noise: float = 0.06) -> np.ndarray:
    """One (size, size, 3) float image in [0, 1] of the given style index."""
    pal = _palette(rng, rng.integers(3, 6))
    img = RENDERERS[style](rng, size, pal)
    if rng.random() < blend:
        other = (style + rng.integers(1, len(RENDERERS))) % len(RENDERERS)
        a = rng.uniform(0.25, 0.45)
        img = (1 - a) * img + a * RENDERERS[other](rng, size, _palette(rng, rng.integers(3, 6)))
    img = img * rng.uniform(0.7, 1.1) + rng.uniform(-0.1, 0.1)
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(out_dir, per_class=650, split_counts=(500, 50, 100), size=32, seed=0, blend=0.35, noise=0.06) -> Path:
    """Write PNGs plus ``manifest.csv`` (with split hints) under ``out_dir``.

    ``split_counts`` gives train / validation / test images per class; any
    remainder of ``per_class`` is left unhinted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    hints = ["train"] * split_counts[0] + ["val"] * split_counts[1] + ["test"] * split_counts[2]
    rows = []
    for c, name in enumerate(STYLES):
        (out / name).mkdir(exist_ok=True)
        for i in range(per_class):
            img = render(c, rng, size, blend, noise)
            rel = f"{name}/{i:05d}.png"
            Image.fromarray((img * 255 + 0.5).astype(np.uint8)).save(out / rel)
            rows.append((rel, name, hints[i] if i < len(hints) else ""))
    with open(out / "manifest.csv", "w") as fh:
        for name in STYLES:
            fh.write(f"# class: {name}\n")
        fh.write("path,label,split\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    return out / "manifest.csv"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=650)
    p.add_argument("--splits", default="500,50,100", help="train,val,test images per class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blend", type=float, default=0.35)
    p.add_argument("--noise", type=float, default=0.06)
    a = p.parse_args(argv)
    counts = tuple(int(x) for x in a.splits.split(","))
    path = generate(a.out, a.per_class, counts, a.size, a.seed, a.blend, a.noise)
    print(path)


if __name__ == "__main__":
    main()
