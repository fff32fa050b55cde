"""Procedural toy corpus: coloured shapes whose pose, size and tint vary within a category."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star", "diamond", "bars")
_SUPERSAMPLE = 4


def _polygon(kind: str, cx: float, cy: float, r: float, angle: float) -> list[tuple[float, float]]:
    if kind == "square":
        pts = [(1, 1), (-1, 1), (-1, -1), (1, -1)]
        pts = [(x * 0.75, y * 0.75) for x, y in pts]
    elif kind == "triangle":
        pts = [(np.cos(t), np.sin(t)) for t in np.pi / 2 + np.arange(3) * 2 * np.pi / 3]
    elif kind == "diamond":
        pts = [(0, 1), (0.55, 0), (0, -1), (-0.55, 0)]
    elif kind == "star":
        t = np.pi / 2 + np.arange(10) * np.pi / 5
        rad = np.where(np.arange(10) % 2 == 0, 1.0, 0.45)
        pts = list(zip(rad * np.cos(t), rad * np.sin(t)))
    elif kind == "cross":
        a, b = 0.3, 1.0
        pts = [(a, b), (-a, b), (-a, a), (-b, a), (-b, -a), (-a, -a), (-a, -b), (a, -b), (a, -a), (b, -a), (b, a), (a, a)]
    else:
        raise ValueError(kind)
    c, s = np.cos(angle), np.sin(angle)
    return [(cx + r * (x * c - y * s), cy + r * (x * s + y * c)) for x, y in pts]


def render_shape(kind: str, hue: float, rng: np.random.Generator, size: int = 64) -> Image.Image:
    """Draw one instance of ``kind`` with randomized tint, pose, size and background."""
    big = size * _SUPERSAMPLE
    h = (hue + rng.uniform(-0.05, 0.05)) % 1.0
    fg = tuple(int(255 * v) for v in colorsys.hsv_to_rgb(h, rng.uniform(0.6, 1.0), rng.uniform(0.7, 1.0)))
    bg_level = rng.uniform(0.05, 0.3)
    bg = tuple(int(255 * v) for v in colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.3, bg_level))
    img = Image.new("RGB", (big, big), bg)
    draw = ImageDraw.Draw(img)
    r = big * rng.uniform(0.22, 0.38)
    cx = big / 2 + rng.uniform(-0.12, 0.12) * big
    cy = big / 2 + rng.uniform(-0.12, 0.12) * big
    angle = rng.uniform(0, 2 * np.pi)
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fg)
    elif kind == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fg)
        ri = r * rng.uniform(0.45, 0.65)
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=bg)
    elif kind == "bars":
        for k in (-1, 0, 1):
            off = k * r * 0.6
            c, s = np.cos(angle), np.sin(angle)
            pts = [(-0.18, -1), (0.18, -1), (0.18, 1), (-0.18, 1)]
            pts = [(cx + r * ((x + off / r) * c - y * s), cy + r * ((x + off / r) * s + y * c)) for x, y in pts]
            draw.polygon(pts, fill=fg)
    else:
        draw.polygon(_polygon(kind, cx, cy, r, angle), fill=fg)
    return img.resize((size, size), Image.LANCZOS)


def make_toy_corpus(out_dir, seed: int = 0, n_categories: int = 8, per_category: int = 40, image_size: int = 64) -> Path:
    """Write ``out_dir/<k>_<shape>/<i>.png``; output bytes depend only on the arguments."""
    if not 1 <= n_categories <= len(SHAPES):
        raise ValueError(f"n_categories must be in [1, {len(SHAPES)}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    hues = (np.arange(n_categories) / n_categories + rng.uniform(0, 1)) % 1.0
    for k in range(n_categories):
        d = out / f"{k}_{SHAPES[k]}"
        d.mkdir(exist_ok=True)
        for i in range(per_category):
            render_shape(SHAPES[k], hues[k], rng, image_size).save(d / f"{i:03d}.png", format="PNG")
    return out
