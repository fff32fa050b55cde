"""Inference-time generation, reconstruction, interpolation and delta exchange.

Public functions take and return HWC float arrays in [-1, 1], matching
:func:`deltagan.data.preprocess_image`. Every call switches the model to eval
mode, so batch-norm layers use their running statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import save_png, to_uint8
from .networks import DeltaGAN

GEN_BATCH = 64


def _to_tensor(images, dtype) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype)


def _to_images(t: torch.Tensor) -> list[np.ndarray]:
    return list(t.detach().permute(0, 2, 3, 1).to(torch.float32).numpy())


def _dtype(model):
    return next(model.parameters()).dtype


def _latent_rng(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


@dataclass(frozen=True)
class GenerationRequest:
    conditional: list
    n_images: int
    seed: int = 0

    def __post_init__(self):
        if len(self.conditional) < 1:
            raise ValueError("at least one conditional image is required")
        if self.n_images < 0:
            raise ValueError("n_images must be nonnegative")


@torch.no_grad()
def generate(model: DeltaGAN, request: GenerationRequest, donors=None) -> list[np.ndarray]:
    """Generate ``n_images`` for one category from its K conditional images.

    Each output picks a conditional image uniformly (with replacement) and a
    fresh unit-Gaussian latent. With ``donors`` the fake delta is instead
    conditioned on a donor image drawn uniformly from that list and decoded
    against the conditional image's content (delta exchange).
    """
    model.eval()
    dtype = _dtype(model)
    n = request.n_images
    if n == 0:
        return []
    cond = _to_tensor(request.conditional, dtype)
    rng = np.random.default_rng(request.seed)
    pick = rng.integers(len(cond), size=n)
    donor_t = None
    if donors is not None:
        if len(donors) == 0:
            raise ValueError("donor list is empty")
        donor_t = _to_tensor(donors, dtype)
        donor_pick = rng.integers(len(donor_t), size=n)
    z = torch.randn(n, model.latent_dim(), generator=_latent_rng(request.seed), dtype=dtype)
    out = []
    for s in range(0, n, GEN_BATCH):
        sl = slice(s, s + GEN_BATCH)
        x1 = cond[pick[sl]]
        if donor_t is None:
            out.append(model.generate_from(x1, z[sl]))
        else:
            out.append(_exchange_fake(model, x1, donor_t[donor_pick[sl]], z[sl]))
    return _to_images(torch.cat(out))


@torch.no_grad()
def generate_with_latents(model: DeltaGAN, x1, z) -> list[np.ndarray]:
    """Generation path for explicit latents (one row of ``z`` per output)."""
    model.eval()
    dtype = _dtype(model)
    z = torch.as_tensor(z, dtype=dtype)
    if z.dim() == 1:
        z = z[None]
    x = _to_tensor(x1, dtype).expand(z.shape[0], -1, -1, -1)
    return _to_images(model.generate_from(x, z))


@torch.no_grad()
def reconstruct(model: DeltaGAN, x1, x2) -> np.ndarray | list[np.ndarray]:
    """Reconstruct ``x2`` from ``x1`` and their real delta. Accepts single images or batches."""
    model.eval()
    dtype = _dtype(model)
    single = np.asarray(x1).ndim == 3
    t1, t2 = _to_tensor(x1, dtype), _to_tensor(x2, dtype)
    if t1.shape != t2.shape:
        raise ValueError(f"shape mismatch: {tuple(t1.shape)} vs {tuple(t2.shape)}")
    out = _to_images(model.reconstruct_from(t1, t2))
    return out[0] if single else out


@torch.no_grad()
def interpolate(model: DeltaGAN, x1, z1, z2, steps: int = 11) -> list[np.ndarray]:
    """Decode ``a*z1 + (1-a)*z2`` for ``a`` going 1 -> 0 in ``steps`` uniform steps.

    Each image is decoded on its own so the endpoints match single-latent
    generation bit for bit.
    """
    if steps < 2:
        raise ValueError("steps must be at least 2")
    model.eval()
    dtype = _dtype(model)
    z1 = torch.as_tensor(z1, dtype=dtype).reshape(1, -1)
    z2 = torch.as_tensor(z2, dtype=dtype).reshape(1, -1)
    x = _to_tensor(x1, dtype)
    out = []
    for k in range(steps):
        a = 1.0 - k / (steps - 1)
        # z2 + a (z1 - z2) equals a z1 + (1 - a) z2 and is exact when z1 == z2
        z = z1 if k == 0 else z2 if k == steps - 1 else z2 + a * (z1 - z2)
        out.extend(_to_images(model.generate_from(x, z)))
    return out


@torch.no_grad()
def exchange_real_delta(model: DeltaGAN, x1, x2, x3) -> np.ndarray:
    """Apply the real delta of the pair (x2 -> x3) to the content of ``x1``."""
    model.eval()
    dtype = _dtype(model)
    t1, t2, t3 = (_to_tensor(x, dtype) for x in (x1, x2, x3))
    if not t1.shape == t2.shape == t3.shape:
        raise ValueError("x1, x2 and x3 must share a shape")
    delta = model.extract_real_delta(model.encode_delta_features(t2), model.encode_delta_features(t3))
    return _to_images(model.decode(delta, model.encode_content(t1)))[0]


def _exchange_fake(model, t1, t2, z):
    f2 = model.encode_delta_features(t2) if model.cfg.delta_mode in ("sample_specific", "linear") else None
    return model.decode(model.generate_fake_delta(z, f2), model.encode_content(t1))


@torch.no_grad()
def exchange_fake_delta(model: DeltaGAN, x1, x2, z) -> np.ndarray:
    """Fake delta conditioned on ``x2`` decoded with the content of ``x1``."""
    model.eval()
    dtype = _dtype(model)
    t1, t2 = _to_tensor(x1, dtype), _to_tensor(x2, dtype)
    if t1.shape != t2.shape:
        raise ValueError("x1 and x2 must share a shape")
    z = torch.as_tensor(z, dtype=dtype).reshape(1, -1)
    return _to_images(_exchange_fake(model, t1, t2, z))[0]


def image_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile rows of equally sized images into one uint8 array (short rows are padded)."""
    if not rows or not any(rows):
        raise ValueError("nothing to tile")
    h, w = next(img for r in rows for img in r).shape[:2]
    ncol = max(len(r) for r in rows)
    grid = np.zeros((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3), np.uint8)
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = to_uint8(img)
    return grid


def write_outputs(out_dir, name: str, rows, manifest: dict, save_individual: bool = True, grid_rows=None) -> dict:
    """Write a PNG grid, optional per-image PNGs and a JSON manifest under ``out_dir``.

    ``grid_rows`` (default ``rows``) lets the grid show extra context such as
    the conditional images.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid_path = out / f"{name}_grid.png"
    Image.fromarray(image_grid(grid_rows if grid_rows is not None else rows)).save(grid_path, format="PNG")
    files = []
    if save_individual:
        img_dir = out / name
        img_dir.mkdir(exist_ok=True)
        for i, r in enumerate(rows):
            for j, img in enumerate(r):
                p = img_dir / f"r{i:02d}_c{j:03d}.png"
                save_png(img, p)
                files.append(str(p))
    manifest = {**manifest, "grid": str(grid_path), "images": files}
    tmp = out / f"{name}_manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out / f"{name}_manifest.json")
    return manifest
