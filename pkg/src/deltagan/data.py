"""Dataset indexing, seen/unseen splits and episode sampling."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}
MAX_UNREADABLE_FRACTION = 0.10


class DatasetError(ValueError):
    pass


def preprocess_image(raw, image_size: int) -> np.ndarray:
    """Decode ``raw`` (bytes, path or PIL image) into an ``(S, S, 3)`` float32 array in [-1, 1]."""
    try:
        if isinstance(raw, Image.Image):
            img = raw
        elif isinstance(raw, (bytes, bytearray)):
            img = Image.open(io.BytesIO(raw))
        else:
            img = Image.open(raw)
        img = img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image: {exc}") from exc
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 127.5 - 1.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Inverse of :func:`preprocess_image` value mapping."""
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


@dataclass(frozen=True)
class Category:
    id: int
    label: str
    files: tuple[Path, ...]

    @property
    def pairable(self) -> bool:
        return len(self.files) >= 2


@dataclass(frozen=True, eq=False)
class DatasetIndex:
    """Categories found under ``root`` plus their decoded images.

    ``images[cid]`` is an ``(n, S, S, 3)`` array aligned with ``categories[cid].files``.
    """

    root: Path
    categories: tuple[Category, ...]
    image_size: int
    images: dict = field(repr=False)

    @property
    def n_images(self) -> int:
        return sum(len(c.files) for c in self.categories)

    @property
    def unpairable(self) -> list[int]:
        return [c.id for c in self.categories if not c.pairable]

    def category_by_label(self, label: str) -> Category:
        for c in self.categories:
            if c.label == label:
                return c
        raise KeyError(label)

    def subset(self, keep: dict[int, list[int]]) -> "DatasetIndex":
        """Index restricted to the given image positions per category (ids preserved)."""
        cats, imgs = [], {}
        for c in self.categories:
            pos = keep.get(c.id, list(range(len(c.files))))
            cats.append(Category(c.id, c.label, tuple(c.files[i] for i in pos)))
            imgs[c.id] = self.images[c.id][pos]
        return DatasetIndex(self.root, tuple(cats), self.image_size, imgs)


def load_dataset_index(root, image_size: int) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    cats, images = [], {}
    n_files = n_bad = 0
    for cid, d in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
        files, arrays = [], []
        for f in sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            n_files += 1
            try:
                arrays.append(preprocess_image(f, image_size))
            except DatasetError as exc:
                n_bad += 1
                log.warning("skipping unreadable image %s: %s", f, exc)
                continue
            files.append(f)
        cats.append(Category(cid, d.name, tuple(files)))
        images[cid] = np.stack(arrays) if arrays else np.zeros((0, image_size, image_size, 3), np.float32)
    if n_files == 0:
        raise DatasetError(f"empty dataset: no images under {root}")
    if n_bad > MAX_UNREADABLE_FRACTION * n_files:
        raise DatasetError(f"{n_bad} of {n_files} images unreadable (more than 10%)")
    index = DatasetIndex(root, tuple(cats), image_size, images)
    for cid in index.unpairable:
        log.warning("category %r has fewer than 2 images and cannot be paired", index.categories[cid].label)
    return index


@dataclass(frozen=True)
class CategorySplit:
    seen: frozenset
    unseen: frozenset
    seed: int

    @property
    def seen_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen))

    @property
    def unseen_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.unseen))

    def seen_label(self, cid: int) -> int:
        """Position of a seen category in the classifier head."""
        return self.seen_ids.index(cid)

    def to_json(self, index: DatasetIndex) -> str:
        names = lambda ids: [index.categories[i].label for i in sorted(ids)]  # noqa: E731
        return json.dumps({"seen": names(self.seen), "unseen": names(self.unseen), "seed": self.seed}, indent=2)

    @classmethod
    def from_json(cls, text: str, index: DatasetIndex) -> "CategorySplit":
        d = json.loads(text)
        ids = lambda labels: frozenset(index.category_by_label(l).id for l in labels)  # noqa: E731
        split = cls(ids(d["seen"]), ids(d["unseen"]), int(d.get("seed", 0)))
        if split.seen & split.unseen or len(split.seen | split.unseen) != len(index.categories):
            raise DatasetError("split must partition all categories into seen and unseen")
        return split


def split_categories(index: DatasetIndex, n_unseen: int, seed: int) -> CategorySplit:
    n = len(index.categories)
    if not 0 < n_unseen < n:
        raise DatasetError(f"n_unseen must be in (0, {n}), got {n_unseen}")
    order = np.random.default_rng(seed).permutation(n)
    unseen = frozenset(int(i) for i in order[:n_unseen])
    return CategorySplit(frozenset(range(n)) - unseen, unseen, seed)


def worker_seed(base_seed: int, worker: int) -> int:
    """Seed for the ``worker``-th independent sampler derived from a run seed."""
    return base_seed + worker


@dataclass(frozen=True)
class Episode:
    x1: np.ndarray
    x2: np.ndarray
    category: int
    i1: int
    i2: int


def _eligible_seen(index: DatasetIndex, split: CategorySplit) -> list[int]:
    return [cid for cid in split.seen_ids if index.categories[cid].pairable]


def sample_training_episode(index: DatasetIndex, split: CategorySplit, rng: np.random.Generator) -> Episode:
    eligible = _eligible_seen(index, split)
    if not eligible:
        raise DatasetError("no seen category has two or more images")
    cid = eligible[rng.integers(len(eligible))]
    n = len(index.categories[cid].files)
    i1 = int(rng.integers(n))
    i2 = int(rng.integers(n - 1))
    if i2 >= i1:
        i2 += 1
    imgs = index.images[cid]
    return Episode(imgs[i1], imgs[i2], cid, i1, i2)


class EpisodeSampler:
    """Single-consumer source of training batches with its own PRNG."""

    def __init__(self, index: DatasetIndex, split: CategorySplit, seed: int):
        self.index = index
        self.split = split
        self.rng = np.random.default_rng(seed)
        if not _eligible_seen(index, split):
            raise DatasetError("no seen category has two or more images")

    def sample(self) -> Episode:
        return sample_training_episode(self.index, self.split, self.rng)

    def batch(self, size: int) -> list[Episode]:
        return [self.sample() for _ in range(size)]

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


@dataclass(frozen=True)
class EvalTask:
    """N-way C-shot task over unseen categories; entries are image positions per category."""

    n_way: int
    c_shot: int
    categories: tuple[int, ...]
    support: dict
    query: dict
    seed: int

    def arrays(self, index: DatasetIndex, part: str):
        """Stacked images and task-local labels (0..n_way-1) of ``support`` or ``query``."""
        sel = getattr(self, part)
        xs = [index.images[cid][sel[cid]] for cid in self.categories]
        ys = [np.full(len(sel[cid]), k) for k, cid in enumerate(self.categories)]
        return np.concatenate(xs), np.concatenate(ys)


def sample_eval_task(index: DatasetIndex, split: CategorySplit, n_way: int, c_shot: int, seed: int) -> EvalTask:
    if n_way < 1 or c_shot < 1:
        raise DatasetError("n_way and c_shot must be positive")
    eligible = [cid for cid in split.unseen_ids if len(index.categories[cid].files) > c_shot]
    if len(eligible) < n_way:
        raise DatasetError(
            f"need {n_way} unseen categories with more than {c_shot} images, found {len(eligible)}"
        )
    rng = np.random.default_rng(seed)
    chosen = tuple(int(c) for c in rng.choice(eligible, size=n_way, replace=False))
    support, query = {}, {}
    for cid in chosen:
        perm = rng.permutation(len(index.categories[cid].files))
        support[cid] = sorted(int(i) for i in perm[:c_shot])
        query[cid] = sorted(int(i) for i in perm[c_shot:])
    return EvalTask(n_way, c_shot, chosen, support, query, seed)


def holdout_split(index: DatasetIndex, split: CategorySplit, per_category: int, seed: int):
    """Hold out ``per_category`` images of every seen category.

    Returns ``(train_index, heldout_index)``; unseen categories stay whole in both.
    """
    rng = np.random.default_rng(seed)
    train_keep, held_keep = {}, {}
    for cid in split.seen_ids:
        n = len(index.categories[cid].files)
        if n - per_category < 2 or per_category < 2:
            raise DatasetError(f"category {cid} too small to hold out {per_category} images")
        perm = rng.permutation(n)
        held_keep[cid] = sorted(int(i) for i in perm[:per_category])
        train_keep[cid] = sorted(int(i) for i in perm[per_category:])
    return index.subset(train_keep), index.subset(held_keep)
