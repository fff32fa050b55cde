"""Generation metrics and classification-augmentation protocols.

Feature extractors are pluggable: anything with a ``label`` attribute and a
``features(images) -> (n, D)`` method works for FID. The bundled
:class:`SeenBackbone` is a small classifier trained on the seen categories;
its provenance label travels with every reported number so values from
different extractors are never compared.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression

from .data import CategorySplit, DatasetError, DatasetIndex, sample_eval_task
from .generation import GenerationRequest, generate, reconstruct

log = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors of equal length")
    cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
    return GaussianStats(x.mean(axis=0), (cov + cov.T) / 2, x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((A B)^(1/2)) via the symmetric form A^(1/2) B A^(1/2); negative eigenvalues clipped."""
    ra = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh(ra @ cov_b @ ra)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    for s in (a, b):
        if not (np.isfinite(s.mean).all() and np.isfinite(s.cov).all()):
            raise ValueError("non-finite Gaussian statistics")
    diff = a.mean - b.mean
    # both orderings agree in exact arithmetic; averaging makes the result symmetric in floating point too
    cross = 0.5 * (trace_sqrt_product(a.cov, b.cov) + trace_sqrt_product(b.cov, a.cov))
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross
    return max(float(d), 0.0)


def compute_fid(generated, real, extractor) -> float:
    if len(generated) < 2 or len(real) < 2:
        raise ValueError("both image sets need at least 2 images")
    return frechet_distance(gaussian_stats(extractor.features(generated)), gaussian_stats(extractor.features(real)))


def heldout_reconstruction(model, index: DatasetIndex, split: CategorySplit) -> dict:
    """Mean L1 of reconstructing x2 from x1 over all ordered pairs of each seen category in ``index``.

    ``copy_l1`` is the baseline that returns x1 unchanged.
    """
    recon, copy_ = [], []
    for cid in split.seen_ids:
        imgs = index.images[cid]
        pairs = [(i, j) for i in range(len(imgs)) for j in range(len(imgs)) if i != j]
        if not pairs:
            continue
        x1 = imgs[[i for i, _ in pairs]]
        x2 = imgs[[j for _, j in pairs]]
        out = np.stack(reconstruct(model, x1, x2))
        recon.append(np.abs(out - x2).mean(axis=(1, 2, 3)))
        copy_.append(np.abs(x1 - x2).mean(axis=(1, 2, 3)))
    if not recon:
        raise DatasetError("no seen category has two images to pair")
    recon, copy_ = np.concatenate(recon), np.concatenate(copy_)
    return {"l1": float(recon.mean()), "copy_l1": float(copy_.mean()), "n_pairs": len(recon)}


# ---------------------------------------------------------------------------
# Pairwise diversity


def lpips_diversity(images_per_category, distance_fn) -> float:
    """Mean over categories of the mean pairwise distance within the category.

    ``distance_fn(images)`` returns the ``(n, n)`` matrix of pairwise distances.
    """
    scores = per_category_diversity(images_per_category, distance_fn)
    if not scores:
        raise ValueError("no categories given")
    return float(np.mean(scores))


def per_category_diversity(images_per_category, distance_fn) -> list[float]:
    scores = []
    for imgs in images_per_category:
        n = len(imgs)
        if n < 2:
            raise ValueError("every category needs at least 2 images")
        d = np.asarray(distance_fn(imgs), dtype=np.float64)
        iu = np.triu_indices(n, k=1)
        scores.append(float(d[iu].mean()))
    return scores


# ---------------------------------------------------------------------------
# Seen-category backbone


def _to_tensor(images) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


class SeenBackbone(nn.Module):
    """Four conv stages with max-pooling, global pooling and a linear head."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width, 4 * width]
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(),
                nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(),
                nn.MaxPool2d(2),
            )
            for i in range(4)
        )
        self.head = nn.Linear(chans[-1], n_classes)
        self.width = width

    def layers(self, x) -> list[torch.Tensor]:
        out = []
        for s in self.stages:
            x = s(x)
            out.append(x)
        return out

    def forward(self, x):
        return self.head(self.layers(x)[-1].mean(dim=(2, 3)))


class BackboneExtractor:
    """Wraps a trained :class:`SeenBackbone` for metric use (always in eval mode).

    ``features`` is the flattened last stage map (the final pooling removed),
    ``embed`` is the globally pooled vector the classification head sees, and
    ``pairwise`` is the LPIPS-style distance matrix over all stages.
    """

    def __init__(self, net: SeenBackbone, label: str, batch: int = 128):
        self.net = net.eval()
        self.label = label
        self.batch = batch

    @torch.no_grad()
    def _layers(self, images):
        x = _to_tensor(images)
        chunks = [self.net.layers(x[i:i + self.batch]) for i in range(0, len(x), self.batch)]
        return [torch.cat(ls).double() for ls in zip(*chunks)]

    def features(self, images) -> np.ndarray:
        last = self._layers(images)[-1]
        return last.reshape(len(last), -1).numpy()

    def embed(self, images) -> np.ndarray:
        return self._layers(images)[-1].mean(dim=(2, 3)).numpy()

    def pairwise(self, images) -> np.ndarray:
        """Mean over stages of the spatially averaged squared distance of channel-normalized features."""
        total = 0
        layers = self._layers(images)
        for f in layers:
            f = f / (f.norm(dim=1, keepdim=True) + 1e-10)
            hw = f.shape[2] * f.shape[3]
            flat = f.reshape(len(f), -1)
            sq = (flat * flat).sum(dim=1)
            d = (sq[:, None] + sq[None, :] - 2 * flat @ flat.T) / hw
            total = total + d.clamp_min(0)
        d = (total / len(layers)).numpy()
        np.fill_diagonal(d, 0.0)
        return d

    def save(self, path) -> None:
        torch.save({"state": self.net.state_dict(), "label": self.label, "width": self.net.width,
                    "n_classes": self.net.head.out_features}, path)

    @classmethod
    def load(cls, path) -> "BackboneExtractor":
        d = torch.load(path, weights_only=True)
        net = SeenBackbone(d["n_classes"], d["width"])
        net.load_state_dict(d["state"])
        return cls(net, d["label"])


def train_backbone(
    index: DatasetIndex,
    split: CategorySplit,
    seed: int = 0,
    epochs: int = 15,
    width: int = 16,
    lr: float = 1e-3,
    batch_size: int = 32,
) -> BackboneExtractor:
    """Train the seen-category classifier used as feature extractor and classifier init."""
    xs, ys = [], []
    for cid in split.seen_ids:
        imgs = index.images[cid]
        xs.append(imgs)
        ys.append(np.full(len(imgs), split.seen_label(cid)))
    x = _to_tensor(np.concatenate(xs))
    y = torch.from_numpy(np.concatenate(ys)).long()
    rng = np.random.default_rng(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SeenBackbone(len(split.seen), width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        for s in range(0, len(x), batch_size):
            idx = torch.from_numpy(perm[s:s + batch_size])
            xb = x[idx]
            flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
            xb = torch.where(flip[:, None, None, None], xb.flip(3), xb)
            loss = F.cross_entropy(net(xb), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    label = f"seen-backbone(w={width},epochs={epochs},seed={seed},size={index.image_size})"
    return BackboneExtractor(net, label)


# ---------------------------------------------------------------------------
# Generation evaluation


def native_augmenter(model):
    """``augment(support, n, seed, category) -> images`` using the generation path."""

    def augment(support, n, seed, category):
        return generate(model, GenerationRequest(list(support), n, seed))

    return augment


def exchange_augmenter(model, index: DatasetIndex, split: CategorySplit, same_category: bool):
    """Delta-exchange augmenter: the fake delta comes from a donor image.

    Donors are the other images of the same unseen category (``same_category``)
    or all images of the other unseen categories.
    """

    def augment(support, n, seed, category):
        if same_category:
            donors = index.images[category]
        else:
            donors = np.concatenate([index.images[c] for c in split.unseen_ids if c != category])
        return generate(model, GenerationRequest(list(support), n, seed), donors=list(donors))

    return augment


def _conditional_subset(index, cid, k, seed):
    n = len(index.categories[cid].files)
    if k > n:
        raise DatasetError(f"category {cid} has only {n} images, cannot take {k}")
    pos = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return index.images[cid][np.sort(pos)]


def evaluate_generation(
    model,
    index: DatasetIndex,
    split: CategorySplit,
    extractor,
    k_shot: int = 1,
    n_per_category: int = 128,
    seed: int = 0,
    augmenter=None,
) -> dict:
    """FID (pooled over unseen categories) and per-category diversity of K-shot generations.

    The FID reference set is every real unseen image.
    """
    augment = augmenter or native_augmenter(model)
    generated = []
    for cid in split.unseen_ids:
        cond = _conditional_subset(index, cid, k_shot, derive_seed(seed, cid, 0))
        generated.append(augment(cond, n_per_category, derive_seed(seed, cid, 1), cid))
    real = np.concatenate([index.images[c] for c in split.unseen_ids])
    pooled = [img for g in generated for img in g]
    per_cat = per_category_diversity(generated, extractor.pairwise)
    return {
        "fid": compute_fid(pooled, real, extractor),
        "lpips": float(np.mean(per_cat)),
        "per_category_lpips": dict(zip(split.unseen_ids, per_cat)),
        "n_generated": len(pooled),
        "n_real": len(real),
        "k_shot": k_shot,
        "extractor": extractor.label,
    }


def kshot_sweep(model, index, split, k_values, extractor, n_per_category: int = 128, seed: int = 0) -> list[dict]:
    rows = []
    for k in k_values:
        r = evaluate_generation(model, index, split, extractor, k, n_per_category, seed)
        rows.append({"k": k, "fid": r["fid"], "lpips": r["lpips"], "extractor": extractor.label})
    return rows


# ---------------------------------------------------------------------------
# Classification protocols


def linear_probe_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Multinomial logistic regression (lbfgs, 1000 iterations, tol 1e-6) accuracy."""
    clf = LogisticRegression(max_iter=1000, tol=1e-6)
    clf.fit(train_x, train_y)
    return float(np.mean(clf.predict(test_x) == np.asarray(test_y)))


def fewshot_protocol(
    model,
    index: DatasetIndex,
    split: CategorySplit,
    backbone,
    n_way: int,
    c_shot: int,
    n_augment: int = 64,
    episodes: int = 10,
    seed: int = 0,
    augmenter=None,
) -> dict:
    """N-way C-shot accuracy with ``n_augment`` generated images added per category.

    Episode ``e`` samples its task with seed ``seed + e``.
    """
    if n_augment > 0 and model is None and augmenter is None:
        raise ValueError("augmentation requested without a generator")
    augment = augmenter or (native_augmenter(model) if model is not None else None)
    accs = []
    for e in range(episodes):
        task = sample_eval_task(index, split, n_way, c_shot, seed + e)
        xs, ys = task.arrays(index, "support")
        train_x, train_y = [backbone.embed(xs)], [ys]
        if n_augment > 0:
            for k, cid in enumerate(task.categories):
                support = index.images[cid][task.support[cid]]
                aug = augment(support, n_augment, derive_seed(seed, e, cid), cid)
                train_x.append(backbone.embed(aug))
                train_y.append(np.full(len(aug), k))
        qx, qy = task.arrays(index, "query")
        accs.append(linear_probe_accuracy(np.concatenate(train_x), np.concatenate(train_y), backbone.embed(qx), qy))
    return {"accuracy": float(np.mean(accs)), "per_episode": accs, "episodes": episodes,
            "n_way": n_way, "c_shot": c_shot, "n_augment": n_augment}


def finetune_classifier(backbone: BackboneExtractor, train_x, train_y, n_classes: int, seed: int,
                        steps: int = 150, lr: float = 1e-3, batch_size: int = 32) -> nn.Module:
    """Copy the seen backbone, attach a fresh head and fine-tune all weights.

    Batch-norm layers stay in eval mode (seen-category statistics) because
    the low-data training sets can be a handful of images.
    """
    net = copy.deepcopy(backbone.net)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net.head = nn.Linear(net.head.in_features, n_classes)
    net.eval()
    x = _to_tensor(train_x)
    y = torch.as_tensor(np.asarray(train_y)).long()
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(len(x), size=min(batch_size, len(x))))
        loss = F.cross_entropy(net(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return net


@torch.no_grad()
def _accuracy(net, x, y) -> float:
    pred = torch.cat([net(_to_tensor(x[i:i + 128])).argmax(1) for i in range(0, len(x), 128)])
    return float((pred.numpy() == np.asarray(y)).mean())


def lowdata_protocol(
    model,
    index: DatasetIndex,
    split: CategorySplit,
    backbone: BackboneExtractor,
    k_samples: int,
    n_augment: int = 64,
    seed: int = 0,
    augmenter=None,
    steps: int = 150,
) -> dict:
    """K training images per unseen category, the rest for testing.

    Reports the fine-tuned accuracy with generated augmentation and the
    un-augmented "standard" baseline on the same split.
    """
    rng = np.random.default_rng(seed)
    tr_x, tr_y, te_x, te_y, aug_x, aug_y = [], [], [], [], [], []
    augment = augmenter or native_augmenter(model)
    for k, cid in enumerate(split.unseen_ids):
        n = len(index.categories[cid].files)
        if not 1 <= k_samples <= n - 1:
            raise DatasetError(f"k_samples must be in [1, {n - 1}] for category {cid}")
        perm = rng.permutation(n)
        imgs = index.images[cid]
        tr_x.append(imgs[np.sort(perm[:k_samples])])
        te_x.append(imgs[np.sort(perm[k_samples:])])
        tr_y.append(np.full(k_samples, k))
        te_y.append(np.full(n - k_samples, k))
        if n_augment > 0:
            aug = augment(tr_x[-1], n_augment, derive_seed(seed, cid), cid)
            aug_x.append(np.asarray(aug))
            aug_y.append(np.full(len(aug), k))
    n_cls = len(split.unseen_ids)
    tr_x, tr_y = np.concatenate(tr_x), np.concatenate(tr_y)
    te_x, te_y = np.concatenate(te_x), np.concatenate(te_y)
    standard = _accuracy(finetune_classifier(backbone, tr_x, tr_y, n_cls, seed, steps), te_x, te_y)
    result = {"standard": standard, "k_samples": k_samples, "n_augment": n_augment, "n_test": len(te_y)}
    if n_augment > 0:
        ax = np.concatenate([tr_x] + aug_x)
        ay = np.concatenate([tr_y] + aug_y)
        result["augmented"] = _accuracy(finetune_classifier(backbone, ax, ay, n_cls, seed, steps), te_x, te_y)
    return result


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    fid: float
    lpips_diversity: float
    extractor: str
    per_category: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)


def write_csv(rows: list[dict], path, columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c, "")) for c in columns})
    tmp.replace(path)
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# Exchange rows reuse the full model and change only the generation path.
EXCHANGE_ROWS = {"sc_delta": True, "dc_delta": False}
ABLATION_COLUMNS = ("setting", "accuracy", "fid", "lpips")


def ablation_report(
    names,
    index: DatasetIndex,
    split: CategorySplit,
    base_config,
    backbone,
    out_dir,
    n_way: int = 2,
    c_shot: int = 1,
    n_augment: int = 64,
    episodes: int = 10,
    n_per_category: int = 128,
    seed: int = 0,
) -> list[dict]:
    """Train each named variant with the base budget and seed, then tabulate accuracy, FID and diversity.

    Trained variants are cached as ``out_dir/<name>/checkpoint.pt``.
    """
    from dataclasses import replace

    from .trainer import ABLATIONS, ensure_trained

    rows = []
    for name in names:
        if name not in ABLATIONS and name not in EXCHANGE_ROWS:
            raise ValueError(f"unknown ablation row {name!r}")
        variant = "full" if name in EXCHANGE_ROWS else name
        cfg = replace(base_config, ablation=ABLATIONS[variant])
        state = ensure_trained(index, split, cfg, Path(out_dir) / variant)
        model = state.model
        augmenter = None
        if name in EXCHANGE_ROWS:
            augmenter = exchange_augmenter(model, index, split, EXCHANGE_ROWS[name])
        acc = fewshot_protocol(model, index, split, backbone, n_way, c_shot, n_augment, episodes, seed, augmenter)
        gen = evaluate_generation(model, index, split, backbone, 1, n_per_category, seed, augmenter)
        rows.append({"setting": name, "accuracy": acc["accuracy"], "fid": gen["fid"], "lpips": gen["lpips"]})
        log.info("ablation %s: acc %.4f fid %.4f lpips %.4f", name, acc["accuracy"], gen["fid"], gen["lpips"])
    return rows
