"""Objective terms and their generator/discriminator totals.

Element-wise terms use mean reduction so the default weights do not depend
on image or feature-map size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

MS_EPS = 1e-5

# Term name -> weight attribute on LossWeights (None means unit weight).
GENERATOR_TERMS = {
    "adv_i_g": None,
    "adv_m_g": None,
    "l1": "lambda_1",
    "c_g": None,
    "fm": "lambda_fm",
    "ms": "lambda_ms",
    "kl": "kl_weight",
}
DISCRIMINATOR_TERMS = ("adv_i_d", "adv_m_d", "c_d")
# Optional terms only exist in some pipelines and never count as missing.
OPTIONAL_TERMS = frozenset({"kl"})
CSV_COLUMNS = ("step", "l1", "fm", "adv_i_g", "adv_i_d", "c_g", "c_d", "adv_m_g", "adv_m_d", "ms", "kl", "total_g", "total_d")


@dataclass(frozen=True)
class LossWeights:
    lambda_1: float = 10.0
    lambda_fm: float = 0.1
    lambda_ms: float = 10.0
    kl_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda_1", "lambda_fm", "lambda_ms", "kl_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(x_hat, x):
    _same_shape(x_hat, x)
    return (x_hat - x).abs().mean()


def feature_matching_loss(feats_hat, feats_real):
    if len(feats_hat) != len(feats_real) or not feats_hat:
        raise ValueError("feature lists must be nonempty and of equal length")
    total = 0
    for fh, fr in zip(feats_hat, feats_real):
        _same_shape(fh, fr)
        total = total + (fr - fh).abs().mean()
    return total / len(feats_hat)


def hinge_adversarial(real_scores, fake_scores):
    """Hinge loss pair ``(d_loss, g_loss)``.

    Used for both the image discriminator and the delta-matching discriminator.
    """
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("score batches must be nonempty")
    d_loss = F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()
    g_loss = -fake_scores.mean()
    return d_loss, g_loss


hinge_adv_image = hinge_adversarial
hinge_adv_delta_match = hinge_adversarial


def classification_loss(logits, target):
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(target, device=logits.device).reshape(-1)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= logits.shape[1]):
        raise ValueError(f"category index out of range for {logits.shape[1]} categories")
    return F.cross_entropy(logits, target)


def mode_seeking_loss(z1, z2, feats1, feats2, eps: float = MS_EPS):
    """Latent distance over feature distance, averaged over layers and batch.

    Distances are per-sample mean absolute differences. 1-D ``z`` is treated
    as a single sample.
    """
    _same_shape(z1, z2)
    if len(feats1) != len(feats2) or not feats1:
        raise ValueError("feature lists must be nonempty and of equal length")
    if z1.dim() == 1:
        z1, z2 = z1.unsqueeze(0), z2.unsqueeze(0)
        feats1 = [f.unsqueeze(0) for f in feats1]
        feats2 = [f.unsqueeze(0) for f in feats2]
    b = z1.shape[0]
    z_dist = (z1 - z2).abs().reshape(b, -1).mean(dim=1)
    ratios = 0
    for f1, f2 in zip(feats1, feats2):
        _same_shape(f1, f2)
        f_dist = (f1 - f2).abs().reshape(b, -1).mean(dim=1)
        ratios = ratios + z_dist / (f_dist + eps)
    return (ratios / len(feats1)).mean()


def kl_unit_gaussian(mu, logvar):
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def total_generator_loss(terms: dict, weights: LossWeights, disabled=frozenset()):
    total = 0
    for name, attr in GENERATOR_TERMS.items():
        if name in disabled:
            continue
        if name not in terms:
            if name in OPTIONAL_TERMS:
                continue
            raise KeyError(f"generator term {name!r} missing and not ablated")
        w = 1.0 if attr is None else getattr(weights, attr)
        total = total + w * terms[name]
    return total


def total_discriminator_loss(terms: dict, disabled=frozenset()):
    total = 0
    for name in DISCRIMINATOR_TERMS:
        if name in disabled:
            continue
        if name not in terms:
            raise KeyError(f"discriminator term {name!r} missing and not ablated")
        total = total + terms[name]
    return total


@dataclass
class LossReport:
    step: int
    terms: dict = field(default_factory=dict)
    total_g: float = 0.0
    total_d: float = 0.0

    def is_finite(self) -> bool:
        vals = list(self.terms.values()) + [self.total_g, self.total_d]
        return all(v == v and abs(v) != float("inf") for v in vals)

    def row(self) -> dict:
        out = {c: "" for c in CSV_COLUMNS}
        out["step"] = self.step
        for k, v in self.terms.items():
            out[k] = repr(float(v))
        out["total_g"] = repr(float(self.total_g))
        out["total_d"] = repr(float(self.total_d))
        return out
