"""Encoders, decoder and discriminators.

Tensors are NCHW throughout: images are ``(B, 3, S, S)`` in [-1, 1] and
feature maps / deltas are ``(B, C, S/16, S/16)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

DELTA_MODES = ("sample_specific", "prior", "global", "linear")
MATCH_INPUTS = ("triplet", "delta", "x1_delta", "x2_delta")

# Modules used at test time, per delta mode. Everything else is training-only.
_GENERATION_MODULES = {
    "sample_specific": ("enc_delta", "enc_content", "enc_fake", "decoder"),
    "global": ("enc_content", "enc_fake", "decoder"),
    "prior": ("enc_content", "decoder"),
    "linear": ("enc_delta", "enc_content", "enc_fake", "decoder"),
}


@dataclass(frozen=True)
class NetworkConfig:
    image_size: int = 64
    base_channels: int = 8
    feature_channels: int = 64
    z_dim: int = 128
    n_seen_categories: int = 6
    disc_channels: tuple[int, ...] = (8, 16, 32, 64)
    match_hidden: int = 128
    delta_mode: str = "sample_specific"
    match_inputs: str = "triplet"

    def __post_init__(self):
        if self.image_size % 16 or self.image_size < 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.delta_mode not in DELTA_MODES:
            raise ValueError(f"unknown delta_mode {self.delta_mode!r}")
        if self.match_inputs not in MATCH_INPUTS:
            raise ValueError(f"unknown match_inputs {self.match_inputs!r}")
        if min(self.base_channels, self.feature_channels, self.z_dim, self.n_seen_categories) < 1:
            raise ValueError("channel counts, z_dim and n_seen_categories must be positive")
        if not self.disc_channels:
            raise ValueError("disc_channels must list at least one group")
        object.__setattr__(self, "disc_channels", tuple(int(c) for c in self.disc_channels))

    @property
    def feature_size(self) -> int:
        return self.image_size // 16

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.feature_channels, self.feature_size, self.feature_size)

    @property
    def n_extractor_layers(self) -> int:
        return len(self.disc_channels)

    @property
    def encoder_channels(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.feature_channels) for i in range(4)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "disc_channels": tuple(d["disc_channels"])})


class ConvLReluBN(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2),
            nn.LeakyReLU(0.2),
            nn.BatchNorm2d(out_ch),
        )


class ResBlock(nn.Module):
    """Three Conv-LReLU-BN layers with a residual path, then an optional resample."""

    def __init__(self, in_ch: int, out_ch: int, resample: str | None = None):
        super().__init__()
        self.body = nn.Sequential(
            ConvLReluBN(in_ch, out_ch), ConvLReluBN(out_ch, out_ch), ConvLReluBN(out_ch, out_ch)
        )
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()
        self.resample = resample

    def forward(self, x):
        out = self.skip(x) + self.body(x)
        if self.resample == "down":
            out = F.avg_pool2d(out, 2)
        elif self.resample == "up":
            out = F.interpolate(out, scale_factor=2, mode="nearest")
        return out


class Encoder(nn.Module):
    """Four downsampling residual blocks and one intermediate block."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        chans = [3] + cfg.encoder_channels
        blocks = [ResBlock(chans[i], chans[i + 1], "down") for i in range(4)]
        blocks.append(ResBlock(chans[-1], cfg.feature_channels))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class Decoder(nn.Module):
    """Four upsampling residual blocks and a tanh output layer."""

    def __init__(self, cfg: NetworkConfig, in_ch: int):
        super().__init__()
        chans = [in_ch] + cfg.encoder_channels[::-1]
        self.blocks = nn.Sequential(*[ResBlock(chans[i], chans[i + 1], "up") for i in range(4)])
        self.to_rgb = nn.Conv2d(chans[-1], 3, 3, padding=1)

    def forward(self, x):
        return torch.tanh(self.to_rgb(self.blocks(x)))


class PreActBlock(nn.Module):
    """ReLU-first residual block used by the image discriminator."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        return self.skip(x) + h


class FeatureExtractor(nn.Module):
    """Shared trunk of the image discriminator; returns one map per group."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        first = cfg.disc_channels[0]
        self.stem = nn.Conv2d(3, first, 3, padding=1)
        groups = []
        prev = first
        for k in cfg.disc_channels:
            groups.append(nn.Sequential(PreActBlock(prev, k), PreActBlock(k, k), nn.AvgPool2d(2)))
            prev = k
        self.groups = nn.ModuleList(groups)

    def forward(self, x) -> list[torch.Tensor]:
        h = self.stem(x)
        feats = []
        for g in self.groups:
            h = g(h)
            feats.append(h)
        return feats


class ImageDiscriminator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.extractor = FeatureExtractor(cfg)
        self.adv_head = nn.Linear(cfg.disc_channels[-1], 1)
        self.cls_head = nn.Linear(cfg.disc_channels[-1], cfg.n_seen_categories)

    def forward(self, x):
        feats = self.extractor(x)
        pooled = F.leaky_relu(feats[-1], 0.2).mean(dim=(2, 3))
        return feats, self.adv_head(pooled).squeeze(1), self.cls_head(pooled)


class MatchDiscriminator(nn.Module):
    """Four FC layers over globally pooled (features, features, delta) inputs."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        d, c = cfg.disc_channels[-1], cfg.feature_channels
        in_dim = {"triplet": 2 * d + c, "delta": c, "x1_delta": d + c, "x2_delta": d + c}[cfg.match_inputs]
        h = cfg.match_hidden
        self.inputs = cfg.match_inputs
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, h), nn.LeakyReLU(0.2),
            nn.Linear(h, h), nn.LeakyReLU(0.2),
            nn.Linear(h, h), nn.LeakyReLU(0.2),
            nn.Linear(h, 1),
        )

    def forward(self, f1, f2, delta):
        pooled = {"f1": f1.mean(dim=(2, 3)), "f2": f2.mean(dim=(2, 3)), "d": delta.mean(dim=(2, 3))}
        keys = {"triplet": ("f1", "f2", "d"), "delta": ("d",), "x1_delta": ("f1", "d"), "x2_delta": ("f2", "d")}
        return self.mlp(torch.cat([pooled[k] for k in keys[self.inputs]], dim=1)).squeeze(1)


class DeltaGAN(nn.Module):
    """All seven networks, with the generator/discriminator parameter partition.

    ``enc_real`` is absent in linear mode, where the real delta is the raw
    feature difference. In prior mode ``enc_real`` additionally predicts a
    log-variance so the real delta can be KL-regularized.
    """

    GENERATOR = ("enc_delta", "enc_real", "enc_content", "enc_fake", "decoder")
    DISCRIMINATOR = ("disc_image", "disc_match")

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_channels
        self.enc_delta = Encoder(cfg)
        self.enc_content = Encoder(cfg)
        if cfg.delta_mode != "linear":
            layers = [ConvLReluBN(c, c), ConvLReluBN(c, c)]
            if cfg.delta_mode == "prior":
                layers.append(nn.Conv2d(c, 2 * c, 1))
            self.enc_real = nn.Sequential(*layers)
        else:
            self.enc_real = None
        fake_in = cfg.z_dim if cfg.delta_mode == "global" else cfg.z_dim + c
        self.enc_fake = nn.Sequential(ConvLReluBN(fake_in, c), ConvLReluBN(c, c))
        self.decoder = Decoder(cfg, c if cfg.delta_mode == "linear" else 2 * c)
        self.disc_image = ImageDiscriminator(cfg)
        self.disc_match = MatchDiscriminator(cfg)

    # -- parameter partition ------------------------------------------------
    def _params(self, names) -> Iterator[nn.Parameter]:
        for name in names:
            module = getattr(self, name)
            if module is not None:
                yield from module.parameters()

    def generator_parameters(self):
        return list(self._params(self.GENERATOR))

    def discriminator_parameters(self):
        return list(self._params(self.DISCRIMINATOR))

    def generation_modules(self) -> tuple[str, ...]:
        return _GENERATION_MODULES[self.cfg.delta_mode]

    # -- checks -------------------------------------------------------------
    def _check_image(self, x):
        s = self.cfg.image_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, s, s):
            raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")

    def _check_features(self, *maps):
        for m in maps:
            if m.dim() != 4 or tuple(m.shape[1:]) != self.cfg.feature_shape:
                raise ValueError(f"expected feature maps of shape (B, {self.cfg.feature_shape}), got {tuple(m.shape)}")
        if len({m.shape[0] for m in maps}) > 1:
            raise ValueError("batch sizes differ")

    # -- forward operations -------------------------------------------------
    def encode_delta_features(self, x):
        self._check_image(x)
        return self.enc_delta(x)

    def encode_content(self, x):
        self._check_image(x)
        return self.enc_content(x)

    def real_delta_posterior(self, f1, f2):
        """Mean and log-variance of the real delta (prior mode only)."""
        if self.cfg.delta_mode != "prior":
            raise RuntimeError("real_delta_posterior is only defined in prior mode")
        self._check_features(f1, f2)
        mu, logvar = self.enc_real(f2 - f1).chunk(2, dim=1)
        return mu, logvar.clamp(-10.0, 10.0)

    def extract_real_delta(self, f1, f2):
        self._check_features(f1, f2)
        diff = f2 - f1
        if self.cfg.delta_mode == "linear":
            return diff
        if self.cfg.delta_mode == "prior":
            return self.real_delta_posterior(f1, f2)[0]
        return self.enc_real(diff)

    def generate_fake_delta(self, z, f1=None):
        """Fake delta from a latent batch ``z`` (B, z_dim) tiled over the feature grid.

        In prior mode the delta is the latent itself, reshaped to a feature map,
        so ``z`` must then have ``prod(feature_shape)`` entries per row.
        """
        cfg = self.cfg
        if cfg.delta_mode == "prior":
            n = cfg.feature_channels * cfg.feature_size**2
            if z.dim() != 2 or z.shape[1] != n:
                raise ValueError(f"prior-mode latent must have shape (B, {n}), got {tuple(z.shape)}")
            return z.view(-1, *cfg.feature_shape)
        if z.dim() != 2 or z.shape[1] != cfg.z_dim:
            raise ValueError(f"z must have shape (B, {cfg.z_dim}), got {tuple(z.shape)}")
        s = cfg.feature_size
        tiled = z[:, :, None, None].expand(-1, -1, s, s)
        if cfg.delta_mode == "global":
            return self.enc_fake(tiled)
        self._check_features(f1)
        if f1.shape[0] != z.shape[0]:
            raise ValueError("z and f1 batch sizes differ")
        return self.enc_fake(torch.cat([tiled, f1], dim=1))

    def latent_dim(self) -> int:
        cfg = self.cfg
        if cfg.delta_mode == "prior":
            return cfg.feature_channels * cfg.feature_size**2
        return cfg.z_dim

    def decode(self, delta, content):
        self._check_features(delta, content)
        if self.cfg.delta_mode == "linear":
            return self.decoder(delta + content)
        return self.decoder(torch.cat([delta, content], dim=1))

    def discriminate_image(self, x):
        """Return ``(features, adv_score, category_logits)`` for an image batch."""
        self._check_image(x)
        return self.disc_image(x)

    def discriminate_delta_match(self, f1, f2, delta):
        """Matching score for (conditional features, output features, delta).

        ``f1``/``f2`` are the last extractor maps from :meth:`discriminate_image`.
        """
        if f1.shape != f2.shape or f1.shape[1] != self.cfg.disc_channels[-1]:
            raise ValueError("extractor feature shapes do not match the config")
        self._check_features(delta)
        return self.disc_match(f1, f2, delta)

    # -- composite paths ----------------------------------------------------
    def generate_from(self, x1, z):
        """Generation path: decode a fake delta for ``x1`` against its content."""
        f1 = self.encode_delta_features(x1) if self.cfg.delta_mode in ("sample_specific", "linear") else None
        return self.decode(self.generate_fake_delta(z, f1), self.encode_content(x1))

    def reconstruct_from(self, x1, x2):
        f1 = self.encode_delta_features(x1)
        f2 = self.encode_delta_features(x2)
        return self.decode(self.extract_real_delta(f1, f2), self.encode_content(x1))


def build_networks(cfg: NetworkConfig, seed: int = 0) -> DeltaGAN:
    """Construct freshly initialized networks; initialization depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DeltaGAN(cfg)
    return model


def _count(params) -> int:
    return sum(p.numel() for p in params if p.requires_grad)


def count_parameters(model: DeltaGAN, trained_modules=None) -> dict:
    """Trainable scalar counts for the training phase and the generation-only test phase.

    ``trained_modules`` restricts the training count to the modules an ablation
    actually optimizes (default: every module present).
    """
    per_module = {}
    for name in DeltaGAN.GENERATOR + DeltaGAN.DISCRIMINATOR:
        module = getattr(model, name)
        if module is not None:
            per_module[name] = _count(module.parameters())
    testing = sum(per_module[n] for n in model.generation_modules())
    trained = per_module if trained_modules is None else {n: per_module[n] for n in trained_modules}
    return {
        "training": sum(trained.values()),
        "testing": testing,
        "testing_modules": list(model.generation_modules()),
        "per_module": per_module,
    }
