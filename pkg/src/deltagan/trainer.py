"""Alternating discriminator/generator optimization, ablations and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import CategorySplit, DatasetIndex, EpisodeSampler, worker_seed
from .losses import (
    CSV_COLUMNS,
    LossReport,
    LossWeights,
    classification_loss,
    feature_matching_loss,
    hinge_adv_delta_match,
    hinge_adv_image,
    kl_unit_gaussian,
    mode_seeking_loss,
    reconstruction_loss,
    total_discriminator_loss,
    total_generator_loss,
)
from .networks import DELTA_MODES, MATCH_INPUTS, DeltaGAN, NetworkConfig, build_networks

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deltagan.checkpoint"
CHECKPOINT_VERSION = 1

LOSS_GROUPS = {
    "l1": ("l1",),
    "ms": ("ms",),
    "fm": ("fm",),
    "c": ("c_g", "c_d"),
    "adv_i": ("adv_i_g", "adv_i_d"),
    "adv_m": ("adv_m_g", "adv_m_d"),
}


class TrainingDiverged(RuntimeError):
    def __init__(self, report: LossReport):
        super().__init__(f"non-finite loss at step {report.step}: {report.terms}")
        self.report = report


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class AblationSpec:
    """One row of the ablation study.

    ``drop`` names loss groups (see ``LOSS_GROUPS``) removed from both totals.
    ``real_delta=False`` removes the reconstruction path together with the
    delta-matching, L1 and feature-matching terms.
    """

    drop: frozenset = frozenset()
    real_delta: bool = True
    delta_mode: str = "sample_specific"
    match_inputs: str = "triplet"

    def __post_init__(self):
        object.__setattr__(self, "drop", frozenset(self.drop))
        unknown = self.drop - set(LOSS_GROUPS)
        if unknown:
            raise ValueError(f"unknown loss groups {sorted(unknown)}")
        if self.delta_mode not in DELTA_MODES or self.match_inputs not in MATCH_INPUTS:
            raise ValueError("unknown delta mode or delta-matching input mode")
        if not self.real_delta and self.delta_mode in ("prior", "linear"):
            raise ValueError(f"delta mode {self.delta_mode!r} needs the real-delta path")
        if (not self.real_delta or "adv_m" in self.drop) and self.match_inputs != "triplet":
            raise ValueError("delta-matching input mode set while the delta-matching loss is removed")
        if self.delta_mode == "prior" and self.match_inputs != "triplet":
            raise ValueError("prior delta and a simplified delta-matching discriminator are separate rows")

    @property
    def disabled_terms(self) -> frozenset:
        groups = set(self.drop)
        if not self.real_delta:
            groups |= {"l1", "fm", "adv_m"}
        return frozenset(t for g in groups for t in LOSS_GROUPS[g])

    def to_dict(self) -> dict:
        return {**asdict(self), "drop": sorted(self.drop)}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationSpec":
        return cls(**{**d, "drop": frozenset(d.get("drop", ()))})


ABLATIONS = {
    "full": AblationSpec(),
    "wo_l1": AblationSpec(drop={"l1"}),
    "wo_ms": AblationSpec(drop={"ms"}),
    "wo_fm": AblationSpec(drop={"fm"}),
    "wo_c": AblationSpec(drop={"c"}),
    "wo_adv_i": AblationSpec(drop={"adv_i"}),
    "wo_adv_m": AblationSpec(drop={"adv_m"}),
    "wo_real_delta": AblationSpec(real_delta=False),
    "prior_delta": AblationSpec(delta_mode="prior"),
    "global_delta": AblationSpec(delta_mode="global"),
    "simple_d1": AblationSpec(match_inputs="delta"),
    "simple_d2": AblationSpec(match_inputs="x1_delta"),
    "simple_d3": AblationSpec(match_inputs="x2_delta"),
    "linear_delta": AblationSpec(delta_mode="linear"),
}


def ablation_from_names(names) -> AblationSpec:
    """Merge named ablations (``"wo_ms,wo_fm"`` or a list); conflicting modes raise."""
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    spec = AblationSpec()
    default = AblationSpec()
    for name in names or ["full"]:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        other = ABLATIONS[name]
        for attr in ("delta_mode", "match_inputs", "real_delta"):
            mine, theirs = getattr(spec, attr), getattr(other, attr)
            if mine != getattr(default, attr) and theirs != getattr(default, attr) and mine != theirs:
                raise ValueError(f"conflicting ablations on {attr}: {mine!r} vs {theirs!r}")
        spec = AblationSpec(
            drop=spec.drop | other.drop,
            real_delta=spec.real_delta and other.real_delta,
            delta_mode=other.delta_mode if other.delta_mode != default.delta_mode else spec.delta_mode,
            match_inputs=other.match_inputs if other.match_inputs != default.match_inputs else spec.match_inputs,
        )
    return spec


@dataclass(frozen=True)
class Pipeline:
    """Network config plus loss switches realizing one ablation row."""

    network: NetworkConfig
    disabled: frozenset
    uses_reconstruction: bool
    uses_match: bool
    generator_modules: tuple
    discriminator_modules: tuple


def apply_ablation(spec: AblationSpec, network: NetworkConfig) -> Pipeline:
    net = replace(network, delta_mode=spec.delta_mode, match_inputs=spec.match_inputs)
    disabled = spec.disabled_terms
    uses_match = "adv_m_g" not in disabled
    gen = ["enc_delta", "enc_content", "enc_fake", "decoder"]
    if spec.real_delta and spec.delta_mode != "linear":
        gen.insert(1, "enc_real")
    if spec.delta_mode == "prior":
        gen.remove("enc_fake")
    if spec.delta_mode == "global" and not spec.real_delta:
        gen.remove("enc_delta")
    disc = ["disc_image"] + (["disc_match"] if uses_match else [])
    return Pipeline(net, disabled, spec.real_delta, uses_match, tuple(gen), tuple(disc))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 20
    steps_per_epoch: int = 200
    betas: tuple = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(image_size=32))
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 0:
            raise ValueError("batch_size and steps_per_epoch must be positive, epochs nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def pipeline(self) -> Pipeline:
        return apply_ablation(self.ablation, self.network)

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch,
            "betas": list(self.betas),
            "weights": asdict(self.weights),
            "ablation": self.ablation.to_dict(),
            "network": self.network.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            learning_rate=d["learning_rate"],
            batch_size=d["batch_size"],
            epochs=d["epochs"],
            steps_per_epoch=d["steps_per_epoch"],
            betas=tuple(d["betas"]),
            weights=LossWeights(**d["weights"]),
            ablation=AblationSpec.from_dict(d["ablation"]),
            network=NetworkConfig.from_dict(d["network"]),
            seed=d["seed"],
        )


@dataclass
class TrainState:
    model: DeltaGAN
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    latent_rng: torch.Generator
    config: TrainConfig
    step: int = 0
    sampler_state: dict | None = None

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "network_config": self.model.cfg.to_dict(),
            "train_config": self.config.to_dict(),
            "step": self.step,
            "model": self.model.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "latent_rng": self.latent_rng.get_state(),
            "sampler_rng": self.sampler_state,
        }

    def clone(self) -> "TrainState":
        buf = io.BytesIO()
        torch.save(self.state_dict(), buf)
        buf.seek(0)
        return state_from_dict(torch.load(buf, weights_only=False))


def _optimizers(model: DeltaGAN, pipeline: Pipeline, config: TrainConfig):
    def params(names):
        return [p for n in names for p in getattr(model, n).parameters()]

    opt_g = torch.optim.Adam(params(pipeline.generator_modules), lr=config.learning_rate, betas=config.betas)
    opt_d = torch.optim.Adam(params(pipeline.discriminator_modules), lr=config.learning_rate, betas=config.betas)
    return opt_g, opt_d


def init_state(config: TrainConfig, dtype=torch.float32) -> TrainState:
    """Fresh state. Seeds: init = seed, episode sampler = seed+1, latents = seed+2."""
    pipeline = config.pipeline
    model = build_networks(pipeline.network, seed=config.seed).to(dtype)
    opt_g, opt_d = _optimizers(model, pipeline, config)
    rng = torch.Generator().manual_seed(worker_seed(config.seed, 2))
    return TrainState(model, opt_g, opt_d, rng, config)


def state_from_dict(d: dict) -> TrainState:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a deltagan checkpoint")
    config = TrainConfig.from_dict(d["train_config"])
    net_cfg = NetworkConfig.from_dict(d["network_config"])
    if net_cfg != config.pipeline.network:
        raise CheckpointError("checkpoint network config disagrees with its training config")
    dtype = next(iter(d["model"].values())).dtype
    state = init_state(config, dtype=dtype)
    try:
        state.model.load_state_dict(d["model"])
        state.opt_g.load_state_dict(d["opt_g"])
        state.opt_d.load_state_dict(d["opt_d"])
    except (RuntimeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"checkpoint does not match its network config: {exc}") from exc
    state.latent_rng.set_state(d["latent_rng"])
    state.step = int(d["step"])
    state.sampler_state = d["sampler_rng"]
    return state


def save_checkpoint(state: TrainState, path) -> None:
    """Atomic write of the full training state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state.state_dict(), tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    try:
        d = torch.load(Path(path), weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise CheckpointError(f"{path} is not a deltagan checkpoint")
    return state_from_dict(d)


def episodes_to_tensors(episodes, split: CategorySplit, dtype=torch.float32):
    x1 = torch.from_numpy(np.stack([e.x1 for e in episodes])).permute(0, 3, 1, 2).to(dtype)
    x2 = torch.from_numpy(np.stack([e.x2 for e in episodes])).permute(0, 3, 1, 2).to(dtype)
    labels = torch.tensor([split.seen_label(e.category) for e in episodes])
    return x1, x2, labels


def draw_latents(model: DeltaGAN, batch: int, rng: torch.Generator, dtype=torch.float32):
    """Two latent batches plus reparameterization noise (prior mode only)."""
    z = torch.randn(2, batch, model.latent_dim(), generator=rng, dtype=dtype)
    noise = None
    if model.cfg.delta_mode == "prior":
        noise = torch.randn(batch, *model.cfg.feature_shape, generator=rng, dtype=dtype)
    return z[0], z[1], noise


def generator_forward(model: DeltaGAN, pipeline: Pipeline, x1, x2, z1, z2, noise=None) -> dict:
    """Both dataflow paths: reconstruction (if enabled) and two fake generations."""
    b = x1.shape[0]
    mode = pipeline.network.delta_mode
    out = {}
    if pipeline.uses_reconstruction:
        f1, f2 = model.encode_delta_features(torch.cat([x1, x2])).split(b)
    elif mode in ("sample_specific", "linear"):
        f1, f2 = model.encode_delta_features(x1), None
    else:
        f1 = f2 = None
    content = model.encode_content(x1)
    deltas = []
    if pipeline.uses_reconstruction:
        if mode == "prior":
            mu, logvar = model.real_delta_posterior(f1, f2)
            out["kl"] = kl_unit_gaussian(mu, logvar)
            delta_real = mu + (0.5 * logvar).exp() * noise
        else:
            delta_real = model.extract_real_delta(f1, f2)
        deltas.append(delta_real)
        out["delta_real"] = delta_real
    f1_fake = torch.cat([f1, f1]) if f1 is not None else None
    delta_fake = model.generate_fake_delta(torch.cat([z1, z2]), f1_fake)
    deltas.append(delta_fake)
    all_deltas = torch.cat(deltas)
    images = model.decode(all_deltas, content.repeat(all_deltas.shape[0] // b, 1, 1, 1))
    parts = images.split(b)
    if pipeline.uses_reconstruction:
        out["x_hat"], parts = parts[0], parts[1:]
    out["x_fake1"], out["x_fake2"] = parts
    out["delta_fake1"] = delta_fake[:b]
    return out


def discriminator_terms(model: DeltaGAN, pipeline: Pipeline, fwd: dict, x1, x2, labels) -> dict:
    """Discriminator-side terms; generator outputs in ``fwd`` are treated as constants."""
    b = x1.shape[0]
    fake = fwd["x_fake1"].detach()
    imgs = [x2, fake] + ([x1] if pipeline.uses_match else [])
    feats, adv, logits = model.discriminate_image(torch.cat(imgs))
    terms = {}
    terms["adv_i_d"] = hinge_adv_image(adv[:b], adv[b:2 * b])[0]
    terms["c_d"] = classification_loss(logits[:b], labels)
    if pipeline.uses_match:
        last = feats[-1]
        f_x2, f_fake, f_x1 = last[:b], last[b:2 * b], last[2 * b:]
        real = model.discriminate_delta_match(f_x1, f_x2, fwd["delta_real"].detach())
        fake_s = model.discriminate_delta_match(f_x1, f_fake, fwd["delta_fake1"].detach())
        terms["adv_m_d"] = hinge_adv_delta_match(real, fake_s)[0]
    return {k: v for k, v in terms.items() if k not in pipeline.disabled}


def generator_terms(model: DeltaGAN, pipeline: Pipeline, fwd: dict, x1, x2, labels, z1, z2) -> dict:
    b = x1.shape[0]
    gen = [fwd["x_fake1"], fwd["x_fake2"]]
    if "x_hat" in fwd:
        gen.append(fwd["x_hat"])
    feats, adv, logits = model.discriminate_image(torch.cat(gen))
    with torch.no_grad():
        real_feats, _, _ = model.discriminate_image(torch.cat([x2, x1]))
    terms = {}
    terms["adv_i_g"] = hinge_adv_image(adv[:b], adv[:b])[1]
    terms["c_g"] = classification_loss(logits[:b], labels)
    terms["ms"] = mode_seeking_loss(z1, z2, [f[:b] for f in feats], [f[b:2 * b] for f in feats])
    if pipeline.uses_reconstruction:
        terms["l1"] = reconstruction_loss(fwd["x_hat"], x2)
        terms["fm"] = feature_matching_loss([f[2 * b:] for f in feats], [f[:b] for f in real_feats])
    if pipeline.uses_match:
        score = model.discriminate_delta_match(real_feats[-1][b:], feats[-1][:b], fwd["delta_fake1"])
        terms["adv_m_g"] = hinge_adv_delta_match(score, score)[1]
    if "kl" in fwd:
        terms["kl"] = fwd["kl"]
    return {k: v for k, v in terms.items() if k not in pipeline.disabled}


def train_step(state: TrainState, batch, config: TrainConfig | None = None) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one generator update, in place.

    ``batch`` is ``(x1, x2, seen_labels)`` as built by :func:`episodes_to_tensors`.
    """
    config = config or state.config
    pipeline = config.pipeline
    model = state.model
    dtype = next(model.parameters()).dtype
    x1, x2, labels = batch
    for g in state.opt_g.param_groups + state.opt_d.param_groups:
        g["lr"] = config.learning_rate
    model.train()
    z1, z2, noise = draw_latents(model, x1.shape[0], state.latent_rng, dtype)
    fwd = generator_forward(model, pipeline, x1, x2, z1, z2, noise)

    d_terms = discriminator_terms(model, pipeline, fwd, x1, x2, labels)
    total_d = total_discriminator_loss(d_terms, pipeline.disabled)
    state.opt_d.zero_grad(set_to_none=True)
    _check_finite(state.step + 1, d_terms, total_d)
    total_d.backward()
    state.opt_d.step()

    disc_params = model.discriminator_parameters()
    for p in disc_params:
        p.requires_grad_(False)
    try:
        g_terms = generator_terms(model, pipeline, fwd, x1, x2, labels, z1, z2)
        total_g = total_generator_loss(g_terms, config.weights, pipeline.disabled)
        _check_finite(state.step + 1, {**d_terms, **g_terms}, total_g)
        state.opt_g.zero_grad(set_to_none=True)
        total_g.backward()
        state.opt_g.step()
    finally:
        for p in disc_params:
            p.requires_grad_(True)

    state.step += 1
    terms = {k: float(v.detach()) for k, v in {**g_terms, **d_terms}.items()}
    return state, LossReport(state.step, terms, float(total_g.detach()), float(total_d.detach()))


def _check_finite(step, terms, total):
    vals = {k: float(v.detach()) for k, v in terms.items()}
    if not all(np.isfinite(list(vals.values()))) or not torch.isfinite(total):
        raise TrainingDiverged(LossReport(step, vals, float("nan"), float("nan")))


def _write_metrics(path: Path, reports, truncate_after: int | None = None):
    rows = []
    if truncate_after is not None and path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= truncate_after]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerows(rows)
        w.writerows(r.row() for r in reports)


def train(
    index: DatasetIndex,
    split: CategorySplit,
    config: TrainConfig,
    out_dir=None,
    resume=None,
    on_step=None,
    log_every: int = 50,
):
    """Run ``epochs * steps_per_epoch`` steps; checkpoint and flush metrics every epoch.

    ``resume`` may be a checkpoint path or a :class:`TrainState`. ``on_step(state,
    report)`` runs after every step and must not consume the training RNGs.
    Returns ``(state, history)`` where history holds this call's LossReports.
    """
    if resume is None:
        state = init_state(config)
    else:
        state = load_checkpoint(resume) if not isinstance(resume, TrainState) else resume
        if state.config.to_dict() | {"epochs": 0} != config.to_dict() | {"epochs": 0}:
            raise CheckpointError("resume checkpoint was trained with a different configuration")
        state.config = config
    if config.pipeline.network.n_seen_categories != len(split.seen):
        raise ValueError(
            f"network has {config.pipeline.network.n_seen_categories} classifier outputs "
            f"but the split has {len(split.seen)} seen categories"
        )
    sampler = EpisodeSampler(index, split, worker_seed(config.seed, 1))
    if state.sampler_state is not None:
        sampler.set_state(state.sampler_state)
    dtype = next(state.model.parameters()).dtype
    out = Path(out_dir) if out_dir is not None else None
    metrics = out / "metrics.csv" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _write_metrics(metrics, [], truncate_after=state.step)

    history = []
    total = config.epochs * config.steps_per_epoch
    pending = []
    while state.step < total:
        batch = episodes_to_tensors(sampler.batch(config.batch_size), split, dtype)
        state, report = train_step(state, batch, config)
        state.sampler_state = sampler.get_state()
        history.append(report)
        pending.append(report)
        if on_step is not None:
            on_step(state, report)
        if log_every and state.step % log_every == 0:
            log.info("step %d  G %.4f  D %.4f  %s", state.step, report.total_g, report.total_d,
                     " ".join(f"{k}={v:.4f}" for k, v in sorted(report.terms.items())))
        if state.step % config.steps_per_epoch == 0 and out:
            _write_metrics(metrics, pending, truncate_after=state.step - len(pending))
            pending = []
            save_checkpoint(state, out / "checkpoint.pt")
    if out and pending:
        _write_metrics(metrics, pending, truncate_after=state.step - len(pending))
    if out and (total == 0 or not (out / "checkpoint.pt").exists()):
        save_checkpoint(state, out / "checkpoint.pt")
    return state, history


def parameter_fingerprint(params) -> str:
    """Hash of parameter values, used to assert which parameters an update touched."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()



def ensure_trained(index: DatasetIndex, split: CategorySplit, config: TrainConfig, out_dir, log_every: int = 0) -> TrainState:
    """Train into ``out_dir`` unless its checkpoint already holds this config; resumes partial runs."""
    ckpt = Path(out_dir) / "checkpoint.pt"
    if ckpt.exists():
        try:
            state = load_checkpoint(ckpt)
        except CheckpointError:
            state = None
        if state is not None and state.config.to_dict() | {"epochs": 0} == config.to_dict() | {"epochs": 0}:
            if state.step == config.epochs * config.steps_per_epoch:
                state.config = config
                return state
            if state.step < config.epochs * config.steps_per_epoch:
                return train(index, split, config, out_dir, resume=state, log_every=log_every)[0]
    return train(index, split, config, out_dir, log_every=log_every)[0]
