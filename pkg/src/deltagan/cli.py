"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 user or input error. Relative
output directories resolve under ``$DELTAGAN_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np
import torch

from . import evaluation as ev
from . import generation as gen
from .data import CategorySplit, DatasetError, load_dataset_index, split_categories
from .losses import LossWeights
from .networks import NetworkConfig, count_parameters
from .toy import make_toy_corpus
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    ablation_from_names,
    load_checkpoint,
    train,
)

log = logging.getLogger("deltagan")

OUTPUT_ROOT_ENV = "DELTAGAN_OUTPUT_ROOT"
RUN_FILE = "run.json"


class InputError(click.ClickException):
    exit_code = 2


# ---------------------------------------------------------------------------
# Config file

# section -> key -> converter
CONFIG_KEYS = {
    "data": {"root": str, "image_size": int, "n_unseen": int, "split_seed": int},
    "network": {
        "base_channels": int,
        "feature_channels": int,
        "z_dim": int,
        "disc_channels": lambda s: tuple(int(v) for v in s.split(",")),
        "match_hidden": int,
    },
    "train": {
        "epochs": int,
        "steps_per_epoch": int,
        "batch_size": int,
        "learning_rate": float,
        "beta1": float,
        "beta2": float,
        "seed": int,
        "lambda_1": float,
        "lambda_fm": float,
        "lambda_ms": float,
        "kl_weight": float,
        "ablation": str,
    },
    "output": {"dir": str},
}

DEFAULTS = {
    "data": {"image_size": 32, "n_unseen": 2, "split_seed": 0},
    "network": {},
    "train": {"ablation": "full"},
    "output": {"dir": "runs/default"},
}


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = s.replace(":", "=", 1).split("=", 1)[0].strip().lower()
            lines[(section, key)] = no
    return lines


def parse_config(path) -> dict:
    """Read an INI config into ``{section: {key: value}}`` with typed values.

    Errors name the file and line.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise InputError(f"config parse error: {exc}") from exc
    lines = _key_lines(text)
    out = {s: dict(v) for s, v in DEFAULTS.items()}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise InputError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            where = f"{path}:{lines.get((section, key), '?')}"
            if key not in CONFIG_KEYS[section]:
                raise InputError(f"{where}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = CONFIG_KEYS[section][key](raw)
            except ValueError as exc:
                raise InputError(f"{where}: bad value for {section}.{key}: {raw!r} ({exc})") from exc
    return out


def resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def build_train_config(cfg: dict, n_seen: int) -> TrainConfig:
    net = {k: v for k, v in cfg["network"].items()}
    t = cfg["train"]
    try:
        network = NetworkConfig(image_size=cfg["data"]["image_size"], n_seen_categories=n_seen, **net)
        base = TrainConfig()
        weights = LossWeights(**{k: t[k] for k in ("lambda_1", "lambda_fm", "lambda_ms", "kl_weight") if k in t})
        return TrainConfig(
            learning_rate=t.get("learning_rate", base.learning_rate),
            batch_size=t.get("batch_size", base.batch_size),
            epochs=t.get("epochs", base.epochs),
            steps_per_epoch=t.get("steps_per_epoch", base.steps_per_epoch),
            betas=(t.get("beta1", base.betas[0]), t.get("beta2", base.betas[1])),
            weights=weights,
            ablation=ablation_from_names(t["ablation"]),
            network=network,
            seed=t.get("seed", base.seed),
        )
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# Manifests


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    checkpoint_sha256: str | None = None
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seeds": self.seeds,
            "checkpoint_sha256": self.checkpoint_sha256,
            "outputs": self.outputs,
            "timings": self.timings,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        tmp.replace(path)
        return path


# ---------------------------------------------------------------------------
# Shared loading


def _load_index(root, image_size):
    try:
        return load_dataset_index(root, image_size)
    except (DatasetError, FileNotFoundError, NotADirectoryError) as exc:
        raise InputError(str(exc)) from exc


@dataclass
class Context:
    state: object
    index: object
    split: CategorySplit
    run: dict
    checkpoint: Path

    @property
    def model(self):
        return self.state.model


def load_context(checkpoint, data_root=None) -> Context:
    """Load a checkpoint plus the corpus and category split recorded next to it."""
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise InputError(f"checkpoint not found: {checkpoint}")
    try:
        state = load_checkpoint(checkpoint)
    except CheckpointError as exc:
        raise InputError(f"incompatible checkpoint {checkpoint}: {exc}") from exc
    run_file = checkpoint.parent / RUN_FILE
    if not run_file.is_file():
        raise InputError(f"{run_file} is missing; it records the corpus and split of the run")
    run = json.loads(run_file.read_text())
    root = data_root or run["data_root"]
    index = _load_index(root, state.model.cfg.image_size)
    labels = [c.label for c in index.categories]
    if labels != run["category_labels"]:
        raise InputError(f"corpus at {root} does not match the categories the checkpoint was trained on")
    split = CategorySplit.from_json(json.dumps(run["split"]), index)
    return Context(state, index, split, run, checkpoint)


def _unseen_ids(ctx: Context, categories) -> list[int]:
    if not categories:
        return list(ctx.split.unseen_ids)
    out = []
    for label in categories:
        try:
            cid = ctx.index.category_by_label(label).id
        except KeyError:
            raise InputError(f"unknown category {label!r}") from None
        if cid not in ctx.split.unseen:
            raise InputError(f"category {label!r} is a seen (training) category")
        out.append(cid)
    return out


def _pick(rng, n, k):
    if k > n:
        raise InputError(f"need {k} images but the category has {n}")
    return np.sort(rng.choice(n, size=k, replace=False))


def _base_manifest(ctx: Context, command: str, args: dict, seed: int) -> RunManifest:
    return RunManifest(
        command=command,
        config={"args": args, "train_config": ctx.state.config.to_dict(), "data_root": str(ctx.index.root)},
        seeds={"seed": seed},
        checkpoint_sha256=file_hash(ctx.checkpoint),
    )


def _finish(manifest: RunManifest, out: Path, start: float, rows, name: str, sources: list, grid_rows=None):
    manifest.timings["wall_seconds"] = round(time.time() - start, 3)
    d = manifest.to_dict() | {"sources": sources}
    written = gen.write_outputs(out, name, rows, d, grid_rows=grid_rows)
    click.echo(f"wrote {written['grid']} ({len(written['images'])} images)")


# ---------------------------------------------------------------------------
# Commands


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Few-shot image generation by learning sample-specific deltas."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(asctime)s %(message)s")


@cli.command("make-toy-corpus")
@click.argument("out_dir")
@click.option("--seed", default=0, show_default=True)
@click.option("--n-categories", default=8, show_default=True)
@click.option("--per-category", default=40, show_default=True)
@click.option("--image-size", default=64, show_default=True)
def cmd_make_toy_corpus(out_dir, seed, n_categories, per_category, image_size):
    """Write the procedural shapes corpus (one directory per category)."""
    out = resolve_output(out_dir)
    try:
        make_toy_corpus(out, seed=seed, n_categories=n_categories, per_category=per_category, image_size=image_size)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot write corpus to {out}: {exc}") from exc
    click.echo(f"wrote {n_categories * per_category} images to {out}")


@cli.command("train")
@click.option("--config", "config_path", required=True, help="INI config file.")
@click.option("--data-root", help="Override [data] root.")
@click.option("--out-dir", help="Override [output] dir.")
@click.option("--epochs", type=int)
@click.option("--steps-per-epoch", type=int)
@click.option("--batch-size", type=int)
@click.option("--seed", type=int)
@click.option("--ablation", help="Comma-separated ablation names, e.g. wo_ms.")
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in the output dir.")
def cmd_train(config_path, data_root, out_dir, epochs, steps_per_epoch, batch_size, seed, ablation, resume):
    """Train a model; writes checkpoint.pt, metrics.csv, run.json and manifest.json."""
    start = time.time()
    cfg = parse_config(config_path)
    overrides = {"epochs": epochs, "steps_per_epoch": steps_per_epoch, "batch_size": batch_size,
                 "seed": seed, "ablation": ablation}
    cfg["train"].update({k: v for k, v in overrides.items() if v is not None})
    if data_root:
        cfg["data"]["root"] = data_root
    if out_dir:
        cfg["output"]["dir"] = out_dir
    if "root" not in cfg["data"]:
        raise InputError("no corpus given: set [data] root or pass --data-root")
    index = _load_index(cfg["data"]["root"], cfg["data"]["image_size"])
    try:
        split = split_categories(index, cfg["data"]["n_unseen"], cfg["data"]["split_seed"])
    except (DatasetError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    config = build_train_config(cfg, len(split.seen))
    out = resolve_output(cfg["output"]["dir"])
    ckpt = out / "checkpoint.pt"
    if resume and not ckpt.is_file():
        raise InputError(f"--resume given but {ckpt} does not exist")
    out.mkdir(parents=True, exist_ok=True)
    run = {"data_root": str(Path(cfg["data"]["root"]).resolve()), "split": json.loads(split.to_json(index)),
           "category_labels": [c.label for c in index.categories]}
    (out / RUN_FILE).write_text(json.dumps(run, indent=2, sort_keys=True))
    try:
        state, history = train(index, split, config, out, resume=ckpt if resume else None, log_every=1)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    manifest = RunManifest(
        command="train",
        config={"file": cfg, "train_config": config.to_dict()},
        seeds={"seed": config.seed, "split_seed": cfg["data"]["split_seed"]},
        checkpoint_sha256=file_hash(ckpt),
        outputs=[str(ckpt), str(out / "metrics.csv"), str(out / RUN_FILE)],
        timings={"wall_seconds": round(time.time() - start, 3), "steps": len(history)},
    )
    manifest.write(out / "manifest.json")
    click.echo(f"trained to step {state.step}; checkpoint {ckpt}")


def _checkpoint_options(f):
    f = click.option("--seed", default=0, show_default=True)(f)
    f = click.option("--out-dir", required=True, help="Output directory.")(f)
    f = click.option("--data-root", help="Corpus root (defaults to the one recorded at training).")(f)
    f = click.argument("checkpoint")(f)
    return f


@cli.command("generate")
@_checkpoint_options
@click.option("--k", "k_shot", default=1, show_default=True, help="Conditional images per category.")
@click.option("--n", "n_images", default=12, show_default=True, help="Images per category.")
@click.option("--category", "categories", multiple=True, help="Unseen category label (repeatable).")
def cmd_generate(checkpoint, data_root, out_dir, seed, k_shot, n_images, categories):
    """K-shot generation; one grid row per category: conditionals then outputs.

    Only the generated images are saved individually.
    """
    start = time.time()
    ctx = load_context(checkpoint, data_root)
    ids = _unseen_ids(ctx, categories)
    out = resolve_output(out_dir)
    rng = np.random.default_rng(seed)
    rows, sources, generated = [], [], []
    for cid in ids:
        pos = _pick(rng, len(ctx.index.categories[cid].files), k_shot)
        cond = ctx.index.images[cid][pos]
        imgs = gen.generate(ctx.model, gen.GenerationRequest(list(cond), n_images, ev.derive_seed(seed, cid)))
        rows.append(list(cond) + imgs)
        generated.append(imgs)
        sources.append([str(ctx.index.categories[cid].files[p]) for p in pos])
    manifest = _base_manifest(ctx, "generate", {"k": k_shot, "n": n_images, "categories": ids}, seed)
    _finish(manifest, out, start, generated, "generate", sources, grid_rows=rows)


@cli.command("reconstruct")
@_checkpoint_options
@click.option("--pairs", default=4, show_default=True, help="Pairs per category.")
@click.option("--category", "categories", multiple=True)
def cmd_reconstruct(checkpoint, data_root, out_dir, seed, pairs, categories):
    """Rows of (x1, x2, reconstruction of x2)."""
    start = time.time()
    ctx = load_context(checkpoint, data_root)
    ids = _unseen_ids(ctx, categories)
    rng = np.random.default_rng(seed)
    rows, sources = [], []
    for cid in ids:
        files = ctx.index.categories[cid].files
        for _ in range(pairs):
            i1, i2 = rng.choice(len(files), size=2, replace=False)
            x1, x2 = ctx.index.images[cid][i1], ctx.index.images[cid][i2]
            rows.append([x1, x2, gen.reconstruct(ctx.model, x1, x2)])
            sources.append([str(files[i1]), str(files[i2])])
    manifest = _base_manifest(ctx, "reconstruct", {"pairs": pairs, "categories": ids}, seed)
    _finish(manifest, resolve_output(out_dir), start, rows, "reconstruct", sources)


@cli.command("interpolate")
@_checkpoint_options
@click.option("--steps", default=11, show_default=True)
@click.option("--rows", "n_rows", default=3, show_default=True, help="Conditional images (one row each).")
@click.option("--category", "categories", multiple=True)
def cmd_interpolate(checkpoint, data_root, out_dir, seed, steps, n_rows, categories):
    """Linear latent interpolation; each row has exactly ``steps`` columns."""
    if steps < 2:
        raise InputError("--steps must be at least 2")
    start = time.time()
    ctx = load_context(checkpoint, data_root)
    ids = _unseen_ids(ctx, categories)
    rng = np.random.default_rng(seed)
    zgen = torch.Generator().manual_seed(seed)
    rows, sources = [], []
    for r in range(n_rows):
        cid = ids[r % len(ids)]
        i = int(rng.integers(len(ctx.index.categories[cid].files)))
        z1, z2 = torch.randn(2, ctx.model.latent_dim(), generator=zgen)
        rows.append(gen.interpolate(ctx.model, ctx.index.images[cid][i], z1, z2, steps))
        sources.append(str(ctx.index.categories[cid].files[i]))
    manifest = _base_manifest(ctx, "interpolate", {"steps": steps, "rows": n_rows, "categories": ids}, seed)
    _finish(manifest, resolve_output(out_dir), start, rows, "interpolate", sources)


@cli.command("exchange")
@_checkpoint_options
@click.option("--mode", type=click.Choice(["real", "sc", "dc"]), default="real", show_default=True,
              help="real: delta of an (x2, x3) pair; sc/dc: fake delta from a same/different-category x2.")
@click.option("--rows", "n_rows", default=4, show_default=True)
def cmd_exchange(checkpoint, data_root, out_dir, seed, mode, n_rows):
    """Delta-exchange diagnostics; the last column of each row is the output."""
    start = time.time()
    ctx = load_context(checkpoint, data_root)
    ids = list(ctx.split.unseen_ids)
    if mode == "dc" and len(ids) < 2:
        raise InputError("dc mode needs at least two unseen categories")
    rng = np.random.default_rng(seed)
    zgen = torch.Generator().manual_seed(seed)
    rows, sources = [], []
    for r in range(n_rows):
        cid = ids[r % len(ids)]
        imgs, files = ctx.index.images[cid], ctx.index.categories[cid].files
        if mode == "real":
            i1, i2, i3 = rng.choice(len(files), size=3, replace=False)
            out_img = gen.exchange_real_delta(ctx.model, imgs[i1], imgs[i2], imgs[i3])
            rows.append([imgs[i1], imgs[i2], imgs[i3], out_img])
            sources.append([str(files[i]) for i in (i1, i2, i3)])
        else:
            i1 = int(rng.integers(len(files)))
            donor_cat = cid if mode == "sc" else int(rng.choice([c for c in ids if c != cid]))
            dfiles = ctx.index.categories[donor_cat].files
            i2 = int(rng.integers(len(dfiles)))
            z = torch.randn(ctx.model.latent_dim(), generator=zgen)
            x2 = ctx.index.images[donor_cat][i2]
            rows.append([imgs[i1], x2, gen.exchange_fake_delta(ctx.model, imgs[i1], x2, z)])
            sources.append([str(files[i1]), str(dfiles[i2])])
    manifest = _base_manifest(ctx, "exchange", {"mode": mode, "rows": n_rows}, seed)
    _finish(manifest, resolve_output(out_dir), start, rows, f"exchange_{mode}", sources)


EVAL_COLUMNS = ("metric", "value", "extractor", "seed", "config_hash", "count")


@cli.command("evaluate")
@_checkpoint_options
@click.option("--fid", is_flag=True, help="Pooled FID over unseen categories.")
@click.option("--lpips", is_flag=True, help="LPIPS-style diversity.")
@click.option("--fewshot", is_flag=True, help="N-way C-shot augmentation protocol.")
@click.option("--lowdata", is_flag=True, help="Low-data fine-tuning protocol.")
@click.option("--kshot", "k_values", multiple=True, type=int, help="K values for the K-shot sweep (repeatable).")
@click.option("--ablation-table", "ablation_rows", help="Comma-separated ablation rows to train and tabulate.")
@click.option("--k", "k_shot", default=1, show_default=True, help="Conditional images for --fid/--lpips.")
@click.option("--n-per-category", default=128, show_default=True)
@click.option("--n-way", default=2, show_default=True)
@click.option("--c-shot", default=1, show_default=True)
@click.option("--episodes", default=10, show_default=True)
@click.option("--n-augment", default=64, show_default=True)
@click.option("--k-samples", default=5, show_default=True, help="Training images per category for --lowdata.")
@click.option("--backbone-epochs", default=15, show_default=True)
def cmd_evaluate(checkpoint, data_root, out_dir, seed, fid, lpips, fewshot, lowdata, k_values, ablation_rows,
                 k_shot, n_per_category, n_way, c_shot, episodes, n_augment, k_samples, backbone_epochs):
    """Metrics and protocols; writes eval.csv plus one CSV per protocol table."""
    start = time.time()
    ctx = load_context(checkpoint, data_root)
    if not (fid or lpips or fewshot or lowdata or k_values or ablation_rows):
        raise InputError("choose at least one of --fid --lpips --fewshot --lowdata --kshot --ablation-table")
    out = resolve_output(out_dir)
    args = {"k": k_shot, "n_per_category": n_per_category, "n_way": n_way, "c_shot": c_shot,
            "episodes": episodes, "n_augment": n_augment, "k_samples": k_samples,
            "backbone_epochs": backbone_epochs}
    chash = config_hash({"train_config": ctx.state.config.to_dict(), "args": args})
    backbone = ev.train_backbone(ctx.index, ctx.split, seed=seed, epochs=backbone_epochs)
    rows, outputs = [], []

    def metric(name, value, count):
        rows.append({"metric": name, "value": float(value), "extractor": backbone.label, "seed": seed,
                     "config_hash": chash, "count": count})

    try:
        if fid or lpips:
            r = ev.evaluate_generation(ctx.model, ctx.index, ctx.split, backbone, k_shot, n_per_category, seed)
            if fid:
                metric("fid", r["fid"], r["n_generated"])
            if lpips:
                metric("lpips", r["lpips"], r["n_generated"])
        if fewshot:
            r = ev.fewshot_protocol(ctx.model, ctx.index, ctx.split, backbone, n_way, c_shot, n_augment, episodes, seed)
            metric(f"fewshot_accuracy_{n_way}way_{c_shot}shot", r["accuracy"], episodes)
            table = [{"setting": "augmented", "n_augment": n_augment, "accuracy": r["accuracy"], "episodes": episodes}]
            if n_augment > 0:
                b = ev.fewshot_protocol(None, ctx.index, ctx.split, backbone, n_way, c_shot, 0, episodes, seed)
                table.insert(0, {"setting": "baseline", "n_augment": 0, "accuracy": b["accuracy"], "episodes": episodes})
            outputs.append(str(ev.write_csv(table, out / "fewshot.csv")))
        if lowdata:
            r = ev.lowdata_protocol(ctx.model, ctx.index, ctx.split, backbone, k_samples, n_augment, seed)
            metric(f"lowdata_accuracy_k{k_samples}", r.get("augmented", r["standard"]), r["n_test"])
            metric(f"lowdata_standard_accuracy_k{k_samples}", r["standard"], r["n_test"])
            table = [{"k_samples": k_samples, "standard": r["standard"], "augmented": r.get("augmented", "")}]
            outputs.append(str(ev.write_csv(table, out / "lowdata.csv")))
        if k_values:
            table = ev.kshot_sweep(ctx.model, ctx.index, ctx.split, k_values, backbone, n_per_category, seed)
            outputs.append(str(ev.write_csv(table, out / "kshot.csv")))
        if ablation_rows:
            names = [n.strip() for n in ablation_rows.split(",") if n.strip()]
            table = ev.ablation_report(names, ctx.index, ctx.split, ctx.state.config, backbone, out / "ablation_runs",
                                       n_way, c_shot, n_augment, episodes, n_per_category, seed)
            outputs.append(str(ev.write_csv(table, out / "ablation.csv", ev.ABLATION_COLUMNS)))
    except DatasetError as exc:
        raise InputError(str(exc)) from exc
    outputs.insert(0, str(ev.write_csv(rows, out / "eval.csv", EVAL_COLUMNS)))
    manifest = _base_manifest(ctx, "evaluate", args | {"fid": fid, "lpips": lpips, "fewshot": fewshot,
                                                       "lowdata": lowdata, "kshot": list(k_values),
                                                       "ablation_table": ablation_rows}, seed)
    manifest.outputs = outputs
    manifest.timings["wall_seconds"] = round(time.time() - start, 3)
    manifest.write(out / "manifest.json")
    for r in rows:
        click.echo(f"{r['metric']}\t{r['value']:.6g}")


@cli.command("params-count")
@click.option("--config", "config_path", help="INI config file (network section is used).")
@click.option("--checkpoint", help="Count a trained checkpoint instead.")
@click.option("--ablation", help="Comma-separated ablation names.")
@click.option("--n-seen", default=6, show_default=True, help="Seen categories when counting from a config.")
def cmd_params_count(config_path, checkpoint, ablation, n_seen):
    """Training-phase vs testing-phase parameter counts as JSON."""
    if checkpoint:
        try:
            state = load_checkpoint(checkpoint)
        except (CheckpointError, FileNotFoundError) as exc:
            raise InputError(str(exc)) from exc
        model, pipeline = state.model, state.config.pipeline
    else:
        from .networks import build_networks

        cfg = parse_config(config_path) if config_path else {s: dict(v) for s, v in DEFAULTS.items()}
        if ablation:
            cfg["train"]["ablation"] = ablation
        pipeline = build_train_config(cfg, n_seen).pipeline
        model = build_networks(pipeline.network, seed=0)
    counts = count_parameters(model, pipeline.generator_modules + pipeline.discriminator_modules)
    click.echo(json.dumps(counts, indent=2, sort_keys=True))


def main(argv=None) -> int:
    """Run the CLI and return the exit code instead of exiting."""
    try:
        cli.main(args=argv, prog_name="deltagan", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except (DatasetError, CheckpointError) as exc:
        click.echo(f"Error: {exc}", err=True)
        return 2
    except TrainingDiverged as exc:
        click.echo(f"Error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        click.echo(f"Error: {type(exc).__name__}: {exc}", err=True)
        return 1
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
