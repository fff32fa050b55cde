import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from deltagan.data import EpisodeSampler
from deltagan.networks import DeltaGAN
from deltagan.trainer import (
    ABLATIONS,
    AblationSpec,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    ablation_from_names,
    apply_ablation,
    discriminator_terms,
    draw_latents,
    ensure_trained,
    episodes_to_tensors,
    generator_forward,
    generator_terms,
    init_state,
    load_checkpoint,
    parameter_fingerprint,
    save_checkpoint,
    train,
    train_step,
)
from deltagan.losses import total_discriminator_loss, total_generator_loss

from conftest import tiny_network


def tiny_config(**kw):
    base = dict(network=tiny_network(), batch_size=4, epochs=1, steps_per_epoch=3, seed=0)
    return TrainConfig(**{**base, **kw})


def a_batch(toy16, size=4, seed=0, dtype=torch.float32):
    index, split = toy16
    return episodes_to_tensors(EpisodeSampler(index, split, seed).batch(size), split, dtype)


def params_of(model, names):
    return [p for n in names if getattr(model, n) is not None for p in getattr(model, n).parameters()]


def test_config_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.batch_size, c.epochs, c.steps_per_epoch) == (1e-4, 16, 20, 200)
    assert c.betas == (0.5, 0.999)
    st = init_state(tiny_config())
    for opt in (st.opt_g, st.opt_d):
        assert opt.defaults["lr"] == 1e-4 and opt.defaults["betas"] == (0.5, 0.999)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    assert TrainConfig.from_dict(tiny_config().to_dict()) == tiny_config()


def test_adam_matches_reference_recurrence():
    # quadratic objective 0.5 * sum(a * w^2) - b.w, float64
    torch.manual_seed(0)
    a = torch.rand(6, dtype=torch.float64) + 0.5
    b = torch.randn(6, dtype=torch.float64)
    w = torch.randn(6, dtype=torch.float64, requires_grad=True)
    ref = w.detach().clone()
    cfg = TrainConfig()
    lr, (b1, b2), eps = cfg.learning_rate, cfg.betas, 1e-8
    opt = torch.optim.Adam([w], lr=lr, betas=cfg.betas)
    m = torch.zeros_like(ref)
    v = torch.zeros_like(ref)
    for t in range(1, 6):
        opt.zero_grad()
        (0.5 * (a * w * w).sum() - b @ w).backward()
        opt.step()
        g = a * ref - b
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1**t), v / (1 - b2**t)
        ref = ref - lr * mhat / (vhat.sqrt() + eps)
        assert torch.max(torch.abs(w.detach() - ref)) <= 1e-10


def test_zero_learning_rate_keeps_parameters(toy16):
    cfg = tiny_config(learning_rate=0.0)
    st = init_state(cfg)
    before = {k: p.detach().clone() for k, p in st.model.named_parameters()}
    train_step(st, a_batch(toy16), cfg)
    assert all(torch.equal(before[k], p) for k, p in st.model.named_parameters())


def test_train_step_deterministic(toy16):
    cfg = tiny_config()
    a = init_state(cfg)
    b = a.clone()
    batch = a_batch(toy16)
    _, ra = train_step(a, batch, cfg)
    _, rb = train_step(b, batch, cfg)
    assert ra.terms == rb.terms
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_alternation_isolation(toy16):
    cfg = tiny_config()
    st = init_state(cfg)
    g_params, d_params = st.model.generator_parameters(), st.model.discriminator_parameters()
    log = []

    def wrap(opt, name):
        inner = opt.step

        def step(*a, **k):
            before = (parameter_fingerprint(g_params), parameter_fingerprint(d_params))
            out = inner(*a, **k)
            log.append((name, before, (parameter_fingerprint(g_params), parameter_fingerprint(d_params))))
            return out

        opt.step = step

    wrap(st.opt_d, "d")
    wrap(st.opt_g, "g")
    for seed in range(2):
        train_step(st, a_batch(toy16, seed=seed), cfg)
    assert [n for n, _, _ in log] == ["d", "g", "d", "g"]
    for name, (g0, d0), (g1, d1) in log:
        if name == "d":
            assert g0 == g1 and d0 != d1
        else:
            assert d0 == d1 and g0 != g1


def test_discriminator_frozen_flags_restored(toy16):
    cfg = tiny_config()
    st = init_state(cfg)
    train_step(st, a_batch(toy16), cfg)
    assert all(p.requires_grad for p in st.model.parameters())


def test_every_module_gets_gradient(toy16):
    cfg = tiny_config()
    st = init_state(cfg)
    model, pipe = st.model, cfg.pipeline
    x1, x2, labels = a_batch(toy16)
    z1, z2, noise = draw_latents(model, 4, torch.Generator().manual_seed(0))
    fwd = generator_forward(model, pipe, x1, x2, z1, z2, noise)
    total_d = total_discriminator_loss(discriminator_terms(model, pipe, fwd, x1, x2, labels))
    d_grads = torch.autograd.grad(total_d, model.discriminator_parameters(), allow_unused=True)
    g_terms = generator_terms(model, pipe, fwd, x1, x2, labels, z1, z2)
    total_g = total_generator_loss(g_terms, cfg.weights)
    g_grads = torch.autograd.grad(total_g, model.generator_parameters(), allow_unused=True)
    grads = dict(zip(map(id, model.discriminator_parameters()), d_grads)) | dict(
        zip(map(id, model.generator_parameters()), g_grads))
    for name in DeltaGAN.GENERATOR + DeltaGAN.DISCRIMINATOR:
        ps = list(getattr(model, name).parameters())
        assert any(grads[id(p)] is not None and grads[id(p)].abs().sum() > 0 for p in ps), name


def test_l1_decreases_over_first_epoch(toy32):
    # Adversarial and mode-seeking terms dominate the first ~100 steps, so the
    # check spans one desk-default epoch.
    index, split = toy32
    cfg = TrainConfig(epochs=1, steps_per_epoch=200, seed=0)
    _, hist = train(index, split, cfg, log_every=0)
    assert hist[-1].terms["l1"] < hist[0].terms["l1"]


def test_epochs_zero_returns_initial_state(toy16, tmp_path):
    index, split = toy16
    cfg = tiny_config(epochs=0)
    st, hist = train(index, split, cfg, out_dir=tmp_path)
    ref = init_state(cfg)
    assert hist == [] and st.step == 0
    assert parameter_fingerprint(st.model.state_dict().values()) == parameter_fingerprint(ref.model.state_dict().values())
    assert (tmp_path / "checkpoint.pt").exists()


def _history_terms(hist):
    return [(r.step, r.terms, r.total_g, r.total_d) for r in hist]


def test_resume_reproduces_uninterrupted_run(toy16, tmp_path):
    index, split = toy16
    cfg = tiny_config(epochs=3, steps_per_epoch=3)
    full_state, full_hist = train(index, split, cfg, out_dir=tmp_path / "full")
    _, part1 = train(index, split, replace(cfg, epochs=1), out_dir=tmp_path / "part")
    state, part2 = train(index, split, cfg, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint.pt")
    assert _history_terms(part1 + part2) == _history_terms(full_hist)
    a, b = full_state.model.state_dict(), state.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    rows = lambda p: list(csv.DictReader(open(p / "metrics.csv")))  # noqa: E731
    assert rows(tmp_path / "full") == rows(tmp_path / "part")
    assert len(rows(tmp_path / "full")) == 9


def test_checkpoint_roundtrip_next_report(toy16, tmp_path):
    cfg = tiny_config()
    st = init_state(cfg)
    train_step(st, a_batch(toy16, seed=1), cfg)
    save_checkpoint(st, tmp_path / "c.pt")
    loaded = load_checkpoint(tmp_path / "c.pt")
    batch = a_batch(toy16, seed=2)
    _, r1 = train_step(st, batch, cfg)
    _, r2 = train_step(loaded, batch, cfg)
    assert r1.terms == r2.terms and r1.step == r2.step == 2


def test_resume_rejects_other_config(toy16, tmp_path):
    index, split = toy16
    train(index, split, tiny_config(), out_dir=tmp_path)
    with pytest.raises(CheckpointError):
        train(index, split, tiny_config(seed=5), resume=tmp_path / "checkpoint.pt")


def test_bad_checkpoints(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")
    st = init_state(tiny_config())
    d = st.state_dict()
    d["model"] = {k: v[..., :1] if v.dim() else v for k, v in d["model"].items()}
    torch.save(d, tmp_path / "shapes.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "shapes.pt")


def test_ensure_trained_reuses_finished_run(toy16, tmp_path):
    index, split = toy16
    cfg = tiny_config()
    st = ensure_trained(index, split, cfg, tmp_path)
    stamp = (tmp_path / "checkpoint.pt").stat().st_mtime_ns
    again = ensure_trained(index, split, cfg, tmp_path)
    assert (tmp_path / "checkpoint.pt").stat().st_mtime_ns == stamp
    assert again.step == st.step == 3


def test_divergence_aborts(toy16):
    cfg = tiny_config()
    st = init_state(cfg)
    x1, x2, labels = a_batch(toy16)
    x1[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingDiverged) as err:
        train_step(st, (x1, x2, labels), cfg)
    assert err.value.report.step == 1


def test_seen_category_count_checked(toy16):
    index, split = toy16
    with pytest.raises(ValueError):
        train(index, split, tiny_config(network=tiny_network(n_seen_categories=3)))


# -- ablations --------------------------------------------------------------

def test_default_spec_is_full_model():
    pipe = apply_ablation(AblationSpec(), tiny_network())
    assert pipe.disabled == frozenset() and pipe.uses_reconstruction and pipe.uses_match
    assert set(pipe.generator_modules) == {"enc_delta", "enc_real", "enc_content", "enc_fake", "decoder"}


def test_ablation_conflicts():
    with pytest.raises(ValueError):
        AblationSpec(real_delta=False, delta_mode="linear")
    with pytest.raises(ValueError):
        AblationSpec(drop={"adv_m"}, match_inputs="delta")
    with pytest.raises(ValueError):
        ablation_from_names("simple_d1,simple_d2")
    with pytest.raises(ValueError):
        ablation_from_names("nonsense")
    assert ablation_from_names("wo_ms,wo_fm").drop == {"ms", "fm"}


def test_global_and_simple_modes():
    assert apply_ablation(ABLATIONS["global_delta"], tiny_network()).network.delta_mode == "global"
    assert apply_ablation(ABLATIONS["simple_d1"], tiny_network()).network.match_inputs == "delta"


def test_wo_real_delta_never_updates_real_encoder_or_match_disc(toy16):
    index, split = toy16
    cfg = tiny_config(ablation=ABLATIONS["wo_real_delta"], steps_per_epoch=4)
    st0 = init_state(cfg)
    frozen = ("enc_real", "disc_match")
    before = parameter_fingerprint(params_of(st0.model, frozen))
    st, hist = train(index, split, cfg)
    assert parameter_fingerprint(params_of(st.model, frozen)) == before
    assert parameter_fingerprint(params_of(st.model, ("enc_content",))) != parameter_fingerprint(
        params_of(st0.model, ("enc_content",)))
    assert not {"l1", "fm", "adv_m_g", "adv_m_d"} & set(hist[0].terms)
    opt_ids = {id(p) for g in st.opt_g.param_groups + st.opt_d.param_groups for p in g["params"]}
    assert not opt_ids & {id(p) for p in params_of(st.model, frozen)}


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_trains(toy16, name, tmp_path):
    index, split = toy16
    cfg = tiny_config(ablation=ABLATIONS[name], steps_per_epoch=2)
    st, hist = train(index, split, cfg, out_dir=tmp_path)
    assert st.step == 2 and all(r.is_finite() for r in hist)
    disabled = cfg.pipeline.disabled
    assert not disabled & set(hist[0].terms)
    if name == "prior_delta":
        assert "kl" in hist[0].terms
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    assert len(rows) == 2
    for t in disabled:
        assert rows[0][t] == ""


def test_sampler_and_latent_seed_derivation(toy16):
    cfg = tiny_config(seed=11)
    st = init_state(cfg)
    expected = torch.Generator().manual_seed(13)
    assert torch.equal(st.latent_rng.get_state(), expected.get_state())
    index, split = toy16
    _, h1 = train(index, split, cfg)
    _, h2 = train(index, split, cfg)
    assert _history_terms(h1) == _history_terms(h2)
    assert np.isfinite([r.total_g for r in h1]).all()
