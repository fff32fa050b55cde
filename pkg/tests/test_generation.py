import json

import numpy as np
import pytest
import torch
from PIL import Image

from deltagan.generation import (
    GenerationRequest,
    exchange_fake_delta,
    exchange_real_delta,
    generate,
    generate_with_latents,
    image_grid,
    interpolate,
    reconstruct,
    write_outputs,
)
from deltagan.networks import build_networks

from conftest import tiny_network


@pytest.fixture
def model():
    m = build_networks(tiny_network(), seed=1)
    # non-trivial batch-norm statistics, as after training
    m.train()
    with torch.no_grad():
        x = torch.rand(8, 3, 16, 16) * 2 - 1
        m.reconstruct_from(x[:4], x[4:])
        m.generate_from(x[:4], torch.randn(4, 8))
    return m.eval()


@pytest.fixture
def images(toy16):
    index, split = toy16
    cid = split.unseen_ids[0]
    return index.images[cid]


def test_generate_counts_and_range(model, images):
    out = generate(model, GenerationRequest([images[0]], 128, seed=0))
    assert len(out) == 128
    arr = np.stack(out)
    assert arr.shape == (128, 16, 16, 3) and arr.min() >= -1 and arr.max() <= 1


def test_generate_seed_determinism(model, images):
    req = GenerationRequest(list(images[:3]), 10, seed=5)
    a, b = generate(model, req), generate(model, req)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = generate(model, GenerationRequest(list(images[:3]), 10, seed=6))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_generate_edge_cases(model, images):
    assert generate(model, GenerationRequest([images[0]], 0)) == []
    with pytest.raises(ValueError):
        GenerationRequest([], 3)


def test_generate_matches_explicit_latents(model, images):
    seed = 3
    out = generate(model, GenerationRequest([images[0]], 4, seed=seed))
    z = torch.randn(4, model.latent_dim(), generator=torch.Generator().manual_seed(seed))
    ref = generate_with_latents(model, images[0], z)
    for a, b in zip(out, ref):
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_generate_ignores_training_only_modules(model, images):
    req = GenerationRequest(list(images[:2]), 6, seed=0)
    expected = generate(model, req)

    class Forbidden(torch.nn.Module):
        def forward(self, *a):
            raise AssertionError("training-only module used at generation time")

    for name in ("enc_real", "disc_image", "disc_match"):
        setattr(model, name, Forbidden())
    traced = generate(model, req)
    assert all(np.array_equal(a, b) for a, b in zip(expected, traced))


def test_generate_from_generation_subset_only(model, images):
    req = GenerationRequest(list(images[:2]), 6, seed=0)
    expected = generate(model, req)
    fresh = build_networks(tiny_network(), seed=99).eval()
    for name in model.generation_modules():
        getattr(fresh, name).load_state_dict(getattr(model, name).state_dict())
    got = generate(fresh, req)
    assert all(np.array_equal(a, b) for a, b in zip(expected, got))


def test_reconstruct_contract(images):
    untrained = build_networks(tiny_network(), seed=0)
    out = reconstruct(untrained, images[0], images[1])
    assert out.shape == (16, 16, 3) and out.min() >= -1 and out.max() <= 1
    assert np.array_equal(out, reconstruct(untrained, images[0], images[1]))
    batch = reconstruct(untrained, images[:3], images[3:6])
    assert len(batch) == 3
    with pytest.raises(ValueError):
        reconstruct(untrained, images[0], images[:2])


def test_interpolation_endpoints_exact(model, images):
    g = torch.Generator().manual_seed(0)
    z1, z2 = torch.randn(2, 8, generator=g)
    frames = interpolate(model, images[0], z1, z2, steps=11)
    assert len(frames) == 11
    assert np.array_equal(frames[0], generate_with_latents(model, images[0], z1)[0])
    assert np.array_equal(frames[-1], generate_with_latents(model, images[0], z2)[0])
    mid = generate_with_latents(model, images[0], 0.5 * z1 + 0.5 * z2)[0]
    np.testing.assert_allclose(frames[5], mid, atol=1e-6)
    same = interpolate(model, images[0], z1, z1, steps=4)
    assert all(np.array_equal(same[0], f) for f in same)
    with pytest.raises(ValueError):
        interpolate(model, images[0], z1, z2, steps=1)


def test_exchange_real_delta_vacuous(model, images):
    out = exchange_real_delta(model, images[0], images[1], images[1])
    with torch.no_grad():
        x1 = torch.from_numpy(images[:1]).permute(0, 3, 1, 2)
        zero = torch.zeros(1, *model.cfg.feature_shape)
        ref = model.decode(model.enc_real(zero), model.encode_content(x1))[0].permute(1, 2, 0).numpy()
    np.testing.assert_allclose(out, ref, atol=1e-6)
    assert np.array_equal(out, exchange_real_delta(model, images[0], images[2], images[2]))
    with pytest.raises(ValueError):
        exchange_real_delta(model, images[0], images[1], images[:2])


def test_exchange_fake_delta_degenerate_is_generation(model, images):
    z = torch.randn(8, generator=torch.Generator().manual_seed(2))
    a = exchange_fake_delta(model, images[0], images[0], z)
    b = generate_with_latents(model, images[0], z)[0]
    assert np.array_equal(a, b)
    c = exchange_fake_delta(model, images[0], images[5], z)
    assert c.shape == (16, 16, 3) and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        exchange_fake_delta(model, images[0], np.zeros((8, 8, 3), np.float32), z)


def test_generate_with_donors(model, toy16):
    index, split = toy16
    same, other = (index.images[c] for c in split.unseen_ids)
    for donors in (list(same[5:10]), list(other[:5])):
        out = generate(model, GenerationRequest([same[0]], 5, seed=0), donors=donors)
        assert len(out) == 5 and all(o.shape == (16, 16, 3) for o in out)
    with pytest.raises(ValueError):
        generate(model, GenerationRequest([same[0]], 5), donors=[])


def test_grid_and_outputs(tmp_path, images):
    rows = [list(images[:3]), list(images[3:5])]
    grid = image_grid(rows, pad=2)
    assert grid.shape == (2 * 18 + 2, 3 * 18 + 2, 3) and grid.dtype == np.uint8
    m = write_outputs(tmp_path, "demo", rows, {"seed": 1})
    assert len(m["images"]) == 5
    assert Image.open(m["grid"]).size == (3 * 18 + 2, 2 * 18 + 2)
    saved = json.loads((tmp_path / "demo_manifest.json").read_text())
    assert saved["seed"] == 1 and saved["grid"] == m["grid"]
    back = np.asarray(Image.open(m["images"][0]), dtype=np.float32) / 127.5 - 1
    assert np.abs(back - images[0]).max() <= 1 / 127.5 + 1e-6
    with pytest.raises(ValueError):
        image_grid([])
