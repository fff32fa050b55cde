import numpy as np
import pytest
import torch
from PIL import Image

from deltagan.data import load_dataset_index, split_categories
from deltagan.networks import NetworkConfig, build_networks
from deltagan.toy import make_toy_corpus

torch.set_num_threads(1)


def tiny_network(**kw) -> NetworkConfig:
    """16 px model that trains in milliseconds per step."""
    base = dict(image_size=16, base_channels=4, feature_channels=16, z_dim=8,
                disc_channels=(4, 8, 8, 8), match_hidden=16, n_seen_categories=6)
    return NetworkConfig(**{**base, **kw})


def write_corpus(root, counts, size=8, seed=0):
    """``counts`` images per category directory, random pixels."""
    rng = np.random.default_rng(seed)
    for k, n in enumerate(counts):
        d = root / f"c{k:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(d / f"{i}.png")
    return root


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    return make_toy_corpus(tmp_path_factory.mktemp("toy"), seed=0)


@pytest.fixture(scope="session")
def toy16(toy_root):
    index = load_dataset_index(toy_root, 16)
    return index, split_categories(index, 2, 0)


@pytest.fixture(scope="session")
def toy32(toy_root):
    index = load_dataset_index(toy_root, 32)
    return index, split_categories(index, 2, 0)


@pytest.fixture
def tiny_model():
    return build_networks(tiny_network(), seed=0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
