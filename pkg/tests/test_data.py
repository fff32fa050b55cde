import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from deltagan.data import (
    DatasetError,
    EpisodeSampler,
    CategorySplit,
    holdout_split,
    load_dataset_index,
    preprocess_image,
    sample_eval_task,
    sample_training_episode,
    split_categories,
    to_uint8,
    worker_seed,
)
from deltagan.toy import make_toy_corpus

from conftest import write_corpus


def _png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def test_toy_corpus_index_counts(toy16):
    index, _ = toy16
    assert len(index.categories) == 8
    assert index.n_images == 320
    assert all(index.images[c.id].shape == (40, 16, 16, 3) for c in index.categories)
    assert len({c.id for c in index.categories}) == 8


def test_empty_dataset(tmp_path):
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset_index(tmp_path, 16)


def test_missing_root(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset_index(tmp_path / "nope", 16)


def test_single_image_category_flagged(tmp_path, caplog):
    write_corpus(tmp_path, [3, 1, 2])
    with caplog.at_level(logging.WARNING):
        index = load_dataset_index(tmp_path, 8)
    assert index.unpairable == [1]
    assert "cannot be paired" in caplog.text


def test_unreadable_images_skipped_then_fatal(tmp_path, caplog):
    write_corpus(tmp_path, [10, 10])
    (tmp_path / "c00" / "bad.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        index = load_dataset_index(tmp_path, 8)
    assert index.n_images == 20 and "unreadable" in caplog.text
    for i in range(2):
        (tmp_path / "c01" / f"bad{i}.png").write_bytes(b"junk")
    with pytest.raises(DatasetError, match="unreadable"):
        load_dataset_index(tmp_path, 8)


def test_preprocess_endpoints():
    black = preprocess_image(_png_bytes(np.zeros((5, 5, 3), np.uint8)), 5)
    white = preprocess_image(_png_bytes(np.full((5, 5, 3), 255, np.uint8)), 5)
    gray = preprocess_image(_png_bytes(np.full((5, 5, 3), 128, np.uint8)), 5)
    assert black.shape == (5, 5, 3) and black.dtype == np.float32
    assert np.all(black == -1.0) and np.all(white == 1.0)
    np.testing.assert_allclose(gray, 2 * 128 / 255 - 1, atol=1e-6)


def test_preprocess_resizes_square():
    out = preprocess_image(Image.new("RGB", (30, 20), (10, 20, 30)), 16)
    assert out.shape == (16, 16, 3)


def test_preprocess_undecodable():
    with pytest.raises(DatasetError):
        preprocess_image(b"\x00\x01garbage", 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_preprocess_roundtrip_within_quantization(seed):
    arr = np.random.default_rng(seed).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    back = to_uint8(preprocess_image(_png_bytes(arr), 6))
    assert np.abs(back.astype(int) - arr.astype(int)).max() <= 1


def test_split_determinism_and_partition(toy16):
    index, _ = toy16
    a, b = split_categories(index, 2, 7), split_categories(index, 2, 7)
    assert a == b
    assert not a.seen & a.unseen and a.seen | a.unseen == set(range(8))
    assert len(a.unseen) == 2


@pytest.mark.parametrize("n_unseen", [0, 8, -1])
def test_split_out_of_range(toy16, n_unseen):
    with pytest.raises(DatasetError):
        split_categories(toy16[0], n_unseen, 0)


def test_split_large_category_count(tmp_path):
    write_corpus(tmp_path, [2] * 38, size=4)
    split = split_categories(load_dataset_index(tmp_path, 4), 10, 0)
    assert (len(split.seen), len(split.unseen)) == (28, 10)


def test_split_json_roundtrip(toy16):
    index, split = toy16
    assert CategorySplit.from_json(split.to_json(index), index) == split


def test_two_image_category_yields_both_orders(tmp_path):
    write_corpus(tmp_path, [2, 3])
    index = load_dataset_index(tmp_path, 8)
    split = CategorySplit(frozenset({0}), frozenset({1}), 0)
    rng = np.random.default_rng(0)
    pairs = {(e.i1, e.i2) for e in (sample_training_episode(index, split, rng) for _ in range(200))}
    assert pairs == {(0, 1), (1, 0)}


def test_no_eligible_seen_category(tmp_path):
    write_corpus(tmp_path, [1, 1, 3])
    index = load_dataset_index(tmp_path, 8)
    split = CategorySplit(frozenset({0, 1}), frozenset({2}), 0)
    with pytest.raises(DatasetError):
        sample_training_episode(index, split, np.random.default_rng(0))
    with pytest.raises(DatasetError):
        EpisodeSampler(index, split, 0)


def test_episode_category_marginal_uniform(tmp_path):
    # 4 eligible seen categories of very different sizes plus an unpairable one.
    write_corpus(tmp_path, [2, 5, 9, 20, 1, 4], size=4)
    index = load_dataset_index(tmp_path, 4)
    split = CategorySplit(frozenset({0, 1, 2, 3, 4}), frozenset({5}), 0)
    rng = np.random.default_rng(123)
    n = 10_000
    cats = np.array([sample_training_episode(index, split, rng).category for _ in range(n)])
    counts = np.bincount(cats, minlength=6)
    assert counts[4] == 0 and counts[5] == 0
    p = 0.25
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts[:4] - n * p) <= 3 * sigma), counts
    chi2 = ((counts[:4] - n * p) ** 2 / (n * p)).sum()
    assert chi2 < 16.27  # 3 dof, p = 0.001


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_episode_invariants(toy16, seed):
    index, split = toy16
    e = sample_training_episode(index, split, np.random.default_rng(seed))
    assert e.category in split.seen
    assert e.i1 != e.i2
    np.testing.assert_array_equal(e.x1, index.images[e.category][e.i1])
    np.testing.assert_array_equal(e.x2, index.images[e.category][e.i2])


def test_sampler_state_roundtrip(toy16):
    index, split = toy16
    s = EpisodeSampler(index, split, worker_seed(3, 1))
    s.batch(5)
    state = s.get_state()
    a = [(e.category, e.i1, e.i2) for e in s.batch(7)]
    s.set_state(state)
    assert a == [(e.category, e.i1, e.i2) for e in s.batch(7)]


def test_worker_seed_rule():
    assert [worker_seed(10, k) for k in range(3)] == [10, 11, 12]


def test_eval_task_partition(toy16):
    index, split = toy16
    task = sample_eval_task(index, split, 2, 1, seed=4)
    assert set(task.categories) == set(split.unseen)
    for cid in task.categories:
        assert len(task.support[cid]) == 1
        assert len(task.query[cid]) == 39
        assert not set(task.support[cid]) & set(task.query[cid])
    xs, ys = task.arrays(index, "support")
    assert xs.shape == (2, 16, 16, 3) and list(ys) == [0, 1]
    again = sample_eval_task(index, split, 2, 1, seed=4)
    assert again == task


def test_eval_task_infeasible(toy16):
    index, split = toy16
    with pytest.raises(DatasetError):
        sample_eval_task(index, split, 3, 1, 0)
    with pytest.raises(DatasetError):
        sample_eval_task(index, split, 2, 40, 0)


def test_holdout_split_disjoint(toy16):
    index, split = toy16
    train, held = holdout_split(index, split, 5, 0)
    for cid in split.seen_ids:
        a = set(train.categories[cid].files)
        b = set(held.categories[cid].files)
        assert len(b) == 5 and len(a) == 35 and not a & b
    for cid in split.unseen_ids:
        assert train.categories[cid].files == index.categories[cid].files


def test_toy_corpus_deterministic(tmp_path):
    a = make_toy_corpus(tmp_path / "a", seed=3, per_category=3, image_size=32)
    b = make_toy_corpus(tmp_path / "b", seed=3, per_category=3, image_size=32)
    c = make_toy_corpus(tmp_path / "c", seed=4, per_category=3, image_size=32)
    files = sorted(p.relative_to(a) for p in a.rglob("*.png"))
    assert len(files) == 24
    assert files == sorted(p.relative_to(c) for p in c.rglob("*.png"))
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
    assert any((a / f).read_bytes() != (c / f).read_bytes() for f in files)
