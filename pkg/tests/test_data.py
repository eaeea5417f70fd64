from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagekd.data import (
    Dataset,
    class_templates,
    expand_batch,
    few_shot_split,
    iterate_batches,
    read_dataset,
    synth_generate,
    train_test_partition,
    write_dataset,
)
from stagekd.errors import ContractError, FormatError, ShapeMismatchError
from stagekd.transforms import LabelSpace, quarter_rotations, rotate_quarter


def tiny_dataset(samples=10, classes=3, side=16, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        N=classes,
        images=rng.integers(0, 256, size=(samples, 1, side, side), dtype=np.uint8),
        labels=rng.integers(0, classes, size=samples),
    )


# Serialization --------------------------------------------------------------


def test_round_trip(tmp_path):
    ds = tiny_dataset()
    path = tmp_path / "ds.bin"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back.N == ds.N
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_write_is_byte_stable(tmp_path):
    ds = tiny_dataset()
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    write_dataset(ds, a)
    write_dataset(read_dataset(a), b)
    assert a.read_bytes() == b.read_bytes()


def test_bad_magic(tmp_path):
    ds = tiny_dataset()
    path = tmp_path / "ds.bin"
    write_dataset(ds, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)


def test_truncated_payload_reports_offset(tmp_path):
    ds = tiny_dataset()
    path = tmp_path / "ds.bin"
    write_dataset(ds, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(FormatError, match="byte"):
        read_dataset(path)


def test_header_payload_count_mismatch(tmp_path):
    ds = tiny_dataset()
    path = tmp_path / "ds.bin"
    write_dataset(ds, path)
    path.write_bytes(path.read_bytes() + b"\x00" * 3)
    with pytest.raises(FormatError, match="length mismatch"):
        read_dataset(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "ds.bin"
    path.write_bytes(b"HSKD-DS1\x01\x00")
    with pytest.raises(FormatError, match="header"):
        read_dataset(path)


# Synthetic corpus -----------------------------------------------------------


def test_synth_deterministic():
    a = synth_generate(4, 5, side=16, noise_std=0.1, seed=7)
    b = synth_generate(4, 5, side=16, noise_std=0.1, seed=7)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = synth_generate(4, 5, side=16, noise_std=0.1, seed=8)
    assert not np.array_equal(a.images, c.images)


def test_templates_rotation_asymmetric():
    tpl = class_templates(6, side=16, seed=3)
    for t in tpl:
        for k in (1, 2, 3):
            assert np.abs(t - rotate_quarter(t, k)).max() > 1e-3


def test_noiseless_samples_classify_by_nearest_template():
    ds = synth_generate(5, 8, side=16, noise_std=0.0, seed=11)
    tpl = class_templates(5, side=16, seed=11)
    x = ds.images.astype(np.float64) / 255.0
    dists = ((x[:, None] - tpl[None]) ** 2).sum(axis=(2, 3, 4))
    pred = dists.argmin(axis=1)
    np.testing.assert_array_equal(pred, ds.labels)


def test_synth_balanced_and_validated():
    ds = synth_generate(3, 7, side=16, seed=0)
    assert len(ds) == 21
    assert all((ds.labels == c).sum() == 7 for c in range(3))
    with pytest.raises(ContractError):
        synth_generate(1, 5)
    with pytest.raises(ContractError):
        synth_generate(3, 5, side=8)


# Batch expansion ------------------------------------------------------------


def test_expand_layout_and_labels():
    ds = tiny_dataset(samples=2, classes=3, seed=1)
    space = LabelSpace(N=3, M=4)
    batch = expand_batch(ds.images, ds.labels, quarter_rotations(), space)
    assert batch.images.shape == (8, 1, 16, 16)
    # rows 0 and 4 are the unrotated originals
    np.testing.assert_allclose(batch.images[0], ds.images[0] / 255.0, atol=1e-7)
    np.testing.assert_allclose(batch.images[4], ds.images[1] / 255.0, atol=1e-7)
    for i in range(2):
        for j in range(4):
            row = i * 4 + j
            assert batch.joint_labels[row] == ds.labels[i] * 4 + j
            assert batch.class_labels[row] == ds.labels[i]
            assert batch.transform_ids[row] == j
    np.testing.assert_array_equal(batch.identity_rows, [0, 4])


def test_expand_rows_are_rotations():
    ds = tiny_dataset(samples=3, seed=2)
    space = LabelSpace(N=3, M=4)
    batch = expand_batch(ds.images, ds.labels, quarter_rotations(), space)
    x = ds.images.astype(np.float32) / np.float32(255.0)
    for i in range(3):
        for j in range(4):
            np.testing.assert_array_equal(batch.images[i * 4 + j],
                                          rotate_quarter(x[i], j))


def test_expand_preserves_pixel_multiset_per_row_group():
    ds = tiny_dataset(samples=2, seed=3)
    batch = expand_batch(ds.images, ds.labels, quarter_rotations(), LabelSpace(3, 4))
    for i in range(2):
        base = np.sort(batch.images[i * 4].ravel())
        for j in range(1, 4):
            np.testing.assert_array_equal(np.sort(batch.images[i * 4 + j].ravel()), base)


def test_expand_does_not_mutate_source():
    ds = tiny_dataset(samples=2, seed=4)
    before = ds.images.copy()
    expand_batch(ds.images, ds.labels, quarter_rotations(), LabelSpace(3, 4))
    np.testing.assert_array_equal(ds.images, before)


def test_expand_rejects_non_square():
    with pytest.raises(ShapeMismatchError, match="square"):
        expand_batch(np.zeros((2, 1, 4, 6), dtype=np.uint8), np.zeros(2, dtype=np.int64),
                     quarter_rotations(), LabelSpace(3, 4))


# Few-shot splits ------------------------------------------------------------


def test_split_counts_exact():
    ds = synth_generate(8, 500 // 10, side=16, seed=0)  # 50 per class keeps it quick
    out = few_shot_split(ds, 0.25, seed=1)
    assert all((out.labels == c).sum() == 12 for c in range(8))
    assert len(out) == 96


def test_split_fraction_one_is_set_equal():
    ds = tiny_dataset(samples=20, seed=5)
    out = few_shot_split(ds, 1.0, seed=9)
    assert len(out) == len(ds)
    key = lambda d: {(d.labels[i], d.images[i].tobytes()) for i in range(len(d))}
    assert key(out) == key(ds)


def test_split_subset_of_input():
    ds = tiny_dataset(samples=30, seed=6)
    out = few_shot_split(ds, 0.5, seed=2)
    pool = {ds.images[i].tobytes() for i in range(len(ds))}
    assert all(out.images[i].tobytes() in pool for i in range(len(out)))


def test_splits_nest_at_equal_seed():
    ds = synth_generate(4, 40, side=16, seed=1)
    quarter = few_shot_split(ds, 0.25, seed=5)
    half = few_shot_split(ds, 0.5, seed=5)
    small = {quarter.images[i].tobytes() for i in range(len(quarter))}
    big = {half.images[i].tobytes() for i in range(len(half))}
    assert small <= big


def test_split_deterministic_and_validated():
    ds = tiny_dataset(samples=20, seed=7)
    a = few_shot_split(ds, 0.5, seed=3)
    b = few_shot_split(ds, 0.5, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    with pytest.raises(ContractError):
        few_shot_split(ds, 0.0, seed=0)


def test_split_keeps_at_least_one_per_class():
    ds = tiny_dataset(samples=9, classes=3, seed=8)
    out = few_shot_split(ds, 0.25, seed=0)
    for c in range(3):
        if (ds.labels == c).sum() > 0:
            assert (out.labels == c).sum() >= 1


# Batch iteration ------------------------------------------------------------


def test_batches_cover_dataset_once():
    ds = tiny_dataset(samples=23, seed=9)
    seen = []
    for images, labels in iterate_batches(ds, 8, seed=1, epoch=0):
        assert images.shape[0] == labels.shape[0] <= 8
        seen.extend(img.tobytes() for img in images)
    assert len(seen) == 23
    assert sorted(seen) == sorted(ds.images[i].tobytes() for i in range(23))


def test_batches_deterministic_per_epoch():
    ds = tiny_dataset(samples=16, seed=10)
    run1 = [lab.tolist() for _, lab in iterate_batches(ds, 4, seed=2, epoch=3)]
    run2 = [lab.tolist() for _, lab in iterate_batches(ds, 4, seed=2, epoch=3)]
    run3 = [lab.tolist() for _, lab in iterate_batches(ds, 4, seed=2, epoch=4)]
    assert run1 == run2
    assert run1 != run3


# Dataset validation ---------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(ShapeMismatchError, match="square"):
        Dataset(N=2, images=np.zeros((2, 1, 4, 6), dtype=np.uint8), labels=np.zeros(2))
    with pytest.raises(ContractError, match="labels"):
        Dataset(N=2, images=np.zeros((2, 1, 4, 4), dtype=np.uint8), labels=np.array([0, 2]))


@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_round_trip_property(classes, per_class, seed):
    import tempfile

    ds = synth_generate(classes, per_class, side=16, noise_std=0.2, seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/f.bin"
        write_dataset(ds, path)
        back = read_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.N == ds.N


# Train/test partition -------------------------------------------------------


def test_partition_sizes_and_disjointness():
    pool = synth_generate(3, 10, 16, seed=61)
    train, test = train_test_partition(pool, 7)
    assert len(train.labels) == 21 and len(test.labels) == 9
    for c in range(3):
        assert np.sum(train.labels == c) == 7
        assert np.sum(test.labels == c) == 3
    # Disjoint as multisets of images: no test row appears among train rows.
    train_rows = {r.tobytes() for r in train.images}
    assert all(r.tobytes() not in train_rows for r in test.images)
    assert train.split == "train" and test.split == "test"


def test_partition_halves_share_class_templates():
    # Nearest-template classification works on BOTH halves only when the
    # halves were generated from one template pool.
    pool = synth_generate(4, 12, 16, noise_std=0.12, seed=62)
    train, test = train_test_partition(pool, 9)
    templates = class_templates(4, 16, seed=62).reshape(4, -1)
    for part in (train, test):
        x = part.images.astype(np.float64).reshape(len(part.labels), -1) / 255.0
        d = ((x[:, None, :] - templates[None]) ** 2).sum(axis=2)
        assert np.array_equal(d.argmin(axis=1), part.labels)


def test_partition_rejects_undersized_class():
    pool = synth_generate(2, 5, 16, seed=63)
    with pytest.raises(ContractError):
        train_test_partition(pool, 5)
    with pytest.raises(ContractError):
        train_test_partition(pool, 0)


def test_partition_copies_do_not_alias():
    pool = synth_generate(2, 4, 16, seed=64)
    train, _ = train_test_partition(pool, 2)
    before = pool.images.copy()
    train.images[:] = 0
    np.testing.assert_array_equal(pool.images, before)
