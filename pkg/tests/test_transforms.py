from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagekd.errors import ContractError, ShapeMismatchError
from stagekd.transforms import (
    LabelSpace,
    joint_label,
    joint_labels_batch,
    quarter_rotations,
    rotate_batch,
    rotate_quarter,
    split_label,
)


def rotate_once_oracle(image: np.ndarray) -> np.ndarray:
    """Index-map reference: source (x, y) lands at destination (W-1-y, x)."""
    c, h, w = image.shape
    out = np.empty_like(image)
    for x in range(h):
        for y in range(w):
            out[:, w - 1 - y, x] = image[:, x, y]
    return out


def test_turns_zero_is_identity():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((3, 5, 5))
    np.testing.assert_array_equal(rotate_quarter(img, 0), img)


def test_two_by_two_single_turn():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(rotate_quarter(img, 1), [[[2.0, 4.0], [1.0, 3.0]]])


def test_four_single_turns_recover_original():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((2, 6, 6))
    out = img
    for _ in range(4):
        out = rotate_quarter(out, 1)
    np.testing.assert_array_equal(out, img)


@pytest.mark.parametrize("size", [2, 3, 5, 8])
def test_matches_index_map_oracle(size):
    rng = np.random.default_rng(size)
    for _ in range(10):
        img = rng.standard_normal((2, size, size))
        expect = img.copy()
        for turns in range(4):
            np.testing.assert_array_equal(rotate_quarter(img, turns), expect)
            expect = rotate_once_oracle(expect)


@given(st.integers(0, 3), st.integers(0, 3), st.integers(1, 2), st.integers(2, 7),
       st.integers(0, 2 ** 31 - 1))
@settings(max_examples=80, deadline=None)
def test_rotation_composition(a, b, channels, size, seed):
    img = np.random.default_rng(seed).standard_normal((channels, size, size))
    two_step = rotate_quarter(rotate_quarter(img, a), b)
    np.testing.assert_array_equal(two_step, rotate_quarter(img, (a + b) % 4))


@pytest.mark.parametrize("size", [16, 32])
def test_value_multiset_and_norm_preserved(size):
    rng = np.random.default_rng(size)
    for _ in range(50):
        img = rng.standard_normal((1, size, size))
        for turns in range(4):
            out = rotate_quarter(img, turns)
            np.testing.assert_array_equal(np.sort(out.ravel()), np.sort(img.ravel()))
            # Norm compared in canonical (sorted) summation order so the
            # permutation equality is bitwise, not summation-order dependent.
            assert np.linalg.norm(np.sort(out.ravel())) == np.linalg.norm(np.sort(img.ravel()))


def test_rotate_rejects_non_square():
    with pytest.raises(ShapeMismatchError, match="square"):
        rotate_quarter(np.zeros((1, 2, 3)), 1)


def test_rotate_rejects_bad_turns():
    with pytest.raises(ContractError, match="turns"):
        rotate_quarter(np.zeros((1, 2, 2)), 4)


def test_batch_rotation_matches_per_image():
    rng = np.random.default_rng(5)
    batch = rng.standard_normal((4, 2, 6, 6))
    for turns in range(4):
        got = rotate_batch(batch, turns)
        for i in range(4):
            np.testing.assert_array_equal(got[i], rotate_quarter(batch[i], turns))


def test_transform_set_entry_zero_identity():
    ts = quarter_rotations()
    assert ts.M == 4
    img = np.random.default_rng(9).standard_normal((1, 4, 4))
    np.testing.assert_array_equal(ts.apply(0, img), img)
    np.testing.assert_array_equal(ts.apply(2, img), rotate_quarter(img, 2))
    with pytest.raises(ContractError):
        ts.apply(4, img)


# Joint label space ----------------------------------------------------------


def product_enumeration_oracle(N: int, M: int) -> dict:
    """Class-major walk of the Cartesian product."""
    table = {}
    k = 0
    for y in range(N):
        for j in range(M):
            table[(y, j)] = k
            k += 1
    return table


def test_joint_label_fixed_cases():
    space = LabelSpace(N=10, M=4)
    assert joint_label(0, 0, space) == 0
    assert joint_label(2, 1, space) == 9
    assert joint_label(9, 3, space) == 39
    assert split_label(0, space) == (0, 0)
    assert split_label(9, space) == (2, 1)


def test_joint_label_matches_enumeration_oracle():
    for N, M in [(1, 1), (3, 4), (10, 4), (7, 5)]:
        space = LabelSpace(N=N, M=M)
        oracle = product_enumeration_oracle(N, M)
        for (y, j), k in oracle.items():
            assert joint_label(y, j, space) == k
            assert split_label(k, space) == (y, j)


@given(st.integers(1, 20), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_bijection_exhaustive(N, M):
    space = LabelSpace(N=N, M=M)
    seen = set()
    for y in range(N):
        for j in range(M):
            k = joint_label(y, j, space)
            assert 0 <= k < space.size
            assert k not in seen
            seen.add(k)
            assert split_label(k, space) == (y, j)
    assert len(seen) == space.size


def test_label_range_validation():
    space = LabelSpace(N=3, M=4)
    with pytest.raises(ContractError):
        joint_label(3, 0, space)
    with pytest.raises(ContractError):
        joint_label(0, 4, space)
    with pytest.raises(ContractError):
        split_label(12, space)
    with pytest.raises(ContractError):
        joint_labels_batch(np.array([0, 3]), 0, space)


def test_batch_joint_labels():
    space = LabelSpace(N=5, M=4)
    y = np.array([0, 2, 4])
    np.testing.assert_array_equal(joint_labels_batch(y, 3, space), [3, 11, 19])
