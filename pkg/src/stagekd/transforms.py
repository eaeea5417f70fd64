"""Quarter-turn rotation transforms and the joint (class x transform) label space.

Each input image is passed through M deterministic transforms; transform 0 is
the identity. A sample with class y seen under transform j carries the joint
label k = y * M + j (class-major, so all views of one class are contiguous).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeMismatchError


def rotate_quarter(image: np.ndarray, turns: int) -> np.ndarray:
    """Rotate a CxHxW image counter-clockwise by turns * 90 degrees.

    Per single turn, destination (x, y) reads source (W-1-y, x). Square
    inputs only; returns a fresh contiguous array.
    """
    if image.ndim != 3:
        raise ShapeMismatchError(f"rotate_quarter: expected CxHxW image, got shape {image.shape}")
    _, h, w = image.shape
    if h != w:
        raise ShapeMismatchError(f"rotate_quarter: image must be square, got {h}x{w}")
    if not 0 <= turns <= 3:
        raise ContractError(f"rotate_quarter: turns must be in 0..3, got {turns}")
    return np.ascontiguousarray(np.rot90(image, k=turns, axes=(1, 2)))


def rotate_batch(batch: np.ndarray, turns: int) -> np.ndarray:
    """Same rotation applied across a BxCxHxW batch."""
    if batch.ndim != 4:
        raise ShapeMismatchError(f"rotate_batch: expected BxCxHxW batch, got shape {batch.shape}")
    if batch.shape[2] != batch.shape[3]:
        raise ShapeMismatchError(f"rotate_batch: images must be square, got {batch.shape[2]}x{batch.shape[3]}")
    if not 0 <= turns <= 3:
        raise ContractError(f"rotate_batch: turns must be in 0..3, got {turns}")
    return np.ascontiguousarray(np.rot90(batch, k=turns, axes=(2, 3)))


@dataclass(frozen=True)
class TransformSet:
    """Ordered deterministic image maps; entry 0 is the identity."""

    entries: tuple = field(default_factory=tuple)

    @property
    def M(self) -> int:
        return len(self.entries)

    def apply(self, j: int, image: np.ndarray) -> np.ndarray:
        if not 0 <= j < self.M:
            raise ContractError(f"transform index {j} outside 0..{self.M - 1}")
        return self.entries[j](image)


def quarter_rotations() -> TransformSet:
    """The shipped transform set: rotations by 0, 90, 180, 270 degrees CCW."""
    def make(turns: int) -> Callable[[np.ndarray], np.ndarray]:
        return lambda img: rotate_quarter(img, turns)

    return TransformSet(entries=tuple(make(t) for t in range(4)))


@dataclass(frozen=True)
class LabelSpace:
    """The product label space of N classes crossed with M transforms."""

    N: int
    M: int

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ContractError(f"label space needs positive N and M, got N={self.N}, M={self.M}")

    @property
    def size(self) -> int:
        return self.N * self.M


def joint_label(y: int, j: int, space: LabelSpace) -> int:
    """Fuse class y and transform j into the joint index y*M + j."""
    if not 0 <= y < space.N:
        raise ContractError(f"class index {y} outside 0..{space.N - 1}")
    if not 0 <= j < space.M:
        raise ContractError(f"transform index {j} outside 0..{space.M - 1}")
    return y * space.M + j


def split_label(k: int, space: LabelSpace) -> tuple[int, int]:
    """Inverse of joint_label."""
    if not 0 <= k < space.size:
        raise ContractError(f"joint index {k} outside 0..{space.size - 1}")
    return divmod(k, space.M)


def joint_labels_batch(y: np.ndarray, j: int, space: LabelSpace) -> np.ndarray:
    """Vectorized joint_label for a label vector under one transform index."""
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= space.N):
        raise ContractError(f"class index outside 0..{space.N - 1}")
    if not 0 <= j < space.M:
        raise ContractError(f"transform index {j} outside 0..{space.M - 1}")
    return y * space.M + j
