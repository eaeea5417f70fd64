"""Dataset container, binary I/O, synthetic corpus, and batch expansion.

The on-disk format is deliberately tiny (little-endian):

    magic "HSKD-DS1" | u32 version=1 | u32 N | u32 sample_count
    | u32 C | u32 H | u32 W | sample_count x u16 labels
    | sample_count*C*H*W x u8 pixels (sample-major, channel-major)

Pixels stay u8 at rest; batches are normalized to float [0,1] on expansion.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, ShapeMismatchError
from .transforms import LabelSpace, TransformSet, rotate_batch

MAGIC = b"HSKD-DS1"
VERSION = 1


@dataclass
class Dataset:
    """Labeled u8 images, all square and channel-consistent."""

    N: int
    images: np.ndarray  # (S, C, H, W) u8
    labels: np.ndarray  # (S,) int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ShapeMismatchError(f"images must be SxCxHxW, got shape {self.images.shape}")
        if self.images.shape[2] != self.images.shape[3]:
            raise ShapeMismatchError(
                f"images must be square, got {self.images.shape[2]}x{self.images.shape[3]}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeMismatchError(
                f"labels shape {self.labels.shape} vs {self.images.shape[0]} samples")
        if self.N < 1:
            raise ContractError(f"class count must be positive, got {self.N}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.N):
            raise ContractError(f"labels must lie in 0..{self.N - 1}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def write_dataset(ds: Dataset, path) -> None:
    s, c, h, w = ds.images.shape
    if s > 0xFFFF_FFFF or ds.N > 0xFFFF:
        raise ContractError("dataset too large for the on-disk header")
    payload = bytearray()
    payload += struct.pack("<8sIIIIII", MAGIC, VERSION, ds.N, s, c, h, w)
    payload += ds.labels.astype("<u2").tobytes()
    payload += ds.images.tobytes()
    Path(path).write_bytes(bytes(payload))


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    head = struct.calcsize("<8sIIIIII")
    if len(blob) < head:
        raise FormatError(f"file truncated inside header at byte {len(blob)} (need {head})")
    magic, version, n, s, c, h, w = struct.unpack_from("<8sIIIIII", blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    label_bytes = s * 2
    pixel_bytes = s * c * h * w
    expected = head + label_bytes + pixel_bytes
    if len(blob) != expected:
        offset = min(len(blob), expected)
        raise FormatError(
            f"payload length mismatch at byte {offset}: file has {len(blob)} bytes, "
            f"header implies {expected}")
    labels = np.frombuffer(blob, dtype="<u2", count=s, offset=head).astype(np.int64)
    images = np.frombuffer(blob, dtype=np.uint8, count=pixel_bytes,
                           offset=head + label_bytes).reshape(s, c, h, w)
    return Dataset(N=n, images=images.copy(), labels=labels)


def _nearest_upsample(template: np.ndarray, side: int) -> np.ndarray:
    src = template.shape[-1]
    idx = np.arange(side) * src // side
    return template[:, idx][:, :, idx]


def synth_generate(classes: int, per_class: int, side: int = 16,
                   noise_std: float = 0.12, seed: int = 0,
                   channels: int = 1, split: str = "train") -> Dataset:
    """Synthetic corpus: one rotation-asymmetric template per class plus
    per-sample Gaussian pixel noise.

    Templates are random 8x8 patterns upsampled (nearest) to side x side and
    redrawn if any of their own quarter-rotations matches within 1e-3, so
    rotating a sample always changes which template it is nearest to.
    """
    if classes < 2:
        raise ContractError(f"need at least 2 classes, got {classes}")
    if side < 16:
        raise ContractError(f"side must be at least 16, got {side}")
    if per_class < 1:
        raise ContractError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))

    templates = []
    for _ in range(classes):
        while True:
            t = rng.random((channels, 8, 8))
            rotations = [np.rot90(t, k, axes=(1, 2)) for k in (1, 2, 3)]
            if all(np.abs(t - r).max() > 1e-3 for r in rotations):
                break
        templates.append(_nearest_upsample(t, side))

    images = np.empty((classes * per_class, channels, side, side), dtype=np.uint8)
    labels = np.empty(classes * per_class, dtype=np.int64)
    row = 0
    for y, tpl in enumerate(templates):
        for _ in range(per_class):
            sample = tpl + rng.normal(0.0, noise_std, size=tpl.shape)
            images[row] = np.clip(np.rint(sample * 255.0), 0, 255).astype(np.uint8)
            labels[row] = y
            row += 1
    return Dataset(N=classes, images=images, labels=labels, split=split)


def class_templates(classes: int, side: int, seed: int, channels: int = 1) -> np.ndarray:
    """The noiseless per-class templates the generator is built around."""
    return synth_generate(classes, 1, side=side, noise_std=0.0, seed=seed,
                          channels=channels).images.astype(np.float64) / 255.0


def train_test_partition(ds: Dataset, train_per_class: int) -> tuple[Dataset, Dataset]:
    """Carve one corpus into disjoint train/test parts: the first
    ``train_per_class`` samples of each class (in dataset order) train, the
    rest test. Both halves share the generator's class templates; only the
    per-sample noise differs."""
    if train_per_class < 1:
        raise ContractError(f"train_per_class must be positive, got {train_per_class}")
    train_idx, test_idx = [], []
    for c in range(ds.N):
        rows = np.flatnonzero(ds.labels == c)
        if len(rows) <= train_per_class:
            raise ContractError(
                f"class {c} has {len(rows)} samples; need more than {train_per_class}")
        train_idx.append(rows[:train_per_class])
        test_idx.append(rows[train_per_class:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    mk = lambda idx, split: Dataset(N=ds.N, images=ds.images[idx].copy(),
                                    labels=ds.labels[idx].copy(), split=split)
    return mk(train_idx, "train"), mk(test_idx, "test")


@dataclass
class ExpandedBatch:
    """All M transform views of a batch, sample-major: row i*M+j holds
    t_j(x_i). Images are float32 in [0,1]."""

    images: np.ndarray
    joint_labels: np.ndarray
    class_labels: np.ndarray
    transform_ids: np.ndarray

    @property
    def identity_rows(self) -> np.ndarray:
        return np.flatnonzero(self.transform_ids == 0)


def expand_batch(images: np.ndarray, labels: np.ndarray, transforms: TransformSet,
                 space: LabelSpace) -> ExpandedBatch:
    """Expand B samples to B*M rows covering every transform view."""
    if images.ndim != 4:
        raise ShapeMismatchError(f"expected BxCxHxW images, got shape {images.shape}")
    if images.shape[2] != images.shape[3]:
        raise ShapeMismatchError(
            f"images must be square, got {images.shape[2]}x{images.shape[3]}")
    M = transforms.M
    if M != space.M:
        raise ContractError(f"transform set M={M} vs label space M={space.M}")
    labels = np.asarray(labels, dtype=np.int64)
    B, C, H, W = images.shape
    x = images.astype(np.float32) / np.float32(255.0) if images.dtype == np.uint8 \
        else images.astype(np.float32)

    views = np.empty((B, M, C, H, W), dtype=np.float32)
    for j in range(M):
        views[:, j] = rotate_batch(x, j)
    out = views.reshape(B * M, C, H, W)

    transform_ids = np.tile(np.arange(M, dtype=np.int64), B)
    class_labels = np.repeat(labels, M)
    joint = class_labels * M + transform_ids
    if labels.size and (labels.min() < 0 or labels.max() >= space.N):
        raise ContractError(f"class label outside 0..{space.N - 1}")
    return ExpandedBatch(images=np.ascontiguousarray(out), joint_labels=joint,
                         class_labels=class_labels, transform_ids=transform_ids)


def few_shot_split(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified per-class subsample keeping floor(fraction * count), at
    least 1. Prefixes of a per-class seeded shuffle, so smaller fractions
    are nested inside larger ones at equal seed."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must lie in (0, 1], got {fraction}")
    keep: list[np.ndarray] = []
    for c in range(ds.N):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        perm = np.random.default_rng(np.random.SeedSequence([seed, c])).permutation(idx)
        count = max(1, int(np.floor(fraction * idx.size)))
        keep.append(perm[:count])
    order = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=np.int64)
    return Dataset(N=ds.N, images=ds.images[order].copy(), labels=ds.labels[order].copy(),
                   split=ds.split)


def iterate_batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Deterministic per-epoch shuffled minibatches of (images, labels)."""
    if batch_size < 1:
        raise ContractError(f"batch size must be positive, got {batch_size}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        take = perm[start:start + batch_size]
        yield ds.images[take], ds.labels[take]
