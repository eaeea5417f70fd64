"""Staged CNN backbones with per-stage feature taps and auxiliary heads.

A model is L stages of conv-ReLU blocks. After each stage l the feature map
is tapped; an auxiliary classifier attached there owns a fresh-parameter copy
of stages l+1..L followed by global average pooling and a linear head over
the joint (class x transform) space. The inference path (backbone + final
head) shares no parameters with any auxiliary classifier, so the aux heads
can be discarded after training without touching class predictions.

Parameter naming is the stable dotted scheme used by checkpoints:

    backbone.stage{l}.conv{b}.weight / .bias     l, b 1-indexed
    head.weight / head.bias
    aux{l}.stage{m}.conv{b}.weight / .bias       m = mirrored backbone stage
    aux{l}.head.weight / .bias
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeMismatchError
from .tensor import Parameter, Tensor

KERNEL = 3
PAD = 1


@dataclass(frozen=True)
class StageSpec:
    """One backbone stage: ``blocks`` conv-ReLU blocks at ``channels`` width,
    optionally opening with a stride-2 conv."""

    blocks: int
    channels: int
    downsample: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise ContractError(f"stage needs at least one block, got {self.blocks}")
        if self.channels < 1:
            raise ContractError(f"stage needs positive channels, got {self.channels}")


def default_stage_specs(base_width: int = 16) -> tuple[StageSpec, ...]:
    """Three stages, width doubling, stride-2 entries into stages 2 and 3."""
    return (
        StageSpec(blocks=2, channels=base_width, downsample=False),
        StageSpec(blocks=2, channels=base_width * 2, downsample=True),
        StageSpec(blocks=2, channels=base_width * 4, downsample=True),
    )


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Per-parameter stream keyed by (seed, name) so equal architectures with
    # equal seeds initialize bitwise identically, independent of build order.
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _he_conv(seed: int, name: str, cout: int, cin: int) -> np.ndarray:
    fan_in = cin * KERNEL * KERNEL
    std = np.sqrt(2.0 / fan_in)
    return (_param_rng(seed, name).standard_normal((cout, cin, KERNEL, KERNEL)) * std).astype(np.float32)


def _he_linear(seed: int, name: str, d_in: int, d_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / d_in)
    return (_param_rng(seed, name).standard_normal((d_in, d_out)) * std).astype(np.float32)


class StagedModel:
    """Backbone, final head, and one auxiliary classifier per stage."""

    def __init__(self, stages: Sequence[StageSpec], N: int, M: int, seed: int,
                 in_channels: int = 1):
        if not stages:
            raise ContractError("model needs at least one stage")
        if N < 1 or M < 1:
            raise ContractError(f"class and transform counts must be positive, got N={N}, M={M}")
        self.stages = tuple(stages)
        self.N = int(N)
        self.M = int(M)
        self.in_channels = int(in_channels)
        self.seed = int(seed)
        self.params: dict[str, Parameter] = {}

        cin = in_channels
        for l, spec in enumerate(self.stages, start=1):
            self._add_stage_params(f"backbone.stage{l}", spec, cin)
            cin = spec.channels
        d = self.stages[-1].channels
        self._add_linear("head", d, self.N)

        L = len(self.stages)
        for l in range(1, L + 1):
            cin = self.stages[l - 1].channels
            for m in range(l + 1, L + 1):
                self._add_stage_params(f"aux{l}.stage{m}", self.stages[m - 1], cin)
                cin = self.stages[m - 1].channels
            self._add_linear(f"aux{l}.head", cin, self.N * self.M)

    # Construction helpers ---------------------------------------------------

    def _register(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Parameter(name, Tensor(data, requires_grad=True))

    def _add_stage_params(self, prefix: str, spec: StageSpec, cin: int) -> None:
        for b in range(1, spec.blocks + 1):
            wname = f"{prefix}.conv{b}.weight"
            self._register(wname, _he_conv(self.seed, wname, spec.channels, cin))
            self._register(f"{prefix}.conv{b}.bias",
                           np.zeros(spec.channels, dtype=np.float32))
            cin = spec.channels

    def _add_linear(self, prefix: str, d_in: int, d_out: int) -> None:
        wname = f"{prefix}.weight"
        self._register(wname, _he_linear(self.seed, wname, d_in, d_out))
        self._register(f"{prefix}.bias", np.zeros(d_out, dtype=np.float32))

    # Parameter access -------------------------------------------------------

    @property
    def L(self) -> int:
        return len(self.stages)

    @property
    def embedding_dim(self) -> int:
        return self.stages[-1].channels

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def backbone_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items()
                if n.startswith("backbone.") or n.startswith("head.")]

    def aux_parameters(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("aux")]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ContractError(
                f"parameter name mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise ShapeMismatchError(
                    f"parameter {name}: stored shape {arr.shape} vs model shape {p.data.shape}")
            p.data = arr.copy()

    # Forward passes ---------------------------------------------------------

    def _run_stage(self, x: Tensor, prefix: str, spec: StageSpec) -> Tensor:
        for b in range(1, spec.blocks + 1):
            stride = 2 if (spec.downsample and b == 1) else 1
            w = self.params[f"{prefix}.conv{b}.weight"].tensor
            bias = self.params[f"{prefix}.conv{b}.bias"].tensor
            x = T.conv2d(x, w, stride=stride, padding=PAD)
            x = T.add(x, T.reshape(bias, (1, spec.channels, 1, 1)))
            x = T.relu(x)
        return x

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        w = self.params[f"{prefix}.weight"].tensor
        b = self.params[f"{prefix}.bias"].tensor
        return T.add(T.matmul(x, w), T.reshape(b, (1, w.shape[1])))

    def forward_taps(self, batch: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Run the backbone; return final-head class logits and all stage taps."""
        if batch.ndim != 4:
            raise ShapeMismatchError(f"expected BxCxHxW batch, got shape {batch.shape}")
        if batch.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"batch channel axis {batch.shape[1]} vs model input channels {self.in_channels}")
        x = batch
        taps: list[Tensor] = []
        for l, spec in enumerate(self.stages, start=1):
            x = self._run_stage(x, f"backbone.stage{l}", spec)
            taps.append(x)
        logits = self._linear(T.global_avg_pool(x), "head")
        return logits, taps

    def aux_forward(self, taps: Sequence[Tensor], detach: bool = False) -> list[Tensor]:
        """Joint-space logits from each auxiliary classifier.

        With ``detach`` the taps are cut from the tape first, so aux losses
        cannot reach the backbone (frozen-backbone teacher regime).
        """
        if len(taps) != self.L:
            raise ContractError(f"expected {self.L} taps, got {len(taps)}")
        outs: list[Tensor] = []
        for l in range(1, self.L + 1):
            x = taps[l - 1]
            if detach:
                x = x.detach()
            for m in range(l + 1, self.L + 1):
                x = self._run_stage(x, f"aux{l}.stage{m}", self.stages[m - 1])
            outs.append(self._linear(T.global_avg_pool(x), f"aux{l}.head"))
        return outs

    def predict_class_logits(self, batch: Tensor) -> Tensor:
        logits, _ = self.forward_taps(batch)
        return logits


def build_model(stages: Sequence[StageSpec], N: int, M: int, seed: int,
                in_channels: int = 1) -> StagedModel:
    """Deterministic construction; equal arguments give bitwise-equal weights."""
    return StagedModel(stages, N, M, seed, in_channels=in_channels)
