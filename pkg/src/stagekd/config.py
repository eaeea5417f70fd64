"""Run configuration: typed dataclass plus a strict `key = value` text form.

The text form is what config files, CLI overrides, and checkpoint headers
share. Parsing is strict: unknown keys, malformed lines, and out-of-range
values all raise ConfigError rather than being ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .models import StageSpec

TEACHER_REGIMES = ("joint", "frozen")


def encode_stages(stages) -> str:
    """E.g. (16x2, 32x2 stride-2, 64x2 stride-2) -> "16x2,32x2d,64x2d"."""
    parts = []
    for s in stages:
        parts.append(f"{s.channels}x{s.blocks}" + ("d" if s.downsample else ""))
    return ",".join(parts)


def decode_stages(text: str) -> tuple[StageSpec, ...]:
    out = []
    for i, part in enumerate(text.split(","), start=1):
        part = part.strip()
        down = part.endswith("d")
        if down:
            part = part[:-1]
        try:
            channels_s, blocks_s = part.split("x")
            spec = StageSpec(blocks=int(blocks_s), channels=int(channels_s), downsample=down)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"stage entry {i} unparseable: {text!r}") from e
        out.append(spec)
    if not out:
        raise ConfigError("stages must list at least one stage")
    return tuple(out)


def _encode_ints(values) -> str:
    return ",".join(str(v) for v in values) if values else "none"


def _decode_ints(text: str, key: str) -> tuple[int, ...]:
    text = text.strip()
    if text in ("", "none"):
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from e


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run needs, in one place."""

    stages: tuple[StageSpec, ...] = field(
        default_factory=lambda: (StageSpec(2, 16), StageSpec(2, 32, True), StageSpec(2, 64, True)))
    classes: int = 8
    transforms: int = 4
    in_channels: int = 1
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    # 0.01 is the largest step the unit-weighted mimicry objective tolerates
    # at this scale; bigger steps against a confident teacher kill every ReLU
    # in the first epoch and training never recovers.
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (30, 45)
    lr_decay: float = 0.1
    tau_task: float = 1.0
    tau_mimic: float = 3.0
    teacher_regime: str = "joint"
    kl_q: bool = True
    kl_p: bool = True
    kd: bool = False
    ce_sad_s: bool = False
    kl_q_stages: tuple[int, ...] = ()  # empty = every stage pair
    strict: bool = True
    train_path: str = ""
    test_path: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"classes must be at least 2, got {self.classes}")
        if self.transforms < 1:
            raise ConfigError(f"transforms must be positive, got {self.transforms}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.tau_task <= 0 or self.tau_mimic <= 0:
            raise ConfigError("temperatures must be positive")
        if self.teacher_regime not in TEACHER_REGIMES:
            raise ConfigError(
                f"teacher_regime must be one of {TEACHER_REGIMES}, got {self.teacher_regime!r}")
        L = len(self.stages)
        for s in self.kl_q_stages:
            if not 1 <= s <= L:
                raise ConfigError(f"kl_q_stages entry {s} outside 1..{L}")

    def to_text(self) -> str:
        lines = [
            f"stages = {encode_stages(self.stages)}",
            f"classes = {self.classes}",
            f"transforms = {self.transforms}",
            f"in_channels = {self.in_channels}",
            f"seed = {self.seed}",
            f"epochs = {self.epochs}",
            f"batch_size = {self.batch_size}",
            f"lr = {self.lr!r}",
            f"momentum = {self.momentum!r}",
            f"weight_decay = {self.weight_decay!r}",
            f"milestones = {_encode_ints(self.milestones)}",
            f"lr_decay = {self.lr_decay!r}",
            f"tau_task = {self.tau_task!r}",
            f"tau_mimic = {self.tau_mimic!r}",
            f"teacher_regime = {self.teacher_regime}",
            f"kl_q = {str(self.kl_q).lower()}",
            f"kl_p = {str(self.kl_p).lower()}",
            f"kd = {str(self.kd).lower()}",
            f"ce_sad_s = {str(self.ce_sad_s).lower()}",
            f"kl_q_stages = {_encode_ints(self.kl_q_stages)}",
            f"strict = {str(self.strict).lower()}",
            f"train_path = {self.train_path}",
            f"test_path = {self.test_path}",
            f"out_dir = {self.out_dir}",
        ]
        return "\n".join(lines) + "\n"


_BOOL_KEYS = {"kl_q", "kl_p", "kd", "ce_sad_s", "strict"}
_INT_KEYS = {"classes", "transforms", "in_channels", "seed", "epochs", "batch_size"}
_FLOAT_KEYS = {"lr", "momentum", "weight_decay", "lr_decay", "tau_task", "tau_mimic"}
_TUPLE_KEYS = {"milestones", "kl_q_stages"}
_STR_KEYS = {"teacher_regime", "train_path", "test_path", "out_dir"}
KNOWN_KEYS = {"stages"} | _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _TUPLE_KEYS | _STR_KEYS


def parse_kv_text(text: str) -> dict[str, str]:
    """`key = value` lines; `#` opens a comment; blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def _parse_bool(value: str, key: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def config_from_pairs(pairs: dict[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply string key/value overrides on top of ``base`` (or defaults)."""
    unknown = set(pairs) - KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in pairs.items():
        try:
            if key == "stages":
                kwargs[key] = decode_stages(value)
            elif key in _BOOL_KEYS:
                kwargs[key] = _parse_bool(value, key)
            elif key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key in _TUPLE_KEYS:
                kwargs[key] = _decode_ints(value, key)
            else:
                kwargs[key] = value
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{key}: bad value {value!r}") from e
    base = base if base is not None else RunConfig()
    try:
        return replace(base, **kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_from_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    return config_from_pairs(parse_kv_text(text), base)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    return config_from_text(Path(path).read_text(), base)


def student_stages_of(cfg: RunConfig) -> tuple[StageSpec, ...]:
    """Half-width copy of the configured stages (the default student)."""
    return tuple(StageSpec(s.blocks, max(1, s.channels // 2), s.downsample)
                 for s in cfg.stages)
