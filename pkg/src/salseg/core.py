"""Shared domain types, errors and the flat key/value config format.

All tensors are ``torch.Tensor`` and carry their shapes explicitly:

* image embeddings ``[H, W, D_enc]``, text embeddings ``[N_C, D_enc]``
* attention ``[HW, N_C]`` (softmax over the token axis)
* saliency ``[H, W, N_C]``
* correlation volume ``[H, W, N_C, D]``
* token partition ``[HW, N_C]`` boolean, True = foreground
"""

from __future__ import annotations

import dataclasses
import enum
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import torch


class SalsegError(Exception):
    """Base class for all package errors."""


class ConfigError(SalsegError):
    pass


class ShapeError(SalsegError):
    pass


class ValidationError(SalsegError):
    pass


class ZeroNormError(SalsegError):
    pass


class LabelError(SalsegError):
    pass


class GradientError(SalsegError):
    pass


class MaskError(SalsegError):
    pass


class EmptyBranchError(SalsegError):
    pass


class PartitionMismatchError(SalsegError):
    pass


class TaxonomyError(SalsegError):
    pass


class DivergenceError(SalsegError):
    pass


def _check_finite(name: str, t: torch.Tensor) -> None:
    if t.is_floating_point() and not bool(torch.isfinite(t.detach()).all()):
        raise ValidationError(f"{name} contains NaN or Inf")


def _check_shape(name: str, t: torch.Tensor, shape: tuple) -> None:
    if tuple(t.shape) != tuple(shape):
        raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {tuple(t.shape)}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    grid_h: int = 12
    grid_w: int = 12
    n_classes: int = 3
    d_corr: int = 32
    d_enc: int = 32
    d_attn: int = 64
    n_attn_heads: int = 8
    n_attn_layers: int = 3
    k_fg: int = 24
    window_size: int = 4
    itm_weight: float = 0.2
    seed: int = 0

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @classmethod
    def full_scale(cls, **overrides) -> "PipelineConfig":
        values = dict(grid_h=24, grid_w=24, d_corr=128, d_enc=512, d_attn=512,
                      n_attn_heads=8, n_attn_layers=3, k_fg=96)
        values.update(overrides)
        return cls(**values)


def padded_size(n: int, window: int) -> int:
    return int(math.ceil(n / window) * window)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Return ``cfg`` unchanged, or raise ConfigError naming the violated constraint."""
    for name in ("grid_h", "grid_w", "d_corr", "d_enc", "d_attn", "n_attn_heads",
                 "n_attn_layers", "window_size"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {cfg.n_classes}")
    if not 0 < cfg.k_fg <= cfg.n_tokens:
        raise ConfigError(
            f"k_fg must satisfy 0 < k_fg <= grid_h*grid_w = {cfg.n_tokens}, got {cfg.k_fg}")
    if cfg.d_attn % cfg.n_attn_heads:
        raise ConfigError(f"d_attn ({cfg.d_attn}) must be divisible by n_attn_heads ({cfg.n_attn_heads})")
    for name in ("grid_h", "grid_w"):
        if padded_size(getattr(cfg, name), cfg.window_size) % cfg.window_size:
            raise ConfigError(f"{name} not divisible by window_size after padding")
    if cfg.itm_weight < 0:
        raise ConfigError(f"itm_weight must be >= 0, got {cfg.itm_weight}")
    return cfg


# flat ``key = value`` files ------------------------------------------------

def _coerce(raw: str, typ, key: str):
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as bool")
    if typing.get_origin(typ) is typing.Union:  # Optional[X]
        if raw.lower() in ("none", ""):
            return None
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    try:
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def from_flat(cls, text: str):
    """Build dataclass ``cls`` from flat config text; unknown keys are an error."""
    raw = parse_flat(text)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    return cls(**{k: _coerce(v, hints[k], k) for k, v in raw.items()})


def to_flat(obj) -> str:
    lines = [f"# {type(obj).__name__}"]
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, enum.Enum):
            value = value.value
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path, cls=PipelineConfig):
    obj = from_flat(cls, Path(path).read_text())
    return validate_config(obj) if cls is PipelineConfig else obj


def save_config(obj, path: str | Path) -> None:
    Path(path).write_text(to_flat(obj))


# --------------------------------------------------------------------------
# tensor value types
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbeddingPair:
    image: torch.Tensor  # [H, W, D_enc]
    text: torch.Tensor  # [N_C, D_enc]
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.image.dim() != 3 or self.text.dim() != 2:
            raise ShapeError(f"image must be [H,W,D], text [N_C,D]; got {tuple(self.image.shape)}, "
                             f"{tuple(self.text.shape)}")
        if self.image.shape[-1] != self.text.shape[-1]:
            raise ShapeError(f"embedding width mismatch: image {self.image.shape[-1]} vs text {self.text.shape[-1]}")
        _check_finite("image", self.image)
        _check_finite("text", self.text)
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class{i}" for i in range(self.text.shape[0])))
        if len(self.class_names) != self.text.shape[0]:
            raise ShapeError(f"{len(self.class_names)} class names for {self.text.shape[0]} text rows")
        if bool((self.text.detach().norm(dim=-1) == 0).any()):
            raise ZeroNormError("text embedding row with zero norm")

    @property
    def grid(self) -> tuple[int, int]:
        return int(self.image.shape[0]), int(self.image.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.text.shape[0])


@dataclass(frozen=True)
class AttentionMap:
    values: torch.Tensor  # [HW, N_C]

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeError(f"attention must be [HW, N_C], got {tuple(self.values.shape)}")
        _check_finite("attention", self.values)
        v = self.values.detach()
        if bool((v < 0).any()) or bool((v > 1).any()):
            raise ValidationError("attention entries must lie in [0, 1]")
        if not torch.allclose(v.sum(0), torch.ones_like(v[0]), atol=1e-5):
            raise ValidationError("attention columns must sum to 1")


@dataclass(frozen=True)
class SaliencyStack:
    maps: torch.Tensor  # [H, W, N_C]
    source: AttentionMap

    def __post_init__(self):
        _check_finite("saliency", self.maps)
        h, w, n = self.maps.shape
        _check_shape("saliency source", self.source.values, (h * w, n))
        if bool((self.maps < 0).any()):
            raise ValidationError("saliency must be non-negative")


class Stage(enum.IntEnum):
    RAW = 0
    PIXEL = 1
    FUSED = 2
    AGGREGATED = 3


@dataclass(frozen=True)
class CorrelationVolume:
    values: torch.Tensor  # [H, W, N_C, D]
    stage: Stage = Stage.RAW

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ShapeError(f"correlation volume must be [H,W,N_C,D], got {tuple(self.values.shape)}")
        _check_finite(f"correlation ({self.stage.name.lower()})", self.values)

    def advance(self, values: torch.Tensor, stage: Stage) -> "CorrelationVolume":
        if stage < self.stage:
            raise ValidationError(f"cannot move from stage {self.stage.name} back to {stage.name}")
        return CorrelationVolume(values, stage)

    def require(self, *stages: Stage) -> None:
        if self.stage not in stages:
            raise ValidationError(
                f"expected stage in {[s.name for s in stages]}, got {self.stage.name}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)


class TiePolicy(str, enum.Enum):
    LOWEST_INDEX = "lowest-index"


@dataclass(frozen=True)
class TokenPartition:
    fg_mask: torch.Tensor  # bool [HW, N_C]
    k: int
    tie_policy: TiePolicy = TiePolicy.LOWEST_INDEX

    def __post_init__(self):
        if self.fg_mask.dtype != torch.bool or self.fg_mask.dim() != 2:
            raise ShapeError("fg_mask must be a boolean [HW, N_C] tensor")
        expected = min(self.k, self.fg_mask.shape[0])
        counts = self.fg_mask.sum(0)
        if not bool((counts == expected).all()):
            raise ValidationError(f"each class must have exactly {expected} foreground tokens")

    @property
    def bg_mask(self) -> torch.Tensor:
        return ~self.fg_mask

    def grid_mask(self, h: int, w: int, foreground: bool = True) -> torch.Tensor:
        m = self.fg_mask if foreground else self.bg_mask
        return m.reshape(h, w, -1)


class Branch(str, enum.Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"
    ALL = "all"  # single-branch (no disentanglement) wiring


@dataclass(frozen=True)
class PrototypeSet:
    category: torch.Tensor  # [1, N_C, D]
    semantic: torch.Tensor  # [1, 1, D]
    branch: Branch = Branch.FOREGROUND

    def __post_init__(self):
        if self.category.dim() != 3 or self.category.shape[0] != 1:
            raise ShapeError(f"category prototypes must be [1, N_C, D], got {tuple(self.category.shape)}")
        _check_shape("semantic prototype", self.semantic, (1, 1, self.category.shape[-1]))
        _check_finite("category prototype", self.category)
        _check_finite("semantic prototype", self.semantic)


@dataclass(frozen=True)
class SegmentationOutput:
    logits: torch.Tensor  # [H_out, W_out, N_C]
    mask: torch.Tensor = field(default=None)  # int64 [H_out, W_out]

    def __post_init__(self):
        _check_finite("logits", self.logits)
        if self.mask is None:
            # torch.argmax returns the first maximal index, i.e. lowest class on ties
            object.__setattr__(self, "mask", self.logits.detach().argmax(-1))
