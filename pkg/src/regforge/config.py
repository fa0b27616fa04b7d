"""Model architecture descriptions and per-family analysis defaults."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DimensionError

NONLINEARITY_CHOICES = ("gelu", "quick_gelu", "gelu_erf")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    embed_dim: int
    n_layers: int
    n_heads: int
    mlp_hidden: int
    nonlinearity: str = "gelu"
    norm_eps: float = 1e-6
    has_cls: bool = True
    preprocess_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    preprocess_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    final_norm: bool = True
    ln_pre: bool = False
    layer_scale: bool = False
    patch_bias: bool = True
    name: str = "custom"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DimensionError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.n_heads:
            raise DimensionError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.nonlinearity not in NONLINEARITY_CHOICES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.norm_eps <= 0:
            raise ValueError("norm_eps must be positive")
        object.__setattr__(self, "preprocess_mean", tuple(float(v) for v in self.preprocess_mean))
        object.__setattr__(self, "preprocess_std", tuple(float(v) for v in self.preprocess_std))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def n_prefix(self) -> int:
        return 1 if self.has_cls else 0

    def n_tokens(self, n_registers: int = 0) -> int:
        return self.n_prefix + self.n_patches + n_registers

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["preprocess_mean"] = list(self.preprocess_mean)
        d["preprocess_std"] = list(self.preprocess_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class AnalysisDefaults:
    """Scan and outlier settings published for a model family."""

    outlier_threshold: float
    outlier_layer: int
    top_layer: int
    top_k: int
    notes: dict = field(default_factory=dict)


OPENAI_MEAN = (0.48145466, 0.4578275, 0.40821073)
OPENAI_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PRESETS: dict[str, tuple[ModelConfig, AnalysisDefaults]] = {
    "openclip-b16": (
        ModelConfig(
            image_size=224, patch_size=16, embed_dim=768, n_layers=12, n_heads=12,
            mlp_hidden=3072, nonlinearity="gelu_erf", norm_eps=1e-5,
            preprocess_mean=OPENAI_MEAN, preprocess_std=OPENAI_STD,
            final_norm=True, ln_pre=True, patch_bias=False, name="openclip-b16",
        ),
        AnalysisDefaults(outlier_threshold=75.0, outlier_layer=6, top_layer=5, top_k=10),
    ),
    "dinov2-l14": (
        ModelConfig(
            image_size=224, patch_size=14, embed_dim=1024, n_layers=24, n_heads=16,
            mlp_hidden=4096, nonlinearity="gelu_erf", norm_eps=1e-6,
            preprocess_mean=IMAGENET_MEAN, preprocess_std=IMAGENET_STD,
            final_norm=True, layer_scale=True, name="dinov2-l14",
        ),
        # outliers read from the second-to-last block output
        AnalysisDefaults(outlier_threshold=150.0, outlier_layer=22, top_layer=17, top_k=45),
    ),
}


def preset(name: str) -> tuple[ModelConfig, AnalysisDefaults]:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_config(path_or_name: str | Path) -> ModelConfig:
    """Resolve a preset name or a JSON file holding a ModelConfig."""
    if str(path_or_name) in PRESETS:
        return PRESETS[str(path_or_name)][0]
    with open(path_or_name) as fh:
        data = json.load(fh)
    return ModelConfig.from_dict(data.get("config", data))
