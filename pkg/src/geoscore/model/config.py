"""Model hyperparameter configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from geoscore.numerics import ParameterError


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions for the two-branch fusion model.

    Defaults give the full-scale geometry: 224px inputs in 32px patches
    (49 patches, 50 tokens with CLS), hidden width 256, two encoder layers,
    8 heads. ``modality`` selects the unimodal ablations.
    """

    image_side: int = 224
    patch_side: int = 32
    hidden_dim: int = 256
    num_encoder_layers: int = 2
    num_heads: int = 8
    mlp_ratio: int = 4
    dropout_rate: float = 0.2
    fusion_rounds: int = 1
    head_hidden: int = 64
    modality: str = "both"  # both | satellite | streetview

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ParameterError(
                f"image_side {self.image_side} not divisible by patch_side {self.patch_side}"
            )
        if self.hidden_dim % self.num_heads != 0:
            raise ParameterError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.fusion_rounds < 1:
            raise ParameterError("fusion_rounds must be >= 1")
        if self.modality not in ("both", "satellite", "streetview"):
            raise ParameterError(f"unknown modality {self.modality!r}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side * self.grid_side

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1  # CLS prepended

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_side * self.patch_side

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


# Desk-scale configuration used by the synthetic-corpus training runs:
# explicitly reduced dimensions, never a silent override of the defaults.
DESK_CONFIG = ModelConfig(
    image_side=64,
    patch_side=16,
    hidden_dim=64,
    num_encoder_layers=2,
    num_heads=4,
    head_hidden=32,
)
