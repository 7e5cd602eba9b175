"""Model hyperparameters; fully determine every parameter shape."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .routing import RoutingConfig


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    max_len: int = 256
    share_embeddings: bool = False
    use_gdr: bool = True
    capsule_dim: int = 32
    caps_per_category: int = 2
    redundant_caps: int = 2
    routing_iters: int = 3
    lambda_bow: float = 1.0
    lambda_bca: float = 1.0
    label_smoothing: float = 0.0
    # Past bag convention: inclusive (tau <= t) by default, exclusive on demand.
    bow_exclusive_past: bool = False
    # Optional layer norm applied after the routing residual, before the
    # output projection.
    norm_after_routing: bool = False

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.lambda_bow < 0 or self.lambda_bca < 0:
            raise ValueError("loss weights must be non-negative")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    def routing(self) -> RoutingConfig:
        return RoutingConfig(
            iterations=self.routing_iters,
            capsule_dim=self.capsule_dim,
            caps_per_category=self.caps_per_category,
            redundant_caps=self.redundant_caps,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
