"""Model hyperparameter container and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass
class ModelConfig:
    vocab_size: int = 512
    n_soft: int = 32
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 32
    max_seq: int = 1024
    rope_theta: float = 10000.0
    mlp_hidden: int = 256

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.vocab_size < 258:
            raise ValueError("vocab_size must be >= 258 (bytes + BOS + EOS)")
        if self.n_soft < 1:
            raise ValueError("n_soft must be >= 1")
        if self.max_seq < 1:
            raise ValueError("max_seq must be >= 1")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError("d_model must equal n_heads * head_dim")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary encoding")
        if self.mlp_hidden < 1 or self.n_layers < 1:
            raise ValueError("mlp_hidden and n_layers must be >= 1")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    @property
    def full_vocab(self) -> int:
        """Embedding row count: real vocabulary plus probe rows."""
        return self.vocab_size + self.n_soft

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Small configuration used by the bundled experiments and tests."""
    base = dict(
        vocab_size=512,
        n_soft=8,
        d_model=64,
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        head_dim=16,
        max_seq=512,
        rope_theta=10000.0,
        mlp_hidden=128,
    )
    base.update(overrides)
    return ModelConfig(**base)
