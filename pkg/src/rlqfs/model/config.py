"""Architecture configuration shared by the summarizer and passage encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from rlqfs.errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 128
    max_positions: int = 256
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room for content tokens")
        for name in ("d_model", "n_heads", "n_enc_layers", "ffn_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_dec_layers < 0:
            raise ConfigError(f"n_dec_layers must be >= 0, got {self.n_dec_layers}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p {self.dropout_p} outside [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
