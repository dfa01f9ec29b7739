"""Model hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from ..errors import ConfigError

STRIDES = (8, 16, 32, 64)


@dataclass
class ModelConfig:
    D: int = 256              # channel width of every transformer stage
    k: int = 17               # keypoints per person
    n: int = 20               # query groups
    enc_layers: int = 6
    dec_layers: int = 6
    heads: int = 8
    deform_points: int = 4    # sampling points per level per head
    vocab_size: int = 65536   # hashing-tokenizer bucket count
    ffn_dim: int = 0          # 0 -> 2 * D
    mask_hidden: int = 8      # hidden width of the dynamic-filter mask decoder

    strides = STRIDES

    def __post_init__(self):
        if self.D % self.heads != 0:
            raise ConfigError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.D % 4 != 0:
            raise ConfigError(f"D={self.D} must be divisible by 4 (2-D sinusoidal encoding)")
        if self.n < 1 or self.k < 1:
            raise ConfigError(f"need n >= 1 and k >= 1, got n={self.n}, k={self.k}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.ffn_dim == 0:
            self.ffn_dim = 2 * self.D

    @property
    def head_dim(self):
        return self.D // self.heads

    @property
    def filter_length(self):
        d, dm = self.D, self.mask_hidden
        return d * dm + dm + dm + 1

    def to_json(self):
        return asdict(self)

    @staticmethod
    def from_json(obj):
        known = {f for f in ModelConfig.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**obj)

    @staticmethod
    def load(path):
        with open(path, "r", encoding="utf-8") as fh:
            return ModelConfig.from_json(json.load(fh))

    @staticmethod
    def toy():
        """Small gradient-check configuration."""
        return ModelConfig(D=16, k=5, n=2, enc_layers=1, dec_layers=1, heads=4,
                           deform_points=2, vocab_size=512)
