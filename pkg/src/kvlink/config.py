"""Model configuration and the reserved-token layout.

Reserved IDs occupy the top of the vocabulary::

    [ ordinary tokens | KV-START | KV-END | link tokens | anchor tokens ]

Link token ``j`` of the ``n``-th reused segment is ``link_base + n * k_max + j``,
so the same document index always maps to the same link IDs across prompts.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

K_MAX = 5
MAX_SEGMENTS = 16
N_ANCHOR_IDS = 64


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    ffn_dim: int = 128
    vocab_size: int = 512
    max_pos: int = 8192
    theta_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "ffn_dim", "vocab_size", "max_pos"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even, got {self.head_dim}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})"
            )
        if not self.theta_base > 0:
            raise ConfigError(f"theta_base must be positive, got {self.theta_base}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")
        if self.vocab_size <= reserved_count():
            raise ConfigError(
                f"vocab_size must exceed the {reserved_count()} reserved special tokens, got {self.vocab_size}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    # fixed-width block used by the weights file header
    _STRUCT = struct.Struct("<7I2d")

    def pack(self) -> bytes:
        return self._STRUCT.pack(
            self.n_layers, self.n_heads, self.n_kv_heads, self.head_dim, self.ffn_dim,
            self.vocab_size, self.max_pos, self.theta_base, self.norm_eps,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "ModelConfig":
        vals = cls._STRUCT.unpack(raw)
        return cls(*[int(v) for v in vals[:7]], float(vals[7]), float(vals[8]))


def reserved_count() -> int:
    return 2 + MAX_SEGMENTS * K_MAX + N_ANCHOR_IDS


@dataclass(frozen=True)
class SpecialTokens:
    """Reserved token IDs for a given vocabulary size."""

    vocab_size: int
    k_max: int = K_MAX
    max_segments: int = MAX_SEGMENTS
    n_anchor_ids: int = N_ANCHOR_IDS

    @property
    def first_reserved(self) -> int:
        return self.vocab_size - (2 + self.max_segments * self.k_max + self.n_anchor_ids)

    @property
    def kv_start(self) -> int:
        return self.first_reserved

    @property
    def kv_end(self) -> int:
        return self.first_reserved + 1

    @property
    def link_base(self) -> int:
        return self.first_reserved + 2

    @property
    def anchor_base(self) -> int:
        return self.link_base + self.max_segments * self.k_max

    def link_id(self, doc_index: int, slot: int) -> int:
        if not 0 <= slot < self.k_max:
            raise ConfigError(f"link slot {slot} outside [0, {self.k_max})")
        if not 0 <= doc_index < self.max_segments:
            raise ConfigError(f"segment index {doc_index} outside [0, {self.max_segments})")
        return self.link_base + doc_index * self.k_max + slot

    def anchor_id(self, slot: int) -> int:
        return self.anchor_base + slot % self.n_anchor_ids

    def is_reserved(self, token: int) -> bool:
        return token >= self.first_reserved
