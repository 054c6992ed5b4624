"""Rotary position encoding.

Adjacent pairs ``(v[2i], v[2i+1])`` of every head are rotated by
``pos * theta_base ** (-2i / head_dim)``. Rotations are evaluated in float64
and rounded once, which keeps ``rotate(rotate(v, a), b) == rotate(v, a + b)``
tight enough for position-free storage to be exact at float32 resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PositionError, ShapeError


@dataclass(frozen=True)
class RopeTables:
    head_dim: int
    max_pos: int
    theta_base: float
    cos: np.ndarray = field(repr=False)
    sin: np.ndarray = field(repr=False)

    def angle(self, pos: int, pair: int) -> float:
        return pos * self.theta_base ** (-2.0 * pair / self.head_dim)


def build_tables(head_dim: int, max_pos: int, theta_base: float = 10000.0) -> RopeTables:
    if head_dim < 2 or head_dim % 2:
        raise ConfigError(f"head_dim must be a positive even number, got {head_dim}")
    if max_pos < 1:
        raise ConfigError(f"max_pos must be >= 1, got {max_pos}")
    if not theta_base > 0:
        raise ConfigError(f"theta_base must be positive, got {theta_base}")
    inv_freq = theta_base ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(max_pos, dtype=np.float64), inv_freq)
    cos, sin = np.cos(angles), np.sin(angles)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return RopeTables(head_dim, max_pos, float(theta_base), cos, sin)


def _check_positions(positions: np.ndarray, tables: RopeTables) -> None:
    if positions.size and (positions.min() < 0 or positions.max() >= tables.max_pos):
        bad = positions[(positions < 0) | (positions >= tables.max_pos)][0]
        raise PositionError(f"position {int(bad)} outside rotary table range [0, {tables.max_pos})")


def rotate_heads(x: np.ndarray, positions, tables: RopeTables) -> np.ndarray:
    """Rotate ``x`` of shape ``[tokens, heads, head_dim]`` row-wise at ``positions``."""
    x = np.asarray(x)
    positions = np.asarray(positions, dtype=np.int64)
    if x.shape[-1] != tables.head_dim:
        raise ShapeError(f"last dim {x.shape[-1]} != head_dim {tables.head_dim}")
    if x.shape[0] != positions.shape[0]:
        raise ShapeError(f"{x.shape[0]} rows but {positions.shape[0]} positions")
    _check_positions(positions, tables)
    cos = tables.cos[positions][:, None, :]
    sin = tables.sin[positions][:, None, :]
    even = x[..., 0::2].astype(np.float64)
    odd = x[..., 1::2].astype(np.float64)
    out = np.empty(x.shape, dtype=np.float32)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rotate(vec, pos: int, tables: RopeTables) -> np.ndarray:
    """Rotate a single head-dim vector to position ``pos``."""
    vec = np.asarray(vec, dtype=np.float32)
    if vec.shape != (tables.head_dim,):
        raise ShapeError(f"expected vector of length {tables.head_dim}, got shape {vec.shape}")
    return rotate_heads(vec[None, None, :], [pos], tables)[0, 0]


def rerotate_cache_layer(keys, global_start: int, per_token_offsets, tables: RopeTables) -> np.ndarray:
    """Rotate position-free keys ``[tokens, n_kv_heads * head_dim]`` to global positions.

    Row ``t`` lands at ``global_start + per_token_offsets[t]``. Values are never
    passed through here; they are stored and used unrotated.
    """
    keys = np.asarray(keys, dtype=np.float32)
    offsets = np.asarray(per_token_offsets, dtype=np.int64)
    if keys.ndim != 2 or keys.shape[1] % tables.head_dim:
        raise ShapeError(f"keys shape {keys.shape} is not [tokens, k*{tables.head_dim}]")
    if offsets.shape != (keys.shape[0],):
        raise ShapeError(f"{keys.shape[0]} key rows but {offsets.shape[0]} offsets")
    if offsets.size > 1 and np.any(np.diff(offsets) <= 0):
        raise PositionError("per-token offsets must be strictly increasing")
    n_heads = keys.shape[1] // tables.head_dim
    heads = keys.reshape(keys.shape[0], n_heads, tables.head_dim)
    return rotate_heads(heads, global_start + offsets, tables).reshape(keys.shape)
