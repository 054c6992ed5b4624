"""Position-free segment caches, their persistent store, and assembly.

Cache file layout (``.kvlc``, little-endian)::

    magic "KVLC" | u32 version | u64 model hash | u64 segment hash
    u32 n_layers | u32 n_kv_heads | u32 head_dim | u32 n_tokens | u8 dtype code
    per layer: K rows then V rows, f32 row-major
    [compressed only] u8 flag | n_tokens x u32 row -> position mapping
    u32 CRC32 of everything above
"""

from __future__ import annotations

import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CapacityError,
    CompatibilityError,
    EmptyInputError,
    FormatError,
    IntegrityError,
    PositionError,
    ShapeError,
    TruncationError,
)
from .rope import RopeTables, rerotate_cache_layer

CACHE_MAGIC = b"KVLC"
CACHE_VERSION = 1
DTYPE_F32 = 4

FLAG_ANCHOR = 1
FLAG_DROP = 2

_HEADER = struct.Struct("<4sIQQIIIIB")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def segment_hash(model_hash: int, tokens, tag: bytes = b"") -> int:
    """64-bit FNV-1a over ``model hash || u32 token IDs [|| tag]``.

    ``tag`` distinguishes compressed variants of the same text.
    """
    payload = struct.pack("<Q", model_hash) + np.asarray(tokens, dtype="<u4").tobytes() + tag
    return fnv1a_64(payload)


@dataclass(eq=False)
class SegmentCache:
    """Per-layer K/V of one independently encoded segment.

    K is stored before rotation; rotating it at ``0..n_tokens-1`` gives back the
    keys the segment's own prefill attended with.
    """

    segment_id: int
    model_hash: int
    n_kv_heads: int
    head_dim: int
    keys: list[np.ndarray]
    values: list[np.ndarray]
    created_at: float = field(default_factory=time.time)
    dtype: int = DTYPE_F32

    def __post_init__(self):
        if len(self.keys) != len(self.values) or not self.keys:
            raise ShapeError("keys and values need the same, non-zero number of layers")
        shape = (self.keys[0].shape[0], self.n_kv_heads * self.head_dim)
        for k, v in zip(self.keys, self.values):
            if k.shape != shape or v.shape != shape:
                raise ShapeError(f"layer arrays {k.shape}/{v.shape} inconsistent with {shape}")

    @property
    def n_tokens(self) -> int:
        return self.keys[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def nbytes(self) -> int:
        return 2 * self.n_layers * self.n_tokens * self.n_kv_heads * self.head_dim * self.dtype

    def _content(self) -> tuple:
        return (self.segment_id, self.model_hash, self.n_kv_heads, self.head_dim, self.dtype)

    def __eq__(self, other):
        if not isinstance(other, SegmentCache) or type(self) is not type(other):
            return NotImplemented
        return self._content() == other._content() and all(
            a.tobytes() == b.tobytes()
            for a, b in zip(self.keys + self.values, other.keys + other.values)
        )


@dataclass(eq=False)
class CompressedSegmentCache(SegmentCache):
    """Cache holding only anchor rows or kept tokens.

    ``mapping[r]`` is the position of stored row ``r`` in the original layout.
    """

    flag: int = FLAG_ANCHOR
    mapping: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))

    def __post_init__(self):
        super().__post_init__()
        self.mapping = np.asarray(self.mapping, dtype=np.uint32)
        if self.mapping.shape != (self.n_tokens,):
            raise ShapeError("mapping length must equal the stored row count")
        if self.n_tokens > 1 and np.any(np.diff(self.mapping.astype(np.int64)) <= 0):
            raise ShapeError("row mapping must be strictly increasing")

    def _content(self) -> tuple:
        return super()._content() + (self.flag, self.mapping.tobytes())


def serialize_cache(cache: SegmentCache) -> bytes:
    parts = [
        _HEADER.pack(
            CACHE_MAGIC, CACHE_VERSION, cache.model_hash, cache.segment_id,
            cache.n_layers, cache.n_kv_heads, cache.head_dim, cache.n_tokens, cache.dtype,
        )
    ]
    for k, v in zip(cache.keys, cache.values):
        parts.append(np.ascontiguousarray(k, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    if isinstance(cache, CompressedSegmentCache):
        parts.append(struct.pack("<B", cache.flag))
        parts.append(cache.mapping.astype("<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize_cache(raw: bytes, created_at: float | None = None) -> SegmentCache:
    if len(raw) < _HEADER.size + 4:
        raise TruncationError("cache file shorter than its header")
    magic, version, model_hash, seg_id, n_layers, n_kv, hd, n_tok, dtype = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad cache magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported cache version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    width = n_kv * hd
    layer_bytes = n_tok * width * 4
    payload_end = _HEADER.size + 2 * n_layers * layer_bytes
    trailer = len(raw) - payload_end - 4
    if trailer < 0:
        raise TruncationError("cache file truncated inside the K/V payload")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise IntegrityError(f"CRC mismatch in cache {seg_id:016x}")
    keys, values = [], []
    off = _HEADER.size
    for _ in range(n_layers):
        for dest in (keys, values):
            arr = np.frombuffer(raw, dtype="<f4", count=n_tok * width, offset=off)
            dest.append(arr.reshape(n_tok, width).astype(np.float32))
            off += layer_bytes
    kwargs = dict(
        segment_id=seg_id, model_hash=model_hash, n_kv_heads=n_kv, head_dim=hd,
        keys=keys, values=values, dtype=dtype,
    )
    if created_at is not None:
        kwargs["created_at"] = created_at
    if trailer == 0:
        return SegmentCache(**kwargs)
    if trailer != 1 + 4 * n_tok:
        raise FormatError(f"unexpected {trailer}-byte trailer after the K/V payload")
    flag = raw[payload_end]
    mapping = np.frombuffer(raw, dtype="<u4", count=n_tok, offset=payload_end + 1).astype(np.uint32)
    return CompressedSegmentCache(**kwargs, flag=flag, mapping=mapping)


# --------------------------------------------------------------------------- stores


@dataclass
class _Entry:
    size: int
    last_use: int
    uses: int = 1


class _PolicyIndex:
    """Residency bookkeeping shared by the disk and memory stores."""

    def __init__(self, capacity_bytes: int, policy: str):
        policy = policy.lower()
        if policy not in ("lru", "lfu"):
            raise ValueError(f"unknown eviction policy {policy!r}")
        if capacity_bytes <= 0:
            raise CapacityError("capacity must be positive")
        self.capacity_bytes = capacity_bytes
        self.policy = policy
        self.entries: dict[int, _Entry] = {}
        self.clock = 0
        self.evictions = 0

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    @property
    def resident_bytes(self) -> int:
        return sum(e.size for e in self.entries.values())

    def touch(self, key: int) -> None:
        e = self.entries[key]
        e.last_use = self.tick()
        e.uses += 1

    def insert(self, key: int, size: int) -> list[int]:
        """Record ``key``; return the keys evicted to stay within budget."""
        if size > self.capacity_bytes:
            raise CapacityError(f"cache of {size} bytes exceeds store capacity {self.capacity_bytes}")
        old = self.entries.get(key)
        uses = old.uses + 1 if old else 1
        self.entries[key] = _Entry(size, self.tick(), uses)
        evicted = []
        while self.resident_bytes > self.capacity_bytes:
            victim = self._victim(exclude=key)
            del self.entries[victim]
            evicted.append(victim)
            self.evictions += 1
        return evicted

    def _victim(self, exclude: int) -> int:
        candidates = [(k, e) for k, e in self.entries.items() if k != exclude]
        if self.policy == "lru":
            return min(candidates, key=lambda ke: ke[1].last_use)[0]
        return min(candidates, key=lambda ke: (ke[1].uses, ke[1].last_use))[0]


class MemoryCacheStore:
    """In-process store; sizes are counted as raw K/V payload bytes."""

    def __init__(self, capacity_bytes: int, model_hash: int, policy: str = "lru"):
        self.model_hash = model_hash
        self._index = _PolicyIndex(capacity_bytes, policy)
        self._data: dict[int, SegmentCache] = {}
        self._lock = threading.RLock()

    @property
    def capacity_bytes(self) -> int:
        return self._index.capacity_bytes

    @property
    def resident_bytes(self) -> int:
        return self._index.resident_bytes

    @property
    def evictions(self) -> int:
        return self._index.evictions

    def __contains__(self, segment_id: int) -> bool:
        return segment_id in self._data

    def __len__(self) -> int:
        return len(self._data)

    def resident_ids(self) -> set[int]:
        return set(self._data)

    def put(self, cache: SegmentCache) -> int:
        if cache.model_hash != self.model_hash:
            raise CompatibilityError(
                f"cache model hash {cache.model_hash:016x} != store model hash {self.model_hash:016x}"
            )
        with self._lock:
            for victim in self._index.insert(cache.segment_id, cache.nbytes):
                self._data.pop(victim, None)
            self._data[cache.segment_id] = cache
        return cache.nbytes

    def get(self, segment_id: int) -> SegmentCache | None:
        with self._lock:
            cache = self._data.get(segment_id)
            if cache is not None:
                self._index.touch(segment_id)
            return cache


class DiskCacheStore:
    """One ``.kvlc`` file per segment under ``root``, bounded by ``capacity_bytes``.

    Single writer, concurrent readers. Files from other models found on open are
    left on disk but never indexed.
    """

    suffix = ".kvlc"

    def __init__(self, root, capacity_bytes: int, model_hash: int, policy: str = "lru"):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.model_hash = model_hash
        self._index = _PolicyIndex(capacity_bytes, policy)
        self._lock = threading.RLock()
        self._scan()

    def _scan(self) -> None:
        found = []
        for path in self.root.glob(f"*{self.suffix}"):
            try:
                with open(path, "rb") as fh:
                    head = fh.read(_HEADER.size)
                magic, _, model_hash, seg_id, *_ = _HEADER.unpack(head)
            except (OSError, struct.error):
                continue
            if magic == CACHE_MAGIC and model_hash == self.model_hash:
                st = path.stat()
                found.append((st.st_mtime, seg_id, st.st_size))
        for _, seg_id, size in sorted(found):
            if size <= self.capacity_bytes:
                for victim in self._index.insert(seg_id, size):
                    self._path(victim).unlink(missing_ok=True)

    def _path(self, segment_id: int) -> Path:
        return self.root / f"{segment_id:016x}{self.suffix}"

    @property
    def capacity_bytes(self) -> int:
        return self._index.capacity_bytes

    @property
    def resident_bytes(self) -> int:
        return self._index.resident_bytes

    @property
    def evictions(self) -> int:
        return self._index.evictions

    def __contains__(self, segment_id: int) -> bool:
        return segment_id in self._index.entries

    def __len__(self) -> int:
        return len(self._index.entries)

    def resident_ids(self) -> set[int]:
        return set(self._index.entries)

    def path_for(self, segment_id: int) -> Path:
        return self._path(segment_id)

    def put(self, cache: SegmentCache) -> int:
        if cache.model_hash != self.model_hash:
            raise CompatibilityError(
                f"cache model hash {cache.model_hash:016x} != store model hash {self.model_hash:016x}"
            )
        raw = serialize_cache(cache)
        with self._lock:
            evicted = self._index.insert(cache.segment_id, len(raw))
            path = self._path(cache.segment_id)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(raw)
            os.replace(tmp, path)
            for victim in evicted:
                self._path(victim).unlink(missing_ok=True)
        return len(raw)

    def get(self, segment_id: int) -> SegmentCache | None:
        """Return the cache or ``None`` on a miss.

        A corrupt file raises ``IntegrityError`` and is dropped, so the next
        lookup is a plain miss.
        """
        with self._lock:
            if segment_id not in self._index.entries:
                return None
            path = self._path(segment_id)
            try:
                raw = path.read_bytes()
                cache = deserialize_cache(raw, created_at=path.stat().st_mtime)
            except FileNotFoundError:
                del self._index.entries[segment_id]
                return None
            except (FormatError, IntegrityError) as exc:
                del self._index.entries[segment_id]
                path.unlink(missing_ok=True)
                if isinstance(exc, IntegrityError):
                    raise
                raise IntegrityError(str(exc)) from exc
            self._index.touch(segment_id)
            return cache


# ------------------------------------------------------------------------ assembly


@dataclass
class SegmentSlot:
    """Where one segment's rows sit in an assembled context.

    ``row_offsets`` gives each stored row's position relative to
    ``global_offset``; it is ``0..n_tokens-1`` unless the cache holds anchor
    rows, which keep the slots they occupied in the interleaved anchor layout.
    """

    segment_id: int
    global_offset: int
    n_tokens: int
    n_link_slots: int
    row_offsets: np.ndarray | None = None

    @property
    def local_offsets(self) -> np.ndarray:
        if self.row_offsets is None:
            return np.arange(self.n_tokens)
        return np.asarray(self.row_offsets, dtype=np.int64)

    @property
    def span(self) -> int:
        """Positions covered by the segment, link slots excluded."""
        return int(self.local_offsets[-1]) + 1

    @property
    def token_positions(self) -> np.ndarray:
        return self.global_offset + self.local_offsets

    @property
    def link_positions(self) -> np.ndarray:
        return self.global_offset + self.span + np.arange(self.n_link_slots)


def row_offsets_for(cache: SegmentCache) -> np.ndarray | None:
    """Layout offsets of an anchor cache's rows; ``None`` means contiguous."""
    if isinstance(cache, CompressedSegmentCache) and cache.flag == FLAG_ANCHOR:
        return cache.mapping.astype(np.int64)
    return None


@dataclass
class AssembledContext:
    """Concatenated per-layer K (rotated) and V (unrotated) for one request.

    Rows are kept in insertion order; ``positions`` holds each row's global
    position, which is what attention visibility is evaluated on.
    """

    slots: list[SegmentSlot]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: np.ndarray
    base_offset: int = 0

    @classmethod
    def empty(cls, n_layers: int, kv_dim: int) -> "AssembledContext":
        z = np.zeros((0, kv_dim), dtype=np.float32)
        return cls([], [z] * n_layers, [z] * n_layers, np.zeros(0, dtype=np.int64))

    @property
    def total_len(self) -> int:
        return int(self.positions.shape[0])

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def layout_end(self) -> int:
        """First position after the last segment and its link slots."""
        if not self.slots:
            return self.base_offset
        last = self.slots[-1]
        return last.global_offset + last.span + last.n_link_slots

    @property
    def next_position(self) -> int:
        if not self.total_len:
            return self.layout_end
        return max(self.layout_end, int(self.positions.max()) + 1)

    def append(self, keys: list[np.ndarray], values: list[np.ndarray], positions) -> None:
        positions = np.asarray(positions, dtype=np.int64)
        self.keys = [np.concatenate([a, b]) for a, b in zip(self.keys, keys)]
        self.values = [np.concatenate([a, b]) for a, b in zip(self.values, values)]
        self.positions = np.concatenate([self.positions, positions])


def segment_offsets(lengths, link_slots_per_segment: int, base_offset: int = 0) -> list[int]:
    offsets, pos = [], base_offset
    for n in lengths:
        offsets.append(pos)
        pos += n + link_slots_per_segment
    return offsets


def assemble(
    caches: list[SegmentCache],
    link_slots_per_segment: int,
    tables: RopeTables,
    base_offset: int = 0,
) -> AssembledContext:
    """Concatenate segment caches and rotate their keys to global positions.

    Segment ``n`` starts at ``base_offset + sum(span_m + link_slots)`` over
    ``m < n``, where a segment's span is its row count, or its interleaved
    layout length for anchor caches. Link slots follow each span and are left
    for the link pass.
    """
    if not caches:
        raise EmptyInputError("assemble needs at least one segment cache")
    if len({c.model_hash for c in caches}) != 1:
        raise ShapeError("all caches must come from the same model")
    local = [row_offsets_for(c) for c in caches]
    spans = [c.n_tokens if r is None else int(r[-1]) + 1 for c, r in zip(caches, local)]
    offsets = segment_offsets(spans, link_slots_per_segment, base_offset)
    end = offsets[-1] + spans[-1] + link_slots_per_segment
    if end > tables.max_pos:
        raise PositionError(f"assembled layout needs {end} positions, table holds {tables.max_pos}")
    slots = [
        SegmentSlot(c.segment_id, off, c.n_tokens, link_slots_per_segment, r)
        for c, off, r in zip(caches, offsets, local)
    ]
    keys, values = [], []
    for layer in range(caches[0].n_layers):
        keys.append(np.concatenate([
            rerotate_cache_layer(c.keys[layer], s.global_offset, s.local_offsets, tables)
            for c, s in zip(caches, slots)
        ]))
        values.append(np.concatenate([c.values[layer] for c in caches]))
    positions = np.concatenate([s.token_positions for s in slots])
    return AssembledContext(slots, keys, values, positions.astype(np.int64), base_offset)


def cache_size_bytes(config, n_tokens: int, dtype_bytes: int) -> int:
    """Bytes for K and V of ``n_tokens`` across all layers."""
    if n_tokens <= 0 or dtype_bytes <= 0:
        raise ValueError("n_tokens and dtype_bytes must be positive")
    return 2 * config.n_layers * n_tokens * config.n_kv_heads * config.head_dim * dtype_bytes
