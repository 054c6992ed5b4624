"""Reusable, position-free KV caches for retrieved segments, joined by link tokens."""

from .config import ModelConfig, SpecialTokens
from .errors import KVLinkError
from .kvcache import DiskCacheStore, MemoryCacheStore, SegmentCache, cache_size_bytes, segment_hash
from .model import Weights, forward_causal, forward_masked, init_random, load_weights, prefill_segment, save_weights
from .pipeline import QueryPlan, oracle_compare, parse_plan, run_plan

__version__ = "0.1.0"

__all__ = [
    "DiskCacheStore",
    "KVLinkError",
    "MemoryCacheStore",
    "ModelConfig",
    "QueryPlan",
    "SegmentCache",
    "SpecialTokens",
    "Weights",
    "cache_size_bytes",
    "forward_causal",
    "forward_masked",
    "init_random",
    "load_weights",
    "oracle_compare",
    "parse_plan",
    "prefill_segment",
    "run_plan",
    "save_weights",
    "segment_hash",
]
