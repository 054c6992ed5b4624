"""Cache compression: chunked anchor tokens and token dropping.

``rate`` is always the fraction of the cache removed, so ``rate=0.75`` keeps a
quarter of the rows.

Anchor layout for a segment split into chunks of ``s`` tokens::

    chunk_1 tokens | chunk_1 anchors | chunk_2 tokens | chunk_2 anchors | ...

Original tokens attend causally inside their own chunk only. An anchor of chunk
``n`` attends chunk ``n``'s tokens, all anchors of earlier chunks, and the
anchors of chunk ``n`` up to itself. Only anchor rows are stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import EmptyInputError, PlanError
from .kvcache import FLAG_ANCHOR, FLAG_DROP, CompressedSegmentCache, segment_hash
from .linker import MaskMatrix, check_ordinary
from .model import Weights, causal_mask, check_tokens, forward_masked, prefill_segment

DEFAULT_CHUNK = 100


def _exact(x: float) -> Fraction:
    return Fraction(str(x))


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def ceil_fraction(ratio: float, n: int) -> int:
    """``ceil(ratio * n)`` evaluated on the decimal value of ``ratio``."""
    return math.ceil(_exact(ratio) * n)


def _check_rate(rate: float) -> None:
    if not 0 < rate < 1:
        raise PlanError(f"compression rate must lie in (0, 1), got {rate}")


@dataclass(frozen=True)
class ChunkPlan:
    n_tokens: int
    chunk_size: int
    rate: float
    chunks: tuple[tuple[int, int], ...]  # (start, end) over the original tokens
    anchors: tuple[int, ...]  # anchors per chunk, short last chunk scaled down

    @property
    def anchors_per_chunk(self) -> int:
        return self.anchors[0]

    @property
    def stored_rows(self) -> int:
        return sum(self.anchors)

    @property
    def layout_len(self) -> int:
        return self.n_tokens + self.stored_rows

    def layout(self):
        """Yield ``(kind, chunk, start, end)`` spans of the interleaved layout."""
        pos = 0
        for i, ((a, b), k) in enumerate(zip(self.chunks, self.anchors)):
            yield "token", i, pos, pos + (b - a)
            pos += b - a
            yield "anchor", i, pos, pos + k
            pos += k


def plan_chunks(n_tokens: int, s: int = DEFAULT_CHUNK, rate: float = 0.75) -> ChunkPlan:
    _check_rate(rate)
    if s < 1:
        raise PlanError(f"chunk size must be >= 1, got {s}")
    if n_tokens < 1:
        raise EmptyInputError("cannot plan chunks for an empty segment")
    keep = 1 - _exact(rate)
    chunks = tuple((a, min(a + s, n_tokens)) for a in range(0, n_tokens, s))
    anchors = tuple(max(1, round_half_up(keep * (b - a))) for a, b in chunks)
    return ChunkPlan(n_tokens, s, rate, chunks, anchors)


def anchor_mask(plan: ChunkPlan) -> MaskMatrix:
    n = plan.layout_len
    is_anchor = np.zeros(n, dtype=bool)
    chunk = np.empty(n, dtype=np.int64)
    for kind, i, a, b in plan.layout():
        chunk[a:b] = i
        is_anchor[a:b] = kind == "anchor"
    same = chunk[:, None] == chunk[None, :]
    earlier_anchor = is_anchor[None, :] & (chunk[None, :] < chunk[:, None])
    anchor_rows = is_anchor[:, None] & (same | earlier_anchor)
    token_rows = ~is_anchor[:, None] & same & ~is_anchor[None, :]
    return MaskMatrix((anchor_rows | token_rows) & causal_mask(n))


def _anchor_tag(plan: ChunkPlan) -> bytes:
    return f"anchor:{plan.chunk_size}:{plan.rate}".encode()


def compress_anchor(tokens, rate: float, w: Weights, s: int = DEFAULT_CHUNK) -> CompressedSegmentCache:
    tokens = check_tokens(w, tokens)
    if tokens.size == 0:
        raise EmptyInputError("cannot compress an empty segment")
    check_ordinary(tokens.tolist(), w.special, "segment")
    plan = plan_chunks(tokens.size, s, rate)
    seq, anchor_rows = [], []
    for kind, i, a, b in plan.layout():
        if kind == "token":
            c0, c1 = plan.chunks[i]
            seq.extend(tokens[c0:c1].tolist())
        else:
            seq.extend(w.special.anchor_id(j) for j in range(b - a))
            anchor_rows.extend(range(a, b))
    out = forward_masked(seq, np.arange(len(seq)), anchor_mask(plan), w)
    rows = np.asarray(anchor_rows)
    return CompressedSegmentCache(
        segment_id=segment_hash(w.model_hash, tokens, _anchor_tag(plan)),
        model_hash=w.model_hash,
        n_kv_heads=w.config.n_kv_heads,
        head_dim=w.config.head_dim,
        keys=[k[rows] for k in out.keys],
        values=[v[rows] for v in out.values],
        flag=FLAG_ANCHOR,
        mapping=rows,
    )


def self_perplexity_scores(tokens, w: Weights) -> np.ndarray:
    """Per-token negative log-likelihood under the model; the first token scores +inf."""
    tokens = check_tokens(w, tokens)
    out = forward_masked(tokens, np.arange(tokens.size), causal_mask(tokens.size), w)
    logits = out.logits[:-1].astype(np.float64)
    logz = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
    nll = logz - logits[np.arange(tokens.size - 1), tokens[1:]]
    return np.concatenate([[np.inf], nll])


def kept_count(n_tokens: int, rate: float) -> int:
    _check_rate(rate)
    keep = math.ceil((1 - _exact(rate)) * n_tokens)
    if keep < 1:
        raise PlanError(f"rate {rate} keeps no tokens out of {n_tokens}")
    return keep


def select_kept(scores, keep: int) -> np.ndarray:
    """Indices of the ``keep`` highest scores, ties to the earlier position, in order."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep])


def compress_drop(
    tokens,
    rate: float,
    w: Weights,
    scorer: Callable[[np.ndarray, Weights], np.ndarray] | None = None,
) -> CompressedSegmentCache:
    """Keep the highest-scoring tokens and prefill them as a fresh segment."""
    tokens = check_tokens(w, tokens)
    if tokens.size == 0:
        raise EmptyInputError("cannot compress an empty segment")
    check_ordinary(tokens.tolist(), w.special, "segment")
    keep = kept_count(tokens.size, rate)
    scores = (scorer or self_perplexity_scores)(tokens, w)
    kept = select_kept(scores, keep)
    base = prefill_segment(tokens[kept], w)
    return CompressedSegmentCache(
        segment_id=segment_hash(w.model_hash, tokens, f"drop:{rate}".encode()),
        model_hash=w.model_hash,
        n_kv_heads=base.n_kv_heads,
        head_dim=base.head_dim,
        keys=base.keys,
        values=base.values,
        flag=FLAG_DROP,
        mapping=kept,
    )
