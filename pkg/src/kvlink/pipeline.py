"""End-to-end query execution.

Modes:

``full``         one causal prefill over all segment tokens and the question;
``plain_reuse``  concatenate re-rotated segment caches, no link tokens;
``link_reuse``   as above, then compute K link tokens per segment;
``blend``        reuse caches but recompute the K/V of a fraction of context
                 tokens at every layer (selective recompute).

Plan file format (``key=value`` lines, ``#`` comments)::

    mode=link_reuse
    k=1
    boundary=false
    compression=none        # or anchor / drop, with rate=R
    segment=1 2             # inline token IDs, or a path (relative to the plan file)
    segment=docs/b.txt
    question=6 7
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compressor import DEFAULT_CHUNK, ceil_fraction, compress_anchor, compress_drop, kept_count, plan_chunks
from .config import SpecialTokens
from .errors import IntegrityError, PlanError
from .kvcache import AssembledContext, MemoryCacheStore, assemble, segment_hash
from .linker import LinkSpec, assemble_prompt, build_mask, check_ordinary, link_forward, rule_for_layout
from .model import (
    AttentionPlan,
    Causal,
    Weights,
    attend,
    block_tail,
    decode_from,
    embed,
    extend_over_cache,
    forward_causal,
    forward_masked,
    pass_flops,
    prefill_segment,
    project_qkv,
)
from .rope import rerotate_cache_layer

log = logging.getLogger(__name__)

MODES = ("full", "plain_reuse", "link_reuse", "blend")
COMPRESSIONS = ("none", "anchor", "drop")
ORACLE_THRESHOLD = 1e-4


@dataclass
class QueryPlan:
    segments: list[list[int]]
    question: list[int]
    mode: str = "link_reuse"
    k: int = 0
    ratio: float | None = None
    compression: str = "none"
    rate: float | None = None
    boundary: bool = False
    chunk_size: int = DEFAULT_CHUNK

    def validate(self, special: SpecialTokens | None = None) -> None:
        if self.mode not in MODES:
            raise PlanError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.compression not in COMPRESSIONS:
            raise PlanError(f"unknown compression {self.compression!r}")
        k_max = special.k_max if special else 5
        if not 0 <= self.k <= k_max:
            raise PlanError(f"k={self.k} exceeds k_max={k_max}")
        if self.k and self.mode != "link_reuse":
            raise PlanError(f"mode {self.mode} takes no link tokens (k={self.k})")
        if self.mode == "blend" and (self.ratio is None or not 0 < self.ratio < 1):
            raise PlanError(f"blend needs a ratio in (0, 1), got {self.ratio}")
        if self.compression != "none":
            if self.mode not in ("plain_reuse", "link_reuse"):
                raise PlanError(f"compression applies only to reuse modes, not {self.mode}")
            if self.rate is None or not 0 < self.rate < 1:
                raise PlanError(f"compression rate must lie in (0, 1), got {self.rate}")
        if not self.segments or any(len(s) == 0 for s in self.segments):
            raise PlanError("a plan needs at least one non-empty segment")
        if not self.question:
            raise PlanError("a plan needs at least one question token")
        if special is not None:
            if self.k and len(self.segments) > special.max_segments:
                raise PlanError(f"at most {special.max_segments} segments can carry link tokens")
            for i, seg in enumerate(self.segments):
                check_ordinary(seg, special, f"segment {i}")
            check_ordinary(self.question, special, "question")

    def link_spec(self, special: SpecialTokens) -> LinkSpec:
        return LinkSpec(self.k, special, self.boundary)

    @property
    def context_tokens(self) -> int:
        return sum(len(s) for s in self.segments)


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise PlanError(f"not a boolean: {value!r}")


def _parse_ids(value: str) -> list[int] | None:
    parts = value.split()
    try:
        return [int(p) for p in parts]
    except ValueError:
        return None


def parse_plan(text: str, base_dir=".") -> QueryPlan:
    fields_: dict = {}
    segments, question = [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "segment":
            ids = _parse_ids(value)
            if ids is None:
                path = Path(base_dir) / value.lstrip("@")
                ids = _parse_ids(path.read_text())
                if ids is None:
                    raise PlanError(f"line {lineno}: {path} does not hold integer token IDs")
            segments.append(ids)
        elif key == "question":
            question = _parse_ids(value)
            if question is None:
                raise PlanError(f"line {lineno}: question must be integer token IDs")
        elif key in ("mode", "compression"):
            fields_[key] = value
        elif key in ("k", "chunk"):
            fields_["chunk_size" if key == "chunk" else key] = int(value)
        elif key in ("ratio", "rate"):
            fields_[key] = float(value)
        elif key == "boundary":
            fields_[key] = _parse_bool(value)
        else:
            raise PlanError(f"line {lineno}: unknown key {key!r}")
    plan = QueryPlan(segments=segments, question=question or [], **fields_)
    plan.validate()
    return plan


def format_plan(plan: QueryPlan) -> str:
    lines = [f"mode={plan.mode}", f"k={plan.k}", f"boundary={str(plan.boundary).lower()}"]
    if plan.ratio is not None:
        lines.append(f"ratio={plan.ratio}")
    lines.append(f"compression={plan.compression}")
    if plan.rate is not None:
        lines.append(f"rate={plan.rate}")
    if plan.chunk_size != DEFAULT_CHUNK:
        lines.append(f"chunk={plan.chunk_size}")
    lines += [f"segment={' '.join(map(str, s))}" for s in plan.segments]
    lines.append(f"question={' '.join(map(str, plan.question))}")
    return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    logits: np.ndarray  # predicts the first generated token
    row_positions: np.ndarray  # positions computed at query time
    row_logits: np.ndarray
    decoded: list[int] = field(default_factory=list)
    flops: int = 0  # query-time work
    prefill_flops: int = 0  # segment prefill/compression triggered by store misses
    hits: int = 0
    misses: int = 0
    integrity_errors: int = 0
    phases: dict[str, float] = field(default_factory=dict)
    recomputed_per_layer: list[int] = field(default_factory=list)
    context: AssembledContext | None = field(default=None, repr=False)

    @property
    def ttft(self) -> float:
        return sum(self.phases.values())


class _Timer:
    def __init__(self):
        self.phases: dict[str, float] = {}

    def mark(self, name: str, t0: float) -> float:
        now = time.perf_counter()
        self.phases[name] = self.phases.get(name, 0.0) + (now - t0)
        return now


def _suffix_tokens(plan: QueryPlan, special: SpecialTokens, layout_end: int):
    """Boundary tokens and the question with their global positions."""
    tokens, positions = [], []
    if plan.boundary:
        tokens += [special.kv_start, special.kv_end]
        positions += [0, layout_end]
        start = layout_end + 1
    else:
        start = layout_end
    tokens += list(plan.question)
    positions += list(range(start, start + len(plan.question)))
    return tokens, np.asarray(positions, dtype=np.int64)


def full_sequence(plan: QueryPlan, special: SpecialTokens) -> list[int]:
    seq = [special.kv_start] if plan.boundary else []
    for s in plan.segments:
        seq += list(s)
    if plan.boundary:
        seq.append(special.kv_end)
    return seq + list(plan.question)


def run_full(plan: QueryPlan, w: Weights, decode: int = 0) -> RunResult:
    if plan.mode != "full":
        raise PlanError(f"run_full needs mode=full, got {plan.mode}")
    plan.validate(w.special)
    timer = _Timer()
    t0 = time.perf_counter()
    seq = full_sequence(plan, w.special)
    out = forward_causal(seq, w)
    timer.mark("suffix", t0)
    n = len(seq)
    result = RunResult(
        logits=out.logits[-1],
        row_positions=np.arange(n),
        row_logits=out.logits,
        flops=out.flops,
        phases=timer.phases,
    )
    if decode:
        ctx = AssembledContext([], out.rotated_keys, out.values, np.arange(n, dtype=np.int64))
        result.decoded = decode_from(ctx, result.logits, decode, w)
        result.context = ctx
    return result


def cache_tag(compression: str = "none", rate: float | None = None, chunk_size: int = DEFAULT_CHUNK) -> bytes:
    """Hash tag distinguishing compressed caches of the same tokens."""
    if compression == "anchor":
        return f"anchor:{chunk_size}:{rate}".encode()
    if compression == "drop":
        return f"drop:{rate}".encode()
    return b""


def encode_segment(tokens, w: Weights, compression: str = "none", rate: float | None = None,
                   chunk_size: int = DEFAULT_CHUNK):
    """Build one segment cache; returns ``(cache, flops)``."""
    n = len(tokens)
    if compression == "anchor":
        cp = plan_chunks(n, chunk_size, rate)
        return compress_anchor(tokens, rate, w, chunk_size), pass_flops(w.config, cp.layout_len, cp.layout_len)
    if compression == "drop":
        kept = kept_count(n, rate)
        flops = pass_flops(w.config, n, n) + pass_flops(w.config, kept, kept)
        return compress_drop(tokens, rate, w), flops
    if compression != "none":
        raise PlanError(f"unknown compression {compression!r}")
    check_ordinary(tokens, w.special, "segment")
    return prefill_segment(tokens, w), pass_flops(w.config, n, n)


def _plan_tag(plan: QueryPlan) -> bytes:
    return cache_tag(plan.compression, plan.rate, plan.chunk_size)


def load_segments(plan: QueryPlan, store, w: Weights, result: RunResult, timer: _Timer):
    """Fetch every segment cache, prefilling and persisting on a miss."""
    tag = _plan_tag(plan)
    caches = []
    for tokens in plan.segments:
        t0 = time.perf_counter()
        sid = segment_hash(w.model_hash, tokens, tag)
        try:
            cache = store.get(sid)
        except IntegrityError as exc:
            log.warning("dropping corrupt cache %016x: %s", sid, exc)
            result.integrity_errors += 1
            cache = None
        t0 = timer.mark("load", t0)
        if cache is None:
            result.misses += 1
            cache, flops = encode_segment(tokens, w, plan.compression, plan.rate, plan.chunk_size)
            result.prefill_flops += flops
            store.put(cache)
            timer.mark("prefill", t0)
        else:
            result.hits += 1
        caches.append(cache)
    return caches


def _misrotate(ctx: AssembledContext, caches, shift: int, w: Weights) -> None:
    """Test hook: re-rotate every segment after the first ``shift`` positions off."""
    for layer in range(ctx.n_layers):
        rows = []
        for cache, slot in zip(caches, ctx.slots):
            off = slot.global_offset + (shift if rows else 0)
            rows.append(rerotate_cache_layer(cache.keys[layer], off, slot.local_offsets, w.rope))
        ctx.keys[layer] = np.concatenate(rows)


def _finish(plan, ctx, w, result: RunResult, timer: _Timer, staged_rows, decode: int) -> RunResult:
    t0 = time.perf_counter()
    tokens, positions = _suffix_tokens(plan, w.special, ctx.layout_end)
    out = extend_over_cache(ctx, tokens, positions, Causal(), w)
    timer.mark("suffix", t0)
    result.flops += out.flops
    staged_rows.append((positions, out.logits))
    result.logits = out.logits[-1]
    result.row_positions = np.concatenate([p for p, _ in staged_rows])
    result.row_logits = np.concatenate([l for _, l in staged_rows])
    result.phases = timer.phases
    result.context = ctx
    if decode:
        result.decoded = decode_from(ctx, result.logits, decode, w)
    return result


def _empty_result() -> RunResult:
    return RunResult(np.zeros(0, np.float32), np.zeros(0, np.int64), np.zeros((0, 0), np.float32))


def run_reuse(plan: QueryPlan, store, w: Weights, decode: int = 0, rerotate_shift: int = 0) -> RunResult:
    """Load (or build) segment caches, re-rotate, link, then run the question."""
    if plan.mode not in ("plain_reuse", "link_reuse"):
        raise PlanError(f"run_reuse needs a reuse mode, got {plan.mode}")
    plan.validate(w.special)
    spec = plan.link_spec(w.special)
    result, timer = _empty_result(), _Timer()
    caches = load_segments(plan, store, w, result, timer)

    t0 = time.perf_counter()
    ctx = assemble(caches, plan.k, w.rope, base_offset=1 if plan.boundary else 0)
    if rerotate_shift:
        _misrotate(ctx, caches, rerotate_shift, w)
    t0 = timer.mark("rerotate", t0)

    staged = []
    link_out = link_forward(ctx, spec, w)
    timer.mark("link", t0)
    if link_out is not None:
        result.flops += link_out.flops
        staged.append((np.concatenate([s.link_positions for s in ctx.slots]), link_out.logits))
    return _finish(plan, ctx, w, result, timer, staged, decode)


def blend_flops(cfg, n_ctx: int, selected: int) -> int:
    """Context-side FLOPs of selective recompute (question pass excluded)."""
    h, f = cfg.hidden_dim, cfg.ffn_dim
    per_token = 2 * 4 * h * h + 2 * 3 * h * f
    first = n_ctx * per_token + 4 * n_ctx * n_ctx * h
    probe = 2 * h * h  # value projection used to score deviations
    later = 0
    prev = n_ctx
    for _ in range(cfg.n_layers - 1):
        later += prev * probe + selected * per_token + 4 * selected * n_ctx * h
        prev = selected
    return first + later


def select_deviating(deviation: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest deviations; ties go to the lower index."""
    order = np.argsort(-deviation, kind="stable")
    return np.sort(order[:k])


def run_blend(plan: QueryPlan, store, w: Weights, decode: int = 0) -> RunResult:
    """Selective recompute over reused caches.

    Layer 0 is recomputed for every context token with full causal attention.
    At each later layer the tokens carried from the layer below are scored by
    the L2 distance between their fresh and reused values; the ``ceil(ratio*L)``
    largest get fresh K/V and an updated hidden state, the rest keep the reused
    K/V.
    """
    if plan.mode != "blend":
        raise PlanError(f"run_blend needs mode=blend, got {plan.mode}")
    plan.validate(w.special)
    cfg = w.config
    result, timer = _empty_result(), _Timer()
    caches = load_segments(plan, store, w, result, timer)

    t0 = time.perf_counter()
    ctx = assemble(caches, 0, w.rope, base_offset=1 if plan.boundary else 0)
    t0 = timer.mark("rerotate", t0)

    tokens = np.concatenate([np.asarray(s) for s in plan.segments])
    pos = ctx.positions
    n = tokens.size
    n_sel = ceil_fraction(plan.ratio, n)
    causal = pos[None, :] <= pos[:, None]

    x = embed(w, tokens)
    carried = np.arange(n)
    recomputed = []
    for layer in range(cfg.n_layers):
        q_rot, _, k_rot, v = project_qkv(w, layer, x[carried], pos[carried])
        if layer == 0:
            chosen = np.arange(carried.size)
        else:
            deviation = np.linalg.norm((v - ctx.values[layer][carried]).astype(np.float64), axis=1)
            chosen = select_deviating(deviation, n_sel)
        sel = carried[chosen]
        ctx.keys[layer] = ctx.keys[layer].copy()
        ctx.values[layer] = ctx.values[layer].copy()
        ctx.keys[layer][sel] = k_rot[chosen]
        ctx.values[layer][sel] = v[chosen]
        attn = attend(q_rot[chosen], ctx.keys[layer], ctx.values[layer], AttentionPlan(causal[sel]), cfg)
        x[sel] = block_tail(w, layer, x[sel], attn)
        recomputed.append(int(sel.size))
        carried = sel
    result.recomputed_per_layer = recomputed
    result.flops += blend_flops(cfg, n, n_sel)
    timer.mark("recompute", t0)
    return _finish(plan, ctx, w, result, timer, [], decode)


def run_plan(plan: QueryPlan, store, w: Weights, decode: int = 0) -> RunResult:
    if plan.mode == "full":
        return run_full(plan, w, decode)
    if plan.mode == "blend":
        return run_blend(plan, store, w, decode)
    return run_reuse(plan, store, w, decode)


@dataclass
class OracleReport:
    max_abs: float
    per_position: dict[int, float]
    threshold: float = ORACLE_THRESHOLD

    @property
    def passed(self) -> bool:
        return self.max_abs <= self.threshold


def monolithic(plan: QueryPlan, w: Weights, extra_tokens=()):
    """Single custom-mask pass over the whole prompt (plus ``extra_tokens`` as question tail)."""
    layout = assemble_prompt(plan.segments, plan.question, plan.link_spec(w.special))
    tokens = np.concatenate([layout.tokens, np.asarray(extra_tokens, dtype=np.int64)])
    rule = rule_for_layout(layout.segment_lengths, plan.k, len(plan.question) + len(extra_tokens), plan.boundary)
    return layout, forward_masked(tokens, np.arange(tokens.size), build_mask(rule), w)


def oracle_compare(plan: QueryPlan, w: Weights, store=None, rerotate_shift: int = 0) -> OracleReport:
    """Staged reuse versus the monolithic custom-mask pass, per staged position."""
    if plan.mode not in ("plain_reuse", "link_reuse") or plan.compression != "none":
        raise PlanError("oracle comparison needs an uncompressed reuse plan")
    if store is None:
        store = MemoryCacheStore(1 << 40, w.model_hash)
    staged = run_reuse(plan, store, w, rerotate_shift=rerotate_shift)
    _, mono = monolithic(plan, w)
    diffs = np.abs(staged.row_logits - mono.logits[staged.row_positions]).max(axis=1)
    per_position = {int(p): float(d) for p, d in zip(staged.row_positions, diffs)}
    return OracleReport(float(diffs.max()), per_position)


def decode_monolithic(plan: QueryPlan, max_new: int, w: Weights) -> list[int]:
    """Greedy decoding by re-running the monolithic pass for every new token."""
    generated: list[int] = []
    for _ in range(max_new):
        _, out = monolithic(plan, w, generated)
        generated.append(int(np.argmax(out.logits[-1])))
    return generated

