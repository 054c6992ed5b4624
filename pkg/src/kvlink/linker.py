"""Link tokens and the attention layout that goes with them.

A prompt is laid out as::

    [KV-START] doc_0 link_0 doc_1 link_1 ... doc_{N-1} link_{N-1} [KV-END] question

Visibility rules, evaluated on global positions (all causal):

* a document token sees only earlier tokens of its own document;
* a link token of segment ``n`` sees every document and link token of segments
  ``< n``, its own document, and its own earlier link tokens;
* boundary and question tokens see everything before them.

Because document rows never look outside their own span, a segment's K/V can
be computed once, alone, and reused in any prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SpecialTokens
from .errors import CausalityError, PlanError, RuleError, ShapeError, VocabError
from .kvcache import AssembledContext, SegmentSlot
from .model import ForwardOutput, Weights, extend_over_cache

DOC, LINK, BOUNDARY, SUFFIX = "doc", "link", "boundary", "suffix"
_KIND_CODE = {DOC: 0, LINK: 1, BOUNDARY: 2, SUFFIX: 3}


@dataclass(frozen=True)
class Span:
    kind: str
    start: int
    end: int  # exclusive

    def __len__(self) -> int:
        return self.end - self.start


class MaskRule:
    """Declarative attention layout: an ordered partition of ``[0, total)`` into spans.

    A link span belongs to the nearest document span before it.
    """

    def __init__(self, spans: list[Span]):
        spans = [s for s in spans if len(s) > 0]
        pos, seg = 0, -1
        for s in spans:
            if s.kind not in _KIND_CODE:
                raise RuleError(f"unknown span kind {s.kind!r}")
            if s.start != pos:
                what = "overlap" if s.start < pos else "gap"
                raise RuleError(f"span {s.kind} [{s.start}, {s.end}) leaves a {what} at {pos}")
            if s.kind == DOC:
                seg += 1
            elif s.kind == LINK and seg < 0:
                raise RuleError("link span before any document span")
            pos = s.end
        self.spans = spans
        self.total = pos
        self._kind = np.empty(pos, dtype=np.int8)
        self._seg = np.full(pos, -1, dtype=np.int64)
        seg = -1
        for s in spans:
            if s.kind == DOC:
                seg += 1
            self._kind[s.start:s.end] = _KIND_CODE[s.kind]
            if s.kind in (DOC, LINK):
                self._seg[s.start:s.end] = seg

    @property
    def n_segments(self) -> int:
        return sum(1 for s in self.spans if s.kind == DOC)

    def _check(self, positions: np.ndarray) -> None:
        if positions.size and (positions.min() < 0 or positions.max() >= self.total):
            raise PlanError(f"position outside the planned layout [0, {self.total})")

    def allows(self, rows, cols) -> np.ndarray:
        """Boolean visibility for query positions ``rows`` and key positions ``cols``."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self._check(rows)
        self._check(cols)
        kr, kc = self._kind[rows][:, None], self._kind[cols][None, :]
        sr, sc = self._seg[rows][:, None], self._seg[cols][None, :]
        causal = cols[None, :] <= rows[:, None]
        doc_row = (kr == 0) & (kc == 0) & (sc == sr)
        link_row = (kr == 1) & (sc >= 0) & (sc <= sr)
        open_row = kr >= 2
        return causal & (doc_row | link_row | open_row)

    def to_text(self) -> str:
        return "".join(f"{s.kind} {s.start} {s.end}\n" for s in self.spans)

    @classmethod
    def from_text(cls, text: str) -> "MaskRule":
        spans = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise RuleError(f"line {lineno}: expected 'kind start end'")
            spans.append(Span(parts[0], int(parts[1]), int(parts[2])))
        return cls(spans)

    def __eq__(self, other):
        return isinstance(other, MaskRule) and self.spans == other.spans


@dataclass(frozen=True)
class MaskMatrix:
    allow: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allow, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"mask must be square, got {a.shape}")
        if np.triu(a, 1).any():
            raise CausalityError("mask allows a future position")
        if not a.diagonal().all():
            raise RuleError("every position must attend itself")
        object.__setattr__(self, "allow", a)

    @property
    def side(self) -> int:
        return self.allow.shape[0]

    def allowed(self, row: int) -> list[int]:
        return np.flatnonzero(self.allow[row]).tolist()


def build_mask(rule: MaskRule) -> MaskMatrix:
    pos = np.arange(rule.total)
    return MaskMatrix(rule.allows(pos, pos))


def layout_spans(segment_lengths, k: int, n_suffix: int = 0, boundaries: bool = False) -> list[Span]:
    spans, pos = [], 0

    def add(kind, n):
        nonlocal pos
        spans.append(Span(kind, pos, pos + n))
        pos += n

    if boundaries:
        add(BOUNDARY, 1)
    for n in segment_lengths:
        add(DOC, n)
        if k:
            add(LINK, k)
    if boundaries:
        add(BOUNDARY, 1)
    if n_suffix:
        add(SUFFIX, n_suffix)
    return spans


def rule_for_layout(segment_lengths, k: int, n_suffix: int = 0, boundaries: bool = False) -> MaskRule:
    return MaskRule(layout_spans(segment_lengths, k, n_suffix, boundaries))


@dataclass(frozen=True)
class LinkSpec:
    k_per_segment: int
    special: SpecialTokens
    boundary_tokens_enabled: bool = False

    def __post_init__(self):
        if not 0 <= self.k_per_segment <= self.special.k_max:
            raise PlanError(f"K={self.k_per_segment} outside [0, {self.special.k_max}]")

    @property
    def k_max(self) -> int:
        return self.special.k_max

    @property
    def kv_start_id(self) -> int:
        return self.special.kv_start

    @property
    def kv_end_id(self) -> int:
        return self.special.kv_end

    def link_token_id(self, doc_index: int, slot: int) -> int:
        return self.special.link_id(doc_index, slot)

    def link_tokens(self, doc_index: int) -> list[int]:
        return [self.link_token_id(doc_index, j) for j in range(self.k_per_segment)]


@dataclass
class PromptLayout:
    """Monolithic view of a prompt: token sequence, positions and mask rule."""

    tokens: np.ndarray
    rule: MaskRule
    segment_offsets: list[int]
    segment_lengths: list[int]
    link_positions: list[list[int]]
    boundary_positions: list[int] = field(default_factory=list)
    question_positions: list[int] = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.tokens.shape[0])

    @property
    def suffix_positions(self) -> list[int]:
        """Positions computed after the link pass: boundaries, then the question."""
        return sorted(self.boundary_positions + self.question_positions)

    @property
    def staged_positions(self) -> list[int]:
        """Every position the staged path computes at query time."""
        return sorted([p for ps in self.link_positions for p in ps] + self.suffix_positions)


def check_ordinary(tokens, special: SpecialTokens, what: str) -> None:
    """Reject IDs outside the vocabulary or inside the reserved range."""
    arr = np.asarray(tokens, dtype=np.int64).ravel()
    if not arr.size:
        return
    if arr.min() < 0 or arr.max() >= special.vocab_size:
        bad = arr[(arr < 0) | (arr >= special.vocab_size)][0]
        raise VocabError(f"{what} token {bad} outside vocabulary [0, {special.vocab_size})")
    if arr.max() >= special.first_reserved:
        bad = arr[arr >= special.first_reserved][0]
        raise VocabError(f"{what} token {bad} collides with reserved IDs >= {special.first_reserved}")


def assemble_prompt(segment_token_lists, question_tokens, spec: LinkSpec) -> PromptLayout:
    if not segment_token_lists:
        raise PlanError("a prompt needs at least one segment")
    if spec.k_per_segment and len(segment_token_lists) > spec.special.max_segments:
        raise PlanError(f"at most {spec.special.max_segments} segments can carry link tokens")
    for i, seg in enumerate(segment_token_lists):
        if not len(seg):
            raise PlanError(f"segment {i} is empty")
        check_ordinary(seg, spec.special, f"segment {i}")
    check_ordinary(question_tokens, spec.special, "question")
    tokens, offsets, links, bounds = [], [], [], []
    if spec.boundary_tokens_enabled:
        bounds.append(len(tokens))
        tokens.append(spec.kv_start_id)
    for n, seg in enumerate(segment_token_lists):
        offsets.append(len(tokens))
        tokens.extend(int(t) for t in seg)
        ids = spec.link_tokens(n)
        links.append(list(range(len(tokens), len(tokens) + len(ids))))
        tokens.extend(ids)
    if spec.boundary_tokens_enabled:
        bounds.append(len(tokens))
        tokens.append(spec.kv_end_id)
    q0 = len(tokens)
    tokens.extend(int(t) for t in question_tokens)
    lengths = [len(s) for s in segment_token_lists]
    rule = rule_for_layout(lengths, spec.k_per_segment, len(question_tokens), spec.boundary_tokens_enabled)
    return PromptLayout(
        tokens=np.asarray(tokens, dtype=np.int64),
        rule=rule,
        segment_offsets=offsets,
        segment_lengths=lengths,
        link_positions=links,
        boundary_positions=bounds,
        question_positions=list(range(q0, len(tokens))),
    )


def rule_for_slots(slots: list[SegmentSlot], base_offset: int) -> MaskRule:
    spans = [Span(BOUNDARY, 0, base_offset)] if base_offset else []
    for s in slots:
        end = s.global_offset + s.span
        spans.append(Span(DOC, s.global_offset, end))
        spans.append(Span(LINK, end, end + s.n_link_slots))
    return MaskRule(spans)


def link_forward(assembled: AssembledContext, spec: LinkSpec, w: Weights) -> ForwardOutput | None:
    """Compute every link token in one batched extension pass.

    Returns the pass output (logits rows in slot order) or ``None`` when K is 0.
    """
    for i, slot in enumerate(assembled.slots):
        if slot.n_link_slots != spec.k_per_segment:
            raise PlanError(
                f"segment {i} reserves {slot.n_link_slots} link slots but the spec has K={spec.k_per_segment}"
            )
    if spec.k_per_segment == 0:
        return None
    tokens = [t for n in range(len(assembled.slots)) for t in spec.link_tokens(n)]
    positions = np.concatenate([s.link_positions for s in assembled.slots])
    rule = rule_for_slots(assembled.slots, assembled.base_offset)
    return extend_over_cache(assembled, tokens, positions, rule, w)


def link_pass(assembled: AssembledContext, spec: LinkSpec, w: Weights) -> AssembledContext:
    link_forward(assembled, spec, w)
    return assembled
