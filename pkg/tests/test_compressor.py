from fractions import Fraction

import numpy as np
import pytest

from conftest import ordinary_tokens
from kvlink.compressor import (
    anchor_mask,
    compress_anchor,
    compress_drop,
    kept_count,
    plan_chunks,
    round_half_up,
    select_kept,
)
from kvlink.errors import PlanError, VocabError
from kvlink.kvcache import FLAG_ANCHOR, FLAG_DROP, MemoryCacheStore, assemble, cache_size_bytes
from kvlink.model import forward_masked, prefill_segment
from kvlink.pipeline import QueryPlan, run_reuse


def anchor_oracle(plan):
    labels = []  # (is_anchor, chunk)
    for i, (a, b) in enumerate(plan.chunks):
        labels += [(False, i)] * (b - a) + [(True, i)] * plan.anchors[i]
    n = len(labels)
    out = np.zeros((n, n), dtype=bool)
    for r, (ar, cr) in enumerate(labels):
        for c in range(r + 1):
            ac, cc = labels[c]
            out[r, c] = (cc == cr and (ar or not ac)) or (ar and ac and cc < cr)
    return out


@pytest.mark.parametrize(
    "n, s, rate, per_chunk, rows",
    [(1000, 100, 0.75, 25, 250), (1000, 100, 0.5, 50, 500), (50, 100, 0.5, 25, 25)],
)
def test_plan_arithmetic(n, s, rate, per_chunk, rows):
    plan = plan_chunks(n, s, rate)
    assert plan.anchors_per_chunk == per_chunk
    assert plan.stored_rows == rows
    assert plan.layout_len == n + rows


def test_short_last_chunk_scaled():
    plan = plan_chunks(250, 100, 0.75)
    assert plan.anchors == (25, 25, 13)


def test_round_half_up():
    assert round_half_up(Fraction(5, 2)) == 3 and round_half_up(Fraction(12, 5)) == 2


def test_bad_rate():
    with pytest.raises(PlanError):
        plan_chunks(10, 5, 1.0)


def test_single_chunk_mask():
    plan = plan_chunks(4, 10, 0.5)
    allow = anchor_mask(plan).allow
    assert np.array_equal(allow[:4, :4], np.tril(np.ones((4, 4), bool)))
    assert allow[4].tolist() == [True] * 5 + [False]
    assert allow[5].all()


def test_two_chunk_mask():
    plan = plan_chunks(6, 3, 1 / 3)
    assert plan.anchors == (2, 2)
    allow = anchor_mask(plan).allow
    chunk1_tokens, chunk1_anchors = [0, 1, 2], [3, 4]
    chunk2_tokens, chunk2_anchors = [5, 6, 7], [8, 9]
    for r in chunk2_tokens:
        assert not allow[r, chunk1_tokens + chunk1_anchors].any()
    for r in chunk2_anchors:
        assert allow[r, chunk1_anchors].all()
        assert not allow[r, chunk1_tokens].any()


def test_anchor_mask_predicate(rng):
    for _ in range(50):
        n = int(rng.integers(1, 40))
        s = int(rng.integers(1, 12))
        rate = float(rng.choice([0.1, 0.25, 0.5, 0.75, 0.9]))
        plan = plan_chunks(n, s, rate)
        assert np.array_equal(anchor_mask(plan).allow, anchor_oracle(plan))


def test_anchor_cache_rows_and_bytes(desk, rng):
    tokens = ordinary_tokens(rng, desk, 1000)
    c = compress_anchor(tokens, 0.75, desk, 100)
    assert c.n_tokens == 250 and c.flag == FLAG_ANCHOR
    assert c.nbytes == cache_size_bytes(desk.config, 250, 4)
    assert c.nbytes * 4 == cache_size_bytes(desk.config, 1000, 4)


def test_anchor_no_compression_limit(desk, rng):
    tokens = ordinary_tokens(rng, desk, 30)
    c = compress_anchor(tokens, 0.01, desk, 10)
    assert c.n_tokens == len(tokens)


def test_anchor_integration_with_links(desk, rng):
    segs = [ordinary_tokens(rng, desk, 120), ordinary_tokens(rng, desk, 80)]
    plan = QueryPlan(segs, [1, 2, 3], mode="link_reuse", k=5, compression="anchor", rate=0.75, chunk_size=40)
    result = run_reuse(plan, MemoryCacheStore(1 << 30, desk.model_hash), desk)
    rows = plan_chunks(120, 40, 0.75).stored_rows + plan_chunks(80, 40, 0.75).stored_rows
    assert rows == 50
    assert result.context.total_len == rows + 10 + 3
    assert np.isfinite(result.logits).all()


def test_anchor_reserved_collision(desk):
    with pytest.raises(VocabError):
        compress_anchor([1, desk.special.kv_end], 0.5, desk, 2)


def test_drop_keeps_half_in_order(desk, rng):
    tokens = ordinary_tokens(rng, desk, 10)
    c = compress_drop(tokens, 0.5, desk)
    assert c.n_tokens == 5 and c.flag == FLAG_DROP
    assert np.all(np.diff(c.mapping.astype(int)) > 0)


def test_drop_constant_scorer_keeps_prefix(desk, rng):
    tokens = ordinary_tokens(rng, desk, 9)
    c = compress_drop(tokens, 0.6, desk, scorer=lambda t, w: np.zeros(len(t)))
    assert c.mapping.tolist() == [0, 1, 2, 3]


def test_drop_equals_direct_prefill(desk, rng):
    tokens = ordinary_tokens(rng, desk, 40)
    c = compress_drop(tokens, 0.7, desk)
    kept = [tokens[i] for i in c.mapping]
    direct = prefill_segment(kept, desk)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(c.keys + c.values, direct.keys + direct.values))


def test_kept_count_exact_decimal():
    # (1 - 0.7) * 10 is 3.0000000000000004 in binary floating point
    assert kept_count(10, 0.7) == 3
    assert kept_count(7, 0.5) == 4


def test_select_kept_ties():
    assert select_kept([1, 5, 5, 1, 5], 2).tolist() == [1, 2]


def test_anchor_rows_keep_layout_slots(desk, rng):
    tokens = ordinary_tokens(rng, desk, 25)
    c = compress_anchor(tokens, 0.6, desk, 10)
    plan = plan_chunks(25, 10, 0.6)
    ctx = assemble([prefill_segment([1, 2, 3], desk), c], 1, desk.rope)
    slot = ctx.slots[1]
    assert slot.global_offset == 4
    assert ctx.positions[3:].tolist() == (4 + c.mapping.astype(int)).tolist()
    assert slot.span == plan.layout_len
    assert slot.link_positions.tolist() == [4 + plan.layout_len]
    # rotating the stored rows at their slots reproduces the compression pass
    ctx0 = assemble([c], 0, desk.rope)
    seq = []
    for kind, i, a, b in plan.layout():
        c0, c1 = plan.chunks[i]
        seq += tokens[c0:c1] if kind == "token" else [desk.special.anchor_id(j) for j in range(b - a)]
    ref = forward_masked(seq, np.arange(len(seq)), anchor_mask(plan), desk)
    assert np.array_equal(ctx0.keys[0], ref.rotated_keys[0][c.mapping])
