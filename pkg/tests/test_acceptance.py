"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import ordinary_tokens, record
from test_compressor import anchor_oracle
from test_kvcache import run_trace
from test_linker import THREE_DOC_ALLOW
from kvlink import load_weights, save_weights
from kvlink.bench import BenchConfig, flops_for_plan, memory_store_for, populate_store, run_bench
from kvlink.compressor import anchor_mask, compress_anchor, compress_drop, plan_chunks
from kvlink.errors import FormatError, IntegrityError
from kvlink.kvcache import MemoryCacheStore, assemble, cache_size_bytes, deserialize_cache, serialize_cache
from kvlink.linker import build_mask, rule_for_layout
from kvlink.model import forward_causal, prefill_segment
from kvlink.pipeline import QueryPlan, oracle_compare, run_blend, run_full, run_reuse
from kvlink.rope import build_tables, rotate


def test_criterion_01_staged_equivalence(desk):
    rng = np.random.default_rng(2024)
    store = MemoryCacheStore(1 << 30, desk.model_hash)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        segs = [ordinary_tokens(rng, desk, int(rng.integers(1, 9))) for _ in range(int(rng.integers(1, 7)))]
        plan = QueryPlan(
            segs, ordinary_tokens(rng, desk, int(rng.integers(1, 5))),
            mode="link_reuse", k=int(rng.choice([0, 1, 5])), boundary=bool(rng.integers(0, 2)),
        )
        worst = max(worst, oracle_compare(plan, desk, store).max_abs)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 30
    record(1, ok, f"100 plans, max abs diff {worst:.2e} (<= 1e-4), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_criterion_02_three_doc_golden_mask():
    got = build_mask(rule_for_layout([2, 2, 1], 1, 2)).allow.astype(int).tolist()
    ok = got == THREE_DOC_ALLOW
    record(2, ok, "docs {2,2,1}, K=1, 2 question tokens: allow-matrix equals hand transcription")
    assert ok


def test_criterion_03_layer1_exactness(desk):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        seg = ordinary_tokens(rng, desk, int(rng.integers(1, 30)))
        offset = int(rng.integers(0, 200))
        prefix = ordinary_tokens(rng, desk, offset)
        cache = prefill_segment(seg, desk)
        caches = ([prefill_segment(prefix, desk)] if offset else []) + [cache]
        ctx = assemble(caches, 0, desk.rope)
        mono = forward_causal(prefix + seg, desk)
        worst = max(
            worst,
            float(np.abs(ctx.keys[0][offset:] - mono.rotated_keys[0][offset:]).max()),
            float(np.abs(ctx.values[0][offset:] - mono.values[0][offset:]).max()),
        )
    ok = worst <= 1e-6
    record(3, ok, f"50 segments at random offsets, layer-1 K/V max abs diff {worst:.2e} (<= 1e-6)")
    assert ok


def test_criterion_04_rotation_algebra():
    rng = np.random.default_rng(4)
    t = build_tables(16, 8192)
    ident = norm = add = 0.0
    for _ in range(1000):
        v = rng.standard_normal(16).astype(np.float32)
        a, b = (int(x) for x in rng.integers(0, 4000, 2))
        ident = max(ident, float(np.abs(rotate(v, 0, t) - v).max()))
        norm = max(norm, abs(float(np.linalg.norm(rotate(v, a, t))) - float(np.linalg.norm(v))))
        add = max(add, float(np.abs(rotate(rotate(v, a, t), b, t) - rotate(v, a + b, t)).max()))
    ok = ident == 0.0 and norm <= 1e-6 and add <= 1e-6
    record(4, ok, f"1000 trials: identity {ident:.1e}, norm {norm:.1e}, additivity {add:.1e} (<= 1e-6)")
    assert ok


def test_criterion_05_cache_size():
    got = cache_size_bytes(SimpleNamespace(n_layers=32, n_kv_heads=8, head_dim=128), 1000, 2)
    ok = got == 131_072_000
    record(5, ok, f"32 layers x 1024 kv width x 1000 tokens x 2 bytes = {got:,} bytes")
    assert ok


def test_criterion_06_serialization(desk, tmp_path):
    rng = np.random.default_rng(6)
    cache = prefill_segment(ordinary_tokens(rng, desk, 33), desk)
    raw = serialize_cache(cache)
    kvlc_ok = deserialize_cache(raw) == cache and serialize_cache(deserialize_cache(raw)) == raw
    save_weights(desk, tmp_path / "w")
    kvlw_ok = load_weights(tmp_path / "w").equals(desk)

    bad = bytearray(raw)
    bad[len(raw) // 2] ^= 0x10
    try:
        deserialize_cache(bytes(bad))
        kvlc_crc = False
    except IntegrityError:
        kvlc_crc = True
    wraw = bytearray((tmp_path / "w").read_bytes())
    wraw[len(wraw) // 2] ^= 0x10
    (tmp_path / "w").write_bytes(bytes(wraw))
    try:
        load_weights(tmp_path / "w")
        kvlw_crc = False
    except FormatError:
        kvlw_crc = True

    run_trace(MemoryCacheStore(600, 0xABCDEF), lambda c: c.nbytes, np.random.default_rng(60))
    ok = kvlc_ok and kvlw_ok and kvlc_crc and kvlw_crc
    record(6, ok, "KVLC/KVLW bitwise round trips, CRC corruption detected, 100-op LRU trace matches reference")
    assert ok


def test_criterion_07_blend(desk):
    rng = np.random.default_rng(7)
    segs = [ordinary_tokens(rng, desk, n) for n in (30, 25, 35)]
    q = ordinary_tokens(rng, desk, 4)
    store = MemoryCacheStore(1 << 30, desk.model_hash)
    full = run_full(QueryPlan(segs, q, mode="full"), desk)
    near = run_blend(QueryPlan(segs, q, mode="blend", ratio=0.999), store, desk)
    diff = float(np.abs(near.logits - full.logits).max())
    low = run_blend(QueryPlan(segs, q, mode="blend", ratio=0.18), store, desk)
    want = int(np.ceil(0.18 * 90))  # 17
    counts_ok = low.recomputed_per_layer[1:] == [want] * (desk.config.n_layers - 1) and want >= 2
    ok = diff <= 1e-5 and counts_ok
    record(7, ok, f"ratio->1 diff {diff:.2e} (<= 1e-5); ratio 0.18 recomputes {low.recomputed_per_layer[1:]} of 90 per layer")
    assert ok


def test_criterion_08_compression(desk):
    rng = np.random.default_rng(8)
    tokens = ordinary_tokens(rng, desk, 1000)
    rows = compress_anchor(tokens, 0.75, desk, 100).n_tokens

    mask_ok = True
    for _ in range(50):
        plan = plan_chunks(int(rng.integers(1, 60)), int(rng.integers(1, 15)), float(rng.choice([0.2, 0.5, 0.75, 0.9])))
        mask_ok &= bool(np.array_equal(anchor_mask(plan).allow, anchor_oracle(plan)))

    dropped = compress_drop(tokens[:200], 0.6, desk)
    direct = prefill_segment([tokens[i] for i in dropped.mapping], desk)
    drop_ok = all(a.tobytes() == b.tobytes() for a, b in zip(dropped.keys + dropped.values, direct.keys + direct.values))
    ok = rows == 250 and mask_ok and drop_ok
    record(8, ok, f"anchor rows {rows} (== 250), anchor-mask oracle on 50 plans {mask_ok}, drop cache bitwise {drop_ok}")
    assert ok


@pytest.mark.slow
def test_criterion_09_efficiency_trend(desk):
    cfg = BenchConfig()  # 10 docs, lengths 100..500, 20-token question, runs=100, warmup=10
    store = memory_store_for(desk)
    populate_store(cfg, desk, store)
    report = run_bench(cfg, desk, store)
    lengths = report.context_lengths
    problems = []
    for mode in ("link_reuse_k1", "link_reuse_k5"):
        red = [report.row(mode, n).reduction_pct for n in lengths]
        for n in lengths:
            if not report.row(mode, n).mean_ttft_us < report.row("full", n).mean_ttft_us:
                problems.append(f"{mode} not faster at {n}")
        if red[-1] < 50:
            problems.append(f"{mode} reduction {red[-1]:.1f}% at {lengths[-1]}")
        if any(b < a for a, b in zip(red, red[1:])):
            problems.append(f"{mode} reduction not monotone: {[round(r, 1) for r in red]}")
    plan_full = QueryPlan([[1] * 500] * 10, [1] * 20, mode="full")
    plan_link = QueryPlan([[1] * 500] * 10, [1] * 20, k=5)
    ratio = flops_for_plan(plan_link, desk.config) / flops_for_plan(plan_full, desk.config)
    if ratio > 0.10:
        problems.append(f"FLOP ratio {ratio:.3f}")
    red5 = [round(report.row("link_reuse_k5", n).reduction_pct, 1) for n in lengths]
    red1 = [round(report.row("link_reuse_k1", n).reduction_pct, 1) for n in lengths]
    ok = not problems
    record(9, ok, f"TTFT reduction K=1 {red1}%, K=5 {red5}% over {lengths}; FLOP ratio {ratio:.3f}"
           + ("" if ok else f"; {'; '.join(problems)}"))
    assert ok, problems


def test_criterion_10_idempotent_reuse(desk):
    rng = np.random.default_rng(10)
    plan = QueryPlan([ordinary_tokens(rng, desk, 40) for _ in range(4)], [1, 2, 3], k=2, boundary=True)
    store = MemoryCacheStore(1 << 30, desk.model_hash)
    first = run_reuse(plan, store, desk)
    second = run_reuse(plan, store, desk)
    ok = (first.logits.tobytes() == second.logits.tobytes()
          and second.prefill_flops == 0 and second.misses == 0 and first.prefill_flops > 0)
    record(10, ok, f"second run bitwise-equal logits, segment prefill FLOPs {second.prefill_flops} (first {first.prefill_flops})")
    assert ok
