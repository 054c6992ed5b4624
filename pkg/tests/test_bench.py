import csv
import math

import numpy as np
import pytest

from conftest import ordinary_tokens
from kvlink import ModelConfig
from kvlink.bench import (
    CSV_FIELDS,
    BenchConfig,
    bench_plans,
    flops_for_plan,
    format_table,
    memory_store_for,
    parse_mode,
    populate_store,
    read_csv,
    run_bench,
    write_csv,
)
from kvlink.errors import PlanError, SetupError
from kvlink.pipeline import QueryPlan, run_plan
from kvlink.plotting import plot_report

TINY = dict(n_docs=2, doc_lengths=(20, 40), runs=2, warmup=1, question_len=4)


def test_hand_computed_single_token():
    cfg = ModelConfig(n_layers=1, n_heads=1, n_kv_heads=1, head_dim=4, ffn_dim=8)
    plan = QueryPlan([[1]], [2], mode="full")
    # two tokens: 2 * (128 + 192) + 4 * 2 * 2 * 4
    assert flops_for_plan(plan, cfg) == 2 * 320 + 64


def test_full_at_least_reuse(desk, rng):
    for _ in range(10):
        segs = [ordinary_tokens(rng, desk, int(rng.integers(1, 50))) for _ in range(int(rng.integers(1, 6)))]
        q = ordinary_tokens(rng, desk, int(rng.integers(1, 10)))
        full = flops_for_plan(QueryPlan(segs, q, mode="full"), desk.config)
        assert full >= flops_for_plan(QueryPlan(segs, q, mode="plain_reuse"), desk.config)


def test_doubling_question_more_than_doubles_suffix(desk):
    segs = [[1] * 100]
    one = flops_for_plan(QueryPlan(segs, [1] * 20, mode="plain_reuse"), desk.config)
    two = flops_for_plan(QueryPlan(segs, [1] * 40, mode="plain_reuse"), desk.config)
    # without links the plan cost is the suffix pass alone; its q*q attention term is quadratic
    assert two > 2 * one


def test_ratio_at_5000_tokens(desk):
    segs = [[1] * 500] * 10
    q = [2] * 20
    full = flops_for_plan(QueryPlan(segs, q, mode="full"), desk.config)
    reuse = flops_for_plan(QueryPlan(segs, q, k=5), desk.config)
    assert reuse / full < 0.10


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="full"),
        dict(mode="plain_reuse"),
        dict(mode="link_reuse", k=3, boundary=True),
        dict(mode="blend", ratio=0.3),
        dict(mode="link_reuse", k=1, compression="anchor", rate=0.5, chunk_size=8),
        dict(mode="plain_reuse", compression="drop", rate=0.4),
    ],
)
def test_closed_form_matches_executed(desk, rng, kwargs):
    plan = QueryPlan([ordinary_tokens(rng, desk, n) for n in (17, 9, 12)], [1, 2, 3], **kwargs)
    store = memory_store_for(desk)
    first = run_plan(plan, store, desk)
    second = run_plan(plan, store, desk)
    assert first.flops == second.flops == flops_for_plan(plan, desk.config)


def test_parse_mode():
    assert parse_mode("link_reuse_k5") == {"mode": "link_reuse", "k": 5}
    assert parse_mode("blend_r0.18") == {"mode": "blend", "ratio": 0.18}
    with pytest.raises(PlanError):
        parse_mode("fast")


def test_config_invariants():
    with pytest.raises(PlanError):
        BenchConfig(runs=0)
    with pytest.raises(PlanError):
        BenchConfig(warmup=-1)


def test_minimal_run(desk):
    cfg = BenchConfig(n_docs=2, doc_lengths=(10,), runs=1, warmup=0, modes=("full",))
    report = run_bench(cfg, desk, memory_store_for(desk), pin=False)
    (row,) = report.rows
    assert len(row.samples_us) == 1
    assert row.mean_ttft_us == row.min_us == row.max_us
    assert row.reduction_pct == 0.0


def test_unpopulated_store(desk):
    with pytest.raises(SetupError):
        run_bench(BenchConfig(**TINY), desk, memory_store_for(desk), pin=False)


@pytest.fixture(scope="module")
def tiny_report(desk):
    cfg = BenchConfig(**TINY)
    store = memory_store_for(desk)
    assert populate_store(cfg, desk, store) == 4
    assert populate_store(cfg, desk, store) == 0
    return run_bench(cfg, desk, store, pin=False)


def test_report_shape(tiny_report):
    assert tiny_report.context_lengths == [40, 80]
    assert tiny_report.modes == ["full", "link_reuse_k1", "link_reuse_k5"]
    for r in tiny_report.rows:
        assert len(r.samples_us) == 2


def test_reduction_from_raw_samples(tiny_report):
    for r in tiny_report.rows:
        full = tiny_report.row("full", r.context_len)
        expect = 100 * (1 - np.mean(r.samples_us) / np.mean(full.samples_us))
        assert math.isclose(r.reduction_pct, expect, rel_tol=1e-12, abs_tol=1e-12)


def test_flops_in_report_match_formula(desk, tiny_report):
    plans = {(label, n): p for label, n, p in bench_plans(tiny_report.config, desk.special)}
    for r in tiny_report.rows:
        assert r.flops == flops_for_plan(plans[(r.mode, r.context_len)], desk.config)


def test_csv_and_table(tiny_report, tmp_path):
    path = tmp_path / "r.csv"
    write_csv(tiny_report, path)
    with open(path, encoding="utf-8") as fh:
        assert next(csv.reader(fh)) == list(CSV_FIELDS)
    rows = read_csv(path)
    assert len(rows) == 6
    assert int(rows[0]["flops"]) == tiny_report.rows[0].flops
    table = format_table(tiny_report)
    assert "link_reuse_k5" in table and len(table.splitlines()) == 8


def test_plot_written(tiny_report, tmp_path):
    path = tmp_path / "r.png"
    plot_report(tiny_report, path)
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
