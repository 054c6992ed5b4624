"""Time-to-first-token and FLOP measurement for reuse versus full prefill.

Each (mode, context length) point runs ``warmup`` untimed trials, then ``runs``
timed ones. A trial is the whole request up to the logits of the first
generated token, cache loading and re-rotation included.
"""

from __future__ import annotations

import csv
import gc
import math
import os
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .compressor import ceil_fraction, kept_count, plan_chunks
from .config import SpecialTokens
from .errors import PlanError, SetupError
from .kvcache import MemoryCacheStore, segment_hash
from .model import Weights, pass_flops
from .pipeline import QueryPlan, blend_flops, cache_tag, encode_segment, run_plan

CSV_FIELDS = (
    "mode", "context_len", "mean_ttft_us", "min", "max",
    "load_us", "rerotate_us", "link_us", "suffix_us", "flops", "reduction_pct",
)
DEFAULT_MODES = ("full", "link_reuse_k1", "link_reuse_k5")


@dataclass
class BenchConfig:
    n_docs: int = 10
    doc_lengths: tuple[int, ...] = (100, 200, 300, 400, 500)
    runs: int = 100
    warmup: int = 10
    modes: tuple[str, ...] = DEFAULT_MODES
    question_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.runs < 1:
            raise PlanError("runs must be >= 1")
        if self.warmup < 0:
            raise PlanError("warmup must be >= 0")
        if self.n_docs < 1 or not self.doc_lengths or min(self.doc_lengths) < 1:
            raise PlanError("need at least one document of positive length")
        for m in self.modes:
            parse_mode(m)


def parse_mode(label: str) -> dict:
    """``full``, ``plain_reuse``, ``link_reuse_k<K>`` or ``blend_r<ratio>`` -> plan fields."""
    if label in ("full", "plain_reuse"):
        return {"mode": label}
    if label.startswith("link_reuse_k"):
        return {"mode": "link_reuse", "k": int(label[len("link_reuse_k"):])}
    if label.startswith("blend_r"):
        return {"mode": "blend", "ratio": float(label[len("blend_r"):])}
    raise PlanError(f"unknown bench mode {label!r}")


def bench_documents(cfg: BenchConfig, special: SpecialTokens, doc_len: int):
    rng = np.random.default_rng([cfg.seed, doc_len])
    docs = [rng.integers(0, special.first_reserved, doc_len).tolist() for _ in range(cfg.n_docs)]
    question = rng.integers(0, special.first_reserved, cfg.question_len).tolist()
    return docs, question


def bench_plans(cfg: BenchConfig, special: SpecialTokens):
    """Yield ``(label, context_len, plan)`` for every benchmark point."""
    for doc_len in cfg.doc_lengths:
        docs, question = bench_documents(cfg, special, doc_len)
        for label in cfg.modes:
            yield label, cfg.n_docs * doc_len, QueryPlan(docs, question, **parse_mode(label))


def populate_store(cfg: BenchConfig, w: Weights, store) -> int:
    """Encode every benchmark document into ``store``; returns the number encoded."""
    n = 0
    for doc_len in cfg.doc_lengths:
        docs, _ = bench_documents(cfg, w.special, doc_len)
        for tokens in docs:
            if segment_hash(w.model_hash, tokens) not in store:
                store.put(encode_segment(tokens, w)[0])
                n += 1
    return n


def _context_rows(plan: QueryPlan) -> list[int]:
    if plan.compression == "anchor":
        return [plan_chunks(len(s), plan.chunk_size, plan.rate).stored_rows for s in plan.segments]
    if plan.compression == "drop":
        return [kept_count(len(s), plan.rate) for s in plan.segments]
    return [len(s) for s in plan.segments]


def flops_for_plan(plan: QueryPlan, config) -> int:
    """Closed-form query-time FLOPs, assuming every segment cache is a hit.

    Per processed token and layer: ``2*4*h*h`` for projections plus ``2*3*h*ffn``
    for the gated FFN; attention adds ``2*2*q_len*kv_len*h`` per layer.
    """
    n_bound = 2 if plan.boundary else 0
    n_q = len(plan.question) + n_bound
    if plan.mode == "full":
        total = plan.context_tokens + n_q
        return pass_flops(config, total, total)
    rows = sum(_context_rows(plan))
    if plan.mode == "blend":
        n_sel = ceil_fraction(plan.ratio, rows)
        return blend_flops(config, rows, n_sel) + pass_flops(config, n_q, rows + n_q)
    n_link = plan.k * len(plan.segments)
    flops = pass_flops(config, n_link, rows + n_link) if n_link else 0
    return flops + pass_flops(config, n_q, rows + n_link + n_q)


@dataclass
class BenchRow:
    mode: str
    context_len: int
    samples_us: list[float] = field(repr=False)
    phases_us: dict[str, float]
    flops: int
    reduction_pct: float = float("nan")

    @property
    def mean_ttft_us(self) -> float:
        return statistics.fmean(self.samples_us)

    @property
    def min_us(self) -> float:
        return min(self.samples_us)

    @property
    def max_us(self) -> float:
        return max(self.samples_us)

    def csv_row(self) -> dict:
        return {
            "mode": self.mode,
            "context_len": self.context_len,
            "mean_ttft_us": f"{self.mean_ttft_us:.3f}",
            "min": f"{self.min_us:.3f}",
            "max": f"{self.max_us:.3f}",
            "load_us": f"{self.phases_us.get('load', 0.0):.3f}",
            "rerotate_us": f"{self.phases_us.get('rerotate', 0.0):.3f}",
            "link_us": f"{self.phases_us.get('link', 0.0):.3f}",
            "suffix_us": f"{self.phases_us.get('suffix', 0.0):.3f}",
            "flops": self.flops,
            "reduction_pct": f"{self.reduction_pct:.3f}",
        }


@dataclass
class BenchReport:
    config: BenchConfig
    rows: list[BenchRow]

    def row(self, mode: str, context_len: int) -> BenchRow:
        for r in self.rows:
            if r.mode == mode and r.context_len == context_len:
                return r
        raise KeyError((mode, context_len))

    @property
    def context_lengths(self) -> list[int]:
        return sorted({r.context_len for r in self.rows})

    @property
    def modes(self) -> list[str]:
        return list(dict.fromkeys(r.mode for r in self.rows))


@contextmanager
def _single_cpu(enabled: bool):
    """Restrict the process to one CPU for the duration of the block."""
    if not enabled or not hasattr(os, "sched_getaffinity"):
        yield
        return
    saved = os.sched_getaffinity(0)
    os.sched_setaffinity(0, {min(saved)})
    try:
        yield
    finally:
        os.sched_setaffinity(0, saved)


def run_bench(cfg: BenchConfig, w: Weights, store, pin: bool = True) -> BenchReport:
    with _single_cpu(pin):
        return _run_bench(cfg, w, store)


def _run_bench(cfg: BenchConfig, w: Weights, store) -> BenchReport:
    plans = list(bench_plans(cfg, w.special))
    for label, _, plan in plans:
        if plan.mode == "full":
            continue
        tag = cache_tag(plan.compression, plan.rate, plan.chunk_size)
        missing = sum(segment_hash(w.model_hash, s, tag) not in store for s in plan.segments)
        if missing:
            raise SetupError(f"store lacks {missing} benchmark segment(s) for mode {label}")
    # Modes are timed round-robin within each context length so that slow drift in
    # machine speed lands on every mode alike instead of skewing the reductions.
    by_len: dict[int, list] = {}
    for label, ctx_len, plan in plans:
        by_len.setdefault(ctx_len, []).append((label, plan))
    rows = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for ctx_len, group in by_len.items():
            for _ in range(cfg.warmup):
                for _, plan in group:
                    run_plan(plan, store, w)
            samples = {label: [] for label, _ in group}
            phase_sums = {label: {} for label, _ in group}
            flops = {}
            for _ in range(cfg.runs):
                for label, plan in group:
                    t0 = time.perf_counter()
                    result = run_plan(plan, store, w)
                    samples[label].append((time.perf_counter() - t0) * 1e6)
                    sums = phase_sums[label]
                    for name, sec in result.phases.items():
                        sums[name] = sums.get(name, 0.0) + sec * 1e6
                    flops[label] = result.flops
                gc.collect()
            for label, _ in group:
                phases = {k: v / cfg.runs for k, v in phase_sums[label].items()}
                rows.append(BenchRow(label, ctx_len, samples[label], phases, flops[label]))
    finally:
        if gc_was_enabled:
            gc.enable()
    full = {r.context_len: r for r in rows if r.mode == "full"}
    for r in rows:
        if r.context_len in full:
            r.reduction_pct = 100.0 * (1.0 - r.mean_ttft_us / full[r.context_len].mean_ttft_us)
    return BenchReport(cfg, rows)


def write_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in report.rows:
            writer.writerow(r.csv_row())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def format_table(report: BenchReport) -> str:
    head = f"{'mode':<16}{'context':>8}{'mean ms':>10}{'min ms':>10}{'max ms':>10}{'GFLOP':>10}{'reduction':>11}"
    lines = [head, "-" * len(head)]
    for r in report.rows:
        red = "" if math.isnan(r.reduction_pct) else f"{r.reduction_pct:.1f}%"
        lines.append(
            f"{r.mode:<16}{r.context_len:>8}{r.mean_ttft_us / 1e3:>10.2f}{r.min_us / 1e3:>10.2f}"
            f"{r.max_us / 1e3:>10.2f}{r.flops / 1e9:>10.3f}{red:>11}"
        )
    return "\n".join(lines)


def memory_store_for(w: Weights) -> MemoryCacheStore:
    return MemoryCacheStore(1 << 40, w.model_hash)
