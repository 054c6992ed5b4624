"""``kvlink`` command line: init-model, encode, query, bench.

Settings resolve as flag, then ``KVLINK_*`` environment variable, then default.
Exit codes: 0 ok, 1 IO, 2 validation, 3 store, 4 vocab, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import FormatError, KVLinkError, SetupError, StoreError, VocabError
from .kvcache import DiskCacheStore, segment_hash
from .model import init_random, load_weights, save_weights

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_STORE, EXIT_VOCAB, EXIT_VERIFY = range(6)
ENV_PREFIX = "KVLINK_"

DEFAULTS = {
    "weights": "weights.kvlw",
    "store": ".kvlink-store",
    "capacity": 1 << 30,
    "k": 1,
    "theta": 10000.0,
    "boundary": False,
}


def _env_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_CASTS = {"weights": str, "store": str, "capacity": int, "k": int, "theta": float, "boundary": _env_bool}


@dataclass
class CliConfig:
    weights: Path
    store: Path
    capacity: int
    k: int
    theta: float
    boundary: bool
    explicit: frozenset  # settings given by flag or environment rather than defaulted

    @classmethod
    def resolve(cls, args: argparse.Namespace, env=None) -> "CliConfig":
        env = os.environ if env is None else env
        values, explicit = {}, set()
        for name, default in DEFAULTS.items():
            flag = getattr(args, name, None)
            raw = env.get(ENV_PREFIX + name.upper())
            if flag is not None:
                values[name] = flag
                explicit.add(name)
            elif raw is not None:
                try:
                    values[name] = _CASTS[name](raw)
                except ValueError as exc:
                    raise argparse.ArgumentTypeError(f"{ENV_PREFIX}{name.upper()}: {exc}") from None
                explicit.add(name)
            else:
                values[name] = default
        return cls(
            weights=Path(values["weights"]),
            store=Path(values["store"]),
            capacity=values["capacity"],
            k=values["k"],
            theta=values["theta"],
            boundary=values["boundary"],
            explicit=frozenset(explicit),
        )


def _read_tokens(spec: str) -> list[int]:
    """Whitespace-separated IDs, given inline or as a path (``@path`` forces a path)."""
    if not spec.startswith("@"):
        try:
            return [int(t) for t in spec.split()]
        except ValueError:
            pass
    text = Path(spec.lstrip("@")).read_text(encoding="utf-8")
    try:
        return [int(t) for t in text.split()]
    except ValueError as exc:
        raise VocabError(f"{spec}: token file must hold integer IDs ({exc})") from None


def _load_config(text: str | None, theta: float | None) -> ModelConfig:
    if text is None:
        data = {}
    else:
        path = Path(text)
        data = json.loads(path.read_text(encoding="utf-8") if path.exists() else text)
        if not isinstance(data, dict):
            raise ValueError("--config must be a JSON object")
    if theta is not None and "theta_base" not in data:
        data["theta_base"] = theta
    return ModelConfig.from_dict(data)


def _open_store(cfg: CliConfig, w) -> DiskCacheStore:
    return DiskCacheStore(cfg.store, cfg.capacity, w.model_hash)


def cmd_init_model(args, cfg: CliConfig) -> int:
    theta = cfg.theta if "theta" in cfg.explicit else None
    config = _load_config(args.config, theta)
    w = init_random(config, args.seed)
    out = Path(args.out) if args.out else cfg.weights
    save_weights(w, out)
    print(f"wrote {out} ({out.stat().st_size} bytes, model {w.model_hash:016x})")
    return EXIT_OK


def cmd_encode(args, cfg: CliConfig) -> int:
    from .pipeline import cache_tag, encode_segment

    w = load_weights(cfg.weights)
    tokens = _read_tokens(args.tokens)
    if args.compress != "none" and args.rate is None:
        raise argparse.ArgumentTypeError("--compress needs --rate")
    store = _open_store(cfg, w)
    tag = cache_tag(args.compress, args.rate, args.chunk)
    sid = segment_hash(w.model_hash, tokens, tag)
    cached = store.get(sid)
    if cached is not None:
        print(f"segment {sid:016x} cache hit ({cached.n_tokens} rows)")
        return EXIT_OK
    cache, _ = encode_segment(tokens, w, args.compress, args.rate, args.chunk)
    size = store.put(cache)
    print(f"segment {sid:016x} stored {cache.n_tokens} rows, {size} bytes")
    return EXIT_OK


def _plan_keys(text: str) -> set[str]:
    keys = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        if "=" in line:
            keys.add(line.split("=", 1)[0].strip())
    return keys


def cmd_query(args, cfg: CliConfig) -> int:
    from .pipeline import oracle_compare, parse_plan, run_plan

    path = Path(args.plan)
    text = path.read_text(encoding="utf-8")
    plan = parse_plan(text, path.parent)
    keys = _plan_keys(text)
    # Flags override the plan file; environment values only fill in what it leaves out.
    if args.k is not None or ("k" not in keys and "k" in cfg.explicit and plan.mode == "link_reuse"):
        plan.k = cfg.k
    if args.boundary is not None or ("boundary" not in keys and "boundary" in cfg.explicit):
        plan.boundary = cfg.boundary
    w = load_weights(cfg.weights)
    plan.validate(w.special)
    store = _open_store(cfg, w)
    result = run_plan(plan, store, w, decode=args.decode)
    print(f"mode={plan.mode} k={plan.k} hits={result.hits} misses={result.misses} flops={result.flops}")
    if result.integrity_errors:
        print(f"warning: {result.integrity_errors} corrupt cache file(s) rebuilt", file=sys.stderr)
    for name, sec in result.phases.items():
        print(f"  {name:<10}{sec * 1e3:10.3f} ms")
    print("first token:", int(np.argmax(result.logits)))
    if args.decode:
        print("decoded:", " ".join(map(str, result.decoded)))
    if args.verify:
        report = oracle_compare(plan, w, store)
        print(f"oracle max abs diff {report.max_abs:.3e} (threshold {report.threshold:.0e})")
        if not report.passed:
            return EXIT_VERIFY
    return EXIT_OK


def _parse_lengths(text: str) -> tuple[int, ...]:
    """``100..500`` (step 100 unless ``100..500:50``) or a comma list."""
    if ".." in text:
        span, _, step = text.partition(":")
        lo, hi = (int(x) for x in span.split(".."))
        step_n = int(step) if step else (lo if lo > 0 else 1)
        return tuple(range(lo, hi + 1, step_n))
    return tuple(int(x) for x in text.split(","))


def cmd_bench(args, cfg: CliConfig) -> int:
    from .bench import BenchConfig, format_table, memory_store_for, populate_store, run_bench, write_csv

    w = load_weights(cfg.weights)
    bcfg = BenchConfig(
        n_docs=args.docs,
        doc_lengths=_parse_lengths(args.lengths),
        runs=args.runs,
        warmup=args.warmup,
        modes=tuple(args.modes.split(",")),
        question_len=args.question_len,
    )
    store = memory_store_for(w)
    populate_store(bcfg, w, store)
    report = run_bench(bcfg, w, store, pin=not args.no_pin)
    print(format_table(report))
    out = Path(args.out)
    write_csv(report, out)
    print(f"wrote {out}")
    if not args.no_plot:
        from .plotting import plot_report

        fig = out.with_suffix(".png")
        plot_report(report, fig)
        print(f"wrote {fig}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvlink", description="Reusable KV caches with link tokens.")
    p.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--weights", help="weights file (env KVLINK_WEIGHTS)")
    common.add_argument("--store", help="cache directory (env KVLINK_STORE)")
    common.add_argument("--capacity", type=int, help="store capacity in bytes (env KVLINK_CAPACITY)")
    common.add_argument("--k", type=int, help="link tokens per segment (env KVLINK_K)")
    common.add_argument("--theta", type=float, help="rotary base for new models (env KVLINK_THETA)")
    common.add_argument(
        "--boundary", action=argparse.BooleanOptionalAction, default=None,
        help="wrap the context in KV-START/KV-END (env KVLINK_BOUNDARY)",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-model", parents=[common], help="write random weights")
    s.add_argument("--config", help="JSON object or path to a JSON file with model fields")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", help="output path (defaults to --weights)")
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("encode", parents=[common], help="prefill a segment into the store")
    s.add_argument("--tokens", required=True, help="inline IDs or a token file")
    s.add_argument("--compress", choices=("none", "anchor", "drop"), default="none")
    s.add_argument("--rate", type=float, help="fraction of rows removed by compression")
    s.add_argument("--chunk", type=int, default=100, help="anchor chunk size")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("query", parents=[common], help="run a plan file")
    s.add_argument("--plan", required=True)
    s.add_argument("--decode", type=int, default=0, metavar="N")
    s.add_argument("--verify", action="store_true", help="compare against the single-pass oracle")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("bench", parents=[common], help="measure TTFT against full prefill")
    s.add_argument("--docs", type=int, default=10)
    s.add_argument("--lengths", default="100..500")
    s.add_argument("--runs", type=int, default=100)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--question-len", type=int, default=20)
    s.add_argument("--modes", default="full,link_reuse_k1,link_reuse_k5")
    s.add_argument("--out", default="report.csv")
    s.add_argument("--no-plot", action="store_true")
    s.add_argument("--no-pin", action="store_true", help="do not restrict the process to one CPU")
    s.set_defaults(func=cmd_bench)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, VocabError):
        return EXIT_VOCAB
    if isinstance(exc, (StoreError, SetupError)):
        return EXIT_STORE
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO
    if isinstance(exc, (KVLinkError, ValueError, argparse.ArgumentTypeError)):
        return EXIT_VALIDATION
    raise exc


def main(argv=None, env=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = CliConfig.resolve(args, env)
        return args.func(args, cfg)
    except (KVLinkError, OSError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"kvlink {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
