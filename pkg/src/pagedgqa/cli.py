"""Command-line front end for the benchmark harness.

Exit codes: 0 on success, 1 when a run fails on pool capacity, 2 for
invalid configuration or unreadable report files.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import (
    BenchConfig,
    compare_runs,
    load_report,
    parse_bias,
    render_report,
    run_bench,
    write_report,
)
from .paging import PoolExhausted

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_DEFAULTS = BenchConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pagedgqa-bench",
        description=(
            "Benchmark grouped-query attention over a paged KV cache and "
            "report latency and throughput metrics."
        ),
    )
    parser.add_argument("--num-heads", type=int, default=_DEFAULTS.num_heads)
    parser.add_argument("--num-kv-heads", type=int, default=_DEFAULTS.num_kv_heads)
    parser.add_argument("--head-size", type=int, default=_DEFAULTS.head_size)
    parser.add_argument("--block-size", type=int, default=_DEFAULTS.block_size)
    parser.add_argument("--num-blocks", type=int, default=_DEFAULTS.num_blocks)
    parser.add_argument("--batch", type=int, default=_DEFAULTS.batch)
    parser.add_argument("--prompt-len", type=int, default=_DEFAULTS.prompt_len)
    parser.add_argument("--gen-len", type=int, default=_DEFAULTS.gen_len)
    parser.add_argument(
        "--bias",
        default="causal",
        help="attention bias mode: causal, local:<w>, or alibi",
    )
    parser.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    parser.add_argument("--workers", type=int, default=_DEFAULTS.workers)
    parser.add_argument(
        "--single-thread",
        action="store_true",
        help="run worker ticks serially for bit-reproducible ordering",
    )
    parser.add_argument(
        "--format", choices=("csv", "json"), default=_DEFAULTS.output_format
    )
    parser.add_argument("--out", metavar="PATH", help="write the report here")
    parser.add_argument(
        "--compare",
        nargs=2,
        metavar=("PATHA", "PATHB"),
        help="compare two report files and print percentage deltas",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.compare:
        try:
            baseline = load_report(args.compare[0])
            candidate = load_report(args.compare[1])
            deltas = compare_runs(baseline, candidate)
        except (OSError, ValueError) as err:
            print(f"error: {err}", file=sys.stderr)
            return EXIT_USAGE
        print(json.dumps(deltas, indent=2))
        return EXIT_OK

    try:
        cfg = BenchConfig(
            num_heads=args.num_heads,
            num_kv_heads=args.num_kv_heads,
            head_size=args.head_size,
            block_size=args.block_size,
            num_blocks=args.num_blocks,
            batch=args.batch,
            prompt_len=args.prompt_len,
            gen_len=args.gen_len,
            bias_mode=parse_bias(args.bias),
            seed=args.seed,
            workers=args.workers,
            single_thread=args.single_thread,
            output_format=args.format,
            output_path=args.out,
        )
        cfg.validate()
    except ValueError as err:
        print(f"invalid configuration: {err}", file=sys.stderr)
        return EXIT_USAGE

    try:
        report = run_bench(cfg)
    except PoolExhausted as err:
        print(f"capacity error: {err}", file=sys.stderr)
        return EXIT_RUNTIME

    if args.out:
        write_report(report, args.format, args.out)
    else:
        print(render_report(report, args.format), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
