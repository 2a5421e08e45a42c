"""Benchmark harness: synthetic prefill-plus-decode runs with metric reports.

A run builds a seeded synthetic model (Gaussian projection weights and
embeddings; no real checkpoints), admits one decode request per sequence to
the least-loaded worker, prefills each sequence's prompt into its worker's
block pool, then drives the decode loop one scheduler tick at a time. Every
random draw happens up front, so the token streams and all pool state are
pure functions of the seed; wall-clock timing is the only nondeterministic
output. Each worker owns a private pool, which satisfies the one-writer-
per-pool contract even when worker ticks run on a thread pool.

Reported metrics: end-to-end latency (warm-up run excluded), generated
tokens per second, prompt-plus-generated tokens per second, the peak
resident KV bytes, pool occupancy and internal fragmentation at end of run,
and the worst load imbalance seen at admission time.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from io import StringIO

import numpy as np

from .attention import (
    Alibi,
    AlibiSlopes,
    AttentionConfig,
    BiasMode,
    Causal,
    LocalWindow,
    alibi_slopes,
    attention_forward,
    build_bias,
)
from .paging import (
    BlockTable,
    PoolConfig,
    ProjectionWeights,
    paged_decode_attention,
    pool_new,
    project_block,
)
from .scheduling import Request, SchedulerState
from .tensor import Tensor, reshape

__all__ = [
    "BenchConfig",
    "MetricsReport",
    "compare_runs",
    "format_bias",
    "load_report",
    "parse_bias",
    "render_report",
    "run_bench",
    "write_report",
]

REPORT_FIELDS = (
    "latency_ms",
    "gen_throughput_tok_s",
    "all_throughput_tok_s",
    "peak_kv_bytes",
    "pool_utilization",
    "pool_fragmentation",
    "worker_imbalance",
    "config",
)

TIMING_FIELDS = ("latency_ms", "gen_throughput_tok_s", "all_throughput_tok_s")


def parse_bias(text: str) -> BiasMode:
    """Parse a bias-mode flag: ``causal``, ``local:<w>``, or ``alibi``."""
    if text == "causal":
        return Causal()
    if text == "alibi":
        return Alibi()
    if text.startswith("local:"):
        raw = text[len("local:"):]
        try:
            window = int(raw)
        except ValueError:
            raise ValueError(f"local window must be an integer, got {raw!r}") from None
        return LocalWindow(window)
    raise ValueError(
        f"unknown bias mode {text!r} (expected causal, local:<w>, or alibi)"
    )


def format_bias(mode: BiasMode) -> str:
    if isinstance(mode, Causal):
        return "causal"
    if isinstance(mode, Alibi):
        return "alibi"
    if isinstance(mode, LocalWindow):
        return f"local:{mode.window}"
    raise ValueError(f"unknown bias mode {mode!r}")


@dataclass(frozen=True)
class BenchConfig:
    """One benchmark scenario.

    The defaults are an arbitrary desk-scale stand-in, not a reproduction of
    any published hardware configuration.
    """

    num_heads: int = 8
    num_kv_heads: int = 2
    head_size: int = 32
    block_size: int = 16
    num_blocks: int = 32
    batch: int = 4
    prompt_len: int = 64
    gen_len: int = 32
    bias_mode: BiasMode = Causal()
    seed: int = 0
    workers: int = 1
    single_thread: bool = False
    output_format: str = "json"
    output_path: str | None = None

    def validate(self) -> None:
        """Raise ValueError naming the first violated constraint."""
        AttentionConfig(
            self.num_heads, self.num_kv_heads, self.head_size, self.bias_mode
        )
        PoolConfig(self.num_blocks, self.block_size, self.num_kv_heads, self.head_size)
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.prompt_len < 0:
            raise ValueError(f"prompt_len must be >= 0, got {self.prompt_len}")
        if self.gen_len < 0:
            raise ValueError(f"gen_len must be >= 0, got {self.gen_len}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.output_format not in ("csv", "json"):
            raise ValueError(
                f"output_format must be csv or json, got {self.output_format!r}"
            )
        total = self.prompt_len + self.gen_len
        blocks_per_seq = -(-total // self.block_size)
        seqs_per_worker = -(-self.batch // self.workers)
        needed = seqs_per_worker * blocks_per_seq
        if needed > self.num_blocks:
            raise ValueError(
                f"pool capacity too small: {seqs_per_worker} sequences per "
                f"worker x {blocks_per_seq} blocks each needs {needed} blocks, "
                f"pool has {self.num_blocks}"
            )

    def to_dict(self) -> dict:
        return {
            "num_heads": self.num_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_size": self.head_size,
            "block_size": self.block_size,
            "num_blocks": self.num_blocks,
            "batch": self.batch,
            "prompt_len": self.prompt_len,
            "gen_len": self.gen_len,
            "bias": format_bias(self.bias_mode),
            "seed": self.seed,
            "workers": self.workers,
            "single_thread": self.single_thread,
        }


@dataclass(frozen=True)
class MetricsReport:
    latency_ms: float
    gen_throughput_tok_s: float
    all_throughput_tok_s: float
    peak_kv_bytes: int
    pool_utilization: float
    pool_fragmentation: float
    worker_imbalance: float
    config: BenchConfig

    def __post_init__(self) -> None:
        for name in REPORT_FIELDS[:-1]:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "latency_ms": self.latency_ms,
            "gen_throughput_tok_s": self.gen_throughput_tok_s,
            "all_throughput_tok_s": self.all_throughput_tok_s,
            "peak_kv_bytes": self.peak_kv_bytes,
            "pool_utilization": self.pool_utilization,
            "pool_fragmentation": self.pool_fragmentation,
            "worker_imbalance": self.worker_imbalance,
            "config": self.config.to_dict(),
        }


@dataclass
class _RunOutcome:
    elapsed_s: float
    peak_kv_bytes: int
    pool_utilization: float
    pool_fragmentation: float
    worker_imbalance: float


def _build_model(cfg: BenchConfig, rng: np.random.Generator):
    model_dim = cfg.num_heads * cfg.head_size
    scale = 1.0 / np.sqrt(model_dim)
    weights = ProjectionWeights(
        w_q=Tensor(rng.standard_normal((model_dim, model_dim)) * scale),
        w_k=Tensor(
            rng.standard_normal((model_dim, cfg.num_kv_heads * cfg.head_size)) * scale
        ),
        w_v=Tensor(
            rng.standard_normal((model_dim, cfg.num_kv_heads * cfg.head_size)) * scale
        ),
        num_heads=cfg.num_heads,
        num_kv_heads=cfg.num_kv_heads,
        head_size=cfg.head_size,
    )
    prompts = rng.standard_normal((cfg.batch, cfg.prompt_len, model_dim)).astype(
        np.float32
    )
    decode_embeds = rng.standard_normal((cfg.batch, cfg.gen_len, model_dim)).astype(
        np.float32
    )
    return weights, prompts, decode_embeds


def _execute_run(cfg, acfg, slopes, weights, prompts, decode_embeds) -> _RunOutcome:
    model_dim = cfg.num_heads * cfg.head_size
    pools = [
        pool_new(
            PoolConfig(cfg.num_blocks, cfg.block_size, cfg.num_kv_heads, cfg.head_size)
        )
        for _ in range(cfg.workers)
    ]
    sched = SchedulerState(cfg.workers)
    parallel = cfg.workers > 1 and not cfg.single_thread
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if parallel else None

    def run_items(fn, items):
        if executor is not None:
            list(executor.map(fn, items))
        else:
            for item in items:
                fn(item)

    prefill_bias = (
        build_bias(acfg, cfg.prompt_len, cfg.prompt_len, slopes)
        if cfg.prompt_len
        else None
    )
    tables: dict[int, BlockTable] = {}
    seq_worker: dict[int, int] = {}
    try:
        started = time.monotonic()
        assignment: dict[int, list[int]] = {w: [] for w in range(cfg.workers)}
        max_imbalance = 0.0
        for b in range(cfg.batch):
            wid = sched.admit(Request(id=b, seq_id=b, remaining_steps=cfg.gen_len))
            assignment[wid].append(b)
            seq_worker[b] = wid
            max_imbalance = max(max_imbalance, sched.load_stats().imbalance)
        # Tables are registered serially so sequence ids never depend on
        # thread interleaving; only the prefill math runs on the pool.
        for b in range(cfg.batch):
            tables[b] = pools[seq_worker[b]].new_sequence()

        def prefill_worker(wid: int) -> None:
            if cfg.prompt_len == 0:
                return
            pool = pools[wid]
            for b in assignment[wid]:
                q, k, v = project_block(Tensor(prompts[b]), weights)
                pool.append_kv(tables[b], k, v)
                attention_forward(
                    reshape(q, (1, cfg.prompt_len, cfg.num_heads, cfg.head_size)),
                    reshape(k, (1, cfg.prompt_len, cfg.num_kv_heads, cfg.head_size)),
                    reshape(v, (1, cfg.prompt_len, cfg.num_kv_heads, cfg.head_size)),
                    acfg,
                    prefill_bias,
                )

        run_items(prefill_worker, range(cfg.workers))

        def decode_item(item: tuple[int, int, int]) -> None:
            wid, b, idx = item
            pool = pools[wid]
            table = tables[b]
            x = Tensor(decode_embeds[b, idx].reshape(1, model_dim))
            q, k, v = project_block(x, weights)
            pool.append_kv(table, k, v)
            paged_decode_attention(
                pool,
                table,
                reshape(q, (cfg.num_heads, cfg.head_size)),
                acfg,
                slopes,
            )

        while sched.pending():
            work = []
            for worker in sched.workers:
                if worker.queue and worker.queue[0].remaining_steps > 0:
                    head = worker.queue[0]
                    work.append(
                        (worker.id, head.seq_id, cfg.gen_len - head.remaining_steps)
                    )
            run_items(decode_item, work)
            sched.step()
        elapsed = time.monotonic() - started
    finally:
        if executor is not None:
            executor.shutdown()

    total_blocks = cfg.workers * cfg.num_blocks
    allocated = sum(p.allocated_count for p in pools)
    unused_slots = 0.0
    for pool in pools:
        m = pool.utilization_metrics()
        unused_slots += m.internal_fragmentation * pool.allocated_count * cfg.block_size
    peak = sum(p.peak_allocated_kv_bytes for p in pools)
    for b, table in tables.items():
        pools[seq_worker[b]].release_sequence(table)
    return _RunOutcome(
        elapsed_s=elapsed,
        peak_kv_bytes=peak,
        pool_utilization=allocated / total_blocks,
        pool_fragmentation=(
            unused_slots / (allocated * cfg.block_size) if allocated else 0.0
        ),
        worker_imbalance=max_imbalance,
    )


def run_bench(cfg: BenchConfig) -> MetricsReport:
    """Run the benchmark twice (warm-up, then measured) and report metrics."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    weights, prompts, decode_embeds = _build_model(cfg, rng)
    acfg = AttentionConfig(
        cfg.num_heads, cfg.num_kv_heads, cfg.head_size, cfg.bias_mode
    )
    slopes = (
        alibi_slopes(cfg.num_heads) if isinstance(cfg.bias_mode, Alibi) else None
    )
    _execute_run(cfg, acfg, slopes, weights, prompts, decode_embeds)  # warm-up
    outcome = _execute_run(cfg, acfg, slopes, weights, prompts, decode_embeds)

    elapsed = max(outcome.elapsed_s, 1e-9)
    gen_tokens = cfg.batch * cfg.gen_len
    all_tokens = cfg.batch * (cfg.prompt_len + cfg.gen_len)
    return MetricsReport(
        latency_ms=elapsed * 1000.0,
        gen_throughput_tok_s=gen_tokens / elapsed,
        all_throughput_tok_s=all_tokens / elapsed,
        peak_kv_bytes=outcome.peak_kv_bytes,
        pool_utilization=outcome.pool_utilization,
        pool_fragmentation=outcome.pool_fragmentation,
        worker_imbalance=outcome.worker_imbalance,
        config=cfg,
    )


def render_report(report: MetricsReport, output_format: str) -> str:
    """Serialize a report as JSON or single-row CSV with the fixed schema."""
    data = report.to_dict()
    if output_format == "json":
        return json.dumps(data, indent=2) + "\n"
    if output_format == "csv":
        buf = StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        row = [data[f] for f in REPORT_FIELDS[:-1]]
        row.append(json.dumps(data["config"]))
        writer.writerow(row)
        return buf.getvalue()
    raise ValueError(f"unknown output format {output_format!r}")


def write_report(report: MetricsReport, output_format: str, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_report(report, output_format))


def load_report(path: str) -> dict:
    """Read a report file back into a dict, accepting either format."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
    else:
        rows = list(csv.DictReader(StringIO(text)))
        if len(rows) != 1:
            raise ValueError(f"expected one CSV data row in {path}, got {len(rows)}")
        data = dict(rows[0])
        data["config"] = json.loads(data["config"])
        for name in REPORT_FIELDS[:-1]:
            data[name] = float(data[name])
        data["peak_kv_bytes"] = int(data["peak_kv_bytes"])
    missing = [f for f in REPORT_FIELDS if f not in data]
    if missing:
        raise ValueError(f"report {path} is missing fields: {missing}")
    return data


def compare_runs(report_a: dict, report_b: dict) -> dict:
    """Percentage deltas of run b over baseline a: 100 * (b - a) / a."""
    deltas = {}
    for metric, key in (
        ("latency_ms", "latency_delta_pct"),
        ("gen_throughput_tok_s", "gen_throughput_delta_pct"),
        ("all_throughput_tok_s", "all_throughput_delta_pct"),
    ):
        base = float(report_a[metric])
        if base == 0.0:
            raise ValueError(f"baseline {metric} is zero, delta undefined")
        deltas[key] = 100.0 * (float(report_b[metric]) - base) / base
    return deltas
