"""Paged key/value cache over a pre-allocated block pool.

Key/value history is stored in fixed-size token pages ("blocks") drawn from
a pool that is fully allocated up front and never grows. Each sequence maps
its logical token range to physical blocks through a block table. Forking a
sequence shares full blocks by reference count and deep-copies only the
partially filled tail, so divergent appends stay isolated. Decode attention
walks a sequence's blocks in order with an online softmax, which makes the
result equal to full attention over the concatenated cache without ever
materializing it.

The pool is the unit of synchronization: mutating operations (append, fork,
release, allocation) serialize on the pool lock; gathers and decode reads
may run concurrently with each other but must not race mutation of the same
sequence's blocks.
"""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field

import numpy as np

from .attention import Alibi, AlibiSlopes, AttentionConfig, LocalWindow
from .tensor import DTYPE, MaskedRowError, ShapeError, Tensor, matmul, reshape

__all__ = [
    "BlockPool",
    "BlockTable",
    "CacheCorruption",
    "PoolConfig",
    "PoolExhausted",
    "ProjectionWeights",
    "UtilizationMetrics",
    "paged_decode_attention",
    "pool_new",
    "project_block",
]

KV_BYTES_PER_ELEMENT = 4  # float32 K and V


class PoolExhausted(RuntimeError):
    """The free list cannot cover a requested allocation.

    Raised instead of evicting: admission control owns the decision of what
    to reject, and silent eviction would corrupt attention results.
    """


class CacheCorruption(RuntimeError):
    """An internal pool invariant was violated; state is not trustworthy."""


@dataclass(frozen=True)
class PoolConfig:
    """Geometry of one block pool."""

    num_blocks: int
    block_size: int
    num_kv_heads: int
    head_size: int

    def __post_init__(self) -> None:
        for name in ("num_blocks", "block_size", "num_kv_heads", "head_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def capacity_tokens(self) -> int:
        return self.num_blocks * self.block_size

    @property
    def kv_bytes_per_token(self) -> int:
        # One K and one V vector per kv head per token.
        return 2 * self.num_kv_heads * self.head_size * KV_BYTES_PER_ELEMENT


@dataclass
class BlockTable:
    """Ordered logical-to-physical block map for one sequence."""

    seq_id: int
    block_ids: list[int] = field(default_factory=list)
    token_count: int = 0

    def block_fill(self, index: int, block_size: int) -> int:
        """Number of tokens stored in the block at logical position ``index``."""
        if not 0 <= index < len(self.block_ids):
            raise IndexError(f"block index {index} out of range")
        remaining = self.token_count - index * block_size
        return min(block_size, remaining)


@dataclass(frozen=True)
class UtilizationMetrics:
    utilization: float
    internal_fragmentation: float
    hot_blocks: tuple[int, ...]


@dataclass(frozen=True)
class ProjectionWeights:
    """Query/key/value projection matrices plus the head geometry they imply."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    num_heads: int
    num_kv_heads: int
    head_size: int

    def __post_init__(self) -> None:
        for name, w in (("w_q", self.w_q), ("w_k", self.w_k), ("w_v", self.w_v)):
            if len(w.shape) != 2:
                raise ShapeError(f"{name} must be rank-2, got {w.shape}")
        if self.w_q.shape[1] != self.num_heads * self.head_size:
            raise ShapeError(
                f"w_q has {self.w_q.shape[1]} columns, expected "
                f"{self.num_heads * self.head_size}"
            )
        for name, w in (("w_k", self.w_k), ("w_v", self.w_v)):
            if w.shape[1] != self.num_kv_heads * self.head_size:
                raise ShapeError(
                    f"{name} has {w.shape[1]} columns, expected "
                    f"{self.num_kv_heads * self.head_size}"
                )
        if not (self.w_q.shape[0] == self.w_k.shape[0] == self.w_v.shape[0]):
            raise ShapeError(
                f"projection matrices disagree on model_dim: "
                f"{self.w_q.shape[0]}, {self.w_k.shape[0]}, {self.w_v.shape[0]}"
            )

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]


def project_block(x_block: Tensor, w: ProjectionWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Project one block of embeddings to per-head q, k, v tensors.

    Input is [t, model_dim]; outputs are [t, num_heads, head_size] for q and
    [t, num_kv_heads, head_size] for k and v.
    """
    if len(x_block.shape) != 2:
        raise ShapeError(f"x_block must be rank-2, got {x_block.shape}")
    if x_block.shape[1] != w.model_dim:
        raise ShapeError(
            f"x_block has {x_block.shape[1]} columns, weights expect {w.model_dim}"
        )
    t = x_block.shape[0]
    q = reshape(matmul(x_block, w.w_q), (t, w.num_heads, w.head_size))
    k = reshape(matmul(x_block, w.w_k), (t, w.num_kv_heads, w.head_size))
    v = reshape(matmul(x_block, w.w_v), (t, w.num_kv_heads, w.head_size))
    return q, k, v


class BlockPool:
    """Fixed-size pool of KV blocks with refcounted sharing.

    Storage layout per block: [K/V, token slot, kv head, head dim],
    contiguous per block, K before V, token-major then head-major.
    """

    def __init__(self, config: PoolConfig) -> None:
        self.config = config
        self._storage = np.zeros(
            (
                config.num_blocks,
                2,
                config.block_size,
                config.num_kv_heads,
                config.head_size,
            ),
            dtype=DTYPE,
        )
        self._ref_count = np.zeros(config.num_blocks, dtype=np.int64)
        self._access_count = np.zeros(config.num_blocks, dtype=np.int64)
        self._free: list[int] = list(range(config.num_blocks))
        heapq.heapify(self._free)
        self._tables: dict[int, BlockTable] = {}
        self._next_seq = 0
        self._peak_allocated = 0
        self._lock = threading.Lock()

    # -- introspection ----------------------------------------------------

    @property
    def free_count(self) -> int:
        return len(self._free)

    @property
    def allocated_count(self) -> int:
        return self.config.num_blocks - len(self._free)

    @property
    def free_blocks(self) -> tuple[int, ...]:
        """Sorted ids of currently unallocated blocks."""
        with self._lock:
            return tuple(sorted(self._free))

    def ref_count(self, block_id: int) -> int:
        return int(self._ref_count[block_id])

    def access_count(self, block_id: int) -> int:
        return int(self._access_count[block_id])

    @property
    def peak_allocated_kv_bytes(self) -> int:
        """High-water mark of resident KV bytes at block granularity."""
        return (
            self._peak_allocated
            * self.config.block_size
            * self.config.kv_bytes_per_token
        )

    # -- allocation core (callers hold the lock) --------------------------

    def _allocate_locked(self) -> int:
        if not self._free:
            raise PoolExhausted(
                f"no free blocks (pool has {self.config.num_blocks})"
            )
        block_id = heapq.heappop(self._free)
        if self._ref_count[block_id] != 0:
            raise CacheCorruption(
                f"free block {block_id} has ref_count {self._ref_count[block_id]}"
            )
        self._ref_count[block_id] = 1
        self._access_count[block_id] = 0
        self._storage[block_id] = 0.0
        self._peak_allocated = max(self._peak_allocated, self.allocated_count)
        return block_id

    def _release_block_locked(self, block_id: int) -> None:
        if self._ref_count[block_id] < 1:
            raise CacheCorruption(
                f"releasing block {block_id} with ref_count "
                f"{self._ref_count[block_id]}"
            )
        self._ref_count[block_id] -= 1
        if self._ref_count[block_id] == 0:
            heapq.heappush(self._free, block_id)

    def _owned_table(self, table: BlockTable) -> BlockTable:
        owned = self._tables.get(table.seq_id)
        if owned is not table:
            raise ValueError(
                f"sequence {table.seq_id} is not registered with this pool"
            )
        return owned

    # -- sequence operations ----------------------------------------------

    def new_sequence(self) -> BlockTable:
        """Register an empty sequence and return its block table."""
        with self._lock:
            table = BlockTable(seq_id=self._next_seq)
            self._next_seq += 1
            self._tables[table.seq_id] = table
            return table

    def append_kv(self, table: BlockTable, k_tokens: Tensor, v_tokens: Tensor) -> BlockTable:
        """Append t tokens of K/V ([t, num_kv_heads, head_size]) to a sequence.

        The partially filled last block is topped up before any allocation.
        If the free list cannot cover the required new blocks the append
        raises PoolExhausted and commits nothing.
        """
        expected_tail = (self.config.num_kv_heads, self.config.head_size)
        for name, tens in (("k_tokens", k_tokens), ("v_tokens", v_tokens)):
            if len(tens.shape) != 3 or tens.shape[1:] != expected_tail:
                raise ShapeError(
                    f"{name} must be [t, {expected_tail[0]}, {expected_tail[1]}], "
                    f"got {tens.shape}"
                )
        if k_tokens.shape != v_tokens.shape:
            raise ShapeError(
                f"k_tokens {k_tokens.shape} and v_tokens {v_tokens.shape} must match"
            )
        t = k_tokens.shape[0]
        if t < 1:
            raise ValueError("append_kv needs at least one token")

        bs = self.config.block_size
        ka, va = k_tokens.array, v_tokens.array
        with self._lock:
            self._owned_table(table)
            tail_used = table.token_count % bs
            tail_space = 0 if tail_used == 0 else bs - tail_used
            overflow = t - tail_space
            needed = (overflow + bs - 1) // bs if overflow > 0 else 0
            if needed > len(self._free):
                raise PoolExhausted(
                    f"append of {t} tokens needs {needed} new blocks, "
                    f"only {len(self._free)} free"
                )

            written = 0
            if tail_space:
                tail_id = table.block_ids[-1]
                if self._ref_count[tail_id] != 1:
                    raise CacheCorruption(
                        f"partial block {tail_id} is shared "
                        f"(ref_count {self._ref_count[tail_id]})"
                    )
                n = min(t, tail_space)
                self._storage[tail_id, 0, tail_used : tail_used + n] = ka[:n]
                self._storage[tail_id, 1, tail_used : tail_used + n] = va[:n]
                written = n
            while written < t:
                block_id = self._allocate_locked()
                table.block_ids.append(block_id)
                n = min(t - written, bs)
                self._storage[block_id, 0, :n] = ka[written : written + n]
                self._storage[block_id, 1, :n] = va[written : written + n]
                written += n
            table.token_count += t
            return table

    def gather_kv(self, table: BlockTable) -> tuple[Tensor, Tensor]:
        """Concatenate a sequence's K and V in logical order.

        Returns ([token_count, num_kv_heads, head_size]) tensors; counts a
        read against every block touched.
        """
        with self._lock:
            self._owned_table(table)
            block_ids = list(table.block_ids)
            token_count = table.token_count
            for bid in block_ids:
                if not 0 <= bid < self.config.num_blocks or self._ref_count[bid] < 1:
                    raise CacheCorruption(f"dangling block id {bid}")
                self._access_count[bid] += 1
        shape = (token_count, self.config.num_kv_heads, self.config.head_size)
        if not block_ids:
            empty = np.zeros(shape, dtype=DTYPE)
            return Tensor(empty), Tensor(empty)
        k = np.concatenate([self._storage[bid, 0] for bid in block_ids], axis=0)
        v = np.concatenate([self._storage[bid, 1] for bid in block_ids], axis=0)
        return Tensor(k[:token_count]), Tensor(v[:token_count])

    def fork_sequence(self, table: BlockTable) -> BlockTable:
        """Copy-on-write fork: share full blocks, deep-copy the partial tail."""
        bs = self.config.block_size
        with self._lock:
            self._owned_table(table)
            tail_used = table.token_count % bs
            if tail_used and not self._free:
                raise PoolExhausted("fork needs one free block for the partial tail")
            new = BlockTable(seq_id=self._next_seq)
            self._next_seq += 1
            shared = table.block_ids[:-1] if tail_used else table.block_ids
            for bid in shared:
                self._ref_count[bid] += 1
            new.block_ids = list(shared)
            if tail_used:
                src = table.block_ids[-1]
                dst = self._allocate_locked()
                self._storage[dst, :, :tail_used] = self._storage[src, :, :tail_used]
                new.block_ids.append(dst)
            new.token_count = table.token_count
            self._tables[new.seq_id] = new
            return new

    def release_sequence(self, table: BlockTable) -> None:
        """Drop a sequence; blocks whose ref_count reaches 0 return to the free list."""
        with self._lock:
            self._owned_table(table)
            for bid in table.block_ids:
                self._release_block_locked(bid)
            del self._tables[table.seq_id]
            table.block_ids = []
            table.token_count = 0

    # -- metrics and diagnostics ------------------------------------------

    def utilization_metrics(self) -> UtilizationMetrics:
        """Pool occupancy, slack inside allocated blocks, and hot-block ranking."""
        bs = self.config.block_size
        with self._lock:
            allocated = self.allocated_count
            if allocated == 0:
                return UtilizationMetrics(0.0, 0.0, ())
            used = np.zeros(self.config.num_blocks, dtype=np.int64)
            for table in self._tables.values():
                for idx, bid in enumerate(table.block_ids):
                    used[bid] = max(used[bid], table.block_fill(idx, bs))
            live = self._ref_count > 0
            unused = int((bs - used[live]).sum())
            hot = sorted(
                np.flatnonzero(live),
                key=lambda bid: (-self._access_count[bid], bid),
            )
            return UtilizationMetrics(
                utilization=allocated / self.config.num_blocks,
                internal_fragmentation=unused / (allocated * bs),
                hot_blocks=tuple(int(b) for b in hot),
            )

    def debug_dump(self) -> str:
        """Deterministic one-record-per-line snapshot for golden-file tests."""
        with self._lock:
            lines = [f"free_list: {sorted(self._free)}"]
            for seq_id in sorted(self._tables):
                t = self._tables[seq_id]
                lines.append(
                    f"seq {seq_id}: blocks={t.block_ids} token_count={t.token_count}"
                )
            refs = ", ".join(
                f"{bid}: {int(self._ref_count[bid])}"
                for bid in np.flatnonzero(self._ref_count > 0)
            )
            lines.append(f"ref_counts: {{{refs}}}")
            return "\n".join(lines)


def pool_new(cfg: PoolConfig) -> BlockPool:
    """Create a pool with all storage allocated up front and every block free."""
    return BlockPool(cfg)


def paged_decode_attention(
    pool: BlockPool,
    table: BlockTable,
    q: Tensor,
    cfg: AttentionConfig,
    slopes: AlibiSlopes | None = None,
) -> Tensor:
    """One decode step of grouped-query attention straight off the paged cache.

    ``q`` is the query for the newest token ([num_heads, head_size], whose
    K/V must already be appended). Blocks are visited in logical order
    carrying a per-head running maximum, denominator, and weighted
    accumulator, so the result matches full attention over gather_kv without
    concatenating the cache. Returns [num_heads, head_size].
    """
    if table.token_count < 1:
        raise ValueError("decode needs at least one cached token")
    if q.shape != (cfg.num_heads, cfg.head_size):
        raise ShapeError(
            f"q must be [{cfg.num_heads}, {cfg.head_size}], got {q.shape}"
        )
    if (
        cfg.num_kv_heads != pool.config.num_kv_heads
        or cfg.head_size != pool.config.head_size
    ):
        raise ShapeError(
            f"config heads ({cfg.num_kv_heads}, {cfg.head_size}) do not match "
            f"pool ({pool.config.num_kv_heads}, {pool.config.head_size})"
        )
    if isinstance(cfg.bias_mode, Alibi):
        if slopes is None:
            raise ValueError("Alibi bias mode requires slopes")
        if len(slopes) != cfg.num_heads:
            raise ShapeError(f"got {len(slopes)} slopes for {cfg.num_heads} heads")
    elif slopes is not None:
        raise ValueError(f"slopes given but bias mode is {cfg.bias_mode}")

    bs = pool.config.block_size
    kv_heads, group, head_size = cfg.num_kv_heads, cfg.group_size, cfg.head_size
    with pool._lock:
        pool._owned_table(table)
        block_ids = list(table.block_ids)
        total = table.token_count
        for bid in block_ids:
            pool._access_count[bid] += 1

    qg = q.array.reshape(kv_heads, group, head_size)
    slope_grid = (
        slopes.as_array().reshape(kv_heads, group) if slopes is not None else None
    )
    last = total - 1  # the query's own position
    m = np.full((kv_heads, group), -np.inf, dtype=DTYPE)
    d = np.zeros((kv_heads, group), dtype=DTYPE)
    acc = np.zeros((kv_heads, group, head_size), dtype=DTYPE)
    for idx, bid in enumerate(block_ids):
        n = min(bs, total - idx * bs)
        k = pool._storage[bid, 0, :n]
        v = pool._storage[bid, 1, :n]
        scores = np.einsum("kgd,nkd->kgn", qg, k) * cfg.scale
        rel = np.arange(idx * bs, idx * bs + n, dtype=np.int64) - last
        if isinstance(cfg.bias_mode, LocalWindow):
            masked = -rel >= cfg.bias_mode.window
            scores = np.where(masked[None, None, :], DTYPE(-np.inf), scores)
        elif slope_grid is not None:
            scores = scores + slope_grid[:, :, None] * rel.astype(DTYPE)[None, None, :]
        block_m = scores.max(axis=2)
        new_m = np.maximum(m, block_m)
        # Rows still fully masked keep m at -inf; shift by 0 so exp stays 0.
        safe_m = np.where(np.isneginf(new_m), DTYPE(0.0), new_m)
        carry = np.exp(m - safe_m)
        p = np.exp(scores - safe_m[:, :, None])
        d = d * carry + p.sum(axis=2)
        acc = acc * carry[:, :, None] + np.einsum("kgn,nkd->kgd", p, v)
        m = new_m
    if np.any(d == 0.0):
        raise MaskedRowError("a query head has no allowed cached position")
    out = acc / d[:, :, None]
    return Tensor(out, shape=(cfg.num_heads, head_size))
