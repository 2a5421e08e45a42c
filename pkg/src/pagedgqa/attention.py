"""Grouped-query attention forward pass with additive position bias.

Query heads are partitioned into groups that share one key/value head each;
the shared head is selected by index mapping, never by materializing copies.
Causal masking, sliding-window masking, and linear distance bias are all
expressed through one additive bias matrix whose masked entries are -inf,
so score = scale * (q . k) + bias composes every mode the same way.

``reference_masked_attention`` is the deliberately naive oracle: explicit
loops in 64-bit arithmetic over key/value tensors with one head per query
head. Every optimized path in the library is tested against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, MaskedRowError, ShapeError, Tensor, matmul, reshape, row_softmax

__all__ = [
    "Alibi",
    "AlibiSlopes",
    "AttentionConfig",
    "BiasMatrix",
    "Causal",
    "LocalWindow",
    "alibi_slopes",
    "attention_forward",
    "attention_scores",
    "build_bias",
    "kv_head_index",
    "reference_masked_attention",
]


@dataclass(frozen=True)
class Causal:
    """Each query attends to its own position and everything before it."""


@dataclass(frozen=True)
class LocalWindow:
    """Causal attention restricted to the most recent ``window`` positions."""

    window: int

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class Alibi:
    """Causal attention with a per-head linear penalty on key distance."""


BiasMode = Causal | LocalWindow | Alibi


@dataclass(frozen=True)
class AttentionConfig:
    """Head geometry and bias mode for one attention layer.

    ``num_heads`` query heads share ``num_kv_heads`` key/value heads in
    contiguous groups of size ``num_heads // num_kv_heads``.
    """

    num_heads: int
    num_kv_heads: int
    head_size: int
    bias_mode: BiasMode = field(default_factory=Causal)

    def __post_init__(self) -> None:
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be positive, got {self.num_heads}")
        if self.num_kv_heads < 1:
            raise ValueError(f"num_kv_heads must be positive, got {self.num_kv_heads}")
        if self.head_size < 1:
            raise ValueError(f"head_size must be positive, got {self.head_size}")
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError(
                f"num_heads ({self.num_heads}) must be divisible by "
                f"num_kv_heads ({self.num_kv_heads})"
            )

    @property
    def group_size(self) -> int:
        return self.num_heads // self.num_kv_heads

    @property
    def scale(self) -> np.float32:
        # Computed in working precision: the exact float32 value is part of
        # the contract shared with the reference oracle.
        return np.float32(1.0) / np.sqrt(np.float32(self.head_size))


@dataclass(frozen=True)
class AlibiSlopes:
    """Strictly decreasing positive distance-penalty slope per query head."""

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("slopes must be non-empty")
        for h, s in enumerate(self.values):
            if not s > 0.0:
                raise ValueError(f"slope for head {h} must be positive, got {s}")
        for h in range(1, len(self.values)):
            if not self.values[h] < self.values[h - 1]:
                raise ValueError(
                    f"slopes must be strictly decreasing, but slope[{h}] = "
                    f"{self.values[h]} >= slope[{h - 1}] = {self.values[h - 1]}"
                )

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=DTYPE)


@dataclass(frozen=True)
class BiasMatrix:
    """Additive per-head score bias of shape [num_heads, q_len, k_len].

    Finite entries are added to raw scores; -inf marks positions a query
    must not attend to, which the softmax turns into exactly zero weight.
    """

    tensor: Tensor

    def __post_init__(self) -> None:
        if len(self.tensor.shape) != 3:
            raise ShapeError(
                f"bias must have shape [num_heads, q_len, k_len], got {self.tensor.shape}"
            )

    @property
    def num_heads(self) -> int:
        return self.tensor.shape[0]

    @property
    def q_len(self) -> int:
        return self.tensor.shape[1]

    @property
    def k_len(self) -> int:
        return self.tensor.shape[2]

    def head(self, h: int) -> Tensor:
        if not 0 <= h < self.num_heads:
            raise IndexError(f"head {h} out of range for {self.num_heads} heads")
        return Tensor(self.tensor.array[h])


def _geometric_slopes(n: int) -> list[float]:
    # 2^(-8(h+1)/n) for h = 0..n-1; n must be a power of two here.
    ratio = 2.0 ** (-8.0 / n)
    return [ratio ** (h + 1) for h in range(n)]


def alibi_slopes(num_heads: int) -> AlibiSlopes:
    """Return the per-head distance-penalty slopes for ``num_heads`` heads.

    Power-of-two head counts use the geometric schedule 2^(-8(h+1)/n). Other
    counts take the schedule for the next-lower power of two plus every other
    slope from the doubled schedule, sorted descending so the strictly
    decreasing invariant holds regardless of head count.
    """
    if num_heads < 1:
        raise ValueError(f"num_heads must be >= 1, got {num_heads}")
    if num_heads & (num_heads - 1) == 0:
        values = _geometric_slopes(num_heads)
    else:
        base = 1 << (num_heads.bit_length() - 1)
        values = _geometric_slopes(base)
        values += _geometric_slopes(2 * base)[0::2][: num_heads - base]
        values.sort(reverse=True)
    return AlibiSlopes(tuple(values))


def kv_head_index(head: int, cfg: AttentionConfig) -> int:
    """Map a query-head index to the key/value head its group shares."""
    if not 0 <= head < cfg.num_heads:
        raise IndexError(f"head {head} out of range for {cfg.num_heads} heads")
    return head // cfg.group_size


def _relative_positions(q_len: int, k_len: int) -> np.ndarray:
    # rel[i, j] = j - (i + k_len - q_len): 0 at a query's own position,
    # negative for earlier keys, positive for future (masked) keys.
    cols = np.arange(k_len, dtype=np.int64)[None, :]
    rows = np.arange(q_len, dtype=np.int64)[:, None]
    return cols - rows - (k_len - q_len)


def build_bias(
    cfg: AttentionConfig,
    q_len: int,
    k_len: int,
    slopes: AlibiSlopes | None = None,
) -> BiasMatrix:
    """Build the additive bias for queries at the last ``q_len`` of ``k_len`` positions.

    Causal mode masks future keys; sliding-window mode additionally masks
    keys at distance >= window; linear-bias mode writes slope * distance at
    allowed positions. ``slopes`` is required in linear-bias mode and
    rejected otherwise.
    """
    if q_len < 0 or k_len < 0:
        raise ValueError(f"lengths must be nonnegative, got q_len={q_len}, k_len={k_len}")
    if k_len < q_len:
        raise ValueError(
            f"k_len ({k_len}) must be >= q_len ({q_len}): queries are the "
            "trailing positions of the key context"
        )
    if isinstance(cfg.bias_mode, Alibi):
        if slopes is None:
            raise ValueError("Alibi bias mode requires slopes")
        if len(slopes) != cfg.num_heads:
            raise ShapeError(
                f"got {len(slopes)} slopes for {cfg.num_heads} heads"
            )
    elif slopes is not None:
        raise ValueError(f"slopes given but bias mode is {cfg.bias_mode}")

    rel = _relative_positions(q_len, k_len)
    masked = rel > 0
    if isinstance(cfg.bias_mode, LocalWindow):
        masked = masked | (rel <= -cfg.bias_mode.window)
    if isinstance(cfg.bias_mode, Alibi):
        base = slopes.as_array()[:, None, None] * rel.astype(DTYPE)[None, :, :]
    else:
        base = np.zeros((cfg.num_heads, q_len, k_len), dtype=DTYPE)
    data = np.where(masked[None, :, :], DTYPE(-np.inf), base)
    return BiasMatrix(Tensor(data, shape=(cfg.num_heads, q_len, k_len)))


def attention_scores(
    q: Tensor, k: Tensor, cfg: AttentionConfig, bias_row: Tensor
) -> Tensor:
    """Scaled dot-product scores for one head: scale * (q @ k^T) + bias_row."""
    if len(q.shape) != 2 or len(k.shape) != 2:
        raise ShapeError(f"q and k must be rank-2, got {q.shape} and {k.shape}")
    if q.shape[1] != cfg.head_size or k.shape[1] != cfg.head_size:
        raise ShapeError(
            f"head dimension mismatch: q {q.shape}, k {k.shape}, "
            f"head_size {cfg.head_size}"
        )
    if bias_row.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(
            f"bias slice {bias_row.shape} does not span scores "
            f"({q.shape[0]}, {k.shape[0]})"
        )
    raw = np.matmul(q.array, k.array.T)
    return Tensor(raw * cfg.scale + bias_row.array)


def _check_forward_shapes(
    q: Tensor, k: Tensor, v: Tensor, num_heads: int, num_kv_heads: int, head_size: int
) -> tuple[int, int, int]:
    for name, t in (("q", q), ("k", k), ("v", v)):
        if len(t.shape) != 4:
            raise ShapeError(
                f"{name} must have shape [batch, seq, heads, head_size], got {t.shape}"
            )
    if k.shape != v.shape:
        raise ShapeError(f"k {k.shape} and v {v.shape} must match")
    if q.shape[0] != k.shape[0]:
        raise ShapeError(f"batch mismatch: q {q.shape}, k {k.shape}")
    if q.shape[2] != num_heads:
        raise ShapeError(f"q has {q.shape[2]} heads, config expects {num_heads}")
    if k.shape[2] != num_kv_heads:
        raise ShapeError(f"k has {k.shape[2]} heads, config expects {num_kv_heads}")
    if q.shape[3] != head_size or k.shape[3] != head_size:
        raise ShapeError(
            f"head_size mismatch: q {q.shape}, k {k.shape}, expected {head_size}"
        )
    if k.shape[1] < q.shape[1]:
        raise ShapeError(
            f"key length {k.shape[1]} must be >= query length {q.shape[1]}"
        )
    return q.shape[0], q.shape[1], k.shape[1]


def attention_forward(
    q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig, bias: BiasMatrix
) -> Tensor:
    """Grouped-query attention over dense [batch, seq, heads, head_size] tensors.

    Each query head reads the key/value head of its group; scores, softmax,
    and the weighted sum run per (head, batch) pair through the shared
    tensor primitives. Output is [batch, q_len, num_heads * head_size].
    """
    batch, q_len, k_len = _check_forward_shapes(
        q, k, v, cfg.num_heads, cfg.num_kv_heads, cfg.head_size
    )
    if bias.tensor.shape != (cfg.num_heads, q_len, k_len):
        raise ShapeError(
            f"bias {bias.tensor.shape} does not match "
            f"({cfg.num_heads}, {q_len}, {k_len})"
        )
    qa, ka, va = q.array, k.array, v.array
    out = np.empty((batch, q_len, cfg.num_heads, cfg.head_size), dtype=DTYPE)
    for h in range(cfg.num_heads):
        kv = kv_head_index(h, cfg)
        bias_row = bias.head(h)
        for b in range(batch):
            scores = attention_scores(
                Tensor(qa[b, :, h, :]), Tensor(ka[b, :, kv, :]), cfg, bias_row
            )
            weights = row_softmax(scores)
            out[b, :, h, :] = matmul(weights, Tensor(va[b, :, kv, :])).array
    return reshape(
        Tensor(out), (batch, q_len, cfg.num_heads * cfg.head_size)
    )


def reference_masked_attention(
    q: Tensor, k: Tensor, v: Tensor, bias: BiasMatrix
) -> Tensor:
    """Naive oracle: explicit-loop biased attention with one k/v head per query head.

    Evaluates scores, softmax, and the weighted sum position by position in
    64-bit arithmetic (the scale factor keeps its 32-bit value), then rounds
    once to 32-bit. Inputs follow attention_forward's layout but k and v
    must already carry num_heads heads.
    """
    num_heads = q.shape[2] if len(q.shape) == 4 else 0
    batch, q_len, k_len = _check_forward_shapes(
        q, k, v, num_heads, num_heads, q.shape[3] if len(q.shape) == 4 else 0
    )
    head_size = q.shape[3]
    if bias.tensor.shape != (num_heads, q_len, k_len):
        raise ShapeError(
            f"bias {bias.tensor.shape} does not match ({num_heads}, {q_len}, {k_len})"
        )
    scale = float(np.float32(1.0) / np.sqrt(np.float32(head_size)))
    qa = q.array.astype(np.float64)
    ka = k.array.astype(np.float64)
    va = v.array.astype(np.float64)
    ba = bias.tensor.array.astype(np.float64)
    out = np.zeros((batch, q_len, num_heads, head_size), dtype=np.float64)
    for b in range(batch):
        for h in range(num_heads):
            for i in range(q_len):
                scores = np.empty(k_len, dtype=np.float64)
                for j in range(k_len):
                    scores[j] = scale * float(np.dot(qa[b, i, h], ka[b, j, h]))
                    scores[j] += ba[h, i, j]
                m = scores.max() if k_len else -math.inf
                if not math.isfinite(m):
                    raise MaskedRowError(
                        f"query {i} head {h} batch {b} has no allowed key"
                    )
                w = np.exp(scores - m)
                w /= w.sum()
                acc = np.zeros(head_size, dtype=np.float64)
                for j in range(k_len):
                    acc += w[j] * va[b, j, h]
                out[b, i, h] = acc
    return reshape(Tensor(out), (batch, q_len, num_heads * head_size))
