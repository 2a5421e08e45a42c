"""CPU grouped-query attention kernels over a paged, pooled KV cache.

The package is layered bottom-up: ``tensor`` provides the float32 array
substrate, ``attention`` the biased GQA forward pass and its naive oracle,
``paging`` the block pool with copy-on-write sequence tables and the
online-softmax decode kernel, ``scheduling`` the grouping policy and
least-loaded dispatcher, and ``bench`` plus ``cli`` the measurement
harness.
"""

from .attention import (
    Alibi,
    AlibiSlopes,
    AttentionConfig,
    BiasMatrix,
    Causal,
    LocalWindow,
    alibi_slopes,
    attention_forward,
    attention_scores,
    build_bias,
    kv_head_index,
    reference_masked_attention,
)
from .bench import (
    BenchConfig,
    MetricsReport,
    compare_runs,
    load_report,
    render_report,
    run_bench,
    write_report,
)
from .paging import (
    BlockPool,
    BlockTable,
    CacheCorruption,
    PoolConfig,
    PoolExhausted,
    ProjectionWeights,
    UtilizationMetrics,
    paged_decode_attention,
    pool_new,
    project_block,
)
from .scheduling import (
    Bandwidth,
    GroupingPlan,
    HardwareProfile,
    LoadStats,
    Request,
    SchedulerState,
    WorkerState,
    select_grouping,
)
from .tensor import (
    DTYPE,
    MaskedRowError,
    ShapeError,
    Tensor,
    matmul,
    reshape,
    row_softmax,
    transpose,
)

__all__ = [
    "Alibi",
    "AlibiSlopes",
    "AttentionConfig",
    "Bandwidth",
    "BenchConfig",
    "BiasMatrix",
    "BlockPool",
    "BlockTable",
    "CacheCorruption",
    "Causal",
    "DTYPE",
    "GroupingPlan",
    "HardwareProfile",
    "LoadStats",
    "LocalWindow",
    "MaskedRowError",
    "MetricsReport",
    "PoolConfig",
    "PoolExhausted",
    "ProjectionWeights",
    "Request",
    "SchedulerState",
    "ShapeError",
    "Tensor",
    "UtilizationMetrics",
    "WorkerState",
    "alibi_slopes",
    "attention_forward",
    "attention_scores",
    "build_bias",
    "compare_runs",
    "kv_head_index",
    "load_report",
    "matmul",
    "paged_decode_attention",
    "pool_new",
    "project_block",
    "reference_masked_attention",
    "render_report",
    "reshape",
    "row_softmax",
    "run_bench",
    "select_grouping",
    "transpose",
    "write_report",
]
