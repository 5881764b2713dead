"""Simulated federation: partitioning, client steps, FedAvg and the server loop."""
from .client import RoundReport, batches, client_eval_step, client_search_step, evaluate
from .partition import (
    ClientShard,
    assign_weights,
    partition_iid,
    partition_label_skew,
    pool_shards,
    replicate_shard,
    skew_counts,
)
from .server import (
    ROUND_TRACE_FIELDS,
    RoundTrace,
    ServerState,
    Snapshot,
    StageResult,
    StageSettings,
    fedavg,
    run_eval_stage,
    run_search_stage,
)

__all__ = [
    "ROUND_TRACE_FIELDS",
    "ClientShard",
    "RoundReport",
    "RoundTrace",
    "ServerState",
    "Snapshot",
    "StageResult",
    "StageSettings",
    "assign_weights",
    "batches",
    "client_eval_step",
    "client_search_step",
    "evaluate",
    "fedavg",
    "partition_iid",
    "partition_label_skew",
    "pool_shards",
    "replicate_shard",
    "run_eval_stage",
    "run_search_stage",
    "skew_counts",
]
