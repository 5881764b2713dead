"""Splitting a dataset across simulated clients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data import Dataset

DEFAULT_VAL_FRACTION = 0.5


@dataclass
class ClientShard:
    client_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    weight: float = 1.0  # v_c: this client's share of all validation samples
    # positions of the train / val samples in the source dataset (bookkeeping only)
    train_index: np.ndarray | None = None
    val_index: np.ndarray | None = None

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_val(self) -> int:
        return len(self.y_val)


def _split_client(cid: int, ds: Dataset, index: np.ndarray, val_fraction: float, rng) -> ClientShard:
    index = rng.permutation(index)
    n_val = int(math.floor(len(index) * val_fraction))
    if n_val < 1 or n_val >= len(index):
        raise ValueError(f"client {cid}: {len(index)} samples cannot be split with val fraction {val_fraction}")
    vi, ti = np.sort(index[:n_val]), np.sort(index[n_val:])
    return ClientShard(cid, ds.images[ti], ds.labels[ti], ds.images[vi], ds.labels[vi], train_index=ti, val_index=vi)


def assign_weights(shards: Sequence[ClientShard]) -> list[ClientShard]:
    """Set ``v_c = |val_c| / sum |val|`` on every shard."""
    total = sum(s.n_val for s in shards)
    for s in shards:
        s.weight = s.n_val / total
    return list(shards)


def partition_iid(
    ds: Dataset, client_count: int, seed: int = 0, val_fraction: float = DEFAULT_VAL_FRACTION
) -> list[ClientShard]:
    """Shuffle, then deal near-equal chunks (sizes differ by at most one)."""
    if client_count < 1:
        raise ValueError(f"client_count must be at least 1, got {client_count}")
    if len(ds) < client_count:
        raise ValueError(f"dataset of {len(ds)} samples is smaller than client_count={client_count}")
    rng = np.random.default_rng(seed)
    chunks = np.array_split(rng.permutation(len(ds)), client_count)
    return assign_weights([_split_client(c, ds, idx, val_fraction, rng) for c, idx in enumerate(chunks)])


def skew_counts(n_label: int, client_count: int, skew_fraction: float) -> tuple[int, int, int]:
    """``(skewed clients, per-skewed count, per-other count)`` for the skewed label.

    Skewed clients hold twice as many as the others: with ``s`` skewed
    clients out of ``C``, each other client gets ``floor(n / (s + C))`` and each
    skewed client ``floor(2n / (s + C))``. Leftover samples are not assigned.
    """
    if not 0.0 < skew_fraction < 1.0:
        raise ValueError(f"skew_fraction must lie in (0, 1), got {skew_fraction}")
    s = math.ceil(skew_fraction * client_count)
    if s >= client_count:
        raise ValueError(f"skew_fraction={skew_fraction} marks all {client_count} clients as skewed")
    other = n_label // (s + client_count)
    skewed = (2 * n_label) // (s + client_count)
    if other < 1:
        raise ValueError(
            f"only {n_label} samples of the skewed label; need at least {s + client_count} to give "
            f"{s} skewed clients twice the share of {client_count - s} others"
        )
    return s, skewed, other


def partition_label_skew(
    ds: Dataset,
    client_count: int,
    skew_fraction: float,
    skew_label: int,
    seed: int = 0,
    val_fraction: float = DEFAULT_VAL_FRACTION,
) -> list[ClientShard]:
    """The first ``ceil(f * C)`` clients hold twice the ``skew_label`` samples of the rest.

    All other labels are dealt evenly (per label, counts differ by at most one).
    """
    if client_count < 2:
        raise ValueError("label skew needs at least 2 clients")
    y_idx = np.flatnonzero(ds.labels == skew_label)
    if len(y_idx) == 0:
        raise ValueError(f"label {skew_label} does not occur in the dataset")
    s, n_skewed, n_other = skew_counts(len(y_idx), client_count, skew_fraction)
    rng = np.random.default_rng(seed)
    y_idx = rng.permutation(y_idx)
    per_client: list[list[np.ndarray]] = [[] for _ in range(client_count)]
    pos = 0
    for c in range(client_count):
        k = n_skewed if c < s else n_other
        per_client[c].append(y_idx[pos : pos + k])
        pos += k
    for label in range(ds.num_classes):
        if label == skew_label:
            continue
        idx = rng.permutation(np.flatnonzero(ds.labels == label))
        for c, part in enumerate(np.array_split(idx, client_count)):
            per_client[c].append(part)
    shards = [
        _split_client(c, ds, np.concatenate(parts), val_fraction, rng) for c, parts in enumerate(per_client)
    ]
    return assign_weights(shards)


def pool_shards(shards: Sequence[ClientShard]) -> ClientShard:
    """Merge shards into one (ascending client id), as a centralized run would see the data."""
    ss = sorted(shards, key=lambda s: s.client_id)
    return ClientShard(
        0,
        np.concatenate([s.x_train for s in ss]),
        np.concatenate([s.y_train for s in ss]),
        np.concatenate([s.x_val for s in ss]),
        np.concatenate([s.y_val for s in ss]),
        weight=1.0,
    )


def replicate_shard(shard: ClientShard, count: int) -> list[ClientShard]:
    """``count`` clients holding identical copies of ``shard`` (equal weights)."""
    out = [
        ClientShard(c, shard.x_train.copy(), shard.y_train.copy(), shard.x_val.copy(), shard.y_val.copy())
        for c in range(count)
    ]
    return assign_weights(out)
