"""N-armed bandit over a discrete hyperparameter space.

The server keeps one reward estimate per configuration. Probe rounds sample
configurations from ``softmax(r)``; the number of probe rounds in a phase
shrinks with the entropy of that distribution, so exploration fades as the
estimates separate.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

STAGES = ("search", "eval")
PATH_DROPOUT_MAX = 0.3


@dataclass(frozen=True)
class HyperparamConfig:
    """One point of the hyperparameter space.

    Search-stage configs carry the architecture optimizer settings; eval-stage
    configs carry path dropout instead (and leave the arch fields ``None``).
    """

    model_lr: float
    model_weight_decay: float
    momentum: float
    arch_lr: float | None = None
    arch_weight_decay: float | None = None
    path_dropout: float | None = None

    def __post_init__(self):
        if not (self.model_lr >= 0 and math.isfinite(self.model_lr)):
            raise ValueError(f"model_lr must be finite and non-negative, got {self.model_lr}")
        if self.model_weight_decay < 0:
            raise ValueError(f"model_weight_decay must be non-negative, got {self.model_weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if (self.arch_lr is None) != (self.arch_weight_decay is None):
            raise ValueError("arch_lr and arch_weight_decay must be given together")
        if self.arch_lr is not None:
            if self.path_dropout is not None:
                raise ValueError("a config is either search-stage (arch fields) or eval-stage (path_dropout)")
            if self.arch_lr < 0 or self.arch_weight_decay < 0:
                raise ValueError("arch_lr and arch_weight_decay must be non-negative")
        elif self.path_dropout is None:
            raise ValueError("eval-stage configs need path_dropout")
        elif not 0.0 <= self.path_dropout <= PATH_DROPOUT_MAX:
            raise ValueError(f"path_dropout must lie in [0, {PATH_DROPOUT_MAX}], got {self.path_dropout}")

    @property
    def stage(self) -> str:
        return "search" if self.arch_lr is not None else "eval"

    def in_support(self) -> bool:
        """Whether every field lies inside the range ``init_space`` samples from."""
        ok = 1e-4 <= self.model_lr <= 1.0 and 1e-5 <= self.model_weight_decay <= 1e-1
        if self.stage == "search":
            ok = ok and 1e-5 <= self.arch_lr <= 1e-1 and 1e-5 <= self.arch_weight_decay <= 1e-1
        return ok

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d) -> "HyperparamConfig":
        return cls(**{k: float(v) for k, v in d.items()})


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(10.0 ** rng.uniform(lo, hi))


def init_space(count: int, stage: str = "search", seed: int = 0) -> list[HyperparamConfig]:
    """Sample ``count`` configurations i.i.d. (log-uniform rates and decays)."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    rng = np.random.default_rng(seed)
    space = []
    for _ in range(count):
        model_lr = _log_uniform(rng, -4, 0)
        if stage == "search":
            arch_lr = _log_uniform(rng, -5, -1)
            wd = _log_uniform(rng, -5, -1)
            arch_wd = _log_uniform(rng, -5, -1)
            mom = float(rng.uniform(0, 1))
            space.append(HyperparamConfig(model_lr, wd, mom, arch_lr=arch_lr, arch_weight_decay=arch_wd))
        else:
            wd = _log_uniform(rng, -5, -1)
            mom = float(rng.uniform(0, 1))
            drop = float(rng.uniform(0, PATH_DROPOUT_MAX))
            space.append(HyperparamConfig(model_lr, wd, mom, path_dropout=drop))
    return space


def compute_reward(losses_before: Sequence[float], losses_after: Sequence[float], weights: Sequence[float]) -> float:
    """Weighted validation-loss improvement ``sum_c v_c (before_c - after_c)``."""
    if not len(losses_before) == len(losses_after) == len(weights):
        raise ValueError(
            f"length mismatch: {len(losses_before)} before, {len(losses_after)} after, {len(weights)} weights"
        )
    total = 0.0
    for b, a, v in zip(losses_before, losses_after, weights):
        total += v * (b - a)
    return total


@dataclass
class RewardEstimates:
    rewards: np.ndarray
    alpha: float = 0.1
    beta: float = 4.0
    # decay unsampled arms as (1 - alpha) r; the literal variant grows them as (1 + alpha) r
    literal_unsampled: bool = False

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64).copy()
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")

    @classmethod
    def zeros(cls, n: int, **kw) -> "RewardEstimates":
        return cls(np.zeros(n), **kw)

    def __len__(self) -> int:
        return len(self.rewards)


def update_rewards(r: RewardEstimates, round_rewards, sampled: Iterable[int]) -> RewardEstimates:
    """Move sampled arms toward their observed reward; shrink the rest.

    ``round_rewards`` is either a full-length vector (zero off ``sampled``) or a
    mapping ``{index: reward}``.
    """
    n = len(r.rewards)
    idx = sorted(set(int(i) for i in sampled))
    if any(i < 0 or i >= n for i in idx):
        raise IndexError(f"sampled indices {idx} out of range for {n} configs")
    if isinstance(round_rewards, dict):
        obs = np.zeros(n)
        for i, v in round_rewards.items():
            obs[int(i)] = v
    else:
        obs = np.asarray(round_rewards, dtype=np.float64)
        if obs.shape != (n,):
            raise ValueError(f"round rewards have shape {obs.shape}, expected ({n},)")
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    a = r.alpha
    new = r.rewards.copy()
    # r + a (obs - r) written as a convex combination: exact at a = 0 and a = 1
    new[mask] = (1.0 - a) * r.rewards[mask] + a * obs[mask]
    if r.literal_unsampled:
        new[~mask] = r.rewards[~mask] + a * r.rewards[~mask]
    else:
        new[~mask] = (1.0 - a) * r.rewards[~mask]
    return replace(r, rewards=new)


def policy(r: RewardEstimates | np.ndarray) -> np.ndarray:
    v = np.asarray(getattr(r, "rewards", r), dtype=np.float64)
    z = np.exp(v - v.max())
    return z / z.sum()


def entropy(pi: np.ndarray) -> float:
    """Shannon entropy in nats (non-negative; zero-probability terms drop out)."""
    pi = np.asarray(pi, dtype=np.float64)
    nz = pi[pi > 0]
    return float(-(nz * np.log(nz)).sum())


def rnd(x: float) -> int:
    """Round half up."""
    return int(math.floor(x + 0.5))


def ho_round_budget(r: RewardEstimates, max_rounds: int | None = None) -> int:
    """``max(1, rnd(beta * H(softmax(r))))``, optionally capped at ``max_rounds``."""
    kappa = max(1, rnd(r.beta * entropy(policy(r))))
    if max_rounds is not None:
        kappa = max(1, min(kappa, int(max_rounds)))
    return kappa


def sample_configs(pi: np.ndarray, kappa: int, seed) -> list[int]:
    """Draw ``kappa`` distinct indices, each draw proportional to the remaining mass."""
    pi = np.asarray(pi, dtype=np.float64)
    if kappa > len(pi):
        raise ValueError(f"cannot draw {kappa} distinct configs from {len(pi)}")
    if kappa < 0:
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(len(pi), size=kappa, replace=False, p=pi / pi.sum())]


def best_config(r: RewardEstimates | np.ndarray) -> int:
    """Index of the highest estimate; the lowest index wins ties."""
    return int(np.argmax(np.asarray(getattr(r, "rewards", r))))


# -- reward trace ---------------------------------------------------------------

CONFIG_FIELDS = ("model_lr", "arch_lr", "model_weight_decay", "arch_weight_decay", "momentum", "path_dropout")
REWARD_TRACE_FIELDS = ("phase", "round", "config", *CONFIG_FIELDS, "reward", "kappa", "entropy")


@dataclass
class RewardTrace:
    """One row per probe round, written as CSV."""

    rows: list[dict] = field(default_factory=list)

    def add(self, phase: int, round_: int, index: int, config: HyperparamConfig, reward: float, kappa: int, ent: float):
        row = {"phase": phase, "round": round_, "config": index}
        cfg = asdict(config)
        row.update({k: ("" if cfg[k] is None else repr(cfg[k])) for k in CONFIG_FIELDS})
        row.update({"reward": repr(float(reward)), "kappa": kappa, "entropy": repr(float(ent))})
        self.rows.append(row)

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REWARD_TRACE_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)
