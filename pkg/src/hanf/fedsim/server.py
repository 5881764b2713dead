"""Server loop: alternating bandit probe phases and training phases, FedAvg in between."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..bandit import (
    HyperparamConfig,
    RewardEstimates,
    RewardTrace,
    best_config,
    compute_reward,
    entropy,
    ho_round_budget,
    init_space,
    policy,
    sample_configs,
    update_rewards,
)
from ..supernet import CellSpec, EvalNet, Genotype, NetworkSpec, SuperNet, discretize
from .client import CLIP_NORM, RoundReport, client_eval_step, client_search_step, evaluate
from .partition import ClientShard, pool_shards

log = logging.getLogger("hanf.fedsim")

ParamSet = Mapping[str, np.ndarray]


def fedavg(updates: Sequence[ParamSet], weights: Sequence[float]) -> dict[str, np.ndarray]:
    """Coordinatewise ``sum_c v_c * u_c``, summed in the order given (ascending client id)."""
    if len(updates) == 0 or len(updates) != len(weights):
        raise ValueError(f"need one weight per update, got {len(updates)} updates and {len(weights)} weights")
    if abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must sum to 1, got {math.fsum(weights)}")
    keys = list(updates[0])
    out = {}
    for k in keys:
        ref = np.shape(updates[0][k])
        for i, u in enumerate(updates):
            if k not in u or np.shape(u[k]) != ref:
                raise ValueError(f"update {i}: parameter {k} missing or shaped {np.shape(u.get(k))}, expected {ref}")
        acc = weights[0] * np.asarray(updates[0][k], dtype=np.float64)
        for v, u in zip(weights[1:], updates[1:]):
            acc = acc + v * u[k]
        out[k] = acc
    for i, u in enumerate(updates):
        extra = set(u) - set(keys)
        if extra:
            raise ValueError(f"update {i} has unexpected parameters {sorted(extra)}")
    return out


@dataclass(frozen=True)
class StageSettings:
    rounds: int
    exploit_rounds: int = 10
    batch_size: int = 64
    space_size: int = 120
    alpha: float = 0.1
    beta: float = 4.0
    literal_unsampled: bool = False
    max_ho_rounds: int | None = None
    clip_norm: float = CLIP_NORM
    federated: bool = True
    seed: int = 0
    # extra configs appended to the sampled space (e.g. a deliberately bad one)
    injected: tuple[HyperparamConfig, ...] = ()
    # exploit phase index -> config index to use instead of the bandit's choice
    forced_exploit: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be non-negative, got {self.rounds}")
        if self.exploit_rounds < 1 or self.batch_size < 1 or self.space_size < 1:
            raise ValueError("exploit_rounds, batch_size and space_size must be positive")


@dataclass
class Snapshot:
    accuracy: float
    round: int
    genotype: Genotype | None = None
    weights: dict[str, np.ndarray] | None = None


@dataclass
class ServerState:
    weights: dict[str, np.ndarray]
    arch: dict[str, np.ndarray]
    rewards: RewardEstimates
    space: list[HyperparamConfig]
    round: int = 0
    # executed phases in order: (kind, phase index, rounds run, kappa or None)
    schedule: list[tuple[str, int, int, int | None]] = field(default_factory=list)
    best: Snapshot | None = None
    accuracy_history: list[float] = field(default_factory=list)


ROUND_TRACE_FIELDS = (
    "round",
    "client",
    "phase_kind",
    "phase",
    "config",
    "weight",
    "loss_before",
    "loss_after",
    "accuracy",
    "reward",
    "kappa",
    "entropy",
    "failed",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RoundTrace:
    """Per (round, client) rows followed by one ``server`` row per round."""

    rows: list[dict] = field(default_factory=list)

    def add(self, **kw) -> None:
        self.rows.append({k: _fmt(kw.get(k)) for k in ROUND_TRACE_FIELDS})

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=ROUND_TRACE_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)


@dataclass
class StageResult:
    state: ServerState
    round_trace: RoundTrace
    reward_trace: RewardTrace
    model: object
    genotype: Genotype | None = None
    metrics: dict = field(default_factory=dict)


class _Runner:
    """Phase bookkeeping shared by both stages.

    ``step(model, weights, arch, h, shard, rng, before)`` runs one client.
    """

    def __init__(self, kind: str, model, shards: Sequence[ClientShard], settings: StageSettings, step: Callable):
        self.kind, self.model, self.settings, self.step = kind, model, settings, step
        if not shards:
            raise ValueError("need at least one client shard")
        self.shards = sorted(shards, key=lambda s: s.client_id) if settings.federated else [pool_shards(shards)]
        self.v = [s.weight for s in self.shards] if settings.federated else [1.0]
        if abs(math.fsum(self.v) - 1.0) > 1e-9:
            raise ValueError(f"client weights sum to {math.fsum(self.v)}, expected 1")
        space = init_space(settings.space_size, kind, settings.seed) + list(settings.injected)
        self.state = ServerState(
            weights=model.get_weights(),
            arch=model.get_arch(),
            rewards=RewardEstimates.zeros(
                len(space), alpha=settings.alpha, beta=settings.beta, literal_unsampled=settings.literal_unsampled
            ),
            space=space,
        )
        self.round_trace = RoundTrace()
        self.reward_trace = RewardTrace()
        self._global: list[tuple[float, float]] | None = None
        self.on_improved: Callable[[ServerState, float], Snapshot] = lambda st, acc: Snapshot(acc, st.round)
        self.on_round: Callable[[ServerState], None] | None = None
        self._stage_code = {"search": 1, "eval": 2}[kind]

    # -- global model metrics ------------------------------------------------

    def global_metrics(self) -> list[tuple[float, float]]:
        """Per-client (val loss, val accuracy) of the current global model (cached)."""
        if self._global is None:
            self.model.set_weights(self.state.weights)
            self.model.set_arch(self.state.arch)
            with np.errstate(all="ignore"):
                self._global = [evaluate(self.model, s.x_val, s.y_val, self.settings.batch_size) for s in self.shards]
        return self._global

    def weighted(self, metrics) -> tuple[float, float]:
        return (
            math.fsum(v * m[0] for v, m in zip(self.v, metrics)),
            math.fsum(v * m[1] for v, m in zip(self.v, metrics)),
        )

    # -- one communication round -------------------------------------------------

    def _client_rng(self) -> np.random.Generator:
        # shared by all clients of a round: identical shards see identical batches
        return np.random.default_rng([self.settings.seed, self._stage_code, 7, self.state.round])

    def run_round(self, h_index: int, aggregate: bool) -> list[RoundReport]:
        h = self.state.space[h_index]
        before = self.global_metrics()
        reports = []
        for shard, b in zip(self.shards, before):
            reports.append(
                self.step(self.model, self.state.weights, self.state.arch, h, shard, self._client_rng(), b)
            )
        if aggregate:
            ok = [(r, v) for r, v in zip(reports, self.v) if not r.failed]
            if ok:
                total = math.fsum(v for _, v in ok)
                vs = [v / total for _, v in ok] if len(ok) < len(reports) else [v for _, v in ok]
                if self.settings.federated:
                    self.state.weights = fedavg([r.weights for r, _ in ok], vs)
                    if self.state.arch:
                        self.state.arch = fedavg([r.arch for r, _ in ok], vs)
                else:
                    self.state.weights = ok[0][0].weights
                    if self.state.arch:
                        self.state.arch = ok[0][0].arch
                self._global = None
        return reports

    def _log_round(self, kind, phase, h_index, reports, reward=None, kappa=None, ent=None):
        st = self.state
        for r, v, s in zip(reports, self.v, self.shards):
            self.round_trace.add(
                round=st.round,
                client=s.client_id,
                phase_kind=kind,
                phase=phase,
                config=h_index,
                weight=v,
                loss_before=r.loss_before,
                loss_after=r.loss_after,
                accuracy=r.accuracy,
                failed=int(r.failed),
            )
        g = self.global_metrics()
        loss, acc = self.weighted(g)
        self.round_trace.add(
            round=st.round,
            client="server",
            phase_kind=kind,
            phase=phase,
            config=h_index,
            loss_after=loss,
            accuracy=acc,
            reward=reward,
            kappa=kappa,
            entropy=ent,
            failed=sum(r.failed for r in reports),
        )
        st.accuracy_history.append(acc)
        if st.best is None or acc > st.best.accuracy:
            st.best = self.on_improved(st, acc)
        if self.on_round is not None:
            self.on_round(st)
        log.info(
            "%s round %d %s phase %d config %d: val loss %.4f acc %.4f%s",
            self.kind,
            st.round,
            kind,
            phase,
            h_index,
            loss,
            acc,
            "" if reward is None else f" reward {reward:+.5f}",
        )

    # -- phases ---------------------------------------------------------------------

    def ho_phase(self, phase: int, budget_left: int) -> int:
        st, s = self.state, self.settings
        pi = policy(st.rewards)
        ent = entropy(pi)
        kappa = min(ho_round_budget(st.rewards, s.max_ho_rounds), len(st.space))
        run = min(kappa, budget_left)
        picks = sample_configs(pi, run, np.random.default_rng([s.seed, self._stage_code, 3, phase]))
        observed: dict[int, float] = {}
        for idx in picks:
            reports = self.run_round(idx, aggregate=False)
            ok = [(r, v) for r, v in zip(reports, self.v) if not r.failed]
            # failed clients contribute nothing
            reward = compute_reward([r.loss_before for r, _ in ok], [r.loss_after for r, _ in ok], [v for _, v in ok])
            if ok:
                observed[idx] = reward
            self.reward_trace.add(phase, st.round, idx, st.space[idx], reward, kappa, ent)
            self._log_round("ho", phase, idx, reports, reward=reward, kappa=kappa, ent=ent)
            st.round += 1
        if observed:
            st.rewards = update_rewards(st.rewards, observed, list(observed))
        st.schedule.append(("ho", phase, run, kappa))
        return run

    def exploit_phase(self, phase: int, budget_left: int) -> int:
        st, s = self.state, self.settings
        idx = s.forced_exploit.get(phase, best_config(st.rewards))
        run = min(s.exploit_rounds, budget_left)
        for _ in range(run):
            reports = self.run_round(idx, aggregate=True)
            self._log_round("train", phase, idx, reports)
            st.round += 1
        st.schedule.append(("train", phase, run, None))
        return run

    def run(self) -> None:
        budget = self.settings.rounds
        phase = 0
        while self.state.round < budget:
            self.ho_phase(phase, budget - self.state.round)
            if self.state.round < budget:
                self.exploit_phase(phase, budget - self.state.round)
            phase += 1


def _search_step(model, w, a, h, shard, rng, before, settings: StageSettings):
    return client_search_step(model, w, a, h, shard, settings.batch_size, rng, settings.clip_norm, before)


def _eval_step(model, w, a, h, shard, rng, before, settings: StageSettings):
    return client_eval_step(model, w, h, shard, settings.batch_size, rng, settings.clip_norm, before)


def run_search_stage(
    shards: Sequence[ClientShard],
    settings: StageSettings,
    net_spec: NetworkSpec,
    cell_spec: CellSpec = CellSpec(),
    k: int = 2,
    on_round: Callable[[ServerState], None] | None = None,
) -> StageResult:
    """Alternate probe and architecture-search phases; keep the genotype of the best round.

    ``on_round`` is called with the server state at the end of every round,
    before the round counter advances.
    """
    t0 = time.perf_counter()
    model = SuperNet(net_spec, cell_spec, seed=settings.seed)
    runner = _Runner("search", model, shards, settings, lambda *a: _search_step(*a, settings=settings))
    runner.on_improved = lambda st, acc: Snapshot(acc, st.round, genotype=_geno(st, cell_spec, k))
    runner.on_round = on_round
    runner.run()
    st = runner.state
    genotype = st.best.genotype if st.best is not None else _geno(st, cell_spec, k)
    model.set_weights(st.weights)
    model.set_arch(st.arch)
    final_loss, final_acc = runner.weighted(runner.global_metrics()) if st.round else (math.nan, math.nan)
    metrics = {
        "stage": "search",
        "rounds": st.round,
        "final_val_accuracy": final_acc,
        "final_val_loss": final_loss,
        "best_val_accuracy": st.best.accuracy if st.best else None,
        "best_round": st.best.round if st.best else None,
        "best_config": best_config(st.rewards),
        "seconds": time.perf_counter() - t0,
    }
    return StageResult(st, runner.round_trace, runner.reward_trace, model, genotype, metrics)


def _geno(st: ServerState, cell_spec: CellSpec, k: int) -> Genotype:
    return discretize(st.arch, cell_spec.nodes, k, cell_spec.primitives)


def run_eval_stage(
    genotype: Genotype,
    shards: Sequence[ClientShard],
    settings: StageSettings,
    net_spec: NetworkSpec,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    on_round: Callable[[ServerState], None] | None = None,
) -> StageResult:
    """Train the discrete network from scratch, alternating probe and training phases."""
    t0 = time.perf_counter()
    model = EvalNet(genotype, net_spec, seed=settings.seed)
    runner = _Runner("eval", model, shards, settings, lambda *a: _eval_step(*a, settings=settings))
    runner.on_improved = lambda st, acc: Snapshot(acc, st.round, weights=st.weights)
    runner.on_round = on_round
    runner.run()
    st = runner.state
    model.set_weights(st.weights)
    final_loss, final_acc = runner.weighted(runner.global_metrics())
    metrics = {
        "stage": "eval",
        "rounds": st.round,
        "final_val_accuracy": final_acc,
        "final_val_loss": final_loss,
        "best_val_accuracy": st.best.accuracy if st.best else final_acc,
        "best_round": st.best.round if st.best else None,
        "best_config": best_config(st.rewards),
    }
    if test is not None:
        xt, yt = test
        with np.errstate(all="ignore"):
            metrics["final_test_accuracy"] = evaluate(model, xt, yt, settings.batch_size)[1]
            if st.best is not None:
                model.set_weights(st.best.weights)
                metrics["best_test_accuracy"] = evaluate(model, xt, yt, settings.batch_size)[1]
                model.set_weights(st.weights)
    metrics["seconds"] = time.perf_counter() - t0
    return StageResult(st, runner.round_trace, runner.reward_trace, model, genotype, metrics)
