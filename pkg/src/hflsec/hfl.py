"""Recursive L-level FedAvg over an ``HflTree``.

Every server runs ``T_l`` rounds. A regional server (level L-2) picks
clients, lets each train from its current model and averages the results
weighted by shard size. Higher servers recurse into each child server from
their current model and average the children weighted by the number of
samples beneath them.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .datasets import ClientShard, Dataset
from .learner import BatchTransform, Classifier, ModelSpec, TrainingHyper, client_update, init_params
from .metrics import MetricsReport, RoundRecord, misclassification_rate, tasr
from .topology import HflTree, NodeId


class HflConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationSchedule:
    """Rounds per server level, ``rounds[l] = T_l`` for l = 0..L-2."""

    rounds: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rounds", tuple(int(t) for t in self.rounds))
        if not self.rounds or any(t < 1 for t in self.rounds):
            raise HflConfigError(f"every level needs >= 1 round, got {list(self.rounds)}")

    def regional_rounds(self) -> int:
        return math.prod(self.rounds)


@dataclass(frozen=True)
class SelectionPolicy:
    cp: float = 1.0
    mode: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.cp <= 1.0:
            raise HflConfigError(f"participation fraction must be in (0, 1], got {self.cp}")
        if self.mode not in ("fixed", "resample"):
            raise HflConfigError(f"selection mode must be 'fixed' or 'resample', got {self.mode!r}")


def select_clients(cov, policy: SelectionPolicy, t=1, server: NodeId | None = None) -> list[NodeId]:
    """ceil(cp * |cov|) clients, seeded by the policy, the server and (when
    resampling) the round."""
    pool = sorted(cov)
    if not pool:
        raise HflConfigError("cannot select from an empty coverage set")
    k = max(1, math.ceil(policy.cp * len(pool) - 1e-9))
    if k >= len(pool):
        return pool
    key = [policy.seed]
    if server is not None:
        key += [server.level, server.index]
    if policy.mode == "resample":
        key += list(t) if isinstance(t, tuple) else [t]
    rng = np.random.default_rng(key)
    chosen = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(chosen.tolist())]


def weighted_average(updates: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    if not updates:
        raise ValueError("nothing to average")
    n = len(updates[0][0])
    total = 0.0
    acc = np.zeros(n)
    for params, weight in updates:
        if len(params) != n:
            raise ValueError(f"update lengths differ: {len(params)} vs {n}")
        if not weight > 0:
            raise ValueError(f"weights must be positive, got {weight}")
        acc += weight * np.asarray(params, dtype=np.float64)
        total += weight
    return acc / total


@dataclass
class AttackHooks:
    """Injection points; a ``None`` slot acts as the identity."""

    pre_local_training: Callable[[NodeId, Dataset], Dataset] | None = None
    post_local_training: Callable[[NodeId, np.ndarray], np.ndarray] | None = None
    post_server_aggregate: Callable[[NodeId, np.ndarray], np.ndarray] | None = None
    batch_transform: BatchTransform | None = None

    def shard(self, client: NodeId, data: Dataset) -> Dataset:
        return data if self.pre_local_training is None else self.pre_local_training(client, data)

    def local(self, client: NodeId, params: np.ndarray) -> np.ndarray:
        return params if self.post_local_training is None else self.post_local_training(client, params)

    def server(self, server: NodeId, params: np.ndarray) -> np.ndarray:
        return params if self.post_server_aggregate is None else self.post_server_aggregate(server, params)


def digest(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class RoundTrace:
    level: int
    server: NodeId
    round_path: tuple[int, ...]
    participants: tuple[NodeId, ...]
    digest: str
    wall_clock: float


@dataclass
class LearnerContext:
    spec: ModelSpec
    hyper: TrainingHyper
    shards: Mapping[NodeId, Dataset]
    run_seed: int = 0
    workers: int = 1


def _as_shard_map(shards) -> dict[NodeId, Dataset]:
    if isinstance(shards, Mapping):
        return {k: (v.data if isinstance(v, ClientShard) else v) for k, v in shards.items()}
    return {s.client: s.data for s in shards}


class Federation:
    """Holds the static setup of one run and executes aggregation rounds."""

    def __init__(
        self,
        tree: HflTree,
        schedule: AggregationSchedule,
        policy: SelectionPolicy,
        hooks: AttackHooks | None,
        ctx: LearnerContext,
        record_trace: bool = False,
    ):
        self.tree = tree
        self.schedule = schedule
        self.policy = policy
        self.hooks = hooks or AttackHooks()
        self.ctx = ctx
        self.shards = _as_shard_map(ctx.shards)
        self.record_trace = record_trace
        self.traces: list[RoundTrace] = []
        self.jobs: list[tuple[NodeId, NodeId, tuple[int, ...]]] = []
        self.round_counts: dict[NodeId, int] = {}
        self._validate()
        self.sizes = self._subtree_sizes()

    @property
    def regional_rounds(self) -> int:
        """Rounds executed by each regional server (the same for all of them)."""
        return max(self.round_counts.values(), default=0)

    def _validate(self) -> None:
        if len(self.schedule.rounds) != self.tree.num_levels - 1:
            raise HflConfigError(
                f"schedule has {len(self.schedule.rounds)} levels but the tree has "
                f"{self.tree.num_levels - 1} server levels"
            )
        missing = [c for c in self.tree.clients if c not in self.shards]
        if missing:
            raise HflConfigError(f"no shard for clients {[str(c) for c in missing[:5]]}")
        for c, d in self.shards.items():
            if len(d) == 0:
                raise HflConfigError(f"shard of {c} is empty")
            if d.shape != self.ctx.spec.input_shape:
                raise HflConfigError(f"shard of {c} has shape {d.shape}, model wants {self.ctx.spec.input_shape}")

    def _subtree_sizes(self) -> dict[NodeId, int]:
        sizes = {c: len(self.shards[c]) for c in self.tree.clients}
        for lvl in range(self.tree.num_levels - 2, -1, -1):
            for s in self.tree.level(lvl):
                total = sum(sizes[c] for c in self.tree.children(s))
                if total <= 0:
                    raise HflConfigError(f"server {s} has no samples beneath it")
                sizes[s] = total
        return sizes

    def _job_seed(self, client: NodeId, parent: NodeId, path: tuple[int, ...]):
        return np.random.SeedSequence(self.ctx.run_seed, spawn_key=(client.index, parent.index) + path)

    def client_job(self, client: NodeId, parent: NodeId, w: np.ndarray, path: tuple[int, ...]) -> np.ndarray:
        data = self.hooks.shard(client, self.shards[client])
        local = client_update(
            self.ctx.spec,
            w,
            data,
            self.ctx.hyper,
            self._job_seed(client, parent, path),
            self.hooks.batch_transform,
        )
        return self.hooks.local(client, local)

    def _regional_round(self, server, w, path):
        chosen = select_clients(self.tree.children(server), self.policy, path, server)
        if self.record_trace:
            self.jobs.extend((c, server, path) for c in chosen)
        # clients under one server are distinct, so an overlap client never
        # trains twice at once; its other parent's jobs run in that parent's turn
        if self.ctx.workers > 1 and len(chosen) > 1:
            with ThreadPoolExecutor(self.ctx.workers) as pool:
                results = list(pool.map(lambda c: self.client_job(c, server, w, path), chosen))
        else:
            results = [self.client_job(c, server, w, path) for c in chosen]
        w = weighted_average([(r, len(self.shards[c])) for r, c in zip(results, chosen)])
        self.round_counts[server] = self.round_counts.get(server, 0) + 1
        return self.hooks.server(server, w), tuple(chosen)

    def aggregate(
        self,
        server: NodeId,
        w: np.ndarray,
        path: tuple[int, ...] = (),
        on_round: Callable[[int, np.ndarray], None] | None = None,
    ) -> np.ndarray:
        if not self.tree.is_server(server):
            raise HflConfigError(f"{server} is not a server")
        w = np.asarray(w, dtype=np.float64)
        for t in range(1, self.schedule.rounds[server.level] + 1):
            start = time.perf_counter()
            p = path + (t,)
            if self.tree.is_regional(server):
                w, members = self._regional_round(server, w, p)
            else:
                members = self.tree.children(server)
                w = weighted_average([(self.aggregate(child, w, p), self.sizes[child]) for child in members])
            if self.record_trace:
                self.traces.append(
                    RoundTrace(server.level, server, p, tuple(members), digest(w), time.perf_counter() - start)
                )
            if on_round is not None:
                on_round(t, w)
        return w


def aggregate(
    tree: HflTree,
    server: NodeId,
    w_t,
    schedule: AggregationSchedule,
    policy: SelectionPolicy,
    hooks: AttackHooks | None,
    ctx: LearnerContext,
) -> np.ndarray:
    return Federation(tree, schedule, policy, hooks, ctx).aggregate(server, w_t)


@dataclass
class BackdoorProbe:
    """Triggered copy of the eval set plus the attacker's target class."""

    x: np.ndarray
    y_true: np.ndarray
    target: int


@dataclass
class HflResult:
    params: np.ndarray
    report: MetricsReport
    federation: Federation = field(repr=False)


def run_hfl(
    tree: HflTree,
    schedule: AggregationSchedule,
    policy: SelectionPolicy,
    hooks: AttackHooks | None,
    shards,
    spec: ModelSpec,
    hyper: TrainingHyper,
    eval_set: Dataset,
    run_seed: int,
    backdoor: BackdoorProbe | None = None,
    workers: int = 1,
    run_id: str = "",
    config_digest: str = "",
    record_trace: bool = False,
    init: np.ndarray | None = None,
) -> HflResult:
    """Initialise, run ``T_0`` global rounds at the root, evaluate after each."""
    if len(eval_set) == 0:
        raise HflConfigError("evaluation set is empty")
    ctx = LearnerContext(spec, hyper, shards, run_seed, workers)
    fed = Federation(tree, schedule, policy, hooks, ctx, record_trace)
    w0 = init_params(spec, run_seed) if init is None else np.asarray(init, dtype=np.float64)
    report = MetricsReport(run_id or f"seed{run_seed}", config_digest, run_seed)

    def evaluate(t: int, w: np.ndarray) -> None:
        model = Classifier(spec, w)
        rec = RoundRecord(t, misclassification_rate(model, eval_set.x, eval_set.y))
        if backdoor is not None:
            rec.tasr = tasr(model, backdoor.x, backdoor.y_true, backdoor.target)
        report.rounds.append(rec)

    w = fed.aggregate(tree.root, w0, on_round=evaluate)
    report.summary["regional_rounds"] = fed.regional_rounds
    report.summary["final_clean_mr"] = report.rounds[-1].clean_mr
    if backdoor is not None:
        report.summary["final_tasr"] = report.rounds[-1].tasr
    return HflResult(w, report, fed)
