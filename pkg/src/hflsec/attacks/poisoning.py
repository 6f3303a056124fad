"""Training-time attacks: backdoor label flipping, random label flipping and
sign flipping, wired into the federation through ``AttackHooks``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..datasets import ClientShard, Dataset
from ..hfl import AttackHooks
from ..topology import HflTree, NodeId

ATTACK_KINDS = ("none", "TLF", "ULF", "CSF", "SSF")


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TriggerSpec:
    """Square patch stamped at (row, col); ``pattern`` is a scalar or a
    (size, size, c) array. A ``None`` coordinate means bottom/right edge."""

    row: int | None = None
    col: int | None = None
    size: int = 2
    pattern: float | np.ndarray = 1.0
    target: int = 0
    fraction: float = 0.5
    source: int | None = None

    def validate(self, shape: tuple[int, int, int], num_classes: int) -> None:
        h, w, c = shape
        r, col = self.origin(shape)
        if self.size < 1 or r < 0 or col < 0 or r + self.size > h or col + self.size > w:
            raise AttackConfigError(
                f"trigger patch {self.size}x{self.size} at ({r},{col}) does not fit a {h}x{w} image"
            )
        if not 0 <= self.target < num_classes:
            raise AttackConfigError(f"trigger target {self.target} outside [0, {num_classes})")
        if self.source is not None and not 0 <= self.source < num_classes:
            raise AttackConfigError(f"trigger source {self.source} outside [0, {num_classes})")
        if not 0.0 < self.fraction <= 1.0:
            raise AttackConfigError(f"poison fraction must be in (0, 1], got {self.fraction}")
        pat = np.asarray(self.pattern, dtype=np.float64)
        if pat.ndim and pat.shape != (self.size, self.size, c):
            raise AttackConfigError(f"pattern shape {pat.shape} != {(self.size, self.size, c)}")
        if pat.min() < 0.0 or pat.max() > 1.0:
            raise AttackConfigError("pattern values must lie in [0, 1]")

    def origin(self, shape) -> tuple[int, int]:
        h, w = shape[-3], shape[-2]
        return (
            h - self.size if self.row is None else self.row,
            w - self.size if self.col is None else self.col,
        )

    def stamp(self, x: np.ndarray) -> np.ndarray:
        """Copy of ``x`` (one image or a batch) with the patch written in."""
        out = np.array(x, dtype=np.float64, copy=True)
        (r, c), s = self.origin(out.shape), self.size
        out[..., r : r + s, c : c + s, :] = self.pattern
        return out


def _unwrap(shard):
    return (shard.data, shard.client) if isinstance(shard, ClientShard) else (shard, None)


def _rewrap(data: Dataset, client):
    return data if client is None else ClientShard(client, data)


def apply_tlf(shard, trigger: TriggerSpec, seed) -> Dataset | ClientShard:
    """Stamp the trigger on a seeded ``fraction`` of examples and relabel them
    to the target. With ``trigger.source`` set only that class is poisoned."""
    data, client = _unwrap(shard)
    trigger.validate(data.shape, data.num_classes)
    pool = np.arange(len(data)) if trigger.source is None else np.flatnonzero(data.y == trigger.source)
    count = min(len(pool), math.floor(trigger.fraction * len(pool) + 0.5))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(pool, size=count, replace=False)) if count else pool[:0]
    x = data.x.copy()
    y = data.y.copy()
    x[chosen] = trigger.stamp(x[chosen])
    y[chosen] = trigger.target
    return _rewrap(data.replace(x=x, y=y), client)


def apply_ulf(shard, seed) -> Dataset | ClientShard:
    """Replace every label by a uniformly drawn different label."""
    data, client = _unwrap(shard)
    k = data.num_classes
    if k < 2:
        raise AttackConfigError("label flipping needs at least 2 classes")
    rng = np.random.default_rng(seed)
    y = (data.y + rng.integers(1, k, size=len(data))) % k
    return _rewrap(data.replace(y=y), client)


def csf(params) -> np.ndarray:
    return -np.asarray(params, dtype=np.float64)


def ssf(params) -> np.ndarray:
    return csf(params)


@dataclass
class AttackScenario:
    kind: str = "none"
    malicious_clients: frozenset[NodeId] = frozenset()
    malicious_servers: frozenset[NodeId] = frozenset()
    trigger: TriggerSpec | None = None
    seed: int = 0

    def __post_init__(self):
        self.malicious_clients = frozenset(self.malicious_clients)
        self.malicious_servers = frozenset(self.malicious_servers)
        if self.kind not in ATTACK_KINDS:
            raise AttackConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind in ("TLF", "ULF", "CSF") and self.malicious_servers:
            raise AttackConfigError(f"{self.kind} is a client-side attack; no malicious servers allowed")
        if self.kind == "SSF" and self.malicious_clients:
            raise AttackConfigError("SSF is a server-side attack; no malicious clients allowed")
        if self.kind == "TLF" and self.trigger is None:
            raise AttackConfigError("TLF needs a trigger")

    def validate_against(self, tree: HflTree) -> None:
        clients = set(tree.clients)
        bad = [str(c) for c in self.malicious_clients if c not in clients]
        if bad:
            raise AttackConfigError(f"malicious clients not in tree: {bad}")
        regionals = set(tree.regional_servers)
        bad = [str(s) for s in self.malicious_servers if s not in regionals]
        if bad:
            raise AttackConfigError(f"malicious servers must be regional servers: {bad}")


@dataclass
class _PoisonCache:
    scenario: AttackScenario
    cache: dict = field(default_factory=dict)

    def __call__(self, client: NodeId, data: Dataset) -> Dataset:
        if client not in self.scenario.malicious_clients:
            return data
        if client not in self.cache:
            seed = (self.scenario.seed, client.level, client.index)
            if self.scenario.kind == "TLF":
                self.cache[client] = apply_tlf(data, self.scenario.trigger, seed)
            else:
                self.cache[client] = apply_ulf(data, seed)
        return self.cache[client]


def build_hooks(scenario: AttackScenario) -> AttackHooks:
    """Hooks realising ``scenario``; identity hooks for ``none``."""
    hooks = AttackHooks()
    if scenario.kind in ("TLF", "ULF"):
        hooks.pre_local_training = _PoisonCache(scenario)
    elif scenario.kind == "CSF":
        bad = scenario.malicious_clients
        hooks.post_local_training = lambda client, w: csf(w) if client in bad else w
    elif scenario.kind == "SSF":
        bad_servers = scenario.malicious_servers
        hooks.post_server_aggregate = lambda server, w: ssf(w) if server in bad_servers else w
    return hooks


def pick_servers(tree: HflTree, k: int, rng_seed: int) -> list[NodeId]:
    servers = tree.regional_servers
    if not 0 <= k <= len(servers):
        raise AttackConfigError(f"cannot pick {k} of {len(servers)} regional servers")
    rng = np.random.default_rng(rng_seed)
    return [servers[i] for i in sorted(rng.choice(len(servers), size=k, replace=False).tolist())]


def backdoor_eval_set(x: np.ndarray, y: np.ndarray, trigger: TriggerSpec):
    """Triggered copies of the inputs whose true label is not the target."""
    keep = np.asarray(y) != trigger.target
    return trigger.stamp(np.asarray(x)[keep]), np.asarray(y)[keep]


def merge_hooks(hooks: Iterable[AttackHooks]) -> AttackHooks:
    """Chain several hook sets; at most one batch transform may be present."""
    hooks = list(hooks)
    out = AttackHooks()
    pres = [h.pre_local_training for h in hooks if h.pre_local_training]
    posts = [h.post_local_training for h in hooks if h.post_local_training]
    servers = [h.post_server_aggregate for h in hooks if h.post_server_aggregate]
    transforms = [h.batch_transform for h in hooks if h.batch_transform]
    if len(transforms) > 1:
        raise AttackConfigError("only one batch transform can be active")

    def chain(fns):
        if not fns:
            return None

        def run(node, value):
            for f in fns:
                value = f(node, value)
            return value

        return run

    out.pre_local_training = chain(pres)
    out.post_local_training = chain(posts)
    out.post_server_aggregate = chain(servers)
    out.batch_transform = transforms[0] if transforms else None
    return out
