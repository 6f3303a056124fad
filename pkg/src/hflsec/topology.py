"""Multi-parent aggregation trees for hierarchical federated learning.

Level 0 holds the single cloud server, levels ``1..L-2`` hold edge servers
and level ``L-1`` holds the clients. Servers at level ``L-2`` talk to clients
directly and are called regional servers. A client inside the overlapping
coverage of two regional servers has two parents; every other node has one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class TopologyError(ValueError):
    pass


class NodeId(NamedTuple):
    level: int
    index: int

    def __str__(self) -> str:
        return f"({self.level},{self.index})"


@dataclass(frozen=True)
class TopologyConfig:
    """Shape of a tree.

    Attributes:
        num_levels: Total levels L including the cloud and the clients.
        fanouts: Children per server at levels ``0..L-2``.
        num_overlap_clients: Clients given a second regional parent.
        num_clients: Optional expected client count, checked against the
            product of the fanouts.
        overlap_seed: Seed for choosing overlap clients.
    """

    num_levels: int
    fanouts: Sequence[int]
    num_overlap_clients: int = 0
    num_clients: int | None = None
    overlap_seed: int = 0

    def client_count(self) -> int:
        return math.prod(self.fanouts)

    def validate(self) -> None:
        if self.num_levels not in (2, 3, 4):
            raise TopologyError(f"num_levels must be 2, 3 or 4, got {self.num_levels}")
        if len(self.fanouts) != self.num_levels - 1:
            raise TopologyError(
                f"need {self.num_levels - 1} fanouts for {self.num_levels} levels, "
                f"got {list(self.fanouts)}"
            )
        if any(int(f) < 1 for f in self.fanouts):
            raise TopologyError(f"fanouts must be positive, got {list(self.fanouts)}")
        n = self.client_count()
        if self.num_clients is not None and self.num_clients != n:
            raise TopologyError(
                f"fanout product {n} disagrees with client count {self.num_clients}"
            )
        if not 0 <= self.num_overlap_clients <= n:
            raise TopologyError(
                f"num_overlap_clients must be in [0, {n}], got {self.num_overlap_clients}"
            )
        if self.num_overlap_clients and math.prod(self.fanouts[:-1]) < 2:
            raise TopologyError("overlap clients need at least 2 regional servers")


@dataclass(frozen=True)
class HflTree:
    num_levels: int
    parents: dict[NodeId, tuple[NodeId, ...]]
    level_sizes: tuple[int, ...]
    overlap: frozenset[NodeId] = frozenset()
    _children: dict[NodeId, tuple[NodeId, ...]] = field(
        default=None, repr=False, compare=False  # type: ignore[assignment]
    )

    def __post_init__(self):
        children: dict[NodeId, list[NodeId]] = {}
        for node in self.nodes:
            if node.level < self.num_levels - 1:
                children[node] = []
        for node in self.nodes:
            for p in self.parents.get(node, ()):
                children[p].append(node)
        object.__setattr__(
            self, "_children", {k: tuple(sorted(v)) for k, v in children.items()}
        )

    @property
    def root(self) -> NodeId:
        return NodeId(0, 0)

    @property
    def nodes(self) -> list[NodeId]:
        return [NodeId(lvl, i) for lvl, size in enumerate(self.level_sizes) for i in range(size)]

    @property
    def client_level(self) -> int:
        return self.num_levels - 1

    @property
    def regional_level(self) -> int:
        return self.num_levels - 2

    def level(self, lvl: int) -> list[NodeId]:
        return [NodeId(lvl, i) for i in range(self.level_sizes[lvl])]

    @property
    def clients(self) -> list[NodeId]:
        return self.level(self.client_level)

    @property
    def regional_servers(self) -> list[NodeId]:
        return self.level(self.regional_level)

    def is_server(self, node: NodeId) -> bool:
        return 0 <= node.level < self.client_level and node.index < self.level_sizes[node.level]

    def is_regional(self, node: NodeId) -> bool:
        return node.level == self.regional_level

    def parents_of(self, node: NodeId) -> tuple[NodeId, ...]:
        return self.parents.get(node, ())

    def children(self, server: NodeId) -> tuple[NodeId, ...]:
        if not self.is_server(server):
            raise TopologyError(f"{server} is not a server of this tree")
        return self._children[server]

    def clients_under(self, server: NodeId) -> list[NodeId]:
        """Clients in the subtree of ``server``, overlap clients once each."""
        frontier = [server]
        while frontier and frontier[0].level < self.client_level:
            frontier = sorted({c for s in frontier for c in self.children(s)})
        return frontier

    def validate(self) -> None:
        """Check every structural invariant; raise TopologyError on violation."""
        if self.level_sizes[0] != 1:
            raise TopologyError("exactly one root expected at level 0")
        for node in self.nodes:
            ps = self.parents_of(node)
            if node.level == 0:
                if ps:
                    raise TopologyError("root must not have parents")
                continue
            if not ps:
                raise TopologyError(f"{node} has no parent")
            if any(p.level != node.level - 1 for p in ps):
                raise TopologyError(f"{node} has a parent outside level {node.level - 1}")
            if len(set(ps)) != len(ps):
                raise TopologyError(f"{node} lists a parent twice")
            limit = 2 if node.level == self.client_level else 1
            if len(ps) > limit:
                raise TopologyError(f"{node} has {len(ps)} parents, at most {limit} allowed")
            if (len(ps) == 2) != (node in self.overlap):
                raise TopologyError(f"overlap flag of {node} disagrees with its parents")


def build_tree(config: TopologyConfig) -> HflTree:
    """Build the tree described by ``config``.

    Nodes at each level are assigned to parents in contiguous blocks, so
    client ``i`` hangs under regional server ``i // clients_per_regional``.
    Overlap clients, if requested, are placed with ``place_overlap_clients``.
    """
    config.validate()
    sizes = [1]
    for f in config.fanouts:
        sizes.append(sizes[-1] * int(f))
    parents: dict[NodeId, tuple[NodeId, ...]] = {}
    for lvl in range(1, config.num_levels):
        fan = int(config.fanouts[lvl - 1])
        for i in range(sizes[lvl]):
            parents[NodeId(lvl, i)] = (NodeId(lvl - 1, i // fan),)
    tree = HflTree(config.num_levels, parents, tuple(sizes))
    if config.num_overlap_clients:
        tree = place_overlap_clients(tree, config.num_overlap_clients, config.overlap_seed)
    return tree


def pick_clients(tree: HflTree, k: int, rng_seed: int) -> list[NodeId]:
    """Seeded choice of ``k`` distinct clients, returned in index order.

    Malicious-client selection and overlap placement share this so that the
    same seed puts the same clients in the overlap area.
    """
    clients = tree.clients
    if not 0 <= k <= len(clients):
        raise TopologyError(f"cannot pick {k} of {len(clients)} clients")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(clients), size=k, replace=False)
    return [clients[i] for i in sorted(chosen.tolist())]


def place_overlap_clients(
    tree: HflTree,
    k: int,
    rng_seed: int,
    clients: Iterable[NodeId] | None = None,
) -> HflTree:
    """Give ``k`` clients a second parent: the adjacent regional server.

    A client under regional server ``i`` also joins ``i + 1`` (``i - 1`` for
    the last server). Clients come from ``pick_clients`` unless passed
    explicitly.
    """
    regionals = tree.regional_servers
    if len(regionals) < 2:
        raise TopologyError("overlap needs at least 2 regional servers")
    if not 0 <= k <= len(tree.clients):
        raise TopologyError(f"cannot place {k} overlap clients among {len(tree.clients)}")
    chosen = pick_clients(tree, k, rng_seed) if clients is None else sorted(clients)
    if len(chosen) != k:
        raise TopologyError(f"expected {k} explicit overlap clients, got {len(chosen)}")
    parents = dict(tree.parents)
    overlap = set(tree.overlap)
    for c in chosen:
        if c.level != tree.client_level or c.index >= tree.level_sizes[c.level]:
            raise TopologyError(f"{c} is not a client")
        if c in overlap:
            continue
        primary = parents[c][0]
        second = primary.index + 1 if primary.index + 1 < len(regionals) else primary.index - 1
        parents[c] = (primary, NodeId(primary.level, second))
        overlap.add(c)
    return HflTree(tree.num_levels, parents, tree.level_sizes, frozenset(overlap))


def coverage(tree: HflTree, server: NodeId) -> set[NodeId]:
    """Children whose parent list contains ``server``."""
    if not tree.is_server(server):
        raise TopologyError(f"{server} is not a server; coverage is defined for servers only")
    return set(tree.children(server))
