"""
Hierarchical parameter aggregation.

Each round the trained client models become level-0 leaves. Level by level
the current models are clustered by cosine similarity against a rising
threshold; multi-member clusters are averaged into a new node one level up
and singletons are promoted unchanged. Whatever is left at the maximum
height is merged into the root. Every intermediate model is kept, so each
client has a leaf-to-root chain for inference.
"""
import hashlib
import logging
import re
from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Mapping, Sequence, Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from app.core.errors import EmptyInput, LayoutMismatch, LevelOutOfRange, UnknownClient
from app.schemas.schemas import ThresholdSchedule, TreeDump, TreeNodeRecord
from app.services.params import FlatParams, similarity_matrix, weighted_average

logger = logging.getLogger(__name__)

ClientId = Union[int, str]

_DIGITS = re.compile(r"(\d+)")


def natural_key(value: ClientId) -> tuple:
    """Sort key that puts "L0:2" before "L0:10" and client 2 before client 10."""
    text = str(value)
    parts = tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in _DIGITS.split(text) if p)
    return parts, text


@dataclass(frozen=True, eq=False)
class TreeNode:
    id: str
    level: int                 # level the model was created at (0 = leaf)
    params: FlatParams
    parent: str | None
    children: tuple[str, ...]
    source_clients: frozenset
    top_level: int             # highest level reached by promotion

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True, eq=False)
class NodeTree:
    nodes: Mapping[str, TreeNode]
    root: str
    height: int
    levels: tuple[tuple[str, ...], ...]   # node ids present at each level, promoted ones included

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))

    @property
    def root_node(self) -> TreeNode:
        return self.nodes[self.root]

    @property
    def clients(self) -> list:
        return sorted(self.root_node.source_clients, key=str)

    def leaf_of(self, client: ClientId) -> TreeNode:
        for node in self.nodes.values():
            if node.is_leaf and node.source_clients == frozenset([client]):
                return node
        raise UnknownClient(f"client {client!r} is not a leaf of this tree")

    def leaves(self) -> dict:
        return {next(iter(n.source_clients)): n for n in self.nodes.values() if n.is_leaf}

    def with_params(self, updates: Mapping[str, FlatParams]) -> "NodeTree":
        nodes = {
            node_id: replace(node, params=updates[node_id]) if node_id in updates else node
            for node_id, node in self.nodes.items()
        }
        return NodeTree(nodes, self.root, self.height, self.levels)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            sources = ",".join(sorted(str(c) for c in node.source_clients))
            digest.update(
                f"{node.id}|{node.level}|{node.top_level}|{node.parent}|"
                f"{','.join(node.children)}|{sources}|{node.params.checksum()};".encode()
            )
        return digest.hexdigest()[:16]

    def to_dump(self) -> TreeDump:
        records = [
            TreeNodeRecord(
                id=node.id,
                level=node.level,
                top_level=node.top_level,
                parent=node.parent,
                children=list(node.children),
                source_clients=sorted(str(c) for c in node.source_clients),
                checksum=node.params.checksum(),
            )
            for node in sorted(self.nodes.values(), key=lambda n: (n.level, n.id))
        ]
        return TreeDump(root=self.root, height=self.height, checksum=self.checksum(), nodes=records)


def threshold_at(schedule: ThresholdSchedule, level: int) -> float:
    if not 0 <= level <= schedule.height:
        raise LevelOutOfRange(f"level {level} outside [0, {schedule.height}]")
    return min(1.0, schedule.tau0 + schedule.beta * (level / schedule.height))


def cluster_level(models: Sequence[tuple], tau: float) -> list[list]:
    """Connected components of the graph linking pairs with similarity >= tau."""
    if not models:
        raise EmptyInput("nothing to cluster")
    ordered = sorted(models, key=lambda item: natural_key(item[0]))
    ids = [item[0] for item in ordered]
    if len(ordered) == 1:
        return [ids]

    sims = similarity_matrix([item[1] for item in ordered])
    adjacency = sims >= tau
    np.fill_diagonal(adjacency, False)
    _, labels = connected_components(csr_matrix(adjacency), directed=False)

    groups: dict[int, list] = {}
    for model_id, label in zip(ids, labels):
        groups.setdefault(int(label), []).append(model_id)
    return sorted(groups.values(), key=lambda members: natural_key(members[0]))


def _leaf_id(client: ClientId) -> str:
    return f"L0:{client}"


def _check_leaves(leaves: Sequence[tuple]) -> list[tuple]:
    if not leaves:
        raise EmptyInput("a tree needs at least one leaf")
    ordered = sorted(leaves, key=lambda item: natural_key(item[0]))
    clients = [c for c, _ in ordered]
    if len(set(clients)) != len(clients):
        raise ValueError("duplicate client ids")
    first = ordered[0][1]
    if any(not first.same_layout(p) for _, p in ordered[1:]):
        raise LayoutMismatch("leaf parameter layouts differ")
    return ordered


def build_tree(leaves: Sequence[tuple], schedule: ThresholdSchedule) -> NodeTree:
    ordered = _check_leaves(leaves)
    drafts: dict[str, dict] = {}
    for client, params in ordered:
        drafts[_leaf_id(client)] = dict(
            id=_leaf_id(client), level=0, top_level=0, params=params,
            parent=None, children=(), source_clients=frozenset([client]),
        )

    def aggregate(member_ids: list[str], level: int, index: int) -> str:
        node_id = f"L{level}:{index}"
        members = [drafts[m] for m in member_ids]
        drafts[node_id] = dict(
            id=node_id, level=level, top_level=level,
            params=weighted_average([m["params"] for m in members]),
            parent=None, children=tuple(member_ids),
            source_clients=frozenset().union(*(m["source_clients"] for m in members)),
        )
        for member in members:
            member["parent"] = node_id
        return node_id

    frontier = [_leaf_id(c) for c, _ in ordered]
    levels = [tuple(frontier)]
    level = 0

    if len(frontier) == 1:
        # a lone client still gets a root so its chain has the usual shape
        level = 1
        only = drafts[frontier[0]]
        drafts["L1:0"] = dict(
            id="L1:0", level=1, top_level=1, params=only["params"],
            parent=None, children=(only["id"],), source_clients=only["source_clients"],
        )
        only["parent"] = "L1:0"
        frontier = ["L1:0"]
        levels.append(tuple(frontier))

    while len(frontier) > 1:
        level += 1
        if level >= schedule.height:
            logger.warning(f"Forcing {len(frontier)} models into the root at level {level}")
            frontier = [aggregate(sorted(frontier, key=natural_key), level, 0)]
        else:
            tau = threshold_at(schedule, level)
            clusters = cluster_level([(nid, drafts[nid]["params"]) for nid in frontier], tau)
            logger.debug(f"Level {level} (tau={tau:.4f}) clusters: {clusters}")
            next_frontier = []
            for index, members in enumerate(clusters):
                if len(members) > 1:
                    next_frontier.append(aggregate(members, level, index))
                else:
                    drafts[members[0]]["top_level"] = level
                    next_frontier.append(members[0])
            frontier = next_frontier
        levels.append(tuple(frontier))

    nodes = {node_id: TreeNode(**draft) for node_id, draft in drafts.items()}
    return NodeTree(nodes, frontier[0], level, tuple(levels))


def star_tree(leaves: Sequence[tuple]) -> NodeTree:
    """The classic one-server topology: every leaf hangs directly off the root."""
    ordered = _check_leaves(leaves)
    leaf_ids = tuple(_leaf_id(c) for c, _ in ordered)
    clients = frozenset(c for c, _ in ordered)
    nodes = {
        _leaf_id(c): TreeNode(_leaf_id(c), 0, p, "L1:0", (), frozenset([c]), 0)
        for c, p in ordered
    }
    nodes["L1:0"] = TreeNode(
        "L1:0", 1, weighted_average([p for _, p in ordered]), None, leaf_ids, clients, 1
    )
    return NodeTree(nodes, "L1:0", 1, (leaf_ids, ("L1:0",)))


def chain_to_root(tree: NodeTree, leaf_client: ClientId) -> list[TreeNode]:
    node = tree.leaf_of(leaf_client)
    chain = [node]
    while node.parent is not None:
        node = tree.nodes[node.parent]
        chain.append(node)
    return chain
