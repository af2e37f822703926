"""
Top-down dissemination after the tree is built.

Walking breadth-first from the root, every child is pulled towards its
(already updated) parent. The coefficient uses the highest level the child
reached, so a promoted node is blended as a node one level below its parent.
Which layers are blended depends on the mode:

    direct       child := parent, every layer
    full         every layer blended with the level coefficient
    progressive  only variable layers blended; fixed layers stay personal
"""
import logging
from collections import deque

from app.core.errors import PartitionMismatch
from app.schemas.schemas import FusionConfig, FusionMode
from app.services.params import FlatParams, LayerPartition, replace_view, split
from app.services.tree import NodeTree

logger = logging.getLogger(__name__)


def fusion_coefficient(config: FusionConfig, child_level: int) -> float:
    """epsilon0 * omega^(1 - level), clamped to [0, 1]; leaves are level 0."""
    value = config.epsilon0 * config.omega ** (1 - child_level)
    return min(1.0, max(0.0, value))


def partition_for(config: FusionConfig, params: FlatParams) -> LayerPartition:
    try:
        return LayerPartition.with_fixed(params.layer_names, config.fixed_layers)
    except PartitionMismatch as exc:
        raise PartitionMismatch(f"fusion.fixed_layers: {exc}") from exc


def _blend(child: FlatParams, parent: FlatParams, eps: float, partition: LayerPartition | None) -> FlatParams:
    if partition is None:
        return child.with_values(eps * parent.values + (1.0 - eps) * child.values)
    _, child_var = split(child, partition)
    _, parent_var = split(parent, partition)
    return replace_view(child, child_var, eps * parent_var.values + (1.0 - eps) * child_var.values)


def fuse_tree(tree: NodeTree, config: FusionConfig) -> NodeTree:
    """Return a copy of `tree` with every non-root node updated top-down."""
    root = tree.root_node
    partition = partition_for(config, root.params)
    updated: dict[str, FlatParams] = {root.id: root.params}

    queue = deque([root.id])
    while queue:
        parent_id = queue.popleft()
        parent_params = updated[parent_id]
        for child_id in sorted(tree.nodes[parent_id].children):
            child = tree.nodes[child_id]
            partition.check(child.params)
            if config.mode == FusionMode.DIRECT:
                new = child.params.with_values(parent_params.values)
            else:
                eps = fusion_coefficient(config, child.top_level)
                scope = partition if config.mode == FusionMode.PROGRESSIVE else None
                new = _blend(child.params, parent_params, eps, scope)
            updated[child_id] = new
            queue.append(child_id)
    return tree.with_params(updated)


def disseminate(tree: NodeTree, config: FusionConfig) -> dict:
    """Leaf parameters after dissemination, keyed by client id."""
    fused = fuse_tree(tree, config)
    return {client: node.params for client, node in fused.leaves().items()}
