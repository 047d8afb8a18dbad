"""Encode a mesh state (plus history) into a feature multigraph.

Edges are directed; the feature of pair (i, j) uses displacement from i to j's
frame as seen from i (u_i - u_j, x_i - x_j) and aggregation in the network
collects messages at the first index. Both directions of every undirected edge
are present, rows sorted ascending by (first, second) index so downstream
segment sums run in a fixed, reproducible order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError
from .mesh import NUM_NODE_TYPES, NodeType, SimMesh, derive_edges
from .schema import DomainSchema

__all__ = ["MultiGraph", "radius_neighbors", "find_world_edges", "encode_features"]

_SCRIPTED_TYPES = (int(NodeType.KINEMATIC), int(NodeType.OBSTACLE))


@dataclass(frozen=True)
class MultiGraph:
    """Feature graph fed to the network. Edge rows are (receiver, sender)."""

    node_features: np.ndarray  # (n, dn)
    mesh_edges: np.ndarray  # (Em, 2) int64, lexicographically sorted
    mesh_edge_features: np.ndarray  # (Em, dm)
    world_edges: np.ndarray  # (Ew, 2) int64, lexicographically sorted
    world_edge_features: np.ndarray  # (Ew, dw)

    @property
    def node_count(self) -> int:
        return self.node_features.shape[0]


def _lexsorted(pairs: np.ndarray) -> np.ndarray:
    if pairs.shape[0] == 0:
        return pairs.reshape(0, 2).astype(np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def radius_neighbors(points: np.ndarray, r: float) -> np.ndarray:
    """All unordered pairs (i < j) with |p_i - p_j| < r, via a spatial hash.

    Exact: returns precisely the strict-inequality pairs, sorted by (i, j).
    """
    if not r > 0:
        raise SchemaError("radius must be positive")
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    keys = np.floor(points / r).astype(np.int64)
    buckets: dict[tuple, list[int]] = {}
    for i in range(n):
        buckets.setdefault(tuple(keys[i]), []).append(i)
    dim = points.shape[1]
    offsets = np.stack(
        np.meshgrid(*([np.arange(-1, 2)] * dim), indexing="ij"), axis=-1
    ).reshape(-1, dim)
    pairs = []
    r2 = r * r
    for i in range(n):
        ki = keys[i]
        for off in offsets:
            cand = buckets.get(tuple(ki + off))
            if not cand:
                continue
            for j in cand:
                if j <= i:
                    continue
                d = points[j] - points[i]
                if d @ d < r2:
                    pairs.append((i, j))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return _lexsorted(np.array(pairs, dtype=np.int64))


def find_world_edges(mesh: SimMesh, r_w: float) -> np.ndarray:
    """Directed world-proximity pairs: |x_i - x_j| < r_w, not mesh-connected.

    Both directions of each pair are returned, sorted by (first, second).
    """
    if mesh.dim_world == 0:
        raise SchemaError("world edges require world-space positions")
    if not r_w > 0:
        raise SchemaError("world radius must be positive")
    close = radius_neighbors(mesh.world_pos, r_w)
    if close.shape[0]:
        mesh_set = {(int(a), int(b)) for a, b in derive_edges(mesh)}
        keep = np.array(
            [(int(a), int(b)) not in mesh_set for a, b in close], dtype=bool
        )
        close = close[keep]
    if close.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    directed = np.concatenate([close, close[:, ::-1]])
    return _lexsorted(directed)


def _relative_features(pos: np.ndarray, edges: np.ndarray) -> np.ndarray:
    rel = pos[edges[:, 0]] - pos[edges[:, 1]]
    norm = np.linalg.norm(rel, axis=1, keepdims=True)
    return np.concatenate([rel, norm], axis=1)


def encode_features(
    current: SimMesh,
    history: list[SimMesh],
    schema: DomainSchema,
    scripted_next: np.ndarray | None = None,
) -> MultiGraph:
    """Build the model input graph for one time step.

    ``history`` is ordered oldest first; its meshes must already share the
    current mesh's nodes (interpolate beforehand for dynamic meshes).
    ``scripted_next`` supplies next-step world positions; only rows of
    KINEMATIC/OBSTACLE nodes are used (as a velocity input).
    """
    if len(history) != schema.history:
        raise SchemaError(
            f"schema expects {schema.history} history meshes, got {len(history)}"
        )
    n = current.node_count
    for m in history:
        if m.node_count != n:
            raise SchemaError("history mesh node count differs from current mesh")
    if current.dim_mesh != schema.dim_mesh:
        raise SchemaError(
            f"mesh dim {current.dim_mesh} does not match schema dim {schema.dim_mesh}"
        )
    if schema.lagrangian and current.dim_world != 3:
        raise SchemaError("schema expects world-space positions")
    if not schema.lagrangian and current.quantities.shape[1] != schema.quantity_width:
        raise SchemaError(
            f"mesh has {current.quantities.shape[1]} quantity channels, "
            f"schema expects {schema.quantity_width}"
        )

    # node features
    one_hot = np.zeros((n, NUM_NODE_TYPES))
    one_hot[np.arange(n), current.node_type] = 1.0
    parts = [one_hot]
    if schema.lagrangian:
        states = [m.world_pos for m in history] + [current.world_pos]
        for k in range(schema.history):
            parts.append(states[k + 1] - states[k])
        scripted_vel = np.zeros((n, 3))
        if scripted_next is not None:
            scripted_next = np.asarray(scripted_next, dtype=np.float64)
            if scripted_next.shape != (n, 3):
                raise SchemaError(
                    f"scripted_next must have shape ({n}, 3), got {scripted_next.shape}"
                )
            mask = np.isin(current.node_type, _SCRIPTED_TYPES)
            scripted_vel[mask] = scripted_next[mask] - current.world_pos[mask]
        parts.append(scripted_vel)
    else:
        parts.append(current.quantities)
        states = [m.quantities for m in history] + [current.quantities]
        for k in range(schema.history):
            parts.append(states[k + 1] - states[k])
    node_features = np.concatenate(parts, axis=1)

    # mesh edges, both directions, sorted
    und = derive_edges(current)
    mesh_edges = _lexsorted(np.concatenate([und, und[:, ::-1]])) if und.size else und.reshape(0, 2)
    feats = [_relative_features(current.mesh_pos, mesh_edges)]
    if schema.lagrangian:
        feats.append(_relative_features(current.world_pos, mesh_edges))
    mesh_edge_features = np.concatenate(feats, axis=1)

    # world edges
    if schema.has_world_edges:
        world_edges = find_world_edges(current, schema.world_radius)
        world_edge_features = _relative_features(current.world_pos, world_edges)
    else:
        world_edges = np.zeros((0, 2), dtype=np.int64)
        world_edge_features = np.zeros((0, schema.world_edge_feature_width))

    assert node_features.shape[1] == schema.node_feature_width
    assert mesh_edge_features.shape[1] == schema.mesh_edge_feature_width
    return MultiGraph(
        node_features, mesh_edges, mesh_edge_features, world_edges, world_edge_features
    )
