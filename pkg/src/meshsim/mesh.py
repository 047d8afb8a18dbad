"""Simulation mesh container, topology derivation, validation, and file I/O.

A mesh lives in a low-dimensional parameter space (``mesh_pos``, the intrinsic
coordinates the solver meshes over) and optionally in a 3D embedding
(``world_pos``) for deforming-geometry domains. Per-node scalar fields ride
along in ``quantities``. Connectivity is a single simplex array ``cells``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace as _dc_replace
from enum import IntEnum

import numpy as np

from .errors import FormatError, MeshError

__all__ = [
    "NodeType",
    "NUM_NODE_TYPES",
    "SimMesh",
    "make_mesh",
    "derive_edges",
    "cell_areas",
    "boundary_edges",
    "validate_mesh",
    "mesh_to_dict",
    "mesh_from_dict",
    "save_mesh_json",
    "load_mesh_json",
    "export_obj",
    "canonical_json",
]


class NodeType(IntEnum):
    """Role of a node in the simulation; drives boundary handling and masking."""

    NORMAL = 0
    KINEMATIC = 1
    OBSTACLE = 2
    INFLOW = 3
    OUTFLOW = 4
    WALL = 5


NUM_NODE_TYPES = 6


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SimMesh:
    """Immutable simulation state at one time step.

    Arrays are coerced to float64 / int64 and marked read-only at construction.
    Use :meth:`replace` to derive a modified copy.
    """

    mesh_pos: np.ndarray  # (n, dim_mesh) float64
    cells: np.ndarray  # (m, 3) int64, triangle corner indices
    node_type: np.ndarray  # (n,) int64
    world_pos: np.ndarray | None = None  # (n, 3) float64, or None for fixed-domain
    quantities: np.ndarray | None = None  # (n, k) float64; k may be 0

    def __post_init__(self):
        mp = np.asarray(self.mesh_pos, dtype=np.float64)
        if mp.ndim != 2:
            raise MeshError(f"mesh_pos must be 2-D, got shape {mp.shape}")
        n = mp.shape[0]
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.size == 0:
            cells = cells.reshape(0, 3)
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError(f"cells must have shape (m, 3), got {cells.shape}")
        wp = self.world_pos
        if wp is not None:
            wp = np.asarray(wp, dtype=np.float64)
            if wp.shape != (n, 3):
                raise MeshError(f"world_pos must have shape ({n}, 3), got {wp.shape}")
            wp = _readonly(wp)
        q = self.quantities
        if q is None:
            q = np.zeros((n, 0))
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != n:
            raise MeshError(f"quantities must have shape ({n}, k), got {q.shape}")
        nt = np.asarray(self.node_type, dtype=np.int64).reshape(-1)
        if nt.shape != (n,):
            raise MeshError(f"node_type must have shape ({n},), got {nt.shape}")
        object.__setattr__(self, "mesh_pos", _readonly(mp))
        object.__setattr__(self, "cells", _readonly(cells))
        object.__setattr__(self, "node_type", _readonly(nt))
        object.__setattr__(self, "world_pos", wp)
        object.__setattr__(self, "quantities", _readonly(q))

    @property
    def node_count(self) -> int:
        return self.mesh_pos.shape[0]

    @property
    def cell_count(self) -> int:
        return self.cells.shape[0]

    @property
    def dim_mesh(self) -> int:
        return self.mesh_pos.shape[1]

    @property
    def dim_world(self) -> int:
        return 0 if self.world_pos is None else self.world_pos.shape[1]

    def replace(self, **changes) -> "SimMesh":
        """Return a copy with the given fields replaced (re-validated)."""
        return _dc_replace(self, **changes)


def make_mesh(mesh_pos, cells, node_type=None, world_pos=None, quantities=None) -> SimMesh:
    """Convenience constructor; defaults node_type to NORMAL everywhere."""
    mp = np.asarray(mesh_pos, dtype=np.float64)
    if node_type is None:
        node_type = np.zeros(mp.shape[0], dtype=np.int64)
    return SimMesh(mp, np.asarray(cells), node_type, world_pos, quantities)


def derive_edges(mesh: SimMesh) -> np.ndarray:
    """Unique undirected edges from cells, as (E, 2) int64 rows with i < j.

    Rows are sorted lexicographically, so the result is deterministic for a
    given connectivity regardless of cell ordering.
    """
    cells = mesh.cells
    if cells.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    return pairs


def cell_areas(mesh: SimMesh) -> np.ndarray:
    """Signed areas of all cells in mesh space (2-D meshes only)."""
    if mesh.dim_mesh != 2:
        raise MeshError("cell_areas requires a 2-D mesh space")
    p = mesh.mesh_pos[mesh.cells]  # (m, 3, 2)
    a = p[:, 1] - p[:, 0]
    b = p[:, 2] - p[:, 0]
    return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def _edge_cell_counts(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and the number of cells touching each."""
    if cells.shape[0] == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    pairs = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return uniq, counts


def boundary_edges(mesh: SimMesh) -> np.ndarray:
    """Undirected edges incident to exactly one cell, sorted, i < j."""
    uniq, counts = _edge_cell_counts(mesh.cells)
    return uniq[counts == 1]


def validate_mesh(mesh: SimMesh, *, require_orientation: bool = True) -> list[str]:
    """Check structural invariants; return a list of violation messages.

    An empty list means the mesh is valid. Checks: index bounds, node type
    codes, degenerate cells (repeated corners), finite coordinates, and for
    2-D mesh spaces consistent positive orientation and edge manifoldness
    (every undirected edge borders at most two cells).
    """
    problems: list[str] = []
    n = mesh.node_count
    cells = mesh.cells
    if cells.size and (cells.min() < 0 or cells.max() >= n):
        problems.append("cell index out of range")
        return problems  # everything else would be misleading
    if not np.all((mesh.node_type >= 0) & (mesh.node_type < NUM_NODE_TYPES)):
        problems.append("node_type outside the known enum range")
    repeated = (
        (cells[:, 0] == cells[:, 1])
        | (cells[:, 1] == cells[:, 2])
        | (cells[:, 0] == cells[:, 2])
    )
    if repeated.any():
        problems.append(f"{int(repeated.sum())} cell(s) with repeated corner indices")
    if not np.isfinite(mesh.mesh_pos).all():
        problems.append("non-finite mesh_pos")
    if mesh.world_pos is not None and not np.isfinite(mesh.world_pos).all():
        problems.append("non-finite world_pos")
    if mesh.quantities.size and not np.isfinite(mesh.quantities).all():
        problems.append("non-finite quantities")
    if mesh.dim_mesh == 2 and cells.size and not repeated.any():
        areas = cell_areas(mesh)
        if require_orientation and (areas <= 0).any():
            problems.append(
                f"{int((areas <= 0).sum())} cell(s) with non-positive mesh-space area"
            )
        _, counts = _edge_cell_counts(cells)
        if (counts > 2).any():
            problems.append("non-manifold edge (more than two incident cells)")
    return problems


# --- file I/O -------------------------------------------------------------

def canonical_json(obj) -> str:
    """Serialize with sorted keys and no whitespace, for byte-stable files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def mesh_to_dict(mesh: SimMesh) -> dict:
    d = {
        "dim_mesh": mesh.dim_mesh,
        "dim_world": mesh.dim_world,
        "node_type": mesh.node_type.tolist(),
        "mesh_pos": mesh.mesh_pos.tolist(),
        "quantities": mesh.quantities.tolist(),
        "cells": mesh.cells.tolist(),
    }
    if mesh.world_pos is not None:
        d["world_pos"] = mesh.world_pos.tolist()
    return d


def mesh_from_dict(d: dict) -> SimMesh:
    try:
        mesh = SimMesh(
            mesh_pos=np.asarray(d["mesh_pos"], dtype=np.float64),
            cells=np.asarray(d["cells"], dtype=np.int64),
            node_type=np.asarray(d["node_type"], dtype=np.int64),
            world_pos=(
                np.asarray(d["world_pos"], dtype=np.float64)
                if d.get("world_pos") is not None
                else None
            ),
            quantities=(
                np.asarray(d["quantities"], dtype=np.float64).reshape(
                    len(d["node_type"]), -1
                )
                if d.get("quantities")
                else None
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed mesh dict: {exc}") from exc
    if "dim_mesh" in d and mesh.dim_mesh != d["dim_mesh"]:
        raise FormatError(
            f"declared dim_mesh {d['dim_mesh']} != actual {mesh.dim_mesh}"
        )
    if "dim_world" in d and mesh.dim_world != d["dim_world"]:
        raise FormatError(
            f"declared dim_world {d['dim_world']} != actual {mesh.dim_world}"
        )
    return mesh


def save_mesh_json(mesh: SimMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(mesh_to_dict(mesh)))
        fh.write("\n")


def load_mesh_json(path) -> SimMesh:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return mesh_from_dict(d)


def export_obj(mesh: SimMesh, path) -> None:
    """Write a Wavefront OBJ of the world-space surface (or mesh space if 2-D only)."""
    pos = mesh.world_pos
    if pos is None:
        pos = np.concatenate(
            [mesh.mesh_pos, np.zeros((mesh.node_count, 3 - mesh.dim_mesh))], axis=1
        )
    lines = [f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in pos]
    lines += [f"f {c[0] + 1} {c[1] + 1} {c[2] + 1}" for c in mesh.cells]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")
