"""Barycentric point location and field transfer between triangle meshes.

Point location uses a uniform background grid over the source mesh bounding
box (cell size = mean mesh edge length) so typical queries touch only a few
candidate triangles. Queries within ``TAU_BARY`` (mesh-space distance) of the
domain are clamped onto it; anything farther raises ``OutOfDomainError``.
"""

from __future__ import annotations

import numpy as np

from .errors import MeshError, OutOfDomainError
from .mesh import SimMesh, derive_edges

__all__ = ["TAU_BARY", "TriangleLocator", "barycentric_transfer", "transfer_mesh_fields"]

TAU_BARY = 1e-8  # mesh-space distance tolerance for boundary clamping


class TriangleLocator:
    """Locates mesh-space points in a fixed triangle mesh.

    Ties (a point inside several triangles, i.e. within tolerance of a shared
    edge) resolve to the lowest triangle index, which makes transfer results
    independent of query order and grid layout.
    """

    def __init__(self, mesh: SimMesh, tau: float = TAU_BARY):
        if mesh.dim_mesh != 2:
            raise MeshError("point location requires a 2-D mesh space")
        if mesh.cell_count == 0:
            raise MeshError("cannot locate points in a mesh with no cells")
        self.mesh = mesh
        self.tau = float(tau)
        pts = mesh.mesh_pos
        tri = pts[mesh.cells]  # (m, 3, 2)
        self._tri = tri
        # Affine maps to barycentric coordinates: w12 = Ainv @ (p - c), w0 = 1 - w1 - w2
        a = np.stack([tri[:, 0] - tri[:, 2], tri[:, 1] - tri[:, 2]], axis=2)  # columns
        det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
        if np.any(np.abs(det) <= 0.0):
            raise MeshError("degenerate (zero-area) cell in source mesh")
        inv = np.empty_like(a)
        inv[:, 0, 0] = a[:, 1, 1]
        inv[:, 0, 1] = -a[:, 0, 1]
        inv[:, 1, 0] = -a[:, 1, 0]
        inv[:, 1, 1] = a[:, 0, 0]
        self._ainv = inv / det[:, None, None]
        self._anchor = tri[:, 2]
        # Altitude of each corner over its opposite edge converts a negative
        # barycentric weight into a mesh-space violation distance.
        edge_len = np.stack(
            [
                np.linalg.norm(tri[:, 2] - tri[:, 1], axis=1),
                np.linalg.norm(tri[:, 0] - tri[:, 2], axis=1),
                np.linalg.norm(tri[:, 1] - tri[:, 0], axis=1),
            ],
            axis=1,
        )
        self._altitude = np.abs(det)[:, None] / edge_len

        edges = derive_edges(mesh)
        seg = pts[edges[:, 0]] - pts[edges[:, 1]]
        self._cell_size = float(np.mean(np.linalg.norm(seg, axis=1)))
        if not self._cell_size > 0:
            raise MeshError("mesh has zero mean edge length")
        self._origin = pts.min(axis=0) - self.tau
        upper = pts.max(axis=0) + self.tau
        shape = np.maximum(
            np.ceil((upper - self._origin) / self._cell_size).astype(int), 1
        )
        self._grid_shape = shape
        # Bin triangles by bounding box (padded by tau so clampable queries
        # always see their nearest triangle).
        lo = np.floor((tri.min(axis=1) - self.tau - self._origin) / self._cell_size)
        hi = np.floor((tri.max(axis=1) + self.tau - self._origin) / self._cell_size)
        lo = np.clip(lo.astype(int), 0, shape - 1)
        hi = np.clip(hi.astype(int), 0, shape - 1)
        buckets: dict[tuple[int, int], list[int]] = {}
        for t in range(tri.shape[0]):
            for gx in range(lo[t, 0], hi[t, 0] + 1):
                for gy in range(lo[t, 1], hi[t, 1] + 1):
                    buckets.setdefault((gx, gy), []).append(t)
        self._buckets = {k: np.array(v, dtype=np.int64) for k, v in buckets.items()}

    def _candidates(self, p: np.ndarray) -> np.ndarray:
        g = np.floor((p - self._origin) / self._cell_size).astype(int)
        g = np.clip(g, 0, self._grid_shape - 1)
        return self._buckets.get((g[0], g[1]), np.zeros(0, dtype=np.int64))

    def _weights(self, tris: np.ndarray, p: np.ndarray) -> np.ndarray:
        d = p[None, :] - self._anchor[tris]
        w01 = np.einsum("tij,tj->ti", self._ainv[tris], d)
        return np.concatenate([w01, 1.0 - w01.sum(axis=1, keepdims=True)], axis=1)

    def locate(self, p) -> tuple[int, np.ndarray]:
        """Return (cell index, barycentric weights) for a mesh-space point.

        Weights are clamped non-negative and renormalized when the point sits
        within tolerance outside the chosen cell.
        """
        p = np.asarray(p, dtype=np.float64).reshape(2)
        cand = self._candidates(p)
        best_cell, best_viol, best_w = -1, np.inf, None
        scanned_all = False
        while True:
            if cand.size:
                w = self._weights(cand, p)
                viol = np.max(
                    np.maximum(-w, 0.0) * self._altitude[cand], axis=1
                )
                k = int(np.argmin(viol))
                # prefer the lowest cell index among exact containments
                inside = np.flatnonzero(viol == 0.0)
                if inside.size:
                    k = int(inside[0])
                if viol[k] < best_viol or (
                    viol[k] == best_viol and cand[k] < best_cell
                ):
                    best_cell, best_viol, best_w = int(cand[k]), float(viol[k]), w[k]
            if best_viol <= self.tau or scanned_all:
                break
            # rare path: no candidate within tolerance, fall back to full scan
            cand = np.arange(self.mesh.cell_count, dtype=np.int64)
            scanned_all = True
        if best_viol > self.tau:
            raise OutOfDomainError(p, best_viol)
        w = np.maximum(best_w, 0.0)
        w = w / w.sum()
        return best_cell, w

    def locate_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vector form of :meth:`locate`; returns (cells (q,), weights (q, 3))."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        cells = np.empty(points.shape[0], dtype=np.int64)
        weights = np.empty((points.shape[0], 3))
        for i, p in enumerate(points):
            cells[i], weights[i] = self.locate(p)
        return cells, weights


def barycentric_transfer(
    src: SimMesh, field: np.ndarray, points, tau: float = TAU_BARY
) -> np.ndarray:
    """Interpolate a per-node field of ``src`` at mesh-space query points.

    ``field`` is (n, d) or (n,); the result matches its trailing shape.
    Raises ``OutOfDomainError`` if any query lies beyond ``tau`` of the mesh.
    """
    field = np.asarray(field, dtype=np.float64)
    squeeze = field.ndim == 1
    if squeeze:
        field = field[:, None]
    if field.shape[0] != src.node_count:
        raise MeshError(
            f"field has {field.shape[0]} rows, source mesh has {src.node_count} nodes"
        )
    loc = TriangleLocator(src, tau)
    cells, weights = loc.locate_many(points)
    corners = src.cells[cells]  # (q, 3)
    out = np.einsum("qc,qcd->qd", weights, field[corners])
    return out[:, 0] if squeeze else out


def transfer_mesh_fields(src: SimMesh, dst_points, tau: float = TAU_BARY) -> dict:
    """Interpolate world_pos and quantities of ``src`` onto query points.

    Returns a dict with keys present in the source mesh. Node types are not
    interpolated; callers decide types for new nodes.
    """
    loc = TriangleLocator(src, tau)
    cells, weights = loc.locate_many(dst_points)
    corners = src.cells[cells]
    out = {}
    if src.world_pos is not None:
        out["world_pos"] = np.einsum("qc,qcd->qd", weights, src.world_pos[corners])
    if src.quantities.shape[1]:
        out["quantities"] = np.einsum("qc,qcd->qd", weights, src.quantities[corners])
    return out
