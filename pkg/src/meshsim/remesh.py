"""Sizing-field-driven local remesher for triangle meshes.

An edge with endpoint tensors S_i, S_j is valid when
``u_ij^T ((S_i + S_j) / 2) u_ij <= 1``. One remesh pass runs, in order:
split every invalid edge (worst first), a flip relaxation, collapse every
edge that can be removed without creating invalid edges (shortest first),
and a final flip relaxation. All candidate orderings are total (metric,
then index), so the result is a deterministic function of the inputs.

Boundary policy: splits may subdivide boundary edges (midpoints stay on the
boundary polyline); flips never touch boundary edges; a boundary node may
only be collapsed along the boundary and only when its two boundary
neighbors are collinear with it, so the mesh-space domain never changes
shape. Scripted (KINEMATIC/OBSTACLE) nodes are never removed.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import MeshError
from .mesh import NodeType, SimMesh, validate_mesh

__all__ = [
    "LAMBDA_MIN",
    "SPLIT_BUDGET_FACTOR",
    "MAX_FLIP_SWEEPS",
    "project_spd",
    "edge_metric",
    "edge_metrics",
    "should_flip",
    "split_edge",
    "collapse_edge",
    "remesh",
    "RemeshResult",
]

LAMBDA_MIN = 1e-6  # eigenvalue floor for sizing tensors
SPLIT_BUDGET_FACTOR = 4  # max splits per call, in units of the initial edge count
MAX_FLIP_SWEEPS = 3
_COLLINEAR_TOL = 1e-9  # relative tolerance for straight-boundary collapse
_PROTECTED = (int(NodeType.KINEMATIC), int(NodeType.OBSTACLE))


def project_spd(sizing: np.ndarray, lam_min: float = LAMBDA_MIN) -> np.ndarray:
    """Symmetrize and clamp eigenvalues of (n, 2, 2) tensors to >= lam_min."""
    s = np.asarray(sizing, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
        squeeze = True
    else:
        squeeze = False
    if s.shape[-2:] != (2, 2):
        raise MeshError(f"sizing tensors must be (..., 2, 2), got {s.shape}")
    sym = 0.5 * (s + np.swapaxes(s, -1, -2))
    w, v = np.linalg.eigh(sym)
    w = np.maximum(w, lam_min)
    out = np.einsum("nik,nk,njk->nij", v, w, v)
    return out[0] if squeeze else out


def edge_metric(u_ij: np.ndarray, s_i: np.ndarray, s_j: np.ndarray) -> float:
    """Quadratic length of one edge under the averaged sizing tensor."""
    u = np.asarray(u_ij, dtype=np.float64)
    s_avg = 0.5 * (np.asarray(s_i, dtype=np.float64) + np.asarray(s_j, dtype=np.float64))
    return float(u @ s_avg @ u)


def edge_metrics(pos: np.ndarray, sizing: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Vectorized edge_metric over an (E, 2) index array."""
    if edges.shape[0] == 0:
        return np.zeros(0)
    u = pos[edges[:, 0]] - pos[edges[:, 1]]
    s_avg = 0.5 * (sizing[edges[:, 0]] + sizing[edges[:, 1]])
    return np.einsum("ei,eij,ej->e", u, s_avg, u)


def _cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _flip_wanted(ui, uj, uk, ul, s_avg) -> bool:
    """Anisotropic Delaunay test for edge (i, j) with opposite nodes k, l.

    Assumes triangles (i, j, k) and (j, i, l) are counterclockwise. Reduces
    to the classic opposite-angle-sum in-circle criterion when s_avg is a
    multiple of the identity. Ties and degenerate inputs do not flip.
    """
    u_ik, u_jk = ui - uk, uj - uk
    u_il, u_jl = ui - ul, uj - ul
    cross_k = _cross2(u_ik, u_jk)  # 2 * area(i,j,k)
    cross_l = _cross2(u_jl, u_il)  # 2 * area(j,i,l)
    if cross_k <= 0.0 or cross_l <= 0.0:
        return False
    mdot_k = float(u_ik @ s_avg @ u_jk)
    mdot_l = float(u_il @ s_avg @ u_jl)
    return cross_k * mdot_l + mdot_k * cross_l < 0.0


# --- editable topology ----------------------------------------------------

class _Editable:
    """Mutable mesh + attributes + sizing used inside one remesh invocation."""

    def __init__(self, mesh: SimMesh, sizing: np.ndarray):
        n = mesh.node_count
        if sizing.shape != (n, 2, 2):
            raise MeshError(f"sizing must have shape ({n}, 2, 2), got {sizing.shape}")
        if mesh.dim_mesh != 2:
            raise MeshError("remeshing requires a 2-D mesh space")
        self.pos = [mesh.mesh_pos[i].copy() for i in range(n)]
        self.world = (
            None if mesh.world_pos is None else [mesh.world_pos[i].copy() for i in range(n)]
        )
        self.quant = [mesh.quantities[i].copy() for i in range(n)]
        self.types = [int(t) for t in mesh.node_type]
        self.sizing = [sizing[i].copy() for i in range(n)]
        self.tris: dict[int, tuple[int, int, int]] = {}
        self.edge_tris: dict[tuple[int, int], set[int]] = {}
        self.node_tris: dict[int, set[int]] = {i: set() for i in range(n)}
        self.dead: set[int] = set()
        self._next_tri = 0
        for c in mesh.cells:
            self.add_tri(int(c[0]), int(c[1]), int(c[2]))

    @staticmethod
    def ekey(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def add_node(self, pos, world, quant, ntype, sizing) -> int:
        self.pos.append(np.asarray(pos, dtype=np.float64))
        if self.world is not None:
            self.world.append(np.asarray(world, dtype=np.float64))
        self.quant.append(np.asarray(quant, dtype=np.float64))
        self.types.append(int(ntype))
        self.sizing.append(np.asarray(sizing, dtype=np.float64))
        i = len(self.pos) - 1
        self.node_tris[i] = set()
        return i

    def add_tri(self, a: int, b: int, c: int) -> int:
        t = self._next_tri
        self._next_tri += 1
        self.tris[t] = (a, b, c)
        for v in (a, b, c):
            self.node_tris[v].add(t)
        for e in ((a, b), (b, c), (c, a)):
            self.edge_tris.setdefault(self.ekey(*e), set()).add(t)
        return t

    def remove_tri(self, t: int) -> None:
        a, b, c = self.tris.pop(t)
        for v in (a, b, c):
            self.node_tris[v].discard(t)
        for e in ((a, b), (b, c), (c, a)):
            k = self.ekey(*e)
            s = self.edge_tris[k]
            s.discard(t)
            if not s:
                del self.edge_tris[k]

    def edge_exists(self, e: tuple[int, int]) -> bool:
        return e in self.edge_tris

    def is_boundary_edge(self, e: tuple[int, int]) -> bool:
        return len(self.edge_tris[e]) == 1

    def boundary_edges_at(self, i: int) -> list[tuple[int, int]]:
        out = []
        for t in self.node_tris[i]:
            a, b, c = self.tris[t]
            for x, y in ((a, b), (b, c), (c, a)):
                if i in (x, y):
                    k = self.ekey(x, y)
                    if len(self.edge_tris[k]) == 1 and k not in out:
                        out.append(k)
        return out

    def neighbors(self, i: int) -> set[int]:
        out = set()
        for t in self.node_tris[i]:
            out.update(self.tris[t])
        out.discard(i)
        return out

    def metric(self, e: tuple[int, int]) -> float:
        i, j = e
        return edge_metric(self.pos[i] - self.pos[j], self.sizing[i], self.sizing[j])

    def tri_area(self, a: int, b: int, c: int) -> float:
        return 0.5 * _cross2(self.pos[b] - self.pos[a], self.pos[c] - self.pos[a])

    def opposite_vertices(self, e: tuple[int, int]) -> list[int]:
        out = []
        for t in sorted(self.edge_tris[e]):
            for v in self.tris[t]:
                if v not in e:
                    out.append(v)
        return out

    # --- local operations -------------------------------------------------

    def split(self, e: tuple[int, int]) -> int:
        i, j = e
        mid_world = None
        if self.world is not None:
            mid_world = 0.5 * (self.world[i] + self.world[j])
        m = self.add_node(
            0.5 * (self.pos[i] + self.pos[j]),
            mid_world,
            0.5 * (self.quant[i] + self.quant[j]),
            NodeType.NORMAL,
            0.5 * (self.sizing[i] + self.sizing[j]),
        )
        for t in sorted(self.edge_tris[e]):
            tri = self.tris[t]
            idx = next(
                k for k in range(3) if {tri[k], tri[(k + 1) % 3]} == {i, j}
            )
            p, q, r = tri[idx], tri[(idx + 1) % 3], tri[(idx + 2) % 3]
            self.remove_tri(t)
            self.add_tri(p, m, r)
            self.add_tri(m, q, r)
        return m

    def flip_labels(self, e: tuple[int, int]):
        """Return (i, j, k, l, t_ijk, t_jil) with both triangles CCW, or None."""
        if self.is_boundary_edge(e):
            return None
        t1, t2 = sorted(self.edge_tris[e])
        a, b = e

        def directed(t, x, y):
            tri = self.tris[t]
            for k in range(3):
                if tri[k] == x and tri[(k + 1) % 3] == y:
                    return tri[(k + 2) % 3]
            return None

        k = directed(t1, a, b)
        if k is not None:
            l = directed(t2, b, a)
            return None if l is None else (a, b, k, l, t1, t2)
        k = directed(t2, a, b)
        if k is not None:
            l = directed(t1, b, a)
            return None if l is None else (a, b, k, l, t2, t1)
        return None

    def try_flip(self, e: tuple[int, int]) -> bool:
        labels = self.flip_labels(e)
        if labels is None:
            return False
        i, j, k, l, t_ijk, t_jil = labels
        s_avg = 0.25 * (self.sizing[i] + self.sizing[j] + self.sizing[k] + self.sizing[l])
        if not _flip_wanted(self.pos[i], self.pos[j], self.pos[k], self.pos[l], s_avg):
            return False
        # refuse flips that would invert or degenerate the new pair
        if self.tri_area(i, l, k) <= 0.0 or self.tri_area(l, j, k) <= 0.0:
            return False
        # like collapses, flips must not create invalid edges, or the
        # post-remesh validity sweep would fail; when the current diagonal is
        # itself invalid (split budget ran out), accept strict improvements
        m_new = edge_metric(self.pos[k] - self.pos[l], self.sizing[k], self.sizing[l])
        if m_new > 1.0 and m_new >= self.metric(e):
            return False
        self.remove_tri(t_ijk)
        self.remove_tri(t_jil)
        self.add_tri(i, l, k)
        self.add_tri(l, j, k)
        return True

    def collapse_refusal(self, e: tuple[int, int], keep: int) -> str | None:
        """Why collapsing ``e`` into ``keep`` is not allowed, or None if it is."""
        i, j = e
        gone = j if keep == i else i
        if self.types[gone] in _PROTECTED:
            return "would remove a scripted node"
        opp = self.opposite_vertices(e)
        if self.neighbors(i) & self.neighbors(j) != set(opp):
            return "link condition violated"
        gone_boundary = bool(self.boundary_edges_at(gone))
        if gone_boundary:
            if not self.is_boundary_edge(e):
                return "boundary node collapsing along interior edge"
            be = self.boundary_edges_at(gone)
            if len(be) != 2:
                return "non-manifold boundary fan"
            ends = [a if b == gone else b for a, b in be]
            other = ends[0] if ends[1] == keep else ends[1]
            if keep not in ends:
                return "keeper is not a boundary neighbor"
            va = self.pos[keep] - self.pos[gone]
            vb = self.pos[other] - self.pos[gone]
            lim = _COLLINEAR_TOL * float(np.linalg.norm(va) * np.linalg.norm(vb))
            if abs(_cross2(va, vb)) > lim:
                return "collapse would change the boundary shape"
        removed_tris = self.edge_tris[e]
        for t in sorted(self.node_tris[gone] - removed_tris):
            tri = tuple(keep if v == gone else v for v in self.tris[t])
            if self.tri_area(*tri) <= 0.0:
                return "collapse would invert or degenerate a triangle"
        for x in sorted(self.neighbors(gone) - {keep}):
            m = edge_metric(
                self.pos[keep] - self.pos[x], self.sizing[keep], self.sizing[x]
            )
            if m > 1.0:
                return "collapse would create an invalid edge"
        return None

    def collapse(self, e: tuple[int, int], keep: int) -> bool:
        if self.collapse_refusal(e, keep) is not None:
            return False
        i, j = e
        gone = j if keep == i else i
        for t in sorted(self.edge_tris[e]):
            self.remove_tri(t)
        for t in sorted(self.node_tris[gone]):
            tri = self.tris[t]
            self.remove_tri(t)
            self.add_tri(*(keep if v == gone else v for v in tri))
        self.dead.add(gone)
        return True

    # --- output -----------------------------------------------------------

    def finalize(self) -> tuple[SimMesh, np.ndarray]:
        alive = [i for i in range(len(self.pos)) if i not in self.dead]
        remap = {old: new for new, old in enumerate(alive)}
        mesh = SimMesh(
            mesh_pos=np.array([self.pos[i] for i in alive]),
            cells=np.array(
                [[remap[v] for v in self.tris[t]] for t in sorted(self.tris)],
                dtype=np.int64,
            ).reshape(len(self.tris), 3),
            node_type=np.array([self.types[i] for i in alive], dtype=np.int64),
            world_pos=(
                None if self.world is None else np.array([self.world[i] for i in alive])
            ),
            quantities=np.array([self.quant[i] for i in alive]).reshape(len(alive), -1),
        )
        sizing = np.array([self.sizing[i] for i in alive]).reshape(len(alive), 2, 2)
        return mesh, sizing


# --- public single operations ---------------------------------------------

def _prep(mesh: SimMesh, sizing: np.ndarray) -> _Editable:
    sizing = project_spd(np.asarray(sizing, dtype=np.float64))
    return _Editable(mesh, sizing)


def should_flip(mesh: SimMesh, sizing: np.ndarray, edge: tuple[int, int]) -> bool:
    """Whether the anisotropic Delaunay test asks to flip an interior edge."""
    ed = _prep(mesh, sizing)
    key = _Editable.ekey(*edge)
    if not ed.edge_exists(key):
        raise MeshError(f"edge {edge} does not exist")
    if ed.is_boundary_edge(key):
        return False
    labels = ed.flip_labels(key)
    if labels is None:
        return False
    i, j, k, l, _, _ = labels
    s_avg = 0.25 * (ed.sizing[i] + ed.sizing[j] + ed.sizing[k] + ed.sizing[l])
    return _flip_wanted(ed.pos[i], ed.pos[j], ed.pos[k], ed.pos[l], s_avg)


def split_edge(
    mesh: SimMesh, sizing: np.ndarray, edge: tuple[int, int]
) -> tuple[SimMesh, np.ndarray]:
    """Split one edge at its midpoint; returns (mesh', sizing')."""
    ed = _prep(mesh, sizing)
    key = _Editable.ekey(*edge)
    if not ed.edge_exists(key):
        raise MeshError(f"edge {edge} does not exist")
    ed.split(key)
    return ed.finalize()


def collapse_edge(
    mesh: SimMesh, sizing: np.ndarray, edge: tuple[int, int], keep: int
) -> tuple[SimMesh, np.ndarray] | None:
    """Collapse one edge into ``keep``; None when the collapse is refused."""
    ed = _prep(mesh, sizing)
    key = _Editable.ekey(*edge)
    if not ed.edge_exists(key):
        raise MeshError(f"edge {edge} does not exist")
    if keep not in key:
        raise MeshError(f"keep={keep} is not an endpoint of {edge}")
    if not ed.collapse(key, keep):
        return None
    return ed.finalize()


# --- full pass ------------------------------------------------------------

@dataclass
class RemeshResult:
    mesh: SimMesh
    sizing: np.ndarray
    splits: int
    collapses: int
    flips: int
    budget_exhausted: bool


def _split_phase(ed: _Editable, budget: int) -> tuple[int, bool]:
    heap = []
    for e in ed.edge_tris:
        m = ed.metric(e)
        if m > 1.0:
            heapq.heappush(heap, (-m, e))
    splits = 0
    while heap:
        neg_m, e = heapq.heappop(heap)
        if not ed.edge_exists(e):
            continue
        m = ed.metric(e)
        if m <= 1.0:
            continue
        if not np.isclose(m, -neg_m, rtol=1e-12, atol=0.0):
            heapq.heappush(heap, (-m, e))  # stale priority, re-rank
            continue
        if splits >= budget:
            return splits, True
        i, j = e
        mid = ed.split(e)
        splits += 1
        for other in (i, j):
            half = _Editable.ekey(mid, other)
            hm = ed.metric(half)
            if hm > 1.0:
                heapq.heappush(heap, (-hm, half))
        for x in sorted(ed.neighbors(mid) - {i, j}):
            spoke = _Editable.ekey(mid, x)
            sm = ed.metric(spoke)
            if sm > 1.0:
                heapq.heappush(heap, (-sm, spoke))
    return splits, False


def _flip_phase(ed: _Editable, max_sweeps: int = MAX_FLIP_SWEEPS) -> int:
    flips = 0
    for _ in range(max_sweeps):
        fired = 0
        for e in sorted(ed.edge_tris):
            if ed.edge_exists(e) and ed.try_flip(e):
                fired += 1
        flips += fired
        if fired == 0:
            break
    return flips


def _collapse_phase(ed: _Editable) -> int:
    heap = []
    for e in ed.edge_tris:
        heapq.heappush(heap, (ed.metric(e), e))
    collapses = 0
    attempted: set[tuple[int, int]] = set()
    while heap:
        m, e = heapq.heappop(heap)
        if not ed.edge_exists(e) or e in attempted:
            continue
        attempted.add(e)
        i, j = e
        options = []
        for keep in (i, j):
            if ed.collapse_refusal(e, keep) is None:
                gone = j if keep == i else i
                worst = 0.0
                for x in ed.neighbors(gone) - {keep}:
                    worst = max(
                        worst,
                        edge_metric(
                            ed.pos[keep] - ed.pos[x], ed.sizing[keep], ed.sizing[x]
                        ),
                    )
                options.append((worst, keep))
        if not options:
            continue
        options.sort()  # lower max metric wins; tie -> lower keeper index
        keep = options[0][1]
        if ed.collapse(e, keep):
            collapses += 1
            # the whole ring around the keeper may have become collapsible
            retry = set()
            for t in ed.node_tris[keep]:
                a, b, c = ed.tris[t]
                retry.update(
                    (_Editable.ekey(a, b), _Editable.ekey(b, c), _Editable.ekey(c, a))
                )
            for k in sorted(retry):
                heapq.heappush(heap, (ed.metric(k), k))
                attempted.discard(k)
    return collapses


def remesh(
    mesh: SimMesh,
    sizing: np.ndarray,
    split_budget_factor: int = SPLIT_BUDGET_FACTOR,
    max_flip_sweeps: int = MAX_FLIP_SWEEPS,
) -> RemeshResult:
    """One full local remesh pass driven by a per-node sizing field."""
    problems = validate_mesh(mesh)
    if problems:
        raise MeshError("refusing to remesh an invalid mesh: " + "; ".join(problems))
    ed = _prep(mesh, sizing)
    budget = split_budget_factor * len(ed.edge_tris)
    splits, exhausted = _split_phase(ed, budget)
    flips = _flip_phase(ed, max_flip_sweeps)
    collapses = _collapse_phase(ed)
    flips += _flip_phase(ed, max_flip_sweeps)
    out_mesh, out_sizing = ed.finalize()
    problems = validate_mesh(out_mesh)
    if problems:
        raise MeshError("remesh produced an invalid mesh: " + "; ".join(problems))
    return RemeshResult(out_mesh, out_sizing, splits, collapses, flips, exhausted)
