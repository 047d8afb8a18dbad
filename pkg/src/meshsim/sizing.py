"""Sizing-field estimation, decoding, and serialization.

A sizing field assigns every mesh node a symmetric positive-definite 2x2
tensor S. An edge offset u is acceptable under S when ``u^T S u <= 1``, so
S encodes direction-dependent target edge lengths for the remesher.

Estimated fields come from the minimum-area zero-centered ellipse enclosing
each node's neighbor offsets; decoded fields come from the network's
3-channel sizing output head.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FormatError, MeshError, SchemaError
from .mesh import SimMesh, canonical_json, derive_edges
from .remesh import LAMBDA_MIN, project_spd

__all__ = [
    "TOL_CONTAIN",
    "min_zero_centered_ellipse",
    "estimate_sizing",
    "decode_sizing",
    "sizing_to_channels",
    "save_sizing_json",
    "load_sizing_json",
]

TOL_CONTAIN = 1e-9  # relative slack on p^T S p <= 1 containment checks


# --- minimum-area zero-centered ellipse -------------------------------------
#
# Welzl-style randomized recursion. Because the ellipse is centered at the
# origin, containment p^T S p <= 1 is automatically symmetric in p -> -p, so
# running the recursion on the given points is equivalent to running it on
# the symmetrized set {+-p}. The support set has at most 3 points; partial
# supports are represented as degenerate shapes:
#   ("point", None)   contains only the origin
#   ("segment", a)    contains t*a for |t| <= 1
#   ("ellipse", S)    contains p with p^T S p <= 1


def _contains(shape, p, tol):
    kind, data = shape
    pp = float(p @ p)
    if kind == "point":
        return pp == 0.0
    if kind == "segment":
        a = data
        aa = float(a @ a)
        cross = a[0] * p[1] - a[1] * p[0]
        return cross * cross <= tol * tol * aa * pp and pp <= aa * (1.0 + 2.0 * tol)
    s = data
    return float(p @ s @ p) <= 1.0 + tol


def _pair_shape(a, b, tol):
    cross = a[0] * b[1] - a[1] * b[0]
    if cross * cross <= tol * tol * float(a @ a) * float(b @ b):
        # parallel pair: the longer segment contains both
        return ("segment", a if float(a @ a) >= float(b @ b) else b)
    # both points on the boundary; minimal area among that family
    return ("ellipse", np.linalg.inv(np.outer(a, a) + np.outer(b, b)))


def _triple_shape(points, tol):
    # p^T S p = 1 is linear in (s11, s12, s22)
    rows = np.array([[p[0] * p[0], 2.0 * p[0] * p[1], p[1] * p[1]] for p in points])
    try:
        s11, s12, s22 = np.linalg.solve(rows, np.ones(3))
        s = np.array([[s11, s12], [s12, s22]])
        if s[0, 0] > 0.0 and np.linalg.det(s) > 0.0:
            return ("ellipse", s)
    except np.linalg.LinAlgError:
        pass
    # degenerate support: best pair ellipse that still holds the third point
    best = None
    for i, j, k in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
        cand = _pair_shape(points[i], points[j], tol)
        if cand[0] != "ellipse" or not _contains(cand, points[k], tol):
            continue
        if best is None or np.linalg.det(cand[1]) > np.linalg.det(best[1]):
            best = cand
    if best is not None:
        return best
    return ("ellipse", np.eye(2) / max(float(p @ p) for p in points))


def _support_shape(support, tol):
    if len(support) == 0:
        return ("point", None)
    if len(support) == 1:
        return ("segment", support[0])
    if len(support) == 2:
        return _pair_shape(support[0], support[1], tol)
    return _triple_shape(support, tol)


def _welzl(pts, order, k, support, tol):
    if k == 0 or len(support) == 3:
        return _support_shape(support, tol)
    p = pts[order[k - 1]]
    shape = _welzl(pts, order, k - 1, support, tol)
    if _contains(shape, p, tol):
        return shape
    return _welzl(pts, order, k - 1, support + (p,), tol)


def min_zero_centered_ellipse(points, seed=0) -> np.ndarray:
    """SPD matrix S of the minimum-area origin-centered ellipse
    ``{p : p^T S p <= 1}`` containing all given 2D points.

    Rank-deficient inputs (all points on one line through the origin) fall
    back to the isotropic bound S = I / max|p|^2. The seed only fixes the
    processing order of the recursion; the minimizer itself is unique.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
        raise ValueError(f"need a nonempty (n, 2) array of points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    norms2 = np.einsum("nd,nd->n", pts, pts)
    top = float(norms2.max())
    if top == 0.0:
        raise ValueError("all points are zero; no ellipse is determined")
    anchor = pts[int(np.argmax(norms2))]
    cross = anchor[0] * pts[:, 1] - anchor[1] * pts[:, 0]
    if np.all(cross * cross <= TOL_CONTAIN**2 * top * norms2):
        return np.eye(2) / top  # rank-1 neighborhood: isotropic fallback
    order = np.random.default_rng(seed).permutation(pts.shape[0])
    shape = _welzl(pts, order, pts.shape[0], (), TOL_CONTAIN)
    if shape[0] != "ellipse":  # unreachable for rank-2 input; stay total
        return np.eye(2) / top
    s = shape[1]
    worst = float(np.einsum("nd,de,ne->n", pts, s, pts).max())
    if worst > 1.0:
        s = s / worst  # absorb float slack so containment holds outright
    return 0.5 * (s + s.T)


# --- per-node estimation and head decoding ----------------------------------


def estimate_sizing(mesh: SimMesh, seed=0) -> np.ndarray:
    """Per-node (n, 2, 2) sizing tensors from each node's neighbor offsets.

    Node i gets the minimum-area zero-centered ellipse of the mesh-space
    offsets to its edge neighbors, so every incident edge comes out valid
    (metric <= 1) and the tensors track local resolution and anisotropy.
    """
    edges = derive_edges(mesh)
    n = mesh.node_count
    nbrs = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[int(i)].append(int(j))
        nbrs[int(j)].append(int(i))
    missing = [i for i in range(n) if not nbrs[i]]
    if missing:
        raise MeshError(f"cannot estimate sizing: isolated node(s) {missing}")
    out = np.empty((n, 2, 2))
    for i in range(n):
        offsets = mesh.mesh_pos[nbrs[i]] - mesh.mesh_pos[i]
        out[i] = min_zero_centered_ellipse(offsets, seed=(seed, i))
    return project_spd(out)


def decode_sizing(channels) -> np.ndarray:
    """Assemble sizing tensors from 3-channel head output (s11, s12, s22).

    Channels are expected in physical units (already denormalized). The
    symmetric matrix is eigen-projected to eigenvalues >= LAMBDA_MIN, so
    even a badly wrong prediction yields a usable SPD tensor.
    """
    return project_spd(_assemble(channels, SchemaError))


def _assemble(channels, err):
    ch = np.asarray(channels, dtype=np.float64)
    if ch.ndim != 2 or ch.shape[1] != 3:
        raise err(f"sizing channels must be (n, 3), got {ch.shape}")
    s = np.empty((ch.shape[0], 2, 2))
    s[:, 0, 0] = ch[:, 0]
    s[:, 0, 1] = ch[:, 1]
    s[:, 1, 0] = ch[:, 1]
    s[:, 1, 1] = ch[:, 2]
    return s


def sizing_to_channels(sizing) -> np.ndarray:
    """(n, 2, 2) tensors -> (n, 3) channels (s11, s12, s22)."""
    s = np.asarray(sizing, dtype=np.float64)
    if s.ndim != 3 or s.shape[1:] != (2, 2):
        raise ValueError(f"sizing field must be (n, 2, 2), got {s.shape}")
    return np.stack([s[:, 0, 0], s[:, 0, 1], s[:, 1, 1]], axis=1)


# --- JSON interchange: {"s": [[s11, s12, s22], ...]} in node order ----------


def save_sizing_json(path, sizing) -> None:
    ch = sizing_to_channels(sizing)
    text = canonical_json({"s": [[float(v) for v in row] for row in ch]})
    with open(path, "w") as fh:
        fh.write(text)


def load_sizing_json(path) -> np.ndarray:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid sizing JSON: {exc}") from exc
    if not isinstance(data, dict) or "s" not in data:
        raise FormatError('sizing JSON must be an object with an "s" key')
    rows = data["s"]
    try:
        ch = np.asarray(rows, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"sizing rows are not numeric: {exc}") from exc
    if ch.ndim != 2 or ch.shape[1] != 3:
        raise FormatError(f"sizing rows must be triples, got shape {ch.shape}")
    if not np.all(np.isfinite(ch)):
        raise FormatError("sizing values must be finite")
    return _assemble(ch, FormatError)
