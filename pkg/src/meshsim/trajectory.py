"""Trajectory files, dataset manifests, and training-sample assembly.

A trajectory file is one JSON header line followed by little-endian f32
arrays, one group per recorded state, in the order the header declares.
A dataset is a directory of trajectory files plus a ``manifest.json`` with
the schema, time step, split assignment, and summary statistics.

Sample assembly handles dynamic meshes: when the recorded mesh changes over
time, history states and the next-state target are interpolated onto the
current mesh with mesh-space barycentric weights, so one-step supervision
always lives on a single node set.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .interpolate import TriangleLocator
from .mesh import SimMesh, canonical_json
from .schema import DomainSchema, schema_from_dict

__all__ = [
    "Trajectory",
    "save_trajectory",
    "load_trajectory",
    "Dataset",
    "write_manifest",
    "TrainSample",
    "make_sample",
    "sample_range",
]

_TRAJ_KIND = "meshsim-trajectory"
_MANIFEST_KIND = "meshsim-dataset"


@dataclass(frozen=True)
class Trajectory:
    """A recorded state sequence: one mesh per step, optional sizing labels.

    ``sizing`` holds per-step (n, 3) channel arrays (s11, s12, s22) aligned
    with each step's nodes, present only when the generator produced them.
    """

    schema: DomainSchema
    dt: float
    meshes: tuple
    sizing: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "meshes", tuple(self.meshes))
        if len(self.meshes) == 0:
            raise ValueError("a trajectory needs at least one state")
        if self.sizing is not None:
            sizing = tuple(
                np.ascontiguousarray(s, dtype=np.float64) for s in self.sizing
            )
            if len(sizing) != len(self.meshes):
                raise ValueError("sizing labels must align with states")
            for m, s in zip(self.meshes, sizing):
                if s.shape != (m.node_count, 3):
                    raise ValueError(
                        f"sizing channels must be (n, 3); got {s.shape} for "
                        f"{m.node_count} nodes"
                    )
            object.__setattr__(self, "sizing", sizing)

    def __len__(self) -> int:
        return len(self.meshes)

    @property
    def static_topology(self) -> bool:
        first = self.meshes[0].cells
        return all(
            m.cells is first or np.array_equal(m.cells, first) for m in self.meshes
        )


def _array_names(schema: DomainSchema, with_sizing: bool) -> list:
    names = ["mesh_pos", "node_type"]
    if schema.dim_world == 3:
        names.append("world_pos")
    if schema.quantity_width > 0:
        names.append("quantities")
    if with_sizing:
        names.append("sizing")
    return names


def _array_width(name: str, schema: DomainSchema) -> int:
    return {
        "mesh_pos": 2,
        "node_type": 1,
        "world_pos": 3,
        "quantities": schema.quantity_width,
        "sizing": 3,
    }[name]


def save_trajectory(path, traj: Trajectory) -> None:
    schema = traj.schema
    names = _array_names(schema, traj.sizing is not None)
    static = traj.static_topology
    header = {
        "kind": _TRAJ_KIND,
        "version": 1,
        "schema": schema.to_dict(),
        "dt": float(traj.dt),
        "steps": len(traj.meshes),
        "arrays": names,
        "node_counts": [m.node_count for m in traj.meshes],
        "cells": traj.meshes[0].cells.tolist() if static else None,
        "cells_per_step": None if static else [m.cells.tolist() for m in traj.meshes],
    }
    with open(path, "wb") as fh:
        fh.write(canonical_json(header).encode("utf-8"))
        fh.write(b"\n")
        for t, mesh in enumerate(traj.meshes):
            for name in names:
                if name == "mesh_pos":
                    arr = mesh.mesh_pos
                elif name == "node_type":
                    arr = mesh.node_type[:, None]
                elif name == "world_pos":
                    arr = mesh.world_pos
                elif name == "quantities":
                    arr = mesh.quantities
                else:
                    arr = traj.sizing[t]
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n")
    if sep < 0:
        raise FormatError(f"{path}: missing trajectory header terminator")
    try:
        header = json.loads(blob[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad trajectory header: {exc}") from exc
    if header.get("kind") != _TRAJ_KIND or header.get("version") != 1:
        raise FormatError(f"{path}: not a recognized trajectory file")
    schema = schema_from_dict(header["schema"])
    steps = int(header["steps"])
    names = list(header["arrays"])
    counts = [int(c) for c in header["node_counts"]]
    if len(counts) != steps:
        raise FormatError(f"{path}: node_counts do not match declared steps")
    if header["cells"] is not None:
        cells_per_step = [np.asarray(header["cells"], dtype=np.int64)] * steps
    else:
        cells_per_step = [
            np.asarray(c, dtype=np.int64) for c in header["cells_per_step"]
        ]
        if len(cells_per_step) != steps:
            raise FormatError(f"{path}: cells_per_step do not match declared steps")

    body = blob[sep + 1 :]
    expected = 4 * sum(n * _array_width(name, schema) for n in counts for name in names)
    if len(body) != expected:
        raise FormatError(
            f"{path}: payload has {len(body)} bytes, expected {expected}"
        )
    offset = 0
    meshes = []
    sizing = [] if "sizing" in names else None
    for t in range(steps):
        n = counts[t]
        fields = {}
        for name in names:
            w = _array_width(name, schema)
            arr = np.frombuffer(body, dtype="<f4", count=n * w, offset=offset)
            offset += 4 * n * w
            fields[name] = arr.reshape(n, w).astype(np.float64)
        mesh = SimMesh(
            mesh_pos=fields["mesh_pos"],
            cells=cells_per_step[t],
            node_type=fields["node_type"][:, 0].astype(np.int64),
            world_pos=fields.get("world_pos"),
            quantities=fields.get("quantities"),
        )
        meshes.append(mesh)
        if sizing is not None:
            sizing.append(fields["sizing"])
    return Trajectory(
        schema=schema,
        dt=float(header["dt"]),
        meshes=tuple(meshes),
        sizing=None if sizing is None else tuple(sizing),
    )


# --- datasets ---------------------------------------------------------------


def write_manifest(
    root,
    schema: DomainSchema,
    dt: float,
    files: list,
    splits: dict,
    steps: list,
    mean_edge_length: float,
    domain: str,
    seed: int,
) -> None:
    manifest = {
        "kind": _MANIFEST_KIND,
        "version": 1,
        "schema": schema.to_dict(),
        "dt": float(dt),
        "trajectories": list(files),
        "splits": {k: list(map(int, v)) for k, v in splits.items()},
        "steps_per_trajectory": list(map(int, steps)),
        "mean_edge_length": float(mean_edge_length),
        "domain": domain,
        "seed": int(seed),
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        fh.write(canonical_json(manifest))


@dataclass
class Dataset:
    """A generated dataset directory, with lazy per-trajectory caching."""

    root: str
    schema: DomainSchema
    dt: float
    files: list
    splits: dict
    steps: list
    mean_edge_length: float
    domain: str
    seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def open(cls, root) -> "Dataset":
        path = os.path.join(root, "manifest.json")
        try:
            with open(path) as fh:
                manifest = json.load(fh)
        except OSError as exc:
            raise FormatError(f"cannot read dataset manifest: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad manifest JSON: {exc}") from exc
        if manifest.get("kind") != _MANIFEST_KIND or manifest.get("version") != 1:
            raise FormatError(f"{path}: not a recognized dataset manifest")
        return cls(
            root=str(root),
            schema=schema_from_dict(manifest["schema"]),
            dt=float(manifest["dt"]),
            files=list(manifest["trajectories"]),
            splits={k: list(v) for k, v in manifest["splits"].items()},
            steps=list(manifest["steps_per_trajectory"]),
            mean_edge_length=float(manifest["mean_edge_length"]),
            domain=str(manifest.get("domain", "")),
            seed=int(manifest.get("seed", 0)),
        )

    def __len__(self) -> int:
        return len(self.files)

    def indices(self, split: str) -> list:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])

    def trajectory(self, index: int) -> Trajectory:
        if index not in self._cache:
            path = os.path.join(self.root, self.files[index])
            self._cache[index] = load_trajectory(path)
        return self._cache[index]


# --- training-sample assembly ----------------------------------------------


@dataclass
class TrainSample:
    """One-step supervision pair on a single node set (the step-t mesh)."""

    trajectory_index: int
    step: int
    current: SimMesh
    history: list  # oldest first, length schema.history
    next_world_pos: np.ndarray | None
    next_quantities: np.ndarray | None
    sizing_channels: np.ndarray | None


def sample_range(traj: Trajectory) -> range:
    """Time indices t for which (history, current, next) all exist."""
    return range(traj.schema.history, len(traj) - 1)


def make_sample(
    traj: Trajectory, t: int, trajectory_index: int = -1, locators: dict | None = None
) -> TrainSample:
    """Assemble the supervision pair at step t, interpolating onto mesh t.

    For static-topology trajectories the recorded states are used directly.
    Otherwise each off-step state is evaluated at the step-t node coordinates
    by barycentric interpolation on its own mesh; ``locators`` (step index ->
    TriangleLocator) caches point-location structures across samples.
    """
    schema = traj.schema
    if t not in sample_range(traj):
        raise ValueError(
            f"step {t} not sampleable; need history {schema.history} and a next state"
        )
    current = traj.meshes[t]
    static = traj.static_topology

    def state_at(idx: int) -> SimMesh:
        src = traj.meshes[idx]
        if static:
            return src
        if locators is not None and idx in locators:
            loc = locators[idx]
        else:
            loc = TriangleLocator(src)
            if locators is not None:
                locators[idx] = loc
        cells, weights = loc.locate_many(current.mesh_pos)
        corners = src.cells[cells]
        wp = None
        if src.world_pos is not None:
            wp = np.einsum("qc,qcd->qd", weights, src.world_pos[corners])
        q = None
        if src.quantities.shape[1]:
            q = np.einsum("qc,qcd->qd", weights, src.quantities[corners])
        return current.replace(world_pos=wp, quantities=q)

    history = [state_at(i) for i in range(t - schema.history, t)]
    nxt = state_at(t + 1)
    return TrainSample(
        trajectory_index=trajectory_index,
        step=t,
        current=current,
        history=history,
        next_world_pos=nxt.world_pos,
        next_quantities=nxt.quantities if schema.quantity_width else None,
        sizing_channels=None if traj.sizing is None else traj.sizing[t],
    )
