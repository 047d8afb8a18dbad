"""Next-step dynamics model: normalization, network, integration, checkpoints.

The model predicts per-node derivative-like outputs in a normalized space;
``step`` denormalizes them and integrates the state forward (forward Euler
with unit time step, applied once or twice depending on the schema order).
Input and output normalizers collect running statistics online during early
training and are frozen before any checkpoint is written, so a loaded model
is always in a deterministic inference-ready state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoding import MultiGraph, encode_features
from .errors import FormatError, MeshSimError, SchemaError, StateError
from .mesh import NodeType, SimMesh, canonical_json
from .nn import GraphNet, NetCache
from .schema import DomainSchema, schema_from_dict

__all__ = [
    "VAR_FLOOR",
    "MAX_ACCUMULATE",
    "Normalizer",
    "Model",
    "build_model",
    "integrate",
    "predict",
    "step",
    "save_checkpoint",
    "load_checkpoint",
]

VAR_FLOOR = 1e-8  # variance floor; constant channels normalize to zero safely
MAX_ACCUMULATE = 1_000_000  # feature rows accumulated before auto-freeze

_SCRIPTED = (int(NodeType.KINEMATIC), int(NodeType.OBSTACLE))


class Normalizer:
    """Running per-channel mean/variance with a freeze point.

    Statistics accumulate via Welford-style batch merges until either
    ``max_accumulate`` rows were seen or :meth:`freeze` is called; after that
    they are immutable. With no data, normalize is the identity.
    """

    def __init__(self, width: int, max_accumulate: int = MAX_ACCUMULATE):
        self.width = width
        self.max_accumulate = max_accumulate
        self.count = 0
        self._mean = np.zeros(width)
        self._m2 = np.zeros(width)
        self.frozen = False

    def accumulate(self, rows: np.ndarray) -> None:
        if self.frozen:
            raise StateError("normalizer is frozen; cannot accumulate")
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.width:
            raise SchemaError(
                f"normalizer expects rows of width {self.width}, got {rows.shape}"
            )
        nb = rows.shape[0]
        if nb == 0:
            return
        mean_b = rows.mean(axis=0)
        m2_b = ((rows - mean_b) ** 2).sum(axis=0)
        delta = mean_b - self._mean
        total = self.count + nb
        self._mean = self._mean + delta * (nb / total)
        self._m2 = self._m2 + m2_b + delta * delta * (self.count * nb / total)
        self.count = total
        if self.count >= self.max_accumulate:
            self.frozen = True

    def freeze(self) -> None:
        self.frozen = True

    @property
    def mean(self) -> np.ndarray:
        return self._mean if self.count > 0 else np.zeros(self.width)

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.width)
        return np.sqrt(np.maximum(self._m2 / self.count, VAR_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "max_accumulate": self.max_accumulate,
            "count": self.count,
            "mean": self._mean.tolist(),
            "m2": self._m2.tolist(),
            "frozen": self.frozen,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        n = cls(int(d["width"]), int(d["max_accumulate"]))
        n.count = int(d["count"])
        n._mean = np.asarray(d["mean"], dtype=np.float64)
        n._m2 = np.asarray(d["m2"], dtype=np.float64)
        n.frozen = bool(d["frozen"])
        return n


@dataclass
class Model:
    """Trainable dynamics model: schema + network + normalizers."""

    schema: DomainSchema
    net: GraphNet
    node_norm: Normalizer
    mesh_norm: Normalizer
    world_norm: Normalizer | None
    out_norm: Normalizer

    @property
    def frozen(self) -> bool:
        norms = [self.node_norm, self.mesh_norm, self.out_norm]
        if self.world_norm is not None:
            norms.append(self.world_norm)
        return all(n.frozen for n in norms)

    def freeze_normalizers(self) -> None:
        for n in (self.node_norm, self.mesh_norm, self.world_norm, self.out_norm):
            if n is not None:
                n.freeze()

    def accumulate_input_stats(self, graph: MultiGraph) -> None:
        """Feed one encoded sample into the input normalizers (pre-freeze)."""
        if not self.node_norm.frozen:
            self.node_norm.accumulate(graph.node_features)
        if not self.mesh_norm.frozen:
            self.mesh_norm.accumulate(graph.mesh_edge_features)
        if self.world_norm is not None and not self.world_norm.frozen:
            self.world_norm.accumulate(graph.world_edge_features)

    def normalized_arrays(self, graph: MultiGraph):
        node_x = self.node_norm.normalize(graph.node_features)
        mesh_x = self.mesh_norm.normalize(graph.mesh_edge_features)
        world_x = None
        if self.world_norm is not None:
            world_x = self.world_norm.normalize(graph.world_edge_features)
        return node_x, mesh_x, world_x


def build_model(schema: DomainSchema, width: int, blocks: int, seed: int = 0) -> Model:
    """Fresh model with Glorot-initialized weights and empty normalizers."""
    net = GraphNet(
        node_in=schema.node_feature_width,
        mesh_in=schema.mesh_edge_feature_width,
        out_width=schema.output_width,
        width=width,
        blocks=blocks,
        world_in=schema.world_edge_feature_width if schema.has_world_edges else None,
    )
    net.init_glorot(np.random.default_rng(seed))
    return Model(
        schema=schema,
        net=net,
        node_norm=Normalizer(schema.node_feature_width),
        mesh_norm=Normalizer(schema.mesh_edge_feature_width),
        world_norm=(
            Normalizer(schema.world_edge_feature_width) if schema.has_world_edges else None
        ),
        out_norm=Normalizer(schema.output_width),
    )


def _forward(
    model: Model,
    current: SimMesh,
    history: list[SimMesh],
    scripted_next: np.ndarray | None,
    allow_unfrozen: bool,
) -> tuple[np.ndarray, NetCache, MultiGraph]:
    if not allow_unfrozen and not model.frozen:
        raise StateError("normalizers are not frozen; freeze or train first")
    graph = encode_features(current, history, model.schema, scripted_next)
    node_x, mesh_x, world_x = model.normalized_arrays(graph)
    out, cache = model.net.forward(
        node_x, graph.mesh_edges, mesh_x, graph.world_edges, world_x
    )
    return out, cache, graph


def predict(
    model: Model,
    current: SimMesh,
    history: list[SimMesh],
    scripted_next: np.ndarray | None = None,
    allow_unfrozen: bool = False,
) -> np.ndarray:
    """Per-node decoded outputs in normalized output space."""
    out, _, _ = _forward(model, current, history, scripted_next, allow_unfrozen)
    return out


def integrate(
    q_t: np.ndarray,
    q_tm1: np.ndarray | None,
    p: np.ndarray,
    order: int,
) -> np.ndarray:
    """Forward-Euler update with unit time step, applied ``order`` times."""
    if order == 1:
        return p + q_t
    if order == 2:
        if q_tm1 is None:
            raise SchemaError("second-order integration requires the previous state")
        return p + 2.0 * q_t - q_tm1
    raise SchemaError(f"unsupported integration order {order}")


def step(
    model: Model,
    current: SimMesh,
    history: list[SimMesh],
    scripted_next: np.ndarray | None = None,
    denormalized: np.ndarray | None = None,
) -> SimMesh:
    """Advance one time step; returns the next mesh on the same topology.

    NORMAL nodes follow the integrated (or directly assigned) model outputs;
    KINEMATIC/OBSTACLE nodes follow ``scripted_next`` when provided and hold
    their state otherwise. Sizing-typed outputs do not alter the mesh.
    ``denormalized`` lets a caller that already ran the network (e.g. to read
    a sizing head) pass the raw-unit outputs in, skipping a second forward.
    """
    schema = model.schema
    if denormalized is None:
        out, _, _ = _forward(model, current, history, scripted_next, False)
        denorm = model.out_norm.denormalize(out)
    else:
        denorm = np.asarray(denormalized, dtype=np.float64)
        if denorm.shape != (current.node_count, schema.output_width):
            raise MeshSimError(
                f"denormalized outputs have shape {denorm.shape}, expected "
                f"({current.node_count}, {schema.output_width})"
            )
    normal = current.node_type == int(NodeType.NORMAL)
    scripted = np.isin(current.node_type, _SCRIPTED)

    world_pos = None if current.world_pos is None else current.world_pos.copy()
    quantities = current.quantities.copy()
    prev = history[-1] if history else None

    for f in schema.outputs:
        sl = schema.output_slice(f.name)
        val = denorm[:, sl]
        if f.target == "sizing":
            continue
        if f.target == "world_pos":
            prev_wp = prev.world_pos if (prev is not None and schema.integration_order == 2) else None
            nxt = integrate(current.world_pos, prev_wp, val, schema.integration_order)
            world_pos[normal] = nxt[normal]
        else:
            qsl = schema.quantity_slice(f.target)
            if f.integrate:
                prev_q = (
                    prev.quantities[:, qsl]
                    if (prev is not None and schema.integration_order == 2)
                    else None
                )
                nxt = integrate(
                    current.quantities[:, qsl], prev_q, val, schema.integration_order
                )
            else:
                nxt = val
            quantities[np.ix_(normal, range(qsl.start, qsl.stop))] = nxt[normal]

    if world_pos is not None and scripted_next is not None:
        scripted_next = np.asarray(scripted_next, dtype=np.float64)
        world_pos[scripted] = scripted_next[scripted]
    return current.replace(world_pos=world_pos, quantities=quantities)


# --- checkpoint files -----------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Write header JSON + little-endian f64 parameter block.

    Freezes the normalizers first: a stored model must be inference-ready,
    and repeated save/load/save must be byte-identical.
    """
    model.freeze_normalizers()
    header = {
        "kind": "meshsim-checkpoint",
        "version": 1,
        "schema": model.schema.to_dict(),
        "width": model.net.width,
        "blocks": model.net.blocks,
        "tensors": [[name, list(shape)] for name, shape, _ in model.net.layout],
        "param_count": model.net.n_params,
        "normalizers": {
            "node": model.node_norm.to_dict(),
            "mesh_edge": model.mesh_norm.to_dict(),
            "world_edge": None if model.world_norm is None else model.world_norm.to_dict(),
            "output": model.out_norm.to_dict(),
        },
    }
    with open(path, "wb") as fh:
        fh.write(canonical_json(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(model.net.flat, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n")
    if sep < 0:
        raise FormatError(f"{path}: missing checkpoint header terminator")
    try:
        header = json.loads(blob[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from exc
    if header.get("kind") != "meshsim-checkpoint" or header.get("version") != 1:
        raise FormatError(f"{path}: not a recognized checkpoint file")
    schema = schema_from_dict(header["schema"])
    count = int(header["param_count"])
    body = blob[sep + 1 :]
    if len(body) != 8 * count:
        raise FormatError(
            f"{path}: parameter block has {len(body)} bytes, expected {8 * count}"
        )
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    net = GraphNet(
        node_in=schema.node_feature_width,
        mesh_in=schema.mesh_edge_feature_width,
        out_width=schema.output_width,
        width=int(header["width"]),
        blocks=int(header["blocks"]),
        world_in=schema.world_edge_feature_width if schema.has_world_edges else None,
        flat=flat,
    )
    declared = [(n, tuple(s)) for n, s in header["tensors"]]
    actual = [(n, tuple(s)) for n, s, _ in net.layout]
    if declared != actual:
        raise FormatError(f"{path}: tensor layout does not match this schema/size")
    norms = header["normalizers"]
    return Model(
        schema=schema,
        net=net,
        node_norm=Normalizer.from_dict(norms["node"]),
        mesh_norm=Normalizer.from_dict(norms["mesh_edge"]),
        world_norm=(
            None if norms["world_edge"] is None else Normalizer.from_dict(norms["world_edge"])
        ),
        out_norm=Normalizer.from_dict(norms["output"]),
    )
