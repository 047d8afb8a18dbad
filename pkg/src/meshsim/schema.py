"""Domain schemas: what a dataset's meshes contain and what the model predicts.

A schema pins the feature layout (node inputs, edge inputs), the output layout
(which decoder channels are integrated into the state and which are direct
per-node fields), the history depth, the integration order, and the training
noise targets. Built-in schemas cover the synthetic domains; datasets embed a
full schema dict in their manifest so trained models are self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import SchemaError
from .mesh import NUM_NODE_TYPES

__all__ = ["OutputField", "DomainSchema", "builtin_schema", "schema_from_dict", "SCHEMA_NAMES"]


@dataclass(frozen=True)
class OutputField:
    """One contiguous slice of the decoder output vector.

    ``integrate`` selects the state-update path (forward-Euler of the schema's
    order); direct fields bypass integration. ``target`` names what the slice
    updates: "world_pos", "sizing", or a quantity name.
    """

    name: str
    width: int
    integrate: bool
    target: str


@dataclass(frozen=True)
class DomainSchema:
    name: str
    dim_mesh: int
    dim_world: int  # 0 for fixed-domain (Eulerian) systems, 3 for deforming
    history: int  # number of past meshes fed to the model
    integration_order: int  # 1 or 2
    world_radius: float  # 0 disables world edges
    quantities: tuple[tuple[str, int], ...] = ()  # (name, width) per channel group
    outputs: tuple[OutputField, ...] = ()
    noise_scales: tuple[tuple[str, float | None], ...] = ()  # target -> scale, None = auto
    position_blend: float = 0.1  # order-2 noise target blend (1 = pure position form)

    def __post_init__(self):
        if self.integration_order not in (1, 2):
            raise SchemaError(f"integration order must be 1 or 2, got {self.integration_order}")
        if self.integration_order == 2 and self.history < 1:
            raise SchemaError("second-order integration requires history >= 1")
        if self.dim_world not in (0, 3):
            raise SchemaError(f"dim_world must be 0 or 3, got {self.dim_world}")
        if self.world_radius < 0:
            raise SchemaError("world_radius must be >= 0")
        if self.world_radius > 0 and self.dim_world == 0:
            raise SchemaError("world edges require world-space positions")
        names = [f.name for f in self.outputs]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate output field names")
        qnames = {n for n, _ in self.quantities}
        for f in self.outputs:
            if f.target not in ("world_pos", "sizing") and f.target not in qnames:
                raise SchemaError(f"output {f.name!r} targets unknown quantity {f.target!r}")
        for tgt, _ in self.noise_scales:
            if tgt != "world_pos" and tgt not in qnames:
                raise SchemaError(f"noise target {tgt!r} is not a state field")

    # --- derived layout ---------------------------------------------------

    @property
    def lagrangian(self) -> bool:
        return self.dim_world == 3

    @property
    def has_world_edges(self) -> bool:
        return self.lagrangian and self.world_radius > 0

    @property
    def quantity_width(self) -> int:
        return sum(w for _, w in self.quantities)

    def quantity_slice(self, name: str) -> slice:
        off = 0
        for n, w in self.quantities:
            if n == name:
                return slice(off, off + w)
            off += w
        raise SchemaError(f"unknown quantity {name!r}")

    @property
    def node_feature_width(self) -> int:
        w = NUM_NODE_TYPES
        if self.lagrangian:
            w += self.history * self.dim_world  # finite-difference velocity estimates
            w += self.dim_world  # scripted next-step velocity (zero for free nodes)
        else:
            w += self.quantity_width * (1 + self.history)
        return w

    @property
    def mesh_edge_feature_width(self) -> int:
        w = self.dim_mesh + 1
        if self.lagrangian:
            w += self.dim_world + 1
        return w

    @property
    def world_edge_feature_width(self) -> int:
        return (self.dim_world + 1) if self.has_world_edges else 0

    @property
    def output_width(self) -> int:
        return sum(f.width for f in self.outputs)

    def output_slice(self, name: str) -> slice:
        off = 0
        for f in self.outputs:
            if f.name == name:
                return slice(off, off + f.width)
            off += f.width
        raise SchemaError(f"unknown output field {name!r}")

    def noise_scale_for(self, target: str) -> float | None:
        for tgt, s in self.noise_scales:
            if tgt == target:
                return s
        return None

    # --- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim_mesh": self.dim_mesh,
            "dim_world": self.dim_world,
            "history": self.history,
            "integration_order": self.integration_order,
            "world_radius": self.world_radius,
            "quantities": [[n, w] for n, w in self.quantities],
            "outputs": [
                {"name": f.name, "width": f.width, "integrate": f.integrate, "target": f.target}
                for f in self.outputs
            ],
            "noise_scales": [[t, s] for t, s in self.noise_scales],
            "position_blend": self.position_blend,
        }


def schema_from_dict(d: dict) -> DomainSchema:
    try:
        return DomainSchema(
            name=d["name"],
            dim_mesh=int(d["dim_mesh"]),
            dim_world=int(d["dim_world"]),
            history=int(d["history"]),
            integration_order=int(d["integration_order"]),
            world_radius=float(d["world_radius"]),
            quantities=tuple((str(n), int(w)) for n, w in d.get("quantities", [])),
            outputs=tuple(
                OutputField(o["name"], int(o["width"]), bool(o["integrate"]), o["target"])
                for o in d.get("outputs", [])
            ),
            noise_scales=tuple(
                (str(t), None if s is None else float(s))
                for t, s in d.get("noise_scales", [])
            ),
            position_blend=float(d.get("position_blend", 0.1)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed schema dict: {exc}") from exc


def _cloth_base(name: str, world_radius: float, extra_outputs=()) -> DomainSchema:
    return DomainSchema(
        name=name,
        dim_mesh=2,
        dim_world=3,
        history=1,
        integration_order=2,
        world_radius=world_radius,
        quantities=(),
        outputs=(OutputField("acceleration", 3, True, "world_pos"),) + tuple(extra_outputs),
        noise_scales=(("world_pos", None),),
    )


_BUILTINS = {
    "cloth": lambda: _cloth_base("cloth", 0.0),
    "cloth-sizing": lambda: _cloth_base(
        "cloth-sizing", 0.0, [OutputField("sizing", 3, False, "sizing")]
    ),
    "cloth-obstacle": lambda: _cloth_base("cloth-obstacle", 0.1),
    "diffusion": lambda: DomainSchema(
        name="diffusion",
        dim_mesh=2,
        dim_world=0,
        history=0,
        integration_order=1,
        world_radius=0.0,
        quantities=(("q", 1),),
        outputs=(OutputField("dq", 1, True, "q"),),
        noise_scales=(("q", None),),
    ),
}

SCHEMA_NAMES = tuple(sorted(_BUILTINS))


def builtin_schema(name: str, **overrides) -> DomainSchema:
    """Look up a built-in schema by name, optionally overriding fields."""
    if name not in _BUILTINS:
        raise SchemaError(f"unknown schema {name!r}; known: {', '.join(SCHEMA_NAMES)}")
    s = _BUILTINS[name]()
    if overrides:
        d = s.to_dict()
        for k, v in overrides.items():
            if k not in d:
                raise SchemaError(f"unknown schema field {k!r}")
            d[k] = v
        s = schema_from_dict(d)
    return s
