"""Iterative model rollout, optional in-loop remeshing, and trajectory RMSE.

A rollout starts from a recorded trajectory: the first ``history`` states
seed the model, and each subsequent state is the model's own prediction fed
back in.  Scripted (kinematic/obstacle) nodes keep following the recorded
motion.  Three mesh policies are supported:

- ``none``: topology stays fixed at the starting mesh.
- ``learned-sizing``: the model's sizing head drives the remesher each step;
  history states are re-interpolated onto every new mesh.
- ``ground-truth-mesh``: predictions are carried along the recorded mesh
  sequence, isolating the dynamics model from remeshing decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, MeshSimError
from .interpolate import TriangleLocator
from .mesh import NodeType, SimMesh, canonical_json, export_obj
from .model import Model, predict, step
from .remesh import remesh
from .sizing import decode_sizing
from .trajectory import Trajectory

ROLLOUT_MODES = ("none", "learned-sizing", "ground-truth-mesh")

_SCRIPTED = (int(NodeType.KINEMATIC), int(NodeType.OBSTACLE))


# --- state transfer between meshes ------------------------------------------


def _same_nodes(a: SimMesh, b: SimMesh) -> bool:
    return a.mesh_pos.shape == b.mesh_pos.shape and np.array_equal(a.mesh_pos, b.mesh_pos)


class _Interp:
    """Caches the point location of one query set in one source mesh."""

    def __init__(self, src: SimMesh, points: np.ndarray):
        loc = TriangleLocator(src)
        cells, self.weights = loc.locate_many(points)
        self.corners = src.cells[cells]

    def field(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("qc,qcd->qd", self.weights, values[self.corners])

    def state(self, src: SimMesh, onto: SimMesh) -> SimMesh:
        changes = {}
        if src.world_pos is not None:
            changes["world_pos"] = self.field(src.world_pos)
        if src.quantities.shape[1]:
            changes["quantities"] = self.field(src.quantities)
        return onto.replace(**changes) if changes else onto


def _finite_state(mesh: SimMesh) -> bool:
    if mesh.world_pos is not None and not np.all(np.isfinite(mesh.world_pos)):
        return False
    return bool(np.all(np.isfinite(mesh.quantities)))


# --- rollout ----------------------------------------------------------------


@dataclass
class RolloutResult:
    """Predicted trajectory aligned with the truth window starting at ``start``."""

    trajectory: Trajectory
    start: int  # truth index of the shared initial state (= model history)
    failed_step: int | None = None  # rollout step where a non-finite state appeared


def _model_one_step(model: Model):
    """Default stepper: one network evaluation yields the next state and,
    when the schema has a sizing head, the decoded per-node sizing tensors."""
    sizing_field = next((f for f in model.schema.outputs if f.target == "sizing"), None)

    def one_step(current, history, scripted_next):
        out = predict(model, current, history, scripted_next)
        denorm = model.out_norm.denormalize(out)
        nxt = step(model, current, history, scripted_next, denormalized=denorm)
        sizing = None
        # skip decoding on a non-finite prediction; the caller truncates
        if sizing_field is not None and np.all(np.isfinite(denorm)):
            sl = model.schema.output_slice(sizing_field.name)
            sizing = decode_sizing(denorm[:, sl])
        return nxt, sizing

    return one_step


def rollout(
    model: Model,
    traj: Trajectory,
    steps: int | None = None,
    remesh_mode: str = "none",
    one_step=None,
) -> RolloutResult:
    """Roll the model forward from the start of a recorded trajectory.

    The result trajectory holds ``steps + 1`` states; state 0 is the recorded
    state at index ``history`` and state k corresponds in time to truth index
    ``history + k``.  A non-finite prediction truncates the rollout and sets
    ``failed_step``.  ``one_step(current, history, scripted_next) -> (next
    state, sizing tensors | None)`` may replace the model evaluation.
    """
    if remesh_mode not in ROLLOUT_MODES:
        raise ConfigError(f"remesh_mode must be one of {ROLLOUT_MODES}, got {remesh_mode!r}")
    schema = model.schema
    h = schema.history
    avail = len(traj) - 1 - h
    if avail < 0:
        raise ConfigError(
            f"trajectory has {len(traj)} states, fewer than history {h} plus one"
        )
    if steps is None:
        steps = avail
    if not 0 <= steps <= avail:
        raise ConfigError(f"steps must be in [0, {avail}], got {steps}")
    if remesh_mode == "learned-sizing" and not any(
        f.target == "sizing" for f in schema.outputs
    ):
        raise ConfigError("learned-sizing rollout needs a model with a sizing output")
    if one_step is None:
        one_step = _model_one_step(model)

    current = traj.meshes[h]
    history = []
    for i in range(h):
        src = traj.meshes[i]
        if _same_nodes(src, current):
            history.append(current.replace(world_pos=src.world_pos, quantities=src.quantities))
        else:
            history.append(_Interp(src, current.mesh_pos).state(src, current))

    truth_loc: dict[int, TriangleLocator] = {}

    def scripted_targets(t_next: int, mesh: SimMesh) -> np.ndarray | None:
        if mesh.world_pos is None:
            return None
        scripted = np.isin(mesh.node_type, _SCRIPTED)
        if not scripted.any():
            return None
        src = traj.meshes[t_next]
        if _same_nodes(src, mesh):
            return src.world_pos
        if t_next not in truth_loc:
            truth_loc[t_next] = TriangleLocator(src)
        cells, weights = truth_loc[t_next].locate_many(mesh.mesh_pos[scripted])
        corners = src.cells[cells]
        vals = np.einsum("qc,qcd->qd", weights, src.world_pos[corners])
        full = np.zeros((mesh.node_count, 3))
        full[scripted] = vals
        return full

    states = [current]
    failed_step = None
    for k in range(steps):
        t = h + k
        scripted_next = scripted_targets(t + 1, current)
        nxt, sizing = one_step(current, history, scripted_next)
        if not _finite_state(nxt):
            failed_step = k + 1
            break
        carried = (history + [current])[-h:] if h else []

        if remesh_mode == "learned-sizing":
            if sizing is None:
                raise ConfigError("stepper returned no sizing field for learned-sizing mode")
            new_mesh = remesh(nxt, sizing).mesh
            if _same_nodes(new_mesh, nxt):
                history = carried
            else:
                interp = _Interp(nxt, new_mesh.mesh_pos)
                history = [interp.state(m, new_mesh) for m in carried]
            current = new_mesh
        elif remesh_mode == "ground-truth-mesh":
            tm = traj.meshes[t + 1]
            if _same_nodes(nxt, tm):
                history = carried
                current = tm.replace(world_pos=nxt.world_pos, quantities=nxt.quantities)
            else:
                interp = _Interp(nxt, tm.mesh_pos)
                history = [interp.state(m, tm) for m in carried]
                current = interp.state(nxt, tm)
        else:
            history = carried
            current = nxt
        states.append(current)

    return RolloutResult(
        trajectory=Trajectory(traj.schema, traj.dt, tuple(states)),
        start=h,
        failed_step=failed_step,
    )


def truth_window(traj: Trajectory, start: int, steps: int) -> Trajectory:
    """The recorded states a rollout of ``steps`` from ``start`` is scored against."""
    if start < 0 or steps < 0 or start + steps > len(traj) - 1:
        raise ConfigError(f"window [{start}, {start + steps}] outside trajectory")
    return Trajectory(traj.schema, traj.dt, traj.meshes[start : start + steps + 1])


# --- metrics ----------------------------------------------------------------


def step_errors(pred: Trajectory, truth: Trajectory) -> np.ndarray:
    """Per-step mean squared error of the metric field, one entry per step.

    The metric field is world position for deforming systems and the carried
    quantities otherwise.  Predictions on a different mesh are interpolated
    onto the truth mesh in mesh space before differencing.
    """
    if len(pred) != len(truth):
        raise MeshSimError(
            f"trajectories are not time-aligned: {len(pred)} vs {len(truth)} states"
        )
    if abs(pred.dt - truth.dt) > 1e-12 * max(1.0, abs(truth.dt)):
        raise MeshSimError(f"time step mismatch: {pred.dt} vs {truth.dt}")
    lagrangian = truth.schema.lagrangian
    if pred.schema.lagrangian != lagrangian:
        raise MeshSimError("trajectories carry different metric fields")
    out = []
    for k in range(1, len(truth)):
        pm, tm = pred.meshes[k], truth.meshes[k]
        pv = pm.world_pos if lagrangian else pm.quantities
        tv = tm.world_pos if lagrangian else tm.quantities
        if tv.shape[1] == 0:
            raise MeshSimError("truth trajectory has no metric field to score")
        if not _same_nodes(pm, tm):
            pv = _Interp(pm, tm.mesh_pos).field(pv)
        d = pv - tv
        out.append(float(np.mean(d * d)))
    return np.array(out)


def rmse(pred: Trajectory, truth: Trajectory, horizon: int | None = None) -> float:
    """Root mean squared error over the first ``horizon`` steps (all if None).

    Averages squared errors over coordinates, nodes and steps, then takes the
    root; a horizon beyond the available steps is clamped.
    """
    ms = step_errors(pred, truth)
    if ms.size == 0:
        raise MeshSimError("need at least one step beyond the initial state")
    if horizon is None:
        horizon = ms.size
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    return float(math.sqrt(np.mean(ms[: min(horizon, ms.size)])))


def metrics_summary(pred: Trajectory, truth: Trajectory) -> dict:
    """The standard report: RMSE at horizons 1, 50 and the full length."""
    ms = step_errors(pred, truth)
    if ms.size == 0:
        raise MeshSimError("need at least one step beyond the initial state")

    def head(n):
        return float(math.sqrt(np.mean(ms[: min(n, ms.size)])))

    return {"rmse_1": head(1), "rmse_50": head(50), "rmse_all": head(ms.size)}


def write_metrics(out_dir, pred: Trajectory, truth: Trajectory) -> dict:
    """Write metrics.json and per-step step_errors.csv; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = metrics_summary(pred, truth)
    ms = step_errors(pred, truth)
    (out / "metrics.json").write_text(canonical_json(summary) + "\n")
    with open(out / "step_errors.csv", "w") as f:
        f.write("step,rmse\n")
        for k, v in enumerate(ms, start=1):
            f.write(f"{k},{math.sqrt(v):.10e}\n")
    return summary


def export_obj_sequence(traj: Trajectory, out_dir, prefix: str = "step") -> list:
    """Write one OBJ file per state; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, mesh in enumerate(traj.meshes):
        path = out / f"{prefix}_{k:05d}.obj"
        export_obj(mesh, path)
        paths.append(path)
    return paths
