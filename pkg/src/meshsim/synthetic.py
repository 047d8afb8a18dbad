"""Built-in classical solvers and dataset generation.

Two ground-truth generators at desk scale: a mass-spring cloth sheet
(semi-implicit Euler, pinned nodes, optional moving repulsor) and scalar
diffusion on a fixed mesh with Dirichlet boundary nodes. Both are
deterministic functions of (state, params), so datasets regenerate
byte-identically from a seed.

Domains:
  cloth-spring          pinned sheet under gravity + random wind, fixed mesh
  cloth-spring-dynamic  same physics, remeshed every output step from a
                        strain-driven sizing field (labels recorded)
  cloth-spring-obstacle sheet plus a scripted moving cap that repels nearby
                        nodes; exercises world edges
  diffusion             scalar field relaxing toward the harmonic solution
                        of random boundary values
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MeshSimError
from .mesh import NodeType, SimMesh, boundary_edges, derive_edges, make_mesh
from .remesh import remesh
from .schema import builtin_schema
from .trajectory import Trajectory, save_trajectory, write_manifest

__all__ = [
    "ClothParams",
    "cloth_spring_step",
    "cloth_energy",
    "diffusion_exchange",
    "diffusion_step",
    "strain_sizing",
    "grid_mesh",
    "flag_mesh",
    "DOMAINS",
    "generate_dataset",
]

_SCRIPTED = (int(NodeType.KINEMATIC), int(NodeType.OBSTACLE))


# --- meshes -----------------------------------------------------------------


def grid_mesh(nx: int, ny: int, node_type=None) -> SimMesh:
    """Unit-square triangulated grid with alternating diagonals."""
    xs = np.linspace(0.0, 1.0, nx)
    ys = np.linspace(0.0, 1.0, ny)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    cells = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            c = a + 1
            d = b + 1
            if (i + j) % 2 == 0:
                cells += [[a, b, d], [a, d, c]]
            else:
                cells += [[a, b, c], [b, d, c]]
    return make_mesh(pts, cells, node_type=node_type)


def flag_mesh(n: int = 8) -> SimMesh:
    """Vertical cloth sheet with its left column pinned (KINEMATIC).

    Mesh space (a, b) maps to world (a, 0, b), so the rest state is flat in
    the y=0 plane and mesh-space edge lengths are the spring rest lengths.
    """
    base = grid_mesh(n, n)
    types = np.zeros(base.node_count, dtype=np.int64)
    types[base.mesh_pos[:, 0] == 0.0] = int(NodeType.KINEMATIC)
    world = np.column_stack(
        [base.mesh_pos[:, 0], np.zeros(base.node_count), base.mesh_pos[:, 1]]
    )
    return base.replace(node_type=types, world_pos=world)


# --- cloth solver -----------------------------------------------------------


@dataclass
class ClothParams:
    stiffness: float = 30.0
    damping: float = 0.3
    gravity: tuple = (0.0, 0.0, -0.5)
    wind: tuple = (0.0, 0.0, 0.0)
    dt: float = 1.0 / 16.0
    substeps: int = 1
    repulsion_radius: float = 0.0
    repulsion_stiffness: float = 0.0


def cloth_spring_step(
    mesh: SimMesh,
    velocity: np.ndarray,
    params: ClothParams,
    scripted_target: np.ndarray | None = None,
):
    """Advance one output step (``substeps`` semi-implicit Euler substeps).

    Springs sit on mesh edges with rest length equal to the mesh-space edge
    length. Scripted nodes move linearly toward ``scripted_target`` (or hold
    still). Returns (next mesh, next velocity).

    With the default ``substeps=1`` the returned velocity is exactly
    (x_next - x) / dt, so two consecutive frames carry the full solver
    state and the frame-to-frame map is learnable from position history
    alone.
    """
    edges = derive_edges(mesh)
    rest = np.linalg.norm(
        mesh.mesh_pos[edges[:, 0]] - mesh.mesh_pos[edges[:, 1]], axis=1
    )
    x = mesh.world_pos.copy()
    v = np.asarray(velocity, dtype=np.float64).copy()
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise MeshSimError("cloth solver state is not finite")
    scripted = np.isin(mesh.node_type, _SCRIPTED)
    if scripted_target is None:
        v_scripted = np.zeros((int(scripted.sum()), 3))
    else:
        span = params.dt * params.substeps
        v_scripted = (np.asarray(scripted_target, float)[scripted] - x[scripted]) / span
    obstacle = mesh.node_type == int(NodeType.OBSTACLE)
    normal = mesh.node_type == int(NodeType.NORMAL)
    ext = np.asarray(params.gravity, float) + np.asarray(params.wind, float)

    e0, e1 = edges[:, 0], edges[:, 1]
    for _ in range(params.substeps):
        d = x[e1] - x[e0]
        length = np.linalg.norm(d, axis=1)
        # rest lengths are positive, so length stays bounded away from 0
        stretch = params.stiffness * (length - rest) / np.maximum(length, 1e-12)
        fe = stretch[:, None] * d
        f = np.zeros_like(x)
        np.add.at(f, e0, fe)
        np.add.at(f, e1, -fe)
        f += ext - params.damping * v
        if params.repulsion_radius > 0.0 and obstacle.any():
            f += _repulsion(
                x, normal, obstacle, params.repulsion_radius, params.repulsion_stiffness
            )
        v = v + params.dt * f
        v[scripted] = v_scripted
        x = x + params.dt * v
    if not np.all(np.isfinite(x)):
        raise MeshSimError("cloth solver diverged to non-finite positions")
    return mesh.replace(world_pos=x), v


def _repulsion(x, normal, obstacle, radius, stiffness):
    f = np.zeros_like(x)
    xi = x[normal]  # (p, 3)
    xo = x[obstacle]  # (q, 3)
    d = xi[:, None, :] - xo[None, :, :]
    dist = np.linalg.norm(d, axis=2)
    close = (dist < radius) & (dist > 1e-12)
    if not close.any():
        return f
    push = np.where(close, stiffness * (radius - dist) / np.maximum(dist, 1e-12), 0.0)
    f[normal] = np.einsum("pq,pqd->pd", push, d)
    return f


def cloth_energy(mesh: SimMesh, velocity: np.ndarray, params: ClothParams) -> float:
    """Kinetic + spring + gravitational energy (unit masses)."""
    edges = derive_edges(mesh)
    rest = np.linalg.norm(
        mesh.mesh_pos[edges[:, 0]] - mesh.mesh_pos[edges[:, 1]], axis=1
    )
    length = np.linalg.norm(
        mesh.world_pos[edges[:, 0]] - mesh.world_pos[edges[:, 1]], axis=1
    )
    kinetic = 0.5 * float(np.sum(velocity**2))
    spring = 0.5 * params.stiffness * float(np.sum((length - rest) ** 2))
    potential = -float((mesh.world_pos @ np.asarray(params.gravity, float)).sum())
    return kinetic + spring + potential


# --- diffusion solver -------------------------------------------------------


def diffusion_exchange(
    q: np.ndarray, edges: np.ndarray, node_type: np.ndarray, alpha: float
) -> np.ndarray:
    """One explicit exchange step q_i += alpha * sum_j (q_j - q_i).

    Only NORMAL nodes update; all other types hold their values (Dirichlet).
    Raises ConfigError when alpha * max_degree >= 1 (explicit-step stability).
    """
    q = np.asarray(q, dtype=np.float64)
    squeeze = q.ndim == 1
    if squeeze:
        q = q[:, None]
    n = q.shape[0]
    e0, e1 = edges[:, 0], edges[:, 1]
    degree = np.bincount(e0, minlength=n) + np.bincount(e1, minlength=n)
    if degree.size and alpha * degree.max() >= 1.0:
        raise ConfigError(
            f"unstable diffusion: alpha*max_degree = {alpha * degree.max():.3f} >= 1"
        )
    out = q.copy()
    normal = np.asarray(node_type) == int(NodeType.NORMAL)
    for c in range(q.shape[1]):
        flow = q[e1, c] - q[e0, c]
        delta = np.bincount(e0, weights=flow, minlength=n) - np.bincount(
            e1, weights=flow, minlength=n
        )
        out[normal, c] += alpha * delta[normal]
    return out[:, 0] if squeeze else out


def diffusion_step(mesh: SimMesh, alpha: float) -> SimMesh:
    q = diffusion_exchange(mesh.quantities, derive_edges(mesh), mesh.node_type, alpha)
    return mesh.replace(quantities=q)


# --- strain-driven sizing (dynamic-mesh variant) ----------------------------


def strain_sizing(
    mesh: SimMesh,
    base_len: float,
    strain_ref: float = 0.02,
    tighten: float = 0.6,
    relax: float = 1.6,
) -> np.ndarray:
    """Isotropic per-node sizing from spring strain: stretched regions ask
    for shorter edges, slack regions for longer ones.

    Returns (n, 3) channels (s11, s12, s22) with s = 1/len_i^2 on the
    diagonal, where len_i = base_len * clip(strain_ref / strain_i, tighten,
    relax).
    """
    edges = derive_edges(mesh)
    rest = np.linalg.norm(
        mesh.mesh_pos[edges[:, 0]] - mesh.mesh_pos[edges[:, 1]], axis=1
    )
    length = np.linalg.norm(
        mesh.world_pos[edges[:, 0]] - mesh.world_pos[edges[:, 1]], axis=1
    )
    strain = np.abs(length / rest - 1.0)
    node_strain = np.zeros(mesh.node_count)
    np.maximum.at(node_strain, edges[:, 0], strain)
    np.maximum.at(node_strain, edges[:, 1], strain)
    ratio = strain_ref / np.maximum(node_strain, 1e-9)
    target = base_len * np.clip(ratio, tighten, relax)
    s = 1.0 / target**2
    out = np.zeros((mesh.node_count, 3))
    out[:, 0] = s
    out[:, 2] = s
    return out


def _sizing_tensors(channels: np.ndarray) -> np.ndarray:
    s = np.zeros((channels.shape[0], 2, 2))
    s[:, 0, 0] = channels[:, 0]
    s[:, 0, 1] = channels[:, 1]
    s[:, 1, 0] = channels[:, 1]
    s[:, 1, 1] = channels[:, 2]
    return s


# --- dataset generation -----------------------------------------------------

DOMAINS = ("cloth-spring", "cloth-spring-dynamic", "cloth-spring-obstacle", "diffusion")


def _splits(n: int) -> dict:
    hold = n // 12  # 10:1:1 train/valid/test ratio
    train = n - 2 * hold
    return {
        "train": list(range(train)),
        "valid": list(range(train, train + hold)),
        "test": list(range(train + hold, n)),
    }


def _mean_edge_length(mesh: SimMesh) -> float:
    edges = derive_edges(mesh)
    return float(
        np.linalg.norm(mesh.mesh_pos[edges[:, 0]] - mesh.mesh_pos[edges[:, 1]], axis=1).mean()
    )


def _random_wind(rng) -> np.ndarray:
    direction = rng.normal(size=3)
    direction[1] = abs(direction[1]) + 1.0  # mostly out-of-plane
    direction /= np.linalg.norm(direction)
    return rng.uniform(0.1, 0.4) * direction


# Unrecorded frames before each cloth recording starts. The cloth is then
# already falling and swinging, so the per-trajectory wind is identifiable
# from any recorded frame pair instead of only from later ones.
_BURN_IN = 32


def _gen_cloth(rng, n_steps: int, grid: int) -> Trajectory:
    mesh = flag_mesh(grid)
    params = ClothParams(wind=tuple(_random_wind(rng)))
    velocity = np.zeros((mesh.node_count, 3))
    for _ in range(_BURN_IN):
        mesh, velocity = cloth_spring_step(mesh, velocity, params)
    meshes = [mesh]
    for _ in range(n_steps):
        mesh, velocity = cloth_spring_step(mesh, velocity, params)
        meshes.append(mesh)
    return Trajectory(
        schema=builtin_schema("cloth"), dt=params.dt * params.substeps, meshes=meshes
    )


def _gen_cloth_dynamic(rng, n_steps: int, grid: int) -> Trajectory:
    base = flag_mesh(grid)
    base_len = _mean_edge_length(base)
    params = ClothParams(wind=tuple(_random_wind(rng)))
    mesh = base
    velocity = np.zeros((mesh.node_count, 3))
    meshes, labels = [], []
    for t in range(-_BURN_IN, n_steps + 1):
        sizing = strain_sizing(mesh, base_len)
        if t >= 0:
            meshes.append(mesh)
            labels.append(sizing)
        if t == n_steps:
            break
        stepped, velocity = cloth_spring_step(mesh, velocity, params)
        # carry velocity through the remesher as a transferred attribute
        carrier = stepped.replace(quantities=velocity)
        result = remesh(carrier, _sizing_tensors(sizing))
        velocity = result.mesh.quantities.copy()
        mesh = result.mesh.replace(quantities=np.zeros((result.mesh.node_count, 0)))
    return Trajectory(
        schema=builtin_schema("cloth-sizing"),
        dt=params.dt * params.substeps,
        meshes=meshes,
        sizing=labels,
    )


def _cap_mesh(rng):
    """Scripted repulsor: a spherical-cap point patch, charted off to the side
    of the cloth in mesh space so the two components never overlap."""
    k = 5
    a, b = np.meshgrid(np.linspace(0, 1, k), np.linspace(0, 1, k), indexing="ij")
    chart = np.stack([2.0 + a * 0.6, b * 0.6], axis=-1).reshape(-1, 2)
    cells = []
    for i in range(k - 1):
        for j in range(k - 1):
            p = i * k + j
            q = (i + 1) * k + j
            cells += [[p, q, q + 1], [p, q + 1, p + 1]]
    types = np.full(k * k, int(NodeType.OBSTACLE), dtype=np.int64)
    alpha = (0.15 + 0.85 * a) * (np.pi / 3.0)
    beta = b * 2.0 * np.pi
    radius = 0.15
    local = np.stack(
        [
            np.sin(alpha) * np.cos(beta),
            -np.cos(alpha),
            np.sin(alpha) * np.sin(beta),
        ],
        axis=-1,
    ).reshape(-1, 3)
    return make_mesh(chart, cells, node_type=types), radius * local


def _gen_cloth_obstacle(rng, n_steps: int, grid: int) -> Trajectory:
    cloth = flag_mesh(grid)
    cap, cap_local = _cap_mesh(rng)
    n_cloth = cloth.node_count
    mesh_pos = np.vstack([cloth.mesh_pos, cap.mesh_pos])
    cells = np.vstack([cloth.cells, cap.cells + n_cloth])
    types = np.concatenate([cloth.node_type, cap.node_type])

    center0 = np.array([rng.uniform(0.3, 0.7), 0.45, rng.uniform(0.3, 0.7)])
    amp = rng.uniform(0.25, 0.35)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    period = 50.0

    def cap_world(t):
        y = amp * np.sin(2.0 * np.pi * t / period + phase)
        return center0 + np.array([0.0, -abs(y), 0.0]) + cap_local

    world = np.vstack([cloth.world_pos, cap_world(0)])
    mesh = make_mesh(mesh_pos, cells, node_type=types, world_pos=world)
    params = ClothParams(
        wind=tuple(_random_wind(rng)),
        repulsion_radius=0.1,
        repulsion_stiffness=80.0,
    )
    velocity = np.zeros((mesh.node_count, 3))
    meshes = [mesh]
    for t in range(n_steps):
        target = mesh.world_pos.copy()
        target[n_cloth:] = cap_world(t + 1)
        mesh, velocity = cloth_spring_step(mesh, velocity, params, scripted_target=target)
        meshes.append(mesh)
    return Trajectory(
        schema=builtin_schema("cloth-obstacle"),
        dt=params.dt * params.substeps,
        meshes=meshes,
    )


def _gen_diffusion(rng, n_steps: int, grid: int) -> Trajectory:
    base = grid_mesh(grid, grid)
    btypes = np.zeros(base.node_count, dtype=np.int64)
    bnodes = np.unique(boundary_edges(base))
    btypes[bnodes] = int(NodeType.INFLOW)

    # random smooth boundary profile + interior bumps
    theta = np.arctan2(base.mesh_pos[:, 1] - 0.5, base.mesh_pos[:, 0] - 0.5)
    profile = np.zeros(base.node_count)
    for k in range(1, 4):
        profile += rng.normal() / k * np.cos(k * theta) + rng.normal() / k * np.sin(
            k * theta
        )
    q = np.zeros(base.node_count)
    for _ in range(3):
        center = rng.uniform(0.2, 0.8, size=2)
        width = rng.uniform(0.05, 0.2)
        height = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        r2 = np.sum((base.mesh_pos - center) ** 2, axis=1)
        q += height * np.exp(-r2 / (2.0 * width**2))
    q[bnodes] = profile[bnodes]
    mesh = base.replace(node_type=btypes, quantities=q[:, None])

    meshes = [mesh]
    for _ in range(n_steps):
        mesh = diffusion_step(mesh, alpha=0.1)
        meshes.append(mesh)
    return Trajectory(schema=builtin_schema("diffusion"), dt=1.0, meshes=meshes)


_GENERATORS = {
    "cloth-spring": (_gen_cloth, 8),
    "cloth-spring-dynamic": (_gen_cloth_dynamic, 8),
    "cloth-spring-obstacle": (_gen_cloth_obstacle, 8),
    "diffusion": (_gen_diffusion, 15),
}


def generate_dataset(
    domain: str,
    n_trajectories: int,
    n_steps: int,
    seed: int,
    out_dir,
    grid: int | None = None,
) -> None:
    """Generate trajectories and a manifest under ``out_dir``.

    Each trajectory draws its own RNG stream from the master seed, so the
    output is reproducible and independent of generation order.
    """
    if domain not in _GENERATORS:
        raise ConfigError(f"unknown domain {domain!r}; choose from {DOMAINS}")
    gen, default_grid = _GENERATORS[domain]
    grid = default_grid if grid is None else int(grid)
    os.makedirs(out_dir, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(n_trajectories)
    files, steps = [], []
    mean_len = 0.0
    schema = None
    for i, stream in enumerate(streams):
        traj = gen(np.random.default_rng(stream), n_steps, grid)
        name = f"traj_{i:04d}.bin"
        save_trajectory(os.path.join(out_dir, name), traj)
        files.append(name)
        steps.append(len(traj))
        if i == 0:
            mean_len = _mean_edge_length(traj.meshes[0])
            schema = traj.schema
    if schema is None:
        schema = builtin_schema(
            {"cloth-spring": "cloth", "cloth-spring-dynamic": "cloth-sizing",
             "cloth-spring-obstacle": "cloth-obstacle", "diffusion": "diffusion"}[domain]
        )
    write_manifest(
        out_dir,
        schema=schema,
        dt=1.0,
        files=files,
        splits=_splits(n_trajectories),
        steps=steps,
        mean_edge_length=mean_len,
        domain=domain,
        seed=seed,
    )
