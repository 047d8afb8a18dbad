"""Trajectory file round-trips, dataset manifests, and sample assembly."""

import numpy as np
import pytest

from meshsim.errors import FormatError
from meshsim.mesh import NodeType, make_mesh
from meshsim.schema import builtin_schema
from meshsim.trajectory import (
    Dataset,
    Trajectory,
    load_trajectory,
    make_sample,
    sample_range,
    save_trajectory,
    write_manifest,
)


def square_mesh(world=None, types=None):
    pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
    return make_mesh(
        pts, [[0, 1, 2], [0, 2, 3]], node_type=types, world_pos=world
    )


def center_mesh(world=None):
    pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]
    cells = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]
    return make_mesh(pts, cells, world_pos=world)


def affine_world(mesh_pos, m, c):
    # world position as an affine image of mesh space: exact under barycentric
    return mesh_pos @ m.T + c


def cloth_trajectory(steps=4, f32=False):
    schema = builtin_schema("cloth")
    rng = np.random.default_rng(0)
    meshes = []
    for t in range(steps):
        w = np.column_stack(
            [np.full(4, 0.25 * t), rng.standard_normal(4), np.arange(4.0)]
        )
        if f32:
            w = w.astype(np.float32)
        meshes.append(square_mesh(world=w))
    return Trajectory(schema=schema, dt=1.0, meshes=meshes)


def test_static_roundtrip_exact_at_f32(tmp_path):
    traj = cloth_trajectory(f32=True)
    path = tmp_path / "t.bin"
    save_trajectory(path, traj)
    back = load_trajectory(path)
    assert back.schema.name == "cloth"
    assert len(back) == 4
    assert back.static_topology
    for a, b in zip(traj.meshes, back.meshes):
        np.testing.assert_array_equal(a.world_pos, b.world_pos)
        np.testing.assert_array_equal(a.mesh_pos, b.mesh_pos)
        np.testing.assert_array_equal(a.node_type, b.node_type)
        np.testing.assert_array_equal(a.cells, b.cells)


def test_save_load_save_byte_identical(tmp_path):
    traj = cloth_trajectory()
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_trajectory(p1, traj)
    save_trajectory(p2, load_trajectory(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_dynamic_roundtrip_with_sizing(tmp_path):
    schema = builtin_schema("cloth-sizing")
    m = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    meshes = [
        square_mesh(world=affine_world(square_mesh().mesh_pos, m, np.zeros(3))),
        center_mesh(world=affine_world(center_mesh().mesh_pos, m, np.ones(3))),
    ]
    sizing = [np.full((4, 3), 0.5), np.full((5, 3), 0.25)]
    traj = Trajectory(schema=schema, dt=1.0, meshes=meshes, sizing=sizing)
    assert not traj.static_topology
    path = tmp_path / "dyn.bin"
    save_trajectory(path, traj)
    back = load_trajectory(path)
    assert not back.static_topology
    assert back.meshes[1].node_count == 5
    np.testing.assert_array_equal(back.meshes[1].cells, meshes[1].cells)
    np.testing.assert_array_equal(back.sizing[0], sizing[0])
    np.testing.assert_array_equal(back.sizing[1], sizing[1])
    save_trajectory(tmp_path / "dyn2.bin", back)
    assert path.read_bytes() == (tmp_path / "dyn2.bin").read_bytes()


def test_eulerian_roundtrip(tmp_path):
    schema = builtin_schema("diffusion")
    meshes = [
        square_mesh().replace(quantities=np.full((4, 1), float(t))) for t in range(3)
    ]
    traj = Trajectory(schema=schema, dt=1.0, meshes=meshes)
    save_trajectory(tmp_path / "e.bin", traj)
    back = load_trajectory(tmp_path / "e.bin")
    assert back.meshes[0].world_pos is None
    np.testing.assert_array_equal(back.meshes[2].quantities, meshes[2].quantities)


def test_load_rejects_malformed(tmp_path):
    traj = cloth_trajectory()
    path = tmp_path / "t.bin"
    save_trajectory(path, traj)
    blob = path.read_bytes()
    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[:-8])
    with pytest.raises(FormatError):
        load_trajectory(truncated)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b'{"kind":"other"}\n')
    with pytest.raises(FormatError):
        load_trajectory(bad)
    bad.write_bytes(b"no header line at all")
    with pytest.raises(FormatError):
        load_trajectory(bad)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(schema=builtin_schema("cloth"), dt=1.0, meshes=())
    meshes = cloth_trajectory().meshes
    with pytest.raises(ValueError):
        Trajectory(
            schema=builtin_schema("cloth"),
            dt=1.0,
            meshes=meshes,
            sizing=[np.zeros((4, 3))],  # wrong length
        )


def test_manifest_roundtrip(tmp_path):
    schema = builtin_schema("cloth")
    traj = cloth_trajectory()
    save_trajectory(tmp_path / "traj_0000.bin", traj)
    write_manifest(
        tmp_path,
        schema=schema,
        dt=1.0,
        files=["traj_0000.bin"],
        splits={"train": [0], "valid": [], "test": []},
        steps=[4],
        mean_edge_length=1.1,
        domain="cloth-spring",
        seed=7,
    )
    ds = Dataset.open(tmp_path)
    assert len(ds) == 1
    assert ds.indices("train") == [0]
    assert ds.indices("test") == []
    assert ds.mean_edge_length == 1.1
    assert ds.domain == "cloth-spring"
    t1 = ds.trajectory(0)
    assert ds.trajectory(0) is t1  # cached
    assert len(t1) == 4
    with pytest.raises(KeyError):
        ds.indices("nope")
    with pytest.raises(FormatError):
        Dataset.open(tmp_path / "missing")


def test_sample_static_uses_recorded_states():
    traj = cloth_trajectory(steps=5)
    assert list(sample_range(traj)) == [1, 2, 3]
    s = make_sample(traj, 2, trajectory_index=9)
    assert s.trajectory_index == 9 and s.step == 2
    assert s.current is traj.meshes[2]
    assert s.history[0] is traj.meshes[1]
    np.testing.assert_array_equal(s.next_world_pos, traj.meshes[3].world_pos)
    assert s.next_quantities is None and s.sizing_channels is None
    with pytest.raises(ValueError):
        make_sample(traj, 0)
    with pytest.raises(ValueError):
        make_sample(traj, 4)


def test_sample_dynamic_interpolates_affine_exactly():
    schema = builtin_schema("cloth-sizing")
    maps = [np.array([[1.0, 0.5], [0.0, 2.0], [1.0, 1.0]]) * (t + 1) for t in range(3)]
    shifts = [np.array([0.0, float(t), -1.0]) for t in range(3)]
    m0, m2 = square_mesh(), square_mesh()
    m1 = center_mesh()
    meshes = []
    for t, base in enumerate([m0, m1, m2]):
        meshes.append(base.replace(world_pos=affine_world(base.mesh_pos, maps[t], shifts[t])))
    sizing = [np.full((m.node_count, 3), 1.0) for m in meshes]
    traj = Trajectory(schema=schema, dt=1.0, meshes=meshes, sizing=sizing)
    locators = {}
    s = make_sample(traj, 1, locators=locators)
    # states 0 and 2 are affine in mesh space, so transfer onto mesh 1 is exact
    expect_hist = affine_world(m1.mesh_pos, maps[0], shifts[0])
    expect_next = affine_world(m1.mesh_pos, maps[2], shifts[2])
    np.testing.assert_allclose(s.history[0].world_pos, expect_hist, atol=1e-12)
    np.testing.assert_allclose(s.next_world_pos, expect_next, atol=1e-12)
    assert s.history[0].node_count == 5
    assert s.sizing_channels is traj.sizing[1]
    assert set(locators) == {0, 2}  # locator cache was filled for the off-steps
