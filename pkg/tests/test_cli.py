"""End-to-end command-line coverage: every subcommand, exit codes, file outputs."""

import json

import numpy as np
import pytest

from meshsim.cli import main
from meshsim.mesh import load_mesh_json, make_mesh, save_mesh_json, validate_mesh
from meshsim.sizing import load_sizing_json, save_sizing_json
from meshsim.synthetic import grid_mesh
from meshsim.trajectory import Dataset, load_trajectory, save_trajectory
from meshsim.schema import builtin_schema
from meshsim.trajectory import Trajectory


def tri_lattice(nx, ny, h=1.0):
    """Equilateral-triangle lattice; all edges have length h."""
    dy = h * np.sqrt(3.0) / 2.0
    pts = []
    for j in range(ny):
        shift = (j % 2) * h / 2.0
        for i in range(nx):
            pts.append([i * h + shift, j * dy])
    cells = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            b = a + 1
            c = (j + 1) * nx + i
            d = c + 1
            if j % 2 == 0:
                cells += [[a, b, c], [b, d, c]]
            else:
                cells += [[a, b, d], [a, d, c]]
    return make_mesh(pts, cells)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset_dir(workspace):
    out = workspace / "data"
    code = main(
        [
            "gen-data",
            "--domain",
            "cloth-spring",
            "--trajectories",
            "3",
            "--steps",
            "6",
            "--seed",
            "0",
            "--out",
            str(out),
            "--grid",
            "4",
        ]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def model_dir(workspace, dataset_dir):
    cfg = workspace / "config.json"
    cfg.write_text(
        json.dumps(
            {
                "width": 8,
                "blocks": 1,
                "steps": 5,
                "normalizer_samples": 4,
                "log_every": 1,
                "decay_steps": 4,
            }
        )
    )
    out = workspace / "run"
    code = main(
        ["train", "--data", str(dataset_dir), "--config", str(cfg), "--out", str(out)]
    )
    assert code == 0
    return out


# --- usage and exit codes ---------------------------------------------------


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().out.lower()


def test_unknown_command_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_1(capsys):
    assert main(["gradcheck", "--wibble"]) == 1
    err = capsys.readouterr().err
    assert "usage" in err.lower()


def test_missing_required_flag_exits_1(capsys):
    assert main(["gen-data", "--domain", "diffusion"]) == 1


def test_missing_file_exits_2(tmp_path, capsys):
    code = main(
        ["eval", "--pred", str(tmp_path / "a.bin"), "--truth", str(tmp_path / "b.bin"),
         "--out", str(tmp_path)]
    )
    assert code == 2


def test_bad_dataset_exits_2(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_validation_error_exits_1(tmp_path, dataset_dir, model_dir):
    # steps beyond the trajectory length is a configuration error
    code = main(
        [
            "rollout",
            "--model",
            str(model_dir / "model.ckpt"),
            "--data",
            str(dataset_dir),
            "--steps",
            "99",
            "--out",
            str(tmp_path / "r"),
        ]
    )
    assert code == 1


# --- gen-data ---------------------------------------------------------------


def test_gen_data_writes_dataset(dataset_dir):
    ds = Dataset.open(dataset_dir)
    assert len(ds) == 3
    assert ds.schema.name == "cloth"
    # n steps means n transitions, so n + 1 recorded states
    assert len(ds.trajectory(0)) == 7


def test_gen_data_deterministic(workspace, dataset_dir):
    twin = workspace / "data-twin"
    args = [
        "gen-data", "--domain", "cloth-spring", "--trajectories", "3",
        "--steps", "6", "--seed", "0", "--out", str(twin), "--grid", "4",
    ]
    assert main(args) == 0
    for name in ["manifest.json", "traj_0000.bin"]:
        assert (twin / name).read_bytes() == (dataset_dir / name).read_bytes()


def test_gen_data_rejects_unknown_domain(workspace, capsys):
    code = main(
        ["gen-data", "--domain", "lava-flow", "--trajectories", "1",
         "--steps", "2", "--out", str(workspace / "x")]
    )
    assert code == 1


# --- train ------------------------------------------------------------------


def test_train_writes_artifacts(model_dir):
    assert (model_dir / "model.ckpt").exists()
    lines = (model_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr,wall_time"
    assert len(lines) > 1


def test_train_rejects_bad_config(workspace, dataset_dir, capsys):
    cfg = workspace / "bad.json"
    cfg.write_text(json.dumps({"width": -3}))
    code = main(
        ["train", "--data", str(dataset_dir), "--config", str(cfg),
         "--out", str(workspace / "bad-run")]
    )
    assert code == 1


# --- rollout + eval ---------------------------------------------------------


def test_rollout_eval_pipeline(workspace, dataset_dir, model_dir, capsys):
    rdir = workspace / "rollout"
    code = main(
        [
            "rollout",
            "--model",
            str(model_dir / "model.ckpt"),
            "--data",
            str(dataset_dir),
            "--traj-index",
            "0",
            "--steps",
            "3",
            "--out",
            str(rdir),
            "--obj-dir",
            str(rdir / "obj"),
        ]
    )
    assert code == 0
    pred = load_trajectory(rdir / "prediction.bin")
    truth = load_trajectory(rdir / "truth.bin")
    assert len(pred) == len(truth) == 4
    summary = json.loads((rdir / "rollout.json").read_text())
    assert summary["steps"] == 3
    assert summary["failed_step"] is None
    assert (rdir / "obj" / "step_00000.obj").exists()

    mdir = workspace / "metrics"
    code = main(
        ["eval", "--pred", str(rdir / "prediction.bin"),
         "--truth", str(rdir / "truth.bin"), "--out", str(mdir)]
    )
    assert code == 0
    metrics = json.loads((mdir / "metrics.json").read_text())
    assert set(metrics) == {"rmse_1", "rmse_50", "rmse_all"}
    assert all(np.isfinite(v) for v in metrics.values())
    assert len((mdir / "step_errors.csv").read_text().splitlines()) == 4


def test_eval_identical_is_zero(workspace, capsys):
    schema = builtin_schema("diffusion")
    base = grid_mesh(3, 3)
    meshes = tuple(
        base.replace(quantities=np.full((9, 1), float(t))) for t in range(3)
    )
    path = workspace / "self.bin"
    save_trajectory(path, Trajectory(schema, 1.0, meshes))
    out = workspace / "self-metrics"
    code = main(["eval", "--pred", str(path), "--truth", str(path), "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["rmse_all"] == 0.0
    assert "rmse_all 0.0" in capsys.readouterr().out


# --- remesh + estimate-sizing -----------------------------------------------


def test_remesh_fixed_point_roundtrip(tmp_path):
    mesh = tri_lattice(4, 3, h=0.5)
    mesh_path = tmp_path / "mesh.json"
    save_mesh_json(mesh, mesh_path)
    sizing = np.tile(np.eye(2) * ((1.0 - 1e-9) / 0.25), (mesh.node_count, 1, 1))
    sizing_path = tmp_path / "sizing.json"
    save_sizing_json(sizing_path, sizing)
    out_path = tmp_path / "out.json"
    code = main(
        ["remesh", "--mesh", str(mesh_path), "--sizing", str(sizing_path),
         "--out", str(out_path)]
    )
    assert code == 0
    out = load_mesh_json(out_path)
    assert np.array_equal(out.mesh_pos, mesh.mesh_pos)
    assert np.array_equal(out.cells, mesh.cells)


def test_remesh_refines(tmp_path):
    mesh = tri_lattice(3, 3, h=1.0)
    save_mesh_json(mesh, tmp_path / "mesh.json")
    sizing = np.tile(np.eye(2) / 0.55**2, (mesh.node_count, 1, 1))
    save_sizing_json(tmp_path / "sizing.json", sizing)
    code = main(
        ["remesh", "--mesh", str(tmp_path / "mesh.json"),
         "--sizing", str(tmp_path / "sizing.json"), "--out", str(tmp_path / "out.json")]
    )
    assert code == 0
    out = load_mesh_json(tmp_path / "out.json")
    assert out.node_count > mesh.node_count
    assert validate_mesh(out) == []


def test_estimate_sizing_command(tmp_path):
    mesh = grid_mesh(4, 4)
    save_mesh_json(mesh, tmp_path / "mesh.json")
    code = main(
        ["estimate-sizing", "--mesh", str(tmp_path / "mesh.json"),
         "--out", str(tmp_path / "sizing.json")]
    )
    assert code == 0
    sizing = load_sizing_json(tmp_path / "sizing.json")
    assert sizing.shape == (16, 2, 2)
    # estimated tensors make every incident edge metrically valid
    assert np.all(np.isfinite(sizing))


def test_mesh_json_roundtrip_byte_stable(tmp_path):
    mesh = grid_mesh(3, 4)
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    save_mesh_json(mesh, p1)
    save_mesh_json(load_mesh_json(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


# --- gradcheck --------------------------------------------------------------


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "max relative gradient error" in out
    err = float(out.strip().rsplit(" ", 1)[-1])
    assert err < 1e-4
