"""Command-line surface for the simulation pipeline.

Subcommands cover the whole workflow: generate a dataset, train a model,
roll it out, score the rollout, and run the mesh tooling (remesh, sizing
estimation) plus the gradient self-check.  Every command takes its
randomness from an explicit ``--seed`` flag, so identical invocations
produce identical artifacts.

Exit codes: 0 on success, 1 on validation errors (bad flags, malformed
configuration, inconsistent inputs), 2 on IO errors (missing or unreadable
files).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import FormatError, MeshSimError
from .mesh import canonical_json, load_mesh_json, save_mesh_json
from .model import load_checkpoint
from .remesh import remesh
from .rollout import (
    ROLLOUT_MODES,
    export_obj_sequence,
    rollout,
    truth_window,
    write_metrics,
)
from .sizing import estimate_sizing, load_sizing_json, save_sizing_json
from .synthetic import DOMAINS, generate_dataset
from .trajectory import Dataset, load_trajectory, save_trajectory
from .training import TrainConfig, gradient_check, train

__all__ = ["main", "build_parser", "GRADCHECK_TOL"]

GRADCHECK_TOL = 1e-4  # max acceptable relative error for the gradient suite


class _UsageError(Exception):
    """Bad command line; reported with usage text and exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; we reserve 2 for IO errors,
    # so surface usage problems as exceptions and map them to 1 in main()
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="meshsim",
        description="Learned mesh-based simulation: data, training, rollout, remeshing.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser(
        "gen-data",
        help="generate a synthetic trajectory dataset",
        description="Run a ground-truth solver and write trajectories plus a manifest.",
    )
    p.add_argument("--domain", required=True, choices=DOMAINS, help="solver domain")
    p.add_argument(
        "--trajectories", required=True, type=int, help="number of trajectories"
    )
    p.add_argument(
        "--steps", required=True, type=int, help="time steps (transitions) per trajectory"
    )
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--grid", type=int, default=None, help="override the solver's grid resolution"
    )
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser(
        "train",
        help="train a model on a generated dataset",
        description="Fit the dynamics model; writes model.ckpt and metrics.csv.",
    )
    p.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    p.add_argument(
        "--config",
        default=None,
        help="training config JSON (defaults apply when omitted)",
    )
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "rollout",
        help="roll a trained model forward along a recorded trajectory",
        description=(
            "Feed the model its own predictions; writes prediction.bin, the "
            "time-aligned truth.bin window, and a rollout.json summary."
        ),
    )
    p.add_argument("--model", required=True, help="model checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--traj-index", type=int, default=0, help="trajectory index in the dataset"
    )
    p.add_argument(
        "--steps", type=int, default=None, help="steps to roll (default: all available)"
    )
    p.add_argument(
        "--remesh-mode",
        choices=ROLLOUT_MODES,
        default="none",
        help="mesh policy during the rollout",
    )
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--obj-dir",
        default=None,
        help="also export the predicted states as OBJ files here",
    )
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser(
        "eval",
        help="score a predicted trajectory against its truth window",
        description="Compute per-step errors; writes metrics.json and step_errors.csv.",
    )
    p.add_argument("--pred", required=True, help="predicted trajectory file")
    p.add_argument("--truth", required=True, help="aligned truth trajectory file")
    p.add_argument("--out", required=True, help="output directory for metrics.json")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser(
        "remesh",
        help="adapt a mesh to a sizing field",
        description="Split, collapse, and flip edges until the sizing field is satisfied.",
    )
    p.add_argument("--mesh", required=True, help="input mesh JSON")
    p.add_argument("--sizing", required=True, help="sizing field JSON")
    p.add_argument("--out", required=True, help="output mesh JSON")
    p.set_defaults(func=_cmd_remesh)

    p = sub.add_parser(
        "estimate-sizing",
        help="estimate a sizing field from a mesh's edge geometry",
        description="Fit each node's minimum-area zero-centered neighbor ellipse.",
    )
    p.add_argument("--mesh", required=True, help="input mesh JSON")
    p.add_argument("--out", required=True, help="output sizing JSON")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    p.set_defaults(func=_cmd_estimate_sizing)

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference check of the network gradients",
        description=(
            "Compare analytic gradients against central differences on a small "
            "random model and print the max relative error."
        ),
    )
    p.add_argument("--seed", type=int, default=0, help="model/graph seed (default 0)")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


# --- subcommand bodies ------------------------------------------------------


def _cmd_gen_data(args) -> int:
    generate_dataset(
        args.domain, args.trajectories, args.steps, args.seed, args.out, grid=args.grid
    )
    print(f"wrote {args.trajectories} {args.domain} trajectories to {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = Dataset.open(args.data)
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    result = train(dataset, config, args.out)
    final_loss = result.metrics[-1][1] if result.metrics else float("nan")
    print(f"trained {config.steps} steps, final loss {final_loss:.6e}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_rollout(args) -> int:
    model = load_checkpoint(args.model)
    dataset = Dataset.open(args.data)
    if not 0 <= args.traj_index < len(dataset):
        raise MeshSimError(
            f"traj index {args.traj_index} outside dataset of {len(dataset)}"
        )
    traj = dataset.trajectory(args.traj_index)
    result = rollout(model, traj, steps=args.steps, remesh_mode=args.remesh_mode)
    steps_done = len(result.trajectory) - 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectory(out / "prediction.bin", result.trajectory)
    save_trajectory(out / "truth.bin", truth_window(traj, result.start, steps_done))
    summary = {
        "traj_index": args.traj_index,
        "remesh_mode": args.remesh_mode,
        "start": result.start,
        "steps": steps_done,
        "failed_step": result.failed_step,
    }
    (out / "rollout.json").write_text(canonical_json(summary) + "\n")
    if args.obj_dir is not None:
        export_obj_sequence(result.trajectory, args.obj_dir)
    status = "ok" if result.failed_step is None else f"failed at step {result.failed_step}"
    print(f"rolled {steps_done} steps ({status}); wrote {out}")
    return 0


def _cmd_eval(args) -> int:
    pred = load_trajectory(args.pred)
    truth = load_trajectory(args.truth)
    summary = write_metrics(args.out, pred, truth)
    print(
        "rmse_1 {rmse_1:.6e}  rmse_50 {rmse_50:.6e}  rmse_all {rmse_all:.6e}".format(
            **summary
        )
    )
    return 0


def _cmd_remesh(args) -> int:
    mesh = load_mesh_json(args.mesh)
    sizing = load_sizing_json(args.sizing)
    result = remesh(mesh, sizing)
    save_mesh_json(result.mesh, args.out)
    print(f"remeshed {mesh.node_count} -> {result.mesh.node_count} nodes")
    return 0


def _cmd_estimate_sizing(args) -> int:
    mesh = load_mesh_json(args.mesh)
    sizing = estimate_sizing(mesh, seed=args.seed)
    save_sizing_json(args.out, sizing)
    print(f"wrote sizing field for {mesh.node_count} nodes to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    err = gradient_check(seed=args.seed)
    print(f"max relative gradient error: {err:.6e}")
    if err < GRADCHECK_TOL:
        return 0
    print(f"error: gradient check exceeded tolerance {GRADCHECK_TOL:g}", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MeshSimError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
