"""One-step supervised training of the mesh simulation model.

The model learns to map a (possibly noise-corrupted) state to the per-node
update that reproduces the recorded next state.  Corrupting the inputs and
compensating the targets teaches the network to pull small rollout errors
back toward the data manifold instead of amplifying them.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import encode_features
from .errors import ConfigError, MeshSimError
from .mesh import NodeType, SimMesh, canonical_json
from .model import Model, build_model, save_checkpoint
from .nn import GraphNet
from .schema import DomainSchema, schema_from_dict
from .trajectory import Dataset, TrainSample, make_sample, sample_range

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Default noise std as a fraction of the dataset's mean mesh-space edge length,
# used for any noise channel whose scale is left unset.
AUTO_NOISE_FACTOR = 1e-3


# --- learning-rate schedule and optimizer -----------------------------------


def lr_schedule(
    step: int, decay_steps: int, lr_start: float = 1e-4, lr_end: float = 1e-6
) -> float:
    """Geometric interpolation from lr_start to lr_end, constant afterwards."""
    if decay_steps <= 0:
        raise ConfigError(f"decay_steps must be positive, got {decay_steps}")
    frac = min(step, decay_steps) / decay_steps
    return float(lr_start * (lr_end / lr_start) ** frac)


@dataclass
class AdamState:
    """First/second moment accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_size(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One Adam update, applied in place so existing views stay valid."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise MeshSimError("parameter, gradient and moment shapes disagree")
    state.t += 1
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grad
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * grad * grad
    m_hat = state.m / (1.0 - ADAM_BETA1**state.t)
    v_hat = state.v / (1.0 - ADAM_BETA2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# --- loss -------------------------------------------------------------------


def masked_mse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error over the selected rows, all channels weighted equally."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pred.shape[0],):
        raise ValueError(f"mask must have shape ({pred.shape[0]},), got {mask.shape}")
    if not mask.any():
        raise ValueError("loss mask selects no nodes")
    d = pred[mask] - target[mask]
    return float(np.mean(d * d))


def mse_gradient(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """d(masked_mse)/d(pred); zero on unselected rows."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("loss mask selects no nodes")
    g = np.zeros_like(pred)
    scale = 2.0 / (int(mask.sum()) * pred.shape[1])
    g[mask] = scale * (pred[mask] - target[mask])
    return g


# --- noise injection with compensated targets -------------------------------


@dataclass
class TrainingPair:
    """Model inputs plus the raw-unit supervision matrix for one step."""

    current: SimMesh
    history: list
    scripted_next: np.ndarray | None
    targets: np.ndarray  # (n, schema.output_width), raw units


def resolve_noise_scales(
    schema: DomainSchema, mean_edge_length: float, overrides: dict | None = None
) -> dict:
    """Final per-variable noise stds; unset scales default to a fraction of
    the mean edge length so the corruption stays small relative to the mesh."""
    auto = AUTO_NOISE_FACTOR * float(mean_edge_length)
    valid = set(n for n, _ in schema.quantities)
    if schema.lagrangian:
        valid.add("world_pos")
    scales = {}
    for tgt, s in schema.noise_scales:
        scales[tgt] = auto if s is None else float(s)
    for tgt in sorted(overrides or {}):
        if tgt not in valid:
            raise ConfigError(f"noise target {tgt!r} is not a state field")
        scales[tgt] = float(overrides[tgt])
    for tgt, s in scales.items():
        if not math.isfinite(s) or s < 0:
            raise ConfigError(f"noise scale for {tgt!r} must be finite and >= 0")
    return scales


def _add_walk_noise(states, sigma, mask, rng) -> None:
    """Corrupt a sequence of per-node arrays (oldest to current) in place.

    A single state gets the full std directly.  With k prior transitions the
    noise is a random walk with per-step variance sigma^2/k: the oldest state
    stays clean and the variance grows linearly to sigma^2 at the last state,
    so finite-difference velocities are consistently noisy.
    """
    rows = int(mask.sum())
    width = states[0].shape[1]
    transitions = len(states) - 1
    if transitions == 0:
        states[0][mask] += rng.normal(0.0, sigma, size=(rows, width))
        return
    step_sigma = sigma / math.sqrt(transitions)
    walk = np.zeros((rows, width))
    for s in states[1:]:
        walk = walk + rng.normal(0.0, step_sigma, size=(rows, width))
        s[mask] += walk


def prepare_pair(
    sample: TrainSample, schema: DomainSchema, rng, noise_scales: dict | None = None
) -> TrainingPair:
    """Corrupt the sample's inputs and build targets that compensate.

    First-order targets are the residual from the corrupted current value, so
    integrating the prediction still lands on the recorded next state.  For
    second-order systems the target blends two corrections: one that restores
    the next position exactly, one that restores the next finite-difference
    velocity; the blend weight is ``schema.position_blend``.
    """
    normal = np.asarray(sample.current.node_type) == NodeType.NORMAL
    h = len(sample.history)

    wp_states = None
    if schema.lagrangian:
        wp_states = [m.world_pos.copy() for m in sample.history]
        wp_states.append(sample.current.world_pos.copy())
    q_states = None
    if schema.quantity_width:
        q_states = [m.quantities.copy() for m in sample.history]
        q_states.append(sample.current.quantities.copy())

    for tgt in noise_scales or {}:
        sigma = noise_scales[tgt]
        if sigma <= 0:
            continue
        if tgt == "world_pos":
            if wp_states is None:
                raise ConfigError("world_pos noise on a fixed-domain schema")
            _add_walk_noise(wp_states, sigma, normal, rng)
        else:
            sl = schema.quantity_slice(tgt)
            _add_walk_noise([q[:, sl] for q in q_states], sigma, normal, rng)

    def rebuilt(mesh: SimMesh, j: int) -> SimMesh:
        changes = {}
        if wp_states is not None:
            changes["world_pos"] = wp_states[j]
        if q_states is not None:
            changes["quantities"] = q_states[j]
        return mesh.replace(**changes) if changes else mesh

    history = [rebuilt(m, j) for j, m in enumerate(sample.history)]
    current = rebuilt(sample.current, h)

    targets = np.zeros((current.node_count, schema.output_width))
    for f in schema.outputs:
        sl = schema.output_slice(f.name)
        if f.target == "sizing":
            if sample.sizing_channels is None:
                raise ConfigError("schema expects sizing targets but the sample has none")
            targets[:, sl] = sample.sizing_channels
            continue
        if f.target == "world_pos":
            nxt = sample.next_world_pos
            cur_clean = sample.current.world_pos
            cur = wp_states[-1]
            prev = wp_states[-2] if len(wp_states) > 1 else None
        else:
            qsl = schema.quantity_slice(f.target)
            nxt = sample.next_quantities[:, qsl]
            cur_clean = sample.current.quantities[:, qsl]
            cur = q_states[-1][:, qsl]
            prev = q_states[-2][:, qsl] if len(q_states) > 1 else None
        if nxt is None:
            raise ConfigError(f"sample lacks a next state for output {f.name!r}")
        if not f.integrate:
            targets[:, sl] = nxt
        elif schema.integration_order == 1:
            targets[:, sl] = nxt - cur
        else:
            if prev is None:
                raise ConfigError("second-order targets need one step of history")
            position_form = nxt - 2.0 * cur + prev
            velocity_form = (nxt - cur_clean) - (cur - prev)
            b = schema.position_blend
            targets[:, sl] = b * position_form + (1.0 - b) * velocity_form

    return TrainingPair(
        current=current,
        history=history,
        scripted_next=sample.next_world_pos if schema.lagrangian else None,
        targets=targets,
    )


# --- configuration ----------------------------------------------------------


@dataclass
class TrainConfig:
    """Run settings; serializable to JSON for the command line."""

    schema: str | None = None  # must match the dataset when given
    width: int = 64
    blocks: int = 8
    history: int | None = None  # override the dataset schema's history length
    steps: int = 10000
    batch: int = 1
    seed: int = 0
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    decay_steps: int | None = None  # default: half of steps
    noise: dict | None = None  # state field -> std, overriding schema defaults
    normalizer_samples: int = 500
    log_every: int = 100
    checkpoint_every: int = 0  # 0: only the final checkpoint

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        for name in ("width", "blocks", "batch", "log_every"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.normalizer_samples < 0 or self.checkpoint_every < 0:
            raise ConfigError("normalizer_samples and checkpoint_every must be >= 0")
        if self.decay_steps is not None and self.decay_steps < 1:
            raise ConfigError(f"decay_steps must be >= 1, got {self.decay_steps}")
        if self.history is not None and self.history < 0:
            raise ConfigError(f"history must be >= 0, got {self.history}")
        if not (0 < self.lr_start and 0 < self.lr_end):
            raise ConfigError("learning rates must be positive")
        if self.noise is not None and not isinstance(self.noise, dict):
            raise ConfigError("noise must be a mapping of state field to std")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError("training config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def save(self, path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read training config {path}: {e}") from e
        return cls.from_dict(d)


# --- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    metrics: list  # (step, loss, lr, wall_time) rows
    checkpoint_path: Path


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w") as f:
        f.write("step,loss,lr,wall_time\n")
        for step_i, loss, lr, wall in rows:
            f.write(f"{step_i},{loss:.10e},{lr:.10e},{wall:.3f}\n")


def train(dataset: Dataset, config: TrainConfig, out_dir) -> TrainResult:
    """Fit a model on the dataset's training split; writes model.ckpt and
    metrics.csv under out_dir.  Fully deterministic for a fixed seed (the
    wall_time metric column aside)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    schema = dataset.schema
    if config.schema is not None and config.schema != schema.name:
        raise ConfigError(
            f"config schema {config.schema!r} does not match dataset schema {schema.name!r}"
        )
    if config.history is not None and config.history != schema.history:
        schema = schema_from_dict({**schema.to_dict(), "history": config.history})

    train_ids = dataset.indices("train")
    if not train_ids:
        raise ConfigError("dataset has no training split")

    model = build_model(schema, config.width, config.blocks, config.seed)
    scales = resolve_noise_scales(schema, dataset.mean_edge_length, config.noise)
    rng = np.random.default_rng(config.seed)
    locators: dict = {}
    trajs: dict = {}

    def get_traj(i: int):
        if i not in trajs:
            t = dataset.trajectory(i)
            if t.schema.history != schema.history:
                t = dataclasses.replace(t, schema=schema)
            if len(sample_range(t)) == 0:
                raise ConfigError(f"trajectory {i} is too short to sample")
            trajs[i] = t
        return trajs[i]

    def draw() -> TrainSample:
        i = int(train_ids[rng.integers(len(train_ids))])
        traj = get_traj(i)
        r = sample_range(traj)
        t = int(r[rng.integers(len(r))])
        return make_sample(traj, t, trajectory_index=i, locators=locators.setdefault(i, {}))

    # Input and output statistics from the same corrupted distribution the
    # network will train on, then frozen for the rest of the model's life.
    for _ in range(config.normalizer_samples):
        sample = draw()
        pair = prepare_pair(sample, schema, rng, scales)
        graph = encode_features(pair.current, pair.history, schema, pair.scripted_next)
        model.accumulate_input_stats(graph)
        normal = np.asarray(pair.current.node_type) == NodeType.NORMAL
        if normal.any():
            model.out_norm.accumulate(pair.targets[normal])
    model.freeze_normalizers()

    n_params = model.net.n_params
    grad = np.zeros(n_params)
    grad_views = model.net.bind(grad)
    adam = AdamState.for_size(n_params)
    decay = config.decay_steps if config.decay_steps is not None else max(1, config.steps // 2)
    metrics = []
    t0 = time.monotonic()

    for step_i in range(config.steps):
        lr = lr_schedule(step_i, decay, config.lr_start, config.lr_end)
        grad[:] = 0.0
        loss_acc = 0.0
        batch_ids = []
        for _ in range(config.batch):
            sample = draw()
            batch_ids.append((sample.trajectory_index, sample.step))
            pair = prepare_pair(sample, schema, rng, scales)
            graph = encode_features(pair.current, pair.history, schema, pair.scripted_next)
            node_x, mesh_x, world_x = model.normalized_arrays(graph)
            out_n, cache = model.net.forward(
                node_x, graph.mesh_edges, mesh_x, graph.world_edges, world_x
            )
            target_n = model.out_norm.normalize(pair.targets)
            normal = np.asarray(pair.current.node_type) == NodeType.NORMAL
            loss_acc += masked_mse(out_n, target_n, normal) / config.batch
            d_out = mse_gradient(out_n, target_n, normal) / config.batch
            model.net.backward(cache, d_out, grad, grad_views=grad_views)
        if not math.isfinite(loss_acc):
            raise MeshSimError(
                f"non-finite loss at step {step_i} with seed {config.seed}; "
                f"batch samples (trajectory, step): {batch_ids}"
            )
        adam_step(model.net.flat, grad, adam, lr)
        if step_i % config.log_every == 0 or step_i == config.steps - 1:
            metrics.append((step_i, loss_acc, lr, time.monotonic() - t0))
        if config.checkpoint_every and (step_i + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, out / f"model_{step_i + 1:07d}.ckpt")

    ckpt = out / "model.ckpt"
    save_checkpoint(model, ckpt)
    _write_metrics(out / "metrics.csv", metrics)
    return TrainResult(model=model, metrics=metrics, checkpoint_path=ckpt)


# --- finite-difference verification -----------------------------------------


def _random_directed_edges(rng, n_nodes: int, tries: int) -> np.ndarray:
    """Random undirected pairs expanded to both directions, receiver-sorted."""
    pairs = set()
    for i in range(n_nodes):
        for _ in range(tries):
            j = int(rng.integers(n_nodes))
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    und = np.array(sorted(pairs), dtype=np.int64)
    both = np.concatenate([und, und[:, ::-1]], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order]


def _mlp_caches(views, cache):
    """Pair every MLP with its forward cache, in evaluation order."""
    pairs = [
        ("enc_node", views.enc_node, cache.enc_node_cache),
        ("enc_mesh", views.enc_mesh, cache.enc_mesh_cache),
    ]
    if views.enc_world is not None:
        pairs.append(("enc_world", views.enc_world, cache.enc_world_cache))
    for l, ((f_mesh, f_world, f_node), bc) in enumerate(zip(views.blocks, cache.block_caches)):
        pairs.append((f"block{l}.mesh", f_mesh, bc.mesh_cache))
        if f_world is not None:
            pairs.append((f"block{l}.world", f_world, bc.world_cache))
        pairs.append((f"block{l}.node", f_node, bc.node_cache))
    pairs.append(("decoder", views.decoder, cache.decoder_cache))
    return pairs


def _clearing_shift(z: np.ndarray, margin: float) -> float:
    """Smallest shift putting every entry of z at least margin away from zero."""
    cands = [0.0]
    for v in z:
        cands.extend((margin - v, -margin - v))
    for d in sorted(cands, key=abs):
        if np.all(np.abs(z + d) >= margin * (1.0 - 1e-9)):
            return float(d)
    raise MeshSimError("no clearing shift found")  # unreachable: +inf always clears


def _nudge_relu_margin(net: GraphNet, forward, margin: float, max_rounds: int = 500) -> None:
    """Shift hidden biases until every ReLU input is at least margin from zero.

    Central differences are only trustworthy where the loss is smooth at the
    probe scale; a pre-activation within eps-reach of zero would fold the
    difference quotient across the kink.  Each round moves the single worst
    unit's bias by the smallest clearing amount and re-runs the forward pass.
    """
    name_off = {name: off for name, _, off in net.layout}
    for _ in range(max_rounds):
        _, cache = forward()
        worst = None
        for prefix, mlp, mc in _mlp_caches(net.views, cache):
            hs = mc[0]
            for k in range(len(mlp.weights) - 1):
                z = hs[k] @ mlp.weights[k] + mlp.biases[k]
                absz = np.abs(z)
                r, u = np.unravel_index(np.argmin(absz), z.shape)
                if worst is None or absz[r, u] < worst[0]:
                    worst = (absz[r, u], prefix, k, u, z[:, u])
        if worst[0] >= margin:
            return
        _, prefix, k, unit, zcol = worst
        delta = _clearing_shift(zcol, 1.25 * margin)
        net.flat[name_off[f"{prefix}.b{k}"] + unit] += delta
    raise MeshSimError("could not move all ReLU inputs away from zero")


def gradient_check(
    seed: int = 0,
    width: int = 16,
    blocks: int = 2,
    n_nodes: int = 20,
    eps: float = 1e-5,
) -> float:
    """Compare every analytic parameter gradient against central differences.

    Builds a random graph with both edge sets, a random target and a partial
    node mask, then returns the worst relative error over all parameters of
    d(masked_mse)/d(theta).  The evaluation point is conditioned so no ReLU
    input sits within the finite-difference window of its kink, and the
    relative error uses a 1e-6 denominator floor: central differences of a
    double-precision loss carry ~1e-11 absolute noise, so smaller gradients
    can only be compared absolutely.
    """
    rng = np.random.default_rng(seed)
    node_in, mesh_in, world_in, out_w = 7, 4, 4, 3
    net = GraphNet(node_in, mesh_in, out_w, width=width, blocks=blocks, world_in=world_in)
    net.init_glorot(rng)

    node_x = rng.normal(size=(n_nodes, node_in))
    mesh_edges = _random_directed_edges(rng, n_nodes, 3)
    world_edges = _random_directed_edges(rng, n_nodes, 1)
    mesh_x = rng.normal(size=(mesh_edges.shape[0], mesh_in))
    world_x = rng.normal(size=(world_edges.shape[0], world_in))
    target = rng.normal(size=(n_nodes, out_w))
    mask = rng.random(n_nodes) < 0.7
    mask[0] = True

    _nudge_relu_margin(
        net,
        lambda: net.forward(node_x, mesh_edges, mesh_x, world_edges, world_x),
        margin=100.0 * eps,
    )

    out, cache = net.forward(node_x, mesh_edges, mesh_x, world_edges, world_x)
    d_out = mse_gradient(out, target, mask)
    analytic = np.zeros(net.n_params)
    net.backward(cache, d_out, analytic)

    work = net.flat.copy()
    views = net.bind(work)
    plans = (cache.mesh_plan, cache.world_plan)

    def loss() -> float:
        o, _ = net.forward(
            node_x, mesh_edges, mesh_x, world_edges, world_x, views=views, plans=plans
        )
        return masked_mse(o, target, mask)

    worst = 0.0
    for i in range(net.n_params):
        orig = work[i]
        work[i] = orig + eps
        lp = loss()
        work[i] = orig - eps
        lm = loss()
        work[i] = orig
        fd = (lp - lm) / (2.0 * eps)
        err = abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-6)
        worst = max(worst, err)
    return worst
