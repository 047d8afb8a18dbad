"""Dense network core: MLPs, LayerNorm, and message-passing blocks.

Forward and reverse-mode (backprop) passes are written out by hand in numpy,
double precision throughout. All trainable tensors of a network live in one
contiguous flat vector; named views into it give per-tensor access, so the
optimizer and checkpointing work on a single array. Gradients are accumulated
into an identically-shaped flat vector through the same views.

Edge aggregation uses segment sums over edge lists sorted by (receiver,
sender), giving a fixed accumulation order and bit-reproducible results
independent of how the caller discovered the edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshSimError

__all__ = ["LN_EPS", "Mlp", "GraphNet", "mlp_forward", "mlp_backward", "glorot_limit"]

LN_EPS = 1e-6
HIDDEN_LAYERS = 2  # two hidden layers plus the output affine layer


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


@dataclass
class Mlp:
    """Views into a flat parameter vector for one MLP (possibly + LayerNorm)."""

    weights: list  # [(in, w), (w, w), (w, out)]
    biases: list  # [(w,), (w,), (out,)]
    ln_gain: np.ndarray | None = None
    ln_offset: np.ndarray | None = None

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[1]


def mlp_forward(mlp: Mlp, x: np.ndarray):
    """Apply the MLP to a batch of rows; returns (output, cache)."""
    if x.shape[1] != mlp.in_width:
        raise MeshSimError(
            f"MLP expects input width {mlp.in_width}, got {x.shape[1]}"
        )
    hs = [x]
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        z = hs[-1] @ w
        z += b
        np.maximum(z, 0.0, out=z)
        hs.append(z)
    y = hs[-1] @ mlp.weights[-1] + mlp.biases[-1]
    if mlp.ln_gain is None:
        return y, (hs, None)
    w_out = 1.0 / y.shape[1]
    mu = y.sum(axis=1, keepdims=True) * w_out
    yc = y - mu
    var = (yc * yc).sum(axis=1, keepdims=True) * w_out
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = yc * inv
    out = xhat * mlp.ln_gain + mlp.ln_offset
    return out, (hs, (xhat, inv))


def mlp_backward(mlp: Mlp, cache, dy: np.ndarray, grads: Mlp) -> np.ndarray:
    """Accumulate parameter gradients into ``grads`` views; return d(input)."""
    hs, ln = cache
    if ln is not None:
        xhat, inv = ln
        grads.ln_gain += np.einsum("rc,rc->c", dy, xhat)
        grads.ln_offset += dy.sum(axis=0)
        dxhat = dy * mlp.ln_gain
        w_out = 1.0 / dy.shape[1]
        dy = inv * (
            dxhat
            - dxhat.sum(axis=1, keepdims=True) * w_out
            - xhat * ((dxhat * xhat).sum(axis=1, keepdims=True) * w_out)
        )
    for k in reversed(range(len(mlp.weights))):
        grads.weights[k] += hs[k].T @ dy
        grads.biases[k] += dy.sum(axis=0)
        dx = dy @ mlp.weights[k].T
        if k > 0:
            dx *= hs[k] > 0  # ReLU mask (h = max(z, 0), so h > 0 iff z > 0)
        dy = dx
    return dy


# --- edge aggregation -----------------------------------------------------

@dataclass
class _SegPlan:
    """Precomputed segment boundaries for sums grouped by either edge column."""

    recv_starts: np.ndarray
    recv_ids: np.ndarray
    send_perm: np.ndarray
    send_starts: np.ndarray
    send_ids: np.ndarray


def _segment_plan(edges: np.ndarray) -> _SegPlan | None:
    if edges.shape[0] == 0:
        return None
    recv, send = edges[:, 0], edges[:, 1]
    if np.any(np.diff(recv) < 0):
        raise MeshSimError("edge list must be sorted by receiver index")
    recv_starts = np.flatnonzero(np.diff(recv, prepend=-1))
    send_perm = np.argsort(send, kind="stable")
    ss = send[send_perm]
    send_starts = np.flatnonzero(np.diff(ss, prepend=-1))
    return _SegPlan(recv_starts, recv[recv_starts], send_perm, send_starts, ss[send_starts])


def _sum_by_recv(rows: np.ndarray, plan: _SegPlan | None, n: int) -> np.ndarray:
    out = np.zeros((n, rows.shape[1]))
    if plan is not None:
        out[plan.recv_ids] = np.add.reduceat(rows, plan.recv_starts, axis=0)
    return out


def _add_by_recv(acc: np.ndarray, rows: np.ndarray, plan: _SegPlan) -> None:
    acc[plan.recv_ids] += np.add.reduceat(rows, plan.recv_starts, axis=0)


def _add_by_send(acc: np.ndarray, rows: np.ndarray, plan: _SegPlan) -> None:
    acc[plan.send_ids] += np.add.reduceat(rows[plan.send_perm], plan.send_starts, axis=0)


# --- network --------------------------------------------------------------

@dataclass
class _Views:
    enc_node: Mlp
    enc_mesh: Mlp
    enc_world: Mlp | None
    blocks: list  # of (f_mesh, f_world | None, f_node)
    decoder: Mlp


@dataclass
class _BlockCache:
    mesh_cache: tuple
    world_cache: tuple | None
    node_cache: tuple
    em_out: np.ndarray
    ew_out: np.ndarray | None


@dataclass
class NetCache:
    n: int
    mesh_edges: np.ndarray
    world_edges: np.ndarray | None
    mesh_plan: _SegPlan | None
    world_plan: _SegPlan | None
    enc_node_cache: tuple = None
    enc_mesh_cache: tuple = None
    enc_world_cache: tuple | None = None
    block_caches: list = field(default_factory=list)
    decoder_cache: tuple = None


class GraphNet:
    """Encode-Process-Decode network over a two-edge-set graph.

    ``world_in`` of None builds a single-edge-set network (the per-block world
    MLP is absent and the node MLP consumes only the mesh aggregation).
    """

    def __init__(
        self,
        node_in: int,
        mesh_in: int,
        out_width: int,
        width: int = 128,
        blocks: int = 15,
        world_in: int | None = None,
        flat: np.ndarray | None = None,
    ):
        if min(node_in, mesh_in, out_width, width) < 1 or blocks < 1:
            raise MeshSimError("all network dimensions must be positive")
        self.node_in = node_in
        self.mesh_in = mesh_in
        self.world_in = world_in
        self.out_width = out_width
        self.width = width
        self.blocks = blocks
        self.layout = self._build_layout()
        self.n_params = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if flat is None:
            flat = np.zeros(self.n_params)
        else:
            flat = np.ascontiguousarray(flat, dtype=np.float64)
            if flat.shape != (self.n_params,):
                raise MeshSimError(
                    f"flat parameter vector has {flat.shape}, expected ({self.n_params},)"
                )
        self.flat = flat
        self.views = self.bind(self.flat)

    # --- layout -----------------------------------------------------------

    def _mlp_shapes(self, prefix: str, n_in: int, n_out: int, ln: bool):
        w = self.width
        dims = [n_in] + [w] * HIDDEN_LAYERS + [n_out]
        specs = []
        for k in range(len(dims) - 1):
            specs.append((f"{prefix}.w{k}", (dims[k], dims[k + 1])))
            specs.append((f"{prefix}.b{k}", (dims[k + 1],)))
        if ln:
            specs.append((f"{prefix}.ln_gain", (n_out,)))
            specs.append((f"{prefix}.ln_offset", (n_out,)))
        return specs

    def _build_layout(self):
        w = self.width
        specs = []
        specs += self._mlp_shapes("enc_node", self.node_in, w, True)
        specs += self._mlp_shapes("enc_mesh", self.mesh_in, w, True)
        if self.world_in is not None:
            specs += self._mlp_shapes("enc_world", self.world_in, w, True)
        node_agg = 3 * w if self.world_in is not None else 2 * w
        for l in range(self.blocks):
            specs += self._mlp_shapes(f"block{l}.mesh", 3 * w, w, True)
            if self.world_in is not None:
                specs += self._mlp_shapes(f"block{l}.world", 3 * w, w, True)
            specs += self._mlp_shapes(f"block{l}.node", node_agg, w, True)
        specs += self._mlp_shapes("decoder", w, self.out_width, False)
        layout = []
        offset = 0
        for name, shape in specs:
            layout.append((name, shape, offset))
            offset += int(np.prod(shape))
        return layout

    def bind(self, flat: np.ndarray) -> _Views:
        """Build named tensor views over any flat vector of matching size."""
        if flat.shape != (self.n_params,):
            raise MeshSimError("flat vector size mismatch")
        tensors = {}
        for name, shape, off in self.layout:
            tensors[name] = flat[off : off + int(np.prod(shape))].reshape(shape)

        def mlp(prefix, ln):
            ws, bs, k = [], [], 0
            while f"{prefix}.w{k}" in tensors:
                ws.append(tensors[f"{prefix}.w{k}"])
                bs.append(tensors[f"{prefix}.b{k}"])
                k += 1
            if ln:
                return Mlp(ws, bs, tensors[f"{prefix}.ln_gain"], tensors[f"{prefix}.ln_offset"])
            return Mlp(ws, bs)

        blocks = []
        for l in range(self.blocks):
            fw = mlp(f"block{l}.world", True) if self.world_in is not None else None
            blocks.append((mlp(f"block{l}.mesh", True), fw, mlp(f"block{l}.node", True)))
        return _Views(
            enc_node=mlp("enc_node", True),
            enc_mesh=mlp("enc_mesh", True),
            enc_world=mlp("enc_world", True) if self.world_in is not None else None,
            blocks=blocks,
            decoder=mlp("decoder", False),
        )

    def init_glorot(self, rng: np.random.Generator) -> None:
        """Uniform Glorot weights, zero biases, unit LayerNorm gain, in layout order."""
        for name, shape, off in self.layout:
            view = self.flat[off : off + int(np.prod(shape))].reshape(shape)
            leaf = name.rsplit(".", 1)[1]
            if leaf.startswith("w"):
                lim = glorot_limit(*shape)
                view[...] = rng.uniform(-lim, lim, size=shape)
            elif leaf == "ln_gain":
                view[...] = 1.0
            else:
                view[...] = 0.0

    # --- forward / backward ------------------------------------------------

    def forward(
        self,
        node_x: np.ndarray,
        mesh_edges: np.ndarray,
        mesh_x: np.ndarray,
        world_edges: np.ndarray | None = None,
        world_x: np.ndarray | None = None,
        views: _Views | None = None,
        plans: tuple | None = None,
    ):
        """Run the network; returns (per-node outputs, cache for backward).

        ``plans`` may carry (mesh_plan, world_plan) from a previous call's
        cache to skip rebuilding segment sums when the graph is unchanged.
        """
        p = views or self.views
        n = node_x.shape[0]
        has_world = self.world_in is not None
        if has_world and (world_edges is None or world_x is None):
            raise MeshSimError("network expects world edges")
        if plans is None:
            plans = (
                _segment_plan(mesh_edges),
                _segment_plan(world_edges) if has_world else None,
            )
        cache = NetCache(
            n=n,
            mesh_edges=mesh_edges,
            world_edges=world_edges if has_world else None,
            mesh_plan=plans[0],
            world_plan=plans[1],
        )
        v, cache.enc_node_cache = mlp_forward(p.enc_node, node_x)
        em, cache.enc_mesh_cache = mlp_forward(p.enc_mesh, mesh_x)
        ew = None
        if has_world:
            ew, cache.enc_world_cache = mlp_forward(p.enc_world, world_x)

        w = self.width
        for f_mesh, f_world, f_node in p.blocks:
            bc_mesh_in = np.concatenate(
                [em, v[mesh_edges[:, 0]], v[mesh_edges[:, 1]]], axis=1
            )
            dm, mesh_cache = mlp_forward(f_mesh, bc_mesh_in)
            em = em + dm
            world_cache = None
            ew_new = None
            if has_world:
                bc_world_in = np.concatenate(
                    [ew, v[world_edges[:, 0]], v[world_edges[:, 1]]], axis=1
                )
                dw, world_cache = mlp_forward(f_world, bc_world_in)
                ew_new = ew + dw
                ew = ew_new
            parts = [v, _sum_by_recv(em, cache.mesh_plan, n)]
            if has_world:
                parts.append(_sum_by_recv(ew, cache.world_plan, n))
            dv, node_cache = mlp_forward(f_node, np.concatenate(parts, axis=1))
            v = v + dv
            cache.block_caches.append(
                _BlockCache(mesh_cache, world_cache, node_cache, em, ew)
            )
        out, cache.decoder_cache = mlp_forward(p.decoder, v)
        return out, cache

    def backward(
        self,
        cache: NetCache,
        d_out: np.ndarray,
        grad_flat: np.ndarray,
        views: _Views | None = None,
        grad_views: _Views | None = None,
    ) -> None:
        """Accumulate parameter gradients of a scalar loss into ``grad_flat``."""
        p = views or self.views
        g = grad_views or self.bind(grad_flat)
        n, w = cache.n, self.width
        has_world = self.world_in is not None
        medges, wedges = cache.mesh_edges, cache.world_edges

        dv = mlp_backward(p.decoder, cache.decoder_cache, d_out, g.decoder)
        dem = np.zeros((medges.shape[0], w))
        dew = np.zeros((wedges.shape[0], w)) if has_world else None

        for (f_mesh, f_world, f_node), (g_mesh, g_world, g_node), bc in zip(
            reversed(p.blocks), reversed(g.blocks), reversed(cache.block_caches)
        ):
            # node update: v' = v + f_node([v, sum em', sum ew'])
            d_node_in = mlp_backward(f_node, bc.node_cache, dv, g_node)
            dv = dv + d_node_in[:, :w]
            dem += d_node_in[:, w : 2 * w][medges[:, 0]]
            if has_world and wedges.shape[0]:
                dew += d_node_in[:, 2 * w : 3 * w][wedges[:, 0]]

            # world edge update: ew' = ew + f_world([ew, v_r, v_s])
            if has_world:
                d_world_in = mlp_backward(f_world, bc.world_cache, dew, g_world)
                dew = dew + d_world_in[:, :w]
                if cache.world_plan is not None:
                    _add_by_recv(dv, d_world_in[:, w : 2 * w], cache.world_plan)
                    _add_by_send(dv, d_world_in[:, 2 * w : 3 * w], cache.world_plan)

            # mesh edge update: em' = em + f_mesh([em, v_r, v_s])
            d_mesh_in = mlp_backward(f_mesh, bc.mesh_cache, dem, g_mesh)
            dem = dem + d_mesh_in[:, :w]
            if cache.mesh_plan is not None:
                _add_by_recv(dv, d_mesh_in[:, w : 2 * w], cache.mesh_plan)
                _add_by_send(dv, d_mesh_in[:, 2 * w : 3 * w], cache.mesh_plan)

        mlp_backward(p.enc_node, cache.enc_node_cache, dv, g.enc_node)
        mlp_backward(p.enc_mesh, cache.enc_mesh_cache, dem, g.enc_mesh)
        if has_world:
            mlp_backward(p.enc_world, cache.enc_world_cache, dew, g.enc_world)
