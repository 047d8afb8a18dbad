"""Network core: MLP passes, aggregation, full forward/backward gradients."""

import numpy as np
import pytest

from meshsim.errors import MeshSimError
from meshsim.nn import GraphNet, Mlp, glorot_limit, mlp_backward, mlp_forward

from oracles import (
    finite_difference_gradient,
    oracle_network_forward,
    random_test_graph,
    relative_error,
)


def make_mlp(rng, dims, ln=False):
    ws = [rng.normal(scale=0.5, size=(dims[k], dims[k + 1])) for k in range(len(dims) - 1)]
    bs = [rng.normal(scale=0.1, size=d) for d in dims[1:]]
    if ln:
        return Mlp(ws, bs, np.full(dims[-1], 1.2), np.full(dims[-1], -0.3))
    return Mlp(ws, bs)


# --- MLP ------------------------------------------------------------------

def test_mlp_zero_params_zero_output():
    m = Mlp([np.zeros((3, 4)), np.zeros((4, 4)), np.zeros((4, 2))],
            [np.zeros(4), np.zeros(4), np.zeros(2)])
    y, _ = mlp_forward(m, np.ones((5, 3)))
    assert np.array_equal(y, np.zeros((5, 2)))


def test_mlp_identity_construction():
    # relu(x) - relu(-x) reproduces x through the hidden layers
    w0 = np.array([[1.0, 0, -1, 0], [0, 1, 0, -1]])
    w1 = np.eye(4)
    w2 = np.array([[1.0, 0], [0, 1], [-1, 0], [0, -1]])
    m = Mlp([w0, w1, w2], [np.zeros(4), np.zeros(4), np.zeros(2)])
    x = np.array([[0.7, -1.3], [-2.0, 0.1]])
    y, _ = mlp_forward(m, x)
    np.testing.assert_allclose(y, x, atol=1e-15)


def test_mlp_input_width_checked():
    m = make_mlp(np.random.default_rng(0), [3, 4, 4, 2])
    with pytest.raises(MeshSimError):
        mlp_forward(m, np.ones((2, 5)))


def test_mlp_jvp_matches_finite_differences():
    rng = np.random.default_rng(42)
    for ln in (False, True):
        m = make_mlp(rng, [5, 8, 8, 4], ln=ln)
        x = rng.normal(size=(3, 5))
        u = rng.normal(size=(3, 5))  # input direction
        vv = rng.normal(size=(3, 4))  # output covector
        y, cache = mlp_forward(m, x)
        zeros = make_mlp(np.random.default_rng(1), [5, 8, 8, 4], ln=ln)
        for arr in zeros.weights + zeros.biases:
            arr[...] = 0.0
        if ln:
            zeros.ln_gain[...] = 0.0
            zeros.ln_offset[...] = 0.0
        dx = mlp_backward(m, cache, vv, zeros)
        vjp_dot_u = float((dx * u).sum())
        eps = 1e-5
        yp, _ = mlp_forward(m, x + eps * u)
        ym, _ = mlp_forward(m, x - eps * u)
        fd = float((vv * (yp - ym) / (2 * eps)).sum())
        assert relative_error(vjp_dot_u, fd) < 1e-6


def test_mlp_single_linear_layer_closed_form_gradient():
    # loss = |Wx - y|^2 for a single affine layer; dW = 2 x (Wx - y)^T
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 2))
    m = Mlp([w], [np.zeros(2)])
    x = rng.normal(size=(1, 3))
    y = rng.normal(size=(1, 2))
    out, cache = mlp_forward(m, x)
    resid = out - y
    g = Mlp([np.zeros((3, 2))], [np.zeros(2)])
    mlp_backward(m, cache, 2.0 * resid, g)
    np.testing.assert_allclose(g.weights[0], 2.0 * x.T @ resid, atol=1e-14)
    np.testing.assert_allclose(g.biases[0], 2.0 * resid[0], atol=1e-14)


# --- GraphNet structure ---------------------------------------------------

def test_layout_views_alias_flat():
    net = GraphNet(node_in=5, mesh_in=3, out_width=2, width=8, blocks=2)
    net.views.enc_node.weights[0][0, 0] = 7.5
    off = net.layout[0][2]
    assert net.flat[off] == 7.5
    total = sum(int(np.prod(s)) for _, s, _ in net.layout)
    assert net.n_params == total == net.flat.size


def test_world_blocks_only_when_world_in():
    a = GraphNet(5, 3, 2, width=8, blocks=2)
    b = GraphNet(5, 3, 2, width=8, blocks=2, world_in=4)
    names_a = {n for n, _, _ in a.layout}
    names_b = {n for n, _, _ in b.layout}
    assert not any("world" in n for n in names_a)
    assert "enc_world.w0" in names_b and "block1.world.w2" in names_b
    # node MLP input: 2 widths without world, 3 with
    assert dict((n, s) for n, s, _ in a.layout)["block0.node.w0"] == (16, 8)
    assert dict((n, s) for n, s, _ in b.layout)["block0.node.w0"] == (24, 8)


def test_init_glorot_ranges_and_determinism():
    net = GraphNet(5, 3, 2, width=8, blocks=2)
    net.init_glorot(np.random.default_rng(9))
    v = net.views
    lim = glorot_limit(5, 8)
    assert np.abs(v.enc_node.weights[0]).max() <= lim
    assert np.array_equal(v.enc_node.biases[0], np.zeros(8))
    assert np.array_equal(v.enc_node.ln_gain, np.ones(8))
    assert np.array_equal(v.enc_node.ln_offset, np.zeros(8))
    net2 = GraphNet(5, 3, 2, width=8, blocks=2)
    net2.init_glorot(np.random.default_rng(9))
    assert np.array_equal(net.flat, net2.flat)


def test_zero_weight_blocks_are_identity():
    # zero processor params keep latents unchanged; output = decoder bias
    net = GraphNet(5, 3, 2, width=8, blocks=3)
    net.views.decoder.biases[-1][...] = [1.5, -2.0]
    rng = np.random.default_rng(0)
    g = random_test_graph(rng, 6, 5, 3)
    out, _ = net.forward(g["node_x"], g["mesh_edges"], g["mesh_x"])
    np.testing.assert_allclose(out, np.tile([1.5, -2.0], (6, 1)), atol=1e-15)


def test_forward_requires_sorted_edges():
    net = GraphNet(5, 3, 2, width=8, blocks=1)
    g = random_test_graph(np.random.default_rng(0), 6, 5, 3)
    bad = g["mesh_edges"][::-1]
    with pytest.raises(MeshSimError):
        net.forward(g["node_x"], bad, g["mesh_x"])


# --- forward vs oracle ----------------------------------------------------

@pytest.mark.parametrize("world", [False, True])
def test_forward_matches_straight_line_oracle(world):
    rng = np.random.default_rng(17)
    net = GraphNet(7, 4, 3, width=8, blocks=2, world_in=4 if world else None)
    net.init_glorot(rng)
    g = random_test_graph(rng, 9, 7, 4, world_in=4 if world else None)
    out, _ = net.forward(
        g["node_x"], g["mesh_edges"], g["mesh_x"],
        g.get("world_edges"), g.get("world_x"),
    )
    ref = oracle_network_forward(
        net, g["node_x"], g["mesh_edges"], g["mesh_x"],
        g.get("world_edges"), g.get("world_x"),
        shuffle_rng=np.random.default_rng(99),  # unsorted accumulation order
    )
    assert relative_error(out, ref) < 1e-12


def test_node_permutation_equivariance():
    rng = np.random.default_rng(23)
    net = GraphNet(6, 4, 2, width=8, blocks=2)
    net.init_glorot(rng)
    g = random_test_graph(rng, 8, 6, 4)
    out, _ = net.forward(g["node_x"], g["mesh_edges"], g["mesh_x"])
    perm = rng.permutation(8)
    inv = np.argsort(perm)
    edges_p = inv[g["mesh_edges"]]
    order = np.lexsort((edges_p[:, 1], edges_p[:, 0]))
    out_p, _ = net.forward(
        g["node_x"][perm], edges_p[order], g["mesh_x"][order]
    )
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


# --- backward -------------------------------------------------------------

def quadratic_loss(net, g):
    out, cache = net.forward(
        g["node_x"], g["mesh_edges"], g["mesh_x"],
        g.get("world_edges"), g.get("world_x"),
    )
    return 0.5 * float((out * out).sum()), out, cache


@pytest.mark.parametrize("world", [False, True])
def test_backward_matches_finite_differences_sampled(world):
    rng = np.random.default_rng(31)
    net = GraphNet(6, 4, 2, width=8, blocks=2, world_in=5 if world else None)
    net.init_glorot(rng)
    g = random_test_graph(rng, 7, 6, 4, world_in=5 if world else None)
    _, out, cache = quadratic_loss(net, g)
    grad = np.zeros(net.n_params)
    net.backward(cache, out, grad)
    # a few entries of every tensor
    indices = []
    for _, shape, off in net.layout:
        size = int(np.prod(shape))
        indices.extend(off + rng.choice(size, size=min(3, size), replace=False))
    fd = finite_difference_gradient(
        lambda: quadratic_loss(net, g)[0], net.flat, indices
    )
    assert relative_error(grad[indices], fd, floor=1e-6) < 1e-5


def test_backward_zero_upstream_gradient():
    rng = np.random.default_rng(5)
    net = GraphNet(5, 3, 2, width=8, blocks=2)
    net.init_glorot(rng)
    g = random_test_graph(rng, 6, 5, 3)
    out, cache = net.forward(g["node_x"], g["mesh_edges"], g["mesh_x"])
    grad = np.zeros(net.n_params)
    net.backward(cache, np.zeros_like(out), grad)
    assert np.array_equal(grad, np.zeros(net.n_params))


def test_backward_deterministic():
    rng = np.random.default_rng(8)
    net = GraphNet(5, 3, 2, width=8, blocks=2)
    net.init_glorot(rng)
    g = random_test_graph(rng, 10, 5, 3)
    grads = []
    for _ in range(2):
        _, out, cache = quadratic_loss(net, g)
        grad = np.zeros(net.n_params)
        net.backward(cache, out, grad)
        grads.append(grad)
    assert np.array_equal(grads[0], grads[1])
