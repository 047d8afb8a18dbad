"""Independent straight-line reimplementations used as test oracles.

These deliberately avoid the package's vectorized aggregation and cached
forward machinery: plain loops, unsorted sums, no parameter views beyond
reading the tensors. Frozen before the package implementations were tuned.
"""

import numpy as np

ORACLE_LN_EPS = 1e-6


def oracle_mlp(weights, biases, ln_gain, ln_offset, x):
    h = np.asarray(x, dtype=np.float64)
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if k < last:
            h = np.where(h > 0.0, h, 0.0)
    if ln_gain is not None:
        mu = h.mean(axis=1, keepdims=True)
        var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
        h = (h - mu) / np.sqrt(var + ORACLE_LN_EPS) * ln_gain + ln_offset
    return h


def _mlp_of(view, x):
    return oracle_mlp(view.weights, view.biases, view.ln_gain, view.ln_offset, x)


def oracle_network_forward(
    net, node_x, mesh_edges, mesh_x, world_edges=None, world_x=None, shuffle_rng=None
):
    """Message-passing network, one edge and one node at a time.

    Edge processing order is optionally shuffled to demonstrate that summed
    aggregation does not depend on discovery order (up to roundoff).
    """
    p = net.views
    n = node_x.shape[0]
    v = _mlp_of(p.enc_node, node_x)
    em = _mlp_of(p.enc_mesh, mesh_x)
    has_world = net.world_in is not None
    ew = _mlp_of(p.enc_world, world_x) if has_world else None

    def edge_order(count):
        order = np.arange(count)
        if shuffle_rng is not None:
            shuffle_rng.shuffle(order)
        return order

    for f_mesh, f_world, f_node in p.blocks:
        em_new = np.empty_like(em)
        for e in edge_order(mesh_edges.shape[0]):
            r, s = mesh_edges[e]
            row = np.concatenate([em[e], v[r], v[s]])[None, :]
            em_new[e] = em[e] + _mlp_of(f_mesh, row)[0]
        if has_world:
            ew_new = np.empty_like(ew)
            for e in edge_order(world_edges.shape[0]):
                r, s = world_edges[e]
                row = np.concatenate([ew[e], v[r], v[s]])[None, :]
                ew_new[e] = ew[e] + _mlp_of(f_world, row)[0]
        agg_m = np.zeros((n, net.width))
        for e in edge_order(mesh_edges.shape[0]):
            agg_m[mesh_edges[e, 0]] += em_new[e]
        if has_world:
            agg_w = np.zeros((n, net.width))
            for e in edge_order(world_edges.shape[0]):
                agg_w[world_edges[e, 0]] += ew_new[e]
        v_new = np.empty_like(v)
        for i in range(n):
            parts = [v[i], agg_m[i]] + ([agg_w[i]] if has_world else [])
            v_new[i] = v[i] + _mlp_of(f_node, np.concatenate(parts)[None, :])[0]
        v, em = v_new, em_new
        if has_world:
            ew = ew_new
    return _mlp_of(p.decoder, v)


def random_test_graph(rng, n, node_in, mesh_in, world_in=None, mesh_deg=3, world_deg=1):
    """Random sorted directed edge lists + features for network-level tests."""

    def directed(avg_deg):
        und = set()
        target = max(1, (n * avg_deg) // 2)
        while len(und) < target:
            i, j = rng.integers(0, n, size=2)
            if i != j:
                und.add((min(i, j), max(i, j)))
        pairs = np.array(sorted(und), dtype=np.int64)
        both = np.concatenate([pairs, pairs[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        return both[order]

    mesh_edges = directed(mesh_deg)
    out = {
        "node_x": rng.normal(size=(n, node_in)),
        "mesh_edges": mesh_edges,
        "mesh_x": rng.normal(size=(mesh_edges.shape[0], mesh_in)),
    }
    if world_in is not None:
        world_edges = directed(world_deg)
        out["world_edges"] = world_edges
        out["world_x"] = rng.normal(size=(world_edges.shape[0], world_in))
    return out


def finite_difference_gradient(loss_fn, flat, indices, eps=1e-5):
    """Central finite differences of a scalar loss at selected parameters."""
    grads = np.empty(len(indices))
    for k, idx in enumerate(indices):
        keep = flat[idx]
        flat[idx] = keep + eps
        lp = loss_fn()
        flat[idx] = keep - eps
        lm = loss_fn()
        flat[idx] = keep
        grads[k] = (lp - lm) / (2.0 * eps)
    return grads


def in_circumcircle(a, b, c, d):
    """True when d lies strictly inside the circumcircle of CCW triangle (a,b,c)."""
    rows = []
    for p in (a, b, c):
        dx, dy = p[0] - d[0], p[1] - d[1]
        rows.append([dx, dy, dx * dx + dy * dy])
    return float(np.linalg.det(np.array(rows))) > 0.0


def relative_error(a, b, floor=1e-8):
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def oracle_min_ellipse_det(points, coarse=720, refine_levels=2):
    """Best det(S) over zero-centered ellipses containing the points, found by
    grid search over the ellipse axis angle with an exact inner solve.

    In a rotated frame where S = diag(d1, d2), containment of point (x, y)
    is the linear constraint x^2 d1 + y^2 d2 <= 1 and det = d1 * d2. For a
    fixed angle the maximum of d1*d2 over that polytope sits either at a
    tangency point of one constraint (d = (1/2x^2, 1/2y^2)) or at a vertex
    where two constraints meet; both are enumerated exactly. The angle grid
    is refined twice around the best angle, so the result is a tight lower
    bound on the true optimum.
    """
    pts = np.asarray(points, dtype=np.float64)

    def best_over(thetas):
        c, s = np.cos(thetas)[:, None], np.sin(thetas)[:, None]
        x = c * pts[:, 0] + s * pts[:, 1]
        y = -s * pts[:, 0] + c * pts[:, 1]
        a, b = x * x, y * y  # (T, K) constraint rows
        T, K = a.shape
        d1s, d2s, oks = [], [], []
        tiny = 1e-300
        for k in range(K):
            ak, bk = a[:, k], b[:, k]
            ok = (ak > tiny) & (bk > tiny)
            d1s.append(np.where(ok, 0.5 / np.maximum(ak, tiny), 0.0))
            d2s.append(np.where(ok, 0.5 / np.maximum(bk, tiny), 0.0))
            oks.append(ok)
        for k in range(K):
            for l in range(k + 1, K):
                det = a[:, k] * b[:, l] - a[:, l] * b[:, k]
                safe = np.where(det == 0.0, 1.0, det)
                d1 = (b[:, l] - b[:, k]) / safe
                d2 = (a[:, k] - a[:, l]) / safe
                ok = (det != 0.0) & np.isfinite(d1) & np.isfinite(d2)
                ok &= (d1 > 0.0) & (d2 > 0.0)
                d1s.append(np.where(ok, d1, 0.0))
                d2s.append(np.where(ok, d2, 0.0))
                oks.append(ok)
        d1 = np.stack(d1s, axis=1)  # (T, C)
        d2 = np.stack(d2s, axis=1)
        ok = np.stack(oks, axis=1)
        feas = d1[:, :, None] * a[:, None, :] + d2[:, :, None] * b[:, None, :]
        ok &= np.all(feas <= 1.0 + 1e-12, axis=2)
        prod = np.where(ok, d1 * d2, 0.0)
        best = prod.max(axis=1)
        return best

    lo, hi = 0.0, np.pi  # axis angle has period pi
    thetas = np.linspace(lo, hi, coarse, endpoint=False)
    vals = best_over(thetas)
    for _ in range(refine_levels):
        i = int(np.argmax(vals))
        span = thetas[1] - thetas[0] if len(thetas) > 1 else np.pi / coarse
        thetas = np.linspace(thetas[i] - span, thetas[i] + span, 200)
        vals = best_over(thetas)
    return float(vals.max())
