"""Builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from gsplit.gaussians import GaussianSet
from gsplit.mesh import MeshGraph
from gsplit.raster import look_at


def random_graph(rng: np.random.Generator, n: int | None = None, p: float = 0.3,
                 with_positions: bool = False) -> MeshGraph:
    n = int(rng.integers(1, 21)) if n is None else n
    iu, ju = np.triu_indices(n, 1)
    pick = rng.random(len(iu)) < p
    edges = np.stack([iu[pick], ju[pick]], axis=1)
    pos = rng.uniform(-0.5, 0.5, size=(n, 3)) if with_positions else None
    return MeshGraph(n, edges, pos)


def brute_force_layer(base: MeshGraph, k: int, layer: int):
    """Set construction straight from the definition, labelled by (j, m) pairs."""
    c = k ** layer
    n0 = base.vertex_count
    verts = {(j, m) for j in range(n0) for m in range(c)}
    topo = {frozenset({(u, m), (v, m)}) for u, v in base.edge_set() for m in range(c)}
    conn = {frozenset({(j, a), (j, b)}) for j in range(n0) for a in range(c) for b in range(a + 1, c)}
    idx = {(j, m): m * n0 + j for j, m in verts}
    as_pairs = lambda es: {tuple(sorted(idx[x] for x in e)) for e in es}  # noqa: E731
    return verts, as_pairs(topo), as_pairs(conn)


def random_splats(rng: np.random.Generator, n: int, spread: float = 0.4, scale=(0.05, 0.15),
                  opacity=(0.3, 0.95)) -> GaussianSet:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet.from_arrays(
        rng.uniform(-spread, spread, size=(n, 3)), q,
        rng.uniform(*scale, size=(n, 3)), rng.uniform(*opacity, size=n),
        rng.uniform(0, 1, size=(n, 3)))


def front_camera(size: int = 32, focal: float = 40.0):
    return look_at((0.0, 0.0, -3.0), (0.0, 0.0, 0.0), size, size, focal)


def small_shape(layers: int = 2, feature_dim: int = 8, heads: int = 2):
    from gsplit.gsn import GsnShape
    return GsnShape(feature_dim, heads, feature_dim, layers)


def gsn_permutation_gap(seed: int, k: int = 2, layers: int = 2) -> float:
    """Max deviation between relabelled-then-run and run-then-relabelled outputs."""
    from gsplit.gaussians import layer_scale
    from gsplit.gsn import init_params, run_autoregressive

    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    base = random_graph(rng, n=n, p=0.5, with_positions=True)
    g0 = random_splats(rng, n)
    g0 = GaussianSet.from_arrays(base.positions, *g0.arrays()[1:])
    shape = small_shape(layers)
    params = init_params(shape, seed)
    scales = [layer_scale(i, 1.0) for i in range(layers + 1)]
    ref = run_autoregressive(g0, params, shape, base, k, layers, scales)

    perm = rng.permutation(n)          # old vertex j gets label perm[j]
    inv = np.argsort(perm)
    base_p = MeshGraph(n, perm[base.edges], base.positions[inv])
    g0_p = GaussianSet.from_arrays(*(a[inv] for a in g0.arrays()))
    out = run_autoregressive(g0_p, params, shape, base_p, k, layers, scales)

    gap = 0.0
    for i, (a, b) in enumerate(zip(ref, out)):
        idx = np.concatenate([m * n + perm for m in range(k ** i)])
        for x, y in zip(a.gaussians.arrays(), b.gaussians.arrays()):
            gap = max(gap, float(np.max(np.abs(y[idx] - x))))
        if a.features is not None:
            gap = max(gap, float(np.max(np.abs(b.features.data[idx] - a.features.data))))
        if a.soft_mask is not None:
            gap = max(gap, float(np.max(np.abs(b.soft_mask.data[idx] - a.soft_mask.data))))
        if not np.array_equal(b.mask.logical[idx], a.mask.logical):
            gap = max(gap, 1.0)
    return gap


def hereditary_trial(rng: np.random.Generator) -> bool:
    """One random mask chain; True if every active child has an all-active ancestry."""
    from gsplit.diffcore import Tensor
    from gsplit.gating import init_mask, propagate_mask

    n0, k, layers = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    masks = [init_mask(n0)]
    # soft values drawn around the threshold, including exact 0.5
    for i in range(layers):
        m = len(masks[-1]) * k
        soft = np.where(rng.random(m) < 0.1, 0.5, rng.uniform(0.0, 1.0, m))
        masks.append(propagate_mask(masks[-1], Tensor(soft), k))
    for i in range(1, len(masks)):
        parent_of = np.arange(len(masks[i])) % len(masks[i - 1])
        child, parent = masks[i].logical, masks[i - 1].logical
        if np.any(child & ~parent[parent_of]):
            return False
        if child.sum() > k * parent.sum():
            return False
        if not np.array_equal(masks[i].composite.data, child.astype(float)):
            return False
    return True


def delayed_filtering_gap(rng: np.random.Generator, n: int = 12, size: int = 24) -> float:
    """|render(all, mask) - render(kept subset)|, max over pixels and channels."""
    from gsplit.raster import render

    g = random_splats(rng, n)
    mask = rng.random(n) < 0.5
    cam = front_camera(size)
    tagged = render(g, mask, cam)
    filtered = render(g.subset(mask).detach(), None, cam) if mask.any() else np.zeros_like(tagged)
    return float(np.max(np.abs(tagged - filtered)))
