import numpy as np
import pytest

from helpers import gsn_permutation_gap, random_graph, random_splats, small_shape
from gsplit import diffcore as dc
from gsplit.diffcore import Tensor
from gsplit.gaussians import ATTRIBUTE_DIM, GaussianSet, layer_scale
from gsplit.gradcheck import check_gsn
from gsplit.gsn import (GsnShape, LayerState, attention_weights, duplicate, embed, gat_layer, init_params,
                        load_checkpoint, run_autoregressive, save_checkpoint, split_layer)
from gsplit.gating import init_mask
from gsplit.mesh import MeshGraph, extend, icosahedron, tetrahedron, to_adjacency


def splats_on(base: MeshGraph, seed: int = 0) -> GaussianSet:
    g = random_splats(np.random.default_rng(seed), base.vertex_count)
    return GaussianSet.from_arrays(base.positions, *g.arrays()[1:])


def test_default_parameter_shapes():
    p = init_params(GsnShape(layers=1))
    assert p["embed.w1"].shape == (ATTRIBUTE_DIM, 256)
    assert p["split1.gat.w"].shape == (256, 256)       # 4 heads of 256 -> 64
    assert p["split1.gat.att"].shape == (4, 128)
    assert p["split1.gat.mix_w"].shape == (256, 256)
    assert p["split1.dec.w2"].shape == (256, ATTRIBUTE_DIM)
    assert p["split1.mask.w1"].shape == (256, 64)
    assert p["split1.mask.w2"].shape == (64, 1)


def test_shared_and_unshared_prefixes():
    assert {n.split(".")[0] for n in init_params(small_shape(3))} == {"embed", "split1", "split2", "split3"}
    shared = GsnShape(8, 2, 8, 3, shared=True)
    assert {n.split(".")[0] for n in init_params(shared)} == {"embed", "split"}


def test_init_is_seeded_and_bounded():
    a, b = init_params(small_shape(), 3), init_params(small_shape(), 3)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert np.all(np.abs(a["embed.w1"].data) <= 1 / np.sqrt(ATTRIBUTE_DIM))
    with pytest.raises(ValueError):
        GsnShape(10, 4).head_dim


def test_embed_shape_and_zero_weights():
    g = random_splats(np.random.default_rng(0), 5)
    p = init_params(small_shape())
    assert embed(g, p).shape == (5, 8)
    for n in ("embed.w1", "embed.w2"):
        p[n].data[:] = 0
    f = embed(g, p).data
    np.testing.assert_array_equal(f, np.tile(p["embed.b2"].data, (5, 1)))


def test_embed_permutes_rows():
    g = random_splats(np.random.default_rng(1), 6)
    perm = np.random.default_rng(2).permutation(6)
    gp = GaussianSet.from_arrays(*(a[perm] for a in g.arrays()))
    p = init_params(small_shape())
    np.testing.assert_allclose(embed(gp, p).data, embed(g, p).data[perm], rtol=0, atol=1e-14)


def test_duplicate_copy_major_and_grad():
    f = Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
    assert duplicate(f, 1).data.tolist() == [[1.0], [2.0]]
    d = duplicate(f, 2)
    assert d.data[:, 0].tolist() == [1.0, 2.0, 1.0, 2.0]
    dc.tensor_sum(duplicate(f, 3)).backward()
    assert f.grad[:, 0].tolist() == [3.0, 3.0]


def test_single_vertex_self_loop():
    p = init_params(small_shape())
    f = Tensor(np.random.default_rng(3).normal(size=(1, 8)))
    out = gat_layer(f, [0], [0], p, "split1", 2).data
    want = (f.data @ p["split1.gat.w"].data) @ p["split1.gat.mix_w"].data + p["split1.gat.mix_b"].data
    np.testing.assert_allclose(out, want, rtol=1e-13, atol=1e-14)


def test_symmetric_vertices_identical():
    p = init_params(small_shape())
    row = np.random.default_rng(4).normal(size=8)
    f = Tensor(np.stack([row, row]))
    out = gat_layer(f, [0, 1, 0, 1], [0, 0, 1, 1], p, "split1", 2).data
    np.testing.assert_array_equal(out[0], out[1])


def test_attention_sums_to_one():
    rng = np.random.default_rng(5)
    for _ in range(10):
        base = random_graph(rng, p=0.4)
        src, dst = to_adjacency(extend(base, 2, 1))
        n = 2 * base.vertex_count
        p = init_params(small_shape(), int(rng.integers(1000)))
        w = attention_weights(Tensor(rng.normal(size=(n, 8))), src, dst, p, "split1", 2)
        sums = np.zeros((n, 2))
        np.add.at(sums, dst, w)
        np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)
        assert np.all(w >= 0)


def test_gat_errors():
    p = init_params(small_shape())
    f = Tensor(np.zeros((3, 8)))
    with pytest.raises(ValueError):  # vertex 2 has no incoming edge
        gat_layer(f, [0, 1], [0, 1], p, "split1", 2)
    with pytest.raises(ValueError):
        gat_layer(f, [0, 5], [0, 1], p, "split1", 2)


def _state(base, params, seed=0):
    g0 = splats_on(base, seed)
    return LayerState(g0, embed(g0, params), init_mask(len(g0)))


def test_zero_gat_is_residual_passthrough():
    base = tetrahedron()[0]
    p = init_params(small_shape())
    for n in ("split1.gat.w", "split1.gat.att", "split1.gat.mix_w", "split1.gat.mix_b"):
        p[n].data[:] = 0
    st = _state(base, p)
    nxt = split_layer(st, extend(base, 2, 1), layer_scale(1, 1.0), p, small_shape(), "split1")
    np.testing.assert_array_equal(nxt.features.data, np.tile(st.features.data, (2, 1)))
    assert len(nxt.gaussians) == 2 * len(st.gaussians)


def test_zero_decoder_children_copy_parents():
    base = icosahedron(0.5)[0]
    p = init_params(small_shape())
    for n in ("split1.gat.w", "split1.gat.mix_w", "split1.gat.mix_b", "split1.dec.w2", "split1.dec.b2"):
        p[n].data[:] = 0
    st = _state(base, p)
    scale = layer_scale(1, 1.0)
    nxt = split_layer(st, extend(base, 3, 1), scale, p, small_shape(), "split1")
    g = nxt.gaussians
    np.testing.assert_array_equal(g.positions.data, np.tile(st.gaussians.positions.data, (3, 1)))
    np.testing.assert_array_equal(g.opacities.data, np.full(36, 0.5 * scale.opacity_cap))
    np.testing.assert_array_equal(g.rotations.data, np.tile([1.0, 0, 0, 0], (36, 1)))


def test_split_layer_size_mismatch():
    base = tetrahedron()[0]
    p = init_params(small_shape())
    st = _state(base, p)
    with pytest.raises(ValueError):
        split_layer(st, extend(base, 2, 2), layer_scale(1, 1.0), p, small_shape(), "split1")


def test_run_autoregressive_layer_zero_only():
    base = tetrahedron()[0]
    g0 = splats_on(base)
    out = run_autoregressive(g0, {}, small_shape(0), base, 2, 0, [layer_scale(0, 1.0)])
    assert len(out) == 1 and out[0].features is None
    assert out[0].mask.logical.all() and len(out[0].mask) == 4


def test_run_autoregressive_sizes_and_bounds():
    base = icosahedron(0.5)[0]
    shape = small_shape(3)
    out = run_autoregressive(splats_on(base), init_params(shape), shape, base, 2, 3,
                             [layer_scale(i, 1.0) for i in range(4)])
    assert [len(s.gaussians) for s in out] == [12, 24, 48, 96]
    active = sum(int(s.mask.logical.sum()) for s in out)
    assert active <= sum(len(s.gaussians) for s in out)
    for a, b in zip(out, out[1:]):
        assert b.mask.logical.sum() <= 2 * a.mask.logical.sum()


def test_flame_sized_layer_counts():
    rng = np.random.default_rng(0)
    base = random_graph(rng, n=5023, p=0.0004, with_positions=True)
    shape = GsnShape(4, 1, 4, 3)
    out = run_autoregressive(splats_on(base), init_params(shape), shape, base, 2, 3,
                             [layer_scale(i, 1.0) for i in range(4)])
    sizes = [len(s.gaussians) for s in out]
    assert sizes == [5023, 10046, 20092, 40184]
    assert sum(sizes) == 75345


def test_run_autoregressive_errors():
    base = tetrahedron()[0]
    shape = small_shape(3)
    p = init_params(shape)
    scales = [layer_scale(i, 1.0) for i in range(4)]
    with pytest.raises(ValueError):
        run_autoregressive(splats_on(base), p, shape, base, 2, 3, scales, vertex_cap=16)
    with pytest.raises(ValueError):
        run_autoregressive(random_splats(np.random.default_rng(0), 3), p, shape, base, 2, 1, scales)
    with pytest.raises(ValueError):
        run_autoregressive(splats_on(base), p, shape, base, 2, -1, scales)


@pytest.mark.parametrize("seed", range(5))
def test_permutation_equivariance(seed):
    assert gsn_permutation_gap(seed, k=2 + seed % 2) < 1e-10


def test_end_to_end_fd():
    for r in check_gsn(seed=2):
        assert r.passed, (r.name, r.report.max_rel_err)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(small_shape(), 9)
    path = tmp_path / "ckpt"
    save_checkpoint(path, p, 2, {"note": "x = 1"})
    q, layers, meta = load_checkpoint(path)
    assert layers == 2 and meta == {"note": "x = 1"}
    assert sorted(p) == sorted(q)
    for n in p:
        np.testing.assert_array_equal(p[n].data, q[n].data)
    blob = path.read_bytes()
    assert blob[:8] == b"GSPLITCK"
    (tmp_path / "bad").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
