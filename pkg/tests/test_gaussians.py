import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import front_camera, random_splats
from gsplit import diffcore as dc
from gsplit.diffcore import Tensor
from gsplit.gaussians import (SCALE_EPS, GaussianSet, LayerScale, RawGaussianParams, activate, concat,
                              covariance, layer_scale, read_ply, write_ply)
from gsplit.gradcheck import check_gaussians
from gsplit.raster import render_oracle

UNIT = LayerScale(0, 1.0, 1.0, 1.0)


def test_activate_at_zero():
    g = activate(RawGaussianParams.zeros(1), np.zeros((1, 3)), UNIT)
    np.testing.assert_array_equal(g.positions.data, [[0, 0, 0]])
    assert g.opacities.data[0] == 0.5
    np.testing.assert_array_equal(g.scales.data, [[0.5 + SCALE_EPS] * 3])
    np.testing.assert_array_equal(g.rotations.data, [[1, 0, 0, 0]])
    np.testing.assert_array_equal(g.colors.data, [[0.5] * 3])


def test_opacity_cap_saturates():
    raw = RawGaussianParams.zeros(1)
    raw.opacity.data[:] = 40.0
    g = activate(raw, np.zeros((1, 3)), LayerScale(0, 0.25, 1.0, 1.0))
    assert g.opacities.data[0] == pytest.approx(0.25, abs=1e-15)
    assert g.opacities.data[0] <= 0.25


def test_offset_bounded_by_cap():
    rng = np.random.default_rng(0)
    n = 500
    raw = RawGaussianParams.zeros(n)
    for t in raw.tensors():
        t.data[:] = rng.normal(scale=5.0, size=t.shape)
    parent = rng.normal(size=(n, 3))
    g = activate(raw, parent, LayerScale(0, 0.8, 0.1, 0.07))
    assert np.all(np.abs(g.positions.data - parent) <= 0.07)
    g.validate()
    np.testing.assert_allclose(np.linalg.norm(g.rotations.data, axis=1), 1.0, atol=1e-12)


def test_activate_rejects_non_finite():
    raw = RawGaussianParams.zeros(2)
    raw.scale.data[0, 0] = np.nan
    with pytest.raises(ValueError):
        activate(raw, np.zeros((2, 3)), UNIT)
    with pytest.raises(ValueError):
        activate(RawGaussianParams.zeros(2), np.zeros((3, 3)), UNIT)


def test_activate_fd():
    for r in check_gaussians(seed=4):
        assert r.passed, (r.name, r.report.max_rel_err)


def test_layer_caps_strictly_decrease():
    caps = [layer_scale(i, 2.0) for i in range(5)]
    for a, b in zip(caps, caps[1:]):
        assert b.opacity_cap < a.opacity_cap
        assert b.scale_cap < a.scale_cap
        assert b.position_offset_cap < a.position_offset_cap
    assert caps[0] == LayerScale(0, 0.8, 0.1, 0.2)
    with pytest.raises(ValueError):
        layer_scale(1, 1.0, decay=1.0)


def test_covariance_examples():
    np.testing.assert_array_equal(covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3))
    np.testing.assert_array_equal(covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1, 1]))
    c = math.cos(math.pi / 4)
    np.testing.assert_allclose(covariance([c, 0, 0, c], [2, 1, 1]), np.diag([1.0, 4, 1]), atol=1e-14)


def test_covariance_errors():
    with pytest.raises(ValueError):
        covariance([1, 1, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        covariance([1, 0, 0, 0], [1, 0, 1])


def test_covariance_spd_sweep():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(1000, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(0.01, 3.0, size=(1000, 3))
    cov = covariance(q, s)
    np.testing.assert_allclose(cov, np.swapaxes(cov, 1, 2), atol=1e-12, rtol=0)
    np.linalg.cholesky(cov)  # raises unless positive definite
    np.testing.assert_allclose(np.linalg.det(cov), np.prod(s, axis=1) ** 2, rtol=1e-9)
    ev = np.sort(np.linalg.eigvalsh(cov), axis=1)
    np.testing.assert_allclose(ev, np.sort(s ** 2, axis=1), rtol=1e-9, atol=1e-12)


def test_concat_sizes_and_order():
    rng = np.random.default_rng(2)
    a, b, c = (random_splats(rng, n) for n in (10, 20, 40))
    assert concat([a]) is a
    out = concat([a, b, c])
    assert len(out) == 70
    np.testing.assert_array_equal(out.positions.data[10:30], b.positions.data)
    with pytest.raises(ValueError):
        concat([])


def test_concat_renders_like_union():
    rng = np.random.default_rng(3)
    a, b = random_splats(rng, 4), random_splats(rng, 5)
    cam = front_camera(16)
    union = GaussianSet.from_arrays(*(np.concatenate([x, y]) for x, y in zip(a.arrays(), b.arrays())))
    mask = np.ones(9, bool)
    np.testing.assert_array_equal(render_oracle(concat([a, b]), mask, cam), render_oracle(union, mask, cam))


def test_concat_gradients_flow_to_parts():
    a = GaussianSet.from_arrays(np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)), np.ones((2, 3)),
                                np.ones(2) * 0.5, np.ones((2, 3)) * 0.5, requires_grad=True)
    out = concat([a, a])
    dc.tensor_sum(out.positions).backward()
    np.testing.assert_array_equal(a.positions.grad, 2 * np.ones((2, 3)))


def test_set_shape_validation():
    with pytest.raises(ValueError):
        GaussianSet(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3))),
                    Tensor(np.zeros(3)), Tensor(np.zeros((2, 3))))


def test_ply_round_trip(tmp_path):
    g = random_splats(np.random.default_rng(5), 7)
    path = tmp_path / "s.ply"
    write_ply(path, g)
    assert path.read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")
    back = read_ply(path)
    for x, y in zip(g.arrays(), back.arrays()):
        np.testing.assert_allclose(y, x, rtol=1e-5, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=14, max_size=14))
def test_activate_always_valid(logits):
    raw = RawGaussianParams.from_logits(Tensor(np.array([logits])))
    g = activate(raw, np.zeros((1, 3)), layer_scale(2, 1.5))
    g.validate()
