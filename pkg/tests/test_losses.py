import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtscene import losses as L
from mtscene import nn
from mtscene.tensor import Tensor, precision


def test_semantic_loss_examples():
    assert L.semantic_loss(Tensor(np.zeros((1, 2, 1, 1))), np.zeros((1, 1, 1), int)).item() == pytest.approx(math.log(2))
    logits = np.zeros((1, 2, 1, 1))
    logits[0, 0] = 20.0
    assert L.semantic_loss(Tensor(logits), np.zeros((1, 1, 1), int)).item() < 1e-6
    with pytest.raises(ValueError):
        L.semantic_loss(Tensor(np.zeros((1, 2, 1, 1))), np.full((1, 1, 1), 255))


def test_semantic_loss_ignores_void_pixels():
    logits = np.zeros((1, 2, 1, 2))
    logits[0, 1, 0, 1] = 50.0
    labels = np.array([[[0, 255]]])
    assert L.semantic_loss(Tensor(logits), labels).item() == pytest.approx(math.log(2))


def test_center_loss_examples():
    t = np.zeros((1, 1, 2, 2))
    assert L.center_loss(Tensor(t), t).item() == 0
    t[0, 0, 0, 0] = 1
    assert L.center_loss(Tensor(np.zeros_like(t)), t).item() == 0.25
    assert L.center_loss(Tensor(np.full((1, 1, 3, 3), 0.5)), np.full((1, 1, 3, 3), 0.2)).item() == pytest.approx(0.09)


def test_offset_loss_examples():
    mask = np.ones((1, 1, 1), bool)
    target = np.array([3.0, -4.0]).reshape(1, 2, 1, 1)
    assert L.offset_loss(Tensor(target), target, mask).item() == 0
    assert L.offset_loss(Tensor(np.zeros_like(target)), target, mask).item() == 3.5
    assert L.offset_loss(Tensor(target + 0.75), target, mask).item() == 0.75
    with pytest.raises(ValueError):
        L.offset_loss(Tensor(target), target, ~mask)


def unit(deg):
    r = np.deg2rad(deg)
    return np.array([np.cos(r), np.sin(r)]).reshape(1, 2, 1, 1)


def test_orientation_loss_examples():
    with precision("double"):
        assert L.orientation_loss(Tensor(unit(30)), unit(30)).item() == pytest.approx(0, abs=1e-15)
        assert L.orientation_loss(Tensor(-unit(30)), unit(30)).item() == pytest.approx(1 - math.exp(-2), abs=1e-12)
        assert L.orientation_loss(Tensor(unit(120)), unit(30)).item() == pytest.approx(1 - math.exp(-1), abs=1e-12)
    with pytest.raises(ValueError):
        L.orientation_loss(Tensor(np.zeros((1, 2, 1, 1))), unit(0))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 360), st.floats(0, 360), st.floats(0.1, 5), st.floats(0.1, 10))
def test_orientation_loss_range_and_wraparound(pred, true, kappa, norm):
    with precision("double"):
        f = Tensor(unit(pred) * norm)
        a = L.orientation_loss(f, unit(true), kappa).item()
        b = L.orientation_loss(f, unit(true + 360.0), kappa).item()
    assert a == pytest.approx(b, abs=1e-12)
    assert -1e-12 <= a <= 1 - math.exp(-2 * kappa) + 1e-12


def test_scene_loss_examples():
    assert L.scene_loss(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), rel=1e-6)
    confident = np.zeros((1, 4))
    confident[0, 1] = 20
    assert L.scene_loss(Tensor(confident), [1]).item() < 1e-6
    two = L.scene_loss(Tensor(np.tile(np.array([[0.3, -1.0, 2.0, 0.1]]), (2, 1))), [0, 0]).item()
    one = L.scene_loss(Tensor(np.array([[0.3, -1.0, 2.0, 0.1]])), [0]).item()
    assert two == pytest.approx(one, rel=1e-6)


def test_scene_head():
    init = nn.Initializer(0)
    L.init_scene_head(init, 8, 4)
    feat = np.random.default_rng(0).normal(size=(2, 8, 3, 3))
    out = L.scene_head(Tensor(feat), init.params)
    assert out.shape == (2, 4)
    means = np.broadcast_to(feat.mean(axis=(2, 3))[:, :, None, None], feat.shape)
    np.testing.assert_allclose(L.scene_head(Tensor(means), init.params).data, out.data, rtol=1e-5)
    init.params["scene.fc.weight"].data[...] = 0
    assert not L.scene_head(Tensor(feat), init.params).data.any()


def test_all_losses_vanish_on_perfect_predictions():
    labels = np.array([[[0, 1], [1, 0]]])
    logits = np.stack([labels == 0, labels == 1], axis=1) * 20.0
    heat = np.random.default_rng(0).uniform(size=(1, 1, 2, 2))
    offs = np.random.default_rng(1).normal(size=(1, 2, 2, 2))
    batch = [
        L.semantic_loss(Tensor(logits), labels).item(),
        L.center_loss(Tensor(heat), heat).item(),
        L.offset_loss(Tensor(offs), offs, np.ones((1, 2, 2), bool)).item(),
        L.orientation_loss(Tensor(unit(77)), unit(77)).item(),
        L.scene_loss(Tensor(np.array([[20.0, 0.0]])), [0]).item(),
    ]
    assert all(0 <= v < 1e-6 for v in batch)


# --- target encoders -------------------------------------------------------------------


def test_single_pixel_instance():
    m = np.zeros((7, 7), int)
    m[3, 4] = 1
    t = L.encode_center_targets(m)
    assert t.heatmap[3, 4] == 1.0 and t.heatmap.max() == 1.0
    assert tuple(t.offsets[:, 3, 4]) == (0.0, 0.0)
    assert t.valid_mask.sum() == 1


def test_two_by_two_instance_offsets():
    m = np.zeros((4, 4), int)
    m[:2, :2] = 5
    t = L.encode_center_targets(m)
    assert t.centroids[5] == (0.5, 0.5)
    np.testing.assert_array_equal(t.offsets[:, :2, :2], [[[0.5, 0.5], [-0.5, -0.5]], [[0.5, -0.5], [0.5, -0.5]]])


def test_empty_scene_targets():
    t = L.encode_center_targets(np.zeros((8, 8), int))
    assert not t.heatmap.any() and not t.valid_mask.any() and not t.offsets.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_pixel_plus_offset_is_centroid(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 4, size=(12, 10))
    t = L.encode_center_targets(m)
    rows, cols = np.indices(m.shape)
    for i, (r, c) in t.centroids.items():
        sel = m == i
        np.testing.assert_allclose(rows[sel] + t.offsets[0][sel], r, rtol=0, atol=1e-12)
        np.testing.assert_allclose(cols[sel] + t.offsets[1][sel], c, rtol=0, atol=1e-12)


@pytest.mark.parametrize("scale", [2, 4])
def test_level_coordinates_are_a_similarity(scale):
    m = np.zeros((16, 16), int)
    m[4:12, 8:16] = 1  # aligned with level cells at both scales
    full = L.encode_center_targets(m, 1)
    level = L.encode_center_targets(m, scale)
    (fr, fc), (lr, lc) = full.centroids[1], level.centroids[1]
    # pixel-edge coordinates scale by 1/scale
    assert (lr + 0.5, lc + 0.5) == ((fr + 0.5) / scale, (fc + 0.5) / scale)
    # level offsets are full-resolution offsets from each cell's center, divided by scale
    rows, cols = np.nonzero(level.valid_mask)
    centre = (scale - 1) / 2
    np.testing.assert_allclose(level.offsets[0][rows, cols], (fr - (rows * scale + centre)) / scale)
    np.testing.assert_allclose(level.offsets[1][rows, cols], (fc - (cols * scale + centre)) / scale)


def test_single_level_pyramid_is_the_original():
    m = np.random.default_rng(0).integers(0, 3, size=(8, 8))
    (only,) = L.pyramid_targets(m, [1])
    ref = L.encode_center_targets(m)
    assert np.array_equal(only.heatmap, ref.heatmap) and np.array_equal(only.offsets, ref.offsets)


def test_orientation_targets_are_unit_vectors_on_labelled_cells():
    m = np.zeros((6, 6), int)
    m[1:3, 1:3] = 1
    m[4:, 4:] = 2
    t, mask = L.encode_orientation_targets(m, {1: 90.0, 2: 225.0})
    np.testing.assert_allclose(t[:, 1, 1], [0, 1], atol=1e-12)
    np.testing.assert_allclose(np.hypot(t[0], t[1])[mask], 1.0)
    assert mask.sum() == 8
