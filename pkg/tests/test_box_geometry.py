import math

import numpy as np
import pytest

from mtsm.box_geometry import (
    box_array,
    geometric_bias,
    geometry_embedding,
    relative_geometry,
    sinusoid_embed,
)
from mtsm.errors import ConfigError, DimensionError, InvalidBoxError
from mtsm.models import Box
from mtsm.tensor import Tensor


def separated_boxes(rng, n):
    """Boxes whose centers differ by at least 1/16 on both axes (or coincide exactly)."""
    cx = (rng.permutation(8)[:n] + rng.uniform(0.25, 0.75, size=n)) / 8
    cy = (rng.permutation(8)[:n] + rng.uniform(0.25, 0.75, size=n)) / 8
    w = rng.uniform(0.05, 0.3, size=n)
    h = rng.uniform(0.05, 0.3, size=n)
    return np.stack([cx, cy, w, h], axis=1)


def similarity(boxes, s, tx, ty):
    out = boxes.copy()
    out[:, 0] = s * boxes[:, 0] + tx
    out[:, 1] = s * boxes[:, 1] + ty
    out[:, 2:] = s * boxes[:, 2:]
    return out


class TestBoxArray:
    def test_accepts_box_models(self):
        arr = box_array([Box(cx=0.5, cy=0.5, w=0.2, h=0.1)])
        np.testing.assert_array_equal(arr, [[0.5, 0.5, 0.2, 0.1]])

    def test_rejects_zero_size(self):
        with pytest.raises(InvalidBoxError):
            box_array(np.array([[0.5, 0.5, 0.0, 0.1]]))

    def test_rejects_empty(self):
        with pytest.raises(InvalidBoxError):
            box_array(np.zeros((0, 4)))

    def test_rejects_wrong_width(self):
        with pytest.raises(DimensionError):
            box_array(np.ones((2, 3)))


class TestRelativeGeometry:
    def test_hand_pair(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.7, 0.5, 0.4, 0.2]])
        delta = relative_geometry(boxes).delta
        # seen from box 0: offset equal to its width, same row, twice as wide
        np.testing.assert_allclose(delta[0, 1], [0.0, -3.0, math.log10(2.0), 0.0], atol=1e-12)
        np.testing.assert_allclose(delta[1, 0], [math.log10(0.5), -3.0, math.log10(0.5), 0.0], atol=1e-12)

    def test_self_pair(self):
        delta = relative_geometry(np.array([[0.3, 0.6, 0.1, 0.4]])).delta
        np.testing.assert_allclose(delta[0, 0, :2], [-3.0, -3.0], atol=1e-12)
        assert np.all(delta[0, 0, 2:] == 0.0)

    def test_absolute_clamp_floors_the_raw_offset(self):
        boxes = np.array([[0.3, 0.6, 0.1, 0.4]])
        delta = relative_geometry(boxes, center_clamp="absolute").delta
        np.testing.assert_allclose(delta[0, 0, :2], [math.log10(1e-3 / 0.1), math.log10(1e-3 / 0.4)])

    def test_natural_log_base(self, rng):
        boxes = separated_boxes(rng, 4)
        d10 = relative_geometry(boxes).delta
        de = relative_geometry(boxes, log_base=math.e).delta
        np.testing.assert_allclose(de, d10 * math.log(10.0), atol=1e-12)

    def test_bad_parameters(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2]])
        with pytest.raises(ConfigError):
            relative_geometry(boxes, eps_center=0.0)
        with pytest.raises(ConfigError):
            relative_geometry(boxes, log_base=1.0)
        with pytest.raises(ConfigError):
            relative_geometry(boxes, center_clamp="none")

    def test_invariant_under_translation_and_scale(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            boxes = separated_boxes(rng, int(rng.integers(2, 7)))
            moved = similarity(boxes, rng.uniform(0.5, 2.0), rng.uniform(-1, 1), rng.uniform(-1, 1))
            d0 = relative_geometry(boxes).delta
            d1 = relative_geometry(moved).delta
            assert np.max(np.abs(d0 - d1)) < 1e-12


class TestEmbedding:
    def test_shape_and_channel_layout(self):
        boxes = np.array([[0.2, 0.2, 0.1, 0.1], [0.8, 0.6, 0.2, 0.3], [0.5, 0.5, 0.3, 0.2]])
        feature = relative_geometry(boxes)
        emb = sinusoid_embed(feature, d_g=8)
        assert emb.shape == (3, 3, 32)
        # first channel of each component block is sin(delta), the fifth is cos(delta)
        np.testing.assert_allclose(emb[0, 1, 0], math.sin(feature.delta[0, 1, 0]))
        np.testing.assert_allclose(emb[0, 1, 4], math.cos(feature.delta[0, 1, 0]))
        # self size ratios are 0: sines 0, cosines 1
        np.testing.assert_array_equal(emb[1, 1, 16:20], np.zeros(4))
        np.testing.assert_array_equal(emb[1, 1, 20:24], np.ones(4))

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            sinusoid_embed(relative_geometry(np.array([[0.5, 0.5, 0.1, 0.1]])), d_g=7)


class TestGeometricBias:
    def test_non_negative_with_head_axis(self, rng):
        emb = geometry_embedding(separated_boxes(rng, 5), d_g=8)
        bias = geometric_bias(emb, Tensor(rng.normal(size=(3, 32))))
        assert bias.theta_g.shape == (3, 5, 5)
        assert bias.heads == 3
        assert np.all(bias.theta_g.data >= 0.0)

    def test_matches_per_head_dot_product(self, rng):
        emb = geometry_embedding(separated_boxes(rng, 4), d_g=8)
        W = rng.normal(size=(2, 32))
        theta = geometric_bias(emb, Tensor(W)).theta_g.data
        expected = np.maximum(np.einsum("npk,hk->hnp", emb, W), 0.0)
        np.testing.assert_allclose(theta, expected, atol=1e-12)

    def test_zero_weights_give_zero_gate(self, rng):
        emb = geometry_embedding(separated_boxes(rng, 3), d_g=8)
        assert np.all(geometric_bias(emb, Tensor(np.zeros((2, 32)))).theta_g.data == 0.0)

    def test_width_mismatch(self, rng):
        emb = geometry_embedding(separated_boxes(rng, 3), d_g=8)
        with pytest.raises(DimensionError):
            geometric_bias(emb, Tensor(np.ones((2, 16))))
