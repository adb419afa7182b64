import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmrt.autodiff import ops
from fmrt.autodiff.tensor import Tensor, default_dtype
from fmrt.awpe import (
    AxisEncoder,
    AxisWisePositionEncoder,
    SinusoidalPositionEncoder,
    apply_position,
    build_position_map,
    make_position_encoder,
)
from fmrt.backbone import Backbone, InputError, keypoint_grid


class TestKeypointGrid:
    def test_sixteen_pixel_image(self):
        np.testing.assert_array_equal(
            keypoint_grid(16, 16), [[3.5, 3.5], [11.5, 3.5], [3.5, 11.5], [11.5, 11.5]]
        )

    def test_count(self):
        assert keypoint_grid(64, 64).shape == (64, 2)
        assert keypoint_grid(24, 40).shape == (15, 2)

    def test_inside_image_and_cell_centered(self):
        kp = keypoint_grid(32, 48)
        assert (kp[:, 0] >= 0).all() and (kp[:, 0] < 48).all()
        assert (kp[:, 1] >= 0).all() and (kp[:, 1] < 32).all()
        n = np.arange(len(kp))
        np.testing.assert_array_equal(kp[:, 1], 8 * (n // 6) + 3.5)
        np.testing.assert_array_equal(kp[:, 0], 8 * (n % 6) + 3.5)

    def test_order_matches_sequence_flattening(self):
        # channel 0 of a coarse map holds the row index, channel 1 the column
        h8, w8 = 3, 5
        rows, cols = np.meshgrid(np.arange(h8), np.arange(w8), indexing="ij")
        seq = ops.image_to_seq(Tensor(np.stack([rows, cols]).astype(np.float64), dtype=np.float64)).data
        kp = keypoint_grid(8 * h8, 8 * w8)
        np.testing.assert_array_equal((kp[:, 1] - 3.5) / 8, seq[:, 0])
        np.testing.assert_array_equal((kp[:, 0] - 3.5) / 8, seq[:, 1])

    @pytest.mark.parametrize("h,w", [(0, 8), (12, 16), (16, 20)])
    def test_indivisible(self, h, w):
        with pytest.raises(InputError):
            keypoint_grid(h, w)


class TestBackbone:
    def test_full_size_dimensions(self):
        net = Backbone((32, 64, 128), 256, 128, np.random.default_rng(0))
        pyr = net(Tensor(np.random.default_rng(1).uniform(size=(1, 64, 64))))
        assert pyr.coarse.shape == (256, 8, 8)
        assert pyr.fine.shape == (128, 32, 32)

    @settings(max_examples=8, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4))
    def test_shape_contract(self, a, b):
        net = Backbone((4, 4, 8), 8, 4, np.random.default_rng(0))
        pyr = net(Tensor(np.zeros((1, 8 * a, 8 * b))))
        assert pyr.coarse.shape == (8, a, b)
        assert pyr.fine.shape == (4, 4 * a, 4 * b)

    def test_zero_image_zero_bias(self):
        net = Backbone((4, 4, 8), 8, 4, np.random.default_rng(0))
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0
        pyr = net(Tensor(np.zeros((1, 16, 16))))
        assert not pyr.coarse.data.any() and not pyr.fine.data.any()

    def test_deterministic(self):
        net = Backbone((4, 4, 8), 8, 4, np.random.default_rng(0))
        img = Tensor(np.random.default_rng(2).uniform(size=(1, 24, 16)))
        a, b = net(img), net(img)
        np.testing.assert_array_equal(a.coarse.data, b.coarse.data)
        np.testing.assert_array_equal(a.fine.data, b.fine.data)

    def test_batch_equals_single(self):
        net = Backbone((4, 4, 8), 8, 4, np.random.default_rng(0))
        imgs = np.random.default_rng(3).uniform(size=(2, 1, 16, 16))
        with default_dtype(np.float64):
            batched = net(Tensor(imgs))
            for k in range(2):
                single = net(Tensor(imgs[k]))
                np.testing.assert_allclose(batched.fine.data[k], single.fine.data, atol=1e-12)

    def test_rejects_bad_size(self):
        net = Backbone((4, 4, 8), 8, 4, np.random.default_rng(0))
        with pytest.raises(InputError):
            net(Tensor(np.zeros((1, 20, 16))))


class TestAxisEncoder:
    def test_zero_weights_give_bias(self):
        enc = AxisEncoder(3, np.random.default_rng(0))
        enc.zero_()
        enc.outer.bias.data[...] = [1.0, -2.0, 0.5]
        out = enc(4).data
        np.testing.assert_array_equal(out, np.tile([[1.0], [-2.0], [0.5]], (1, 4)))

    def test_hand_set_two_layer_map(self):
        enc = AxisEncoder(2, np.random.default_rng(0))
        enc.zero_()
        enc.inner.weight.data[...] = [[1.0], [0.0]]
        enc.outer.weight.data[...] = np.eye(2)
        np.testing.assert_array_equal(enc(3).data, [[0.0, 1.0, 2.0], [0.0, 0.0, 0.0]])

    def test_shape(self):
        assert AxisEncoder(64, np.random.default_rng(0))(8).shape == (64, 8)

    def test_normalized_ramp(self):
        enc = AxisEncoder(2, np.random.default_rng(0), normalize=True)
        np.testing.assert_allclose(enc.ramp(5).data.ravel(), [0, 0.25, 0.5, 0.75, 1.0])


class TestPositionMap:
    def test_additively_separable(self):
        enc = AxisWisePositionEncoder(6, np.random.default_rng(0))
        with default_dtype(np.float64):
            pos = enc(4, 7).data
            fx, fy = enc.x_axis(7).data, enc.y_axis(4).data
        np.testing.assert_array_equal(pos, fy[:, :, None] + fx[:, None, :])
        diff = pos[:, 1, :] - pos[:, 3, :]
        np.testing.assert_allclose(diff, np.repeat(diff[:, :1], 7, axis=1), atol=1e-12)
        np.testing.assert_allclose(pos[:, 2, 5], fy[:, 2] + fx[:, 5], atol=0)

    def test_zero_y_branch_constant_along_y(self):
        enc = AxisWisePositionEncoder(4, np.random.default_rng(0))
        enc.y_axis.zero_()
        pos = enc(5, 3).data
        np.testing.assert_array_equal(pos, np.repeat(pos[:, :1, :], 5, axis=1))

    def test_apply(self):
        rng = np.random.default_rng(1)
        coarse = Tensor(rng.standard_normal((4, 2, 3)), dtype=np.float64)
        zero = Tensor(np.zeros((4, 2, 3)), dtype=np.float64)
        np.testing.assert_array_equal(apply_position(coarse, zero).data, ops.image_to_seq(coarse).data)
        np.testing.assert_array_equal(apply_position(zero, coarse).data, ops.image_to_seq(coarse).data)
        pos = Tensor(rng.standard_normal((4, 2, 3)), dtype=np.float64)
        ref = (coarse.data + pos.data).reshape(4, 6).T
        np.testing.assert_allclose(apply_position(coarse, pos).data, ref, atol=1e-12)

    def test_content_independent(self):
        enc = AxisWisePositionEncoder(4, np.random.default_rng(0))
        np.testing.assert_array_equal(enc(3, 3).data, enc(3, 3).data)

    def test_sinusoidal_variant(self):
        enc = make_position_encoder("sinusoidal", 8, np.random.default_rng(0))
        assert isinstance(enc, SinusoidalPositionEncoder)
        pos = enc(3, 4).data
        assert pos.shape == (8, 3, 4)
        np.testing.assert_allclose(pos[0, 0, :], np.sin(np.arange(4)))
        np.testing.assert_allclose(pos[3, :, 0], np.cos(np.arange(3)))
        assert enc.num_parameters() == 0

    def test_unknown_encoder(self):
        with pytest.raises(ValueError):
            make_position_encoder("rope", 8, np.random.default_rng(0))

    def test_build_position_map_function(self):
        rng = np.random.default_rng(0)
        ex, ey = AxisEncoder(3, rng), AxisEncoder(3, rng)
        assert build_position_map(2, 5, ex, ey).shape == (3, 2, 5)
