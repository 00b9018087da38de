"""Fusion-mode and detection-head tests with hand-built oracles."""
import numpy as np
import pytest
from scipy.special import erf

from bevfuse import tensor as T
from bevfuse.boxfusion import Box3D
from bevfuse.fusion import (
    CLS_START,
    BevFusion,
    DetectionHead,
    background_activation,
    build_targets,
    detect,
    detection_loss,
    head_channels,
)
from bevfuse.geometry import BevGrid
from bevfuse.tensor import Tensor


def gelu_ref(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


class TestFusionModes:
    def test_add_identity_on_zero_camera(self):
        rng = np.random.default_rng(0)
        fuse = BevFusion(rng, 3, 3, "add")
        lidar = Tensor(rng.standard_normal((3, 5, 5)))
        out = fuse(lidar, Tensor(np.zeros((3, 5, 5))))
        assert np.array_equal(out.data, lidar.data)

    def test_add_channel_mismatch(self):
        with pytest.raises(ValueError, match="matching channel counts"):
            BevFusion(np.random.default_rng(0), 3, 4, "add")

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown fusion mode"):
            BevFusion(np.random.default_rng(0), 3, 3, "biggest")

    def test_gated_with_zero_gate_weights(self):
        rng = np.random.default_rng(1)
        fuse = BevFusion(rng, 3, 2, "gated_sigmoid")
        fuse.gate.weight.data[:] = 0.0
        fuse.gate.bias.data[:] = 0.0
        lidar = Tensor(rng.standard_normal((3, 6, 4)))
        camera = Tensor(rng.standard_normal((2, 6, 4)))
        out = fuse(lidar, camera)
        transform = T.conv2d(camera, fuse.cam_transform.weight,
                             fuse.cam_transform.bias)
        want = lidar.data + 0.5 * transform.data
        assert np.array_equal(out.data, want)

    def test_cat_conv_matches_hand_convolution(self):
        rng = np.random.default_rng(2)
        fuse = BevFusion(rng, 2, 1, "cat_conv")
        lidar = rng.standard_normal((2, 3, 3))
        camera = rng.standard_normal((1, 3, 3))
        out = fuse(Tensor(lidar), Tensor(camera))

        cat = np.concatenate([lidar, camera], axis=0)
        w = fuse.merge.weight.data
        b = fuse.merge.bias.data
        padded = np.pad(cat, ((0, 0), (1, 1), (1, 1)))
        want = np.zeros((2, 3, 3))
        for co in range(2):
            for y in range(3):
                for x in range(3):
                    acc = b[co]
                    for ci in range(3):
                        for ky in range(3):
                            for kx in range(3):
                                acc += w[co, ci, ky, kx] * padded[ci, y + ky, x + kx]
                    want[co, y, x] = acc
        mu = want.mean(axis=(1, 2), keepdims=True)
        sigma = np.sqrt(want.var(axis=(1, 2), keepdims=True) + 1e-5)
        np.testing.assert_allclose(out.data, gelu_ref((want - mu) / sigma),
                                   rtol=0, atol=1e-12)

    def test_modes_are_drop_in_interchangeable(self):
        rng = np.random.default_rng(3)
        lidar = Tensor(rng.standard_normal((4, 5, 6)))
        camera = Tensor(rng.standard_normal((4, 5, 6)))
        shapes = set()
        for mode in ("cat_conv", "add", "gated_sigmoid"):
            fuse = BevFusion(np.random.default_rng(4), 4, 4, mode)
            shapes.add(fuse(lidar, camera).shape)
        assert shapes == {(4, 5, 6)}

    def test_spatial_mismatch(self):
        rng = np.random.default_rng(5)
        fuse = BevFusion(rng, 2, 2, "cat_conv")
        with pytest.raises(ValueError, match="matching spatial shapes"):
            fuse(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 5, 4))))

    def test_fuse_and_head_gradients(self):
        rng = np.random.default_rng(6)
        fuse = BevFusion(rng, 2, 2, "gated_sigmoid")
        head = DetectionHead(rng, 2, 3, 2)
        lidar_np = rng.standard_normal((2, 4, 4))
        camera_np = rng.standard_normal((2, 4, 4))
        params = [fuse.gate.weight, fuse.cam_transform.bias,
                  head.trunk.weight, head.out.bias]

        def loss():
            out = head(fuse(Tensor(lidar_np), Tensor(camera_np)))
            return T.sum_(out * out)

        worst = T.grad_check(loss, params, rng=np.random.default_rng(7),
                             max_checks_per_param=4)
        assert worst < 1e-4


class TestTargets:
    def grid(self):
        return BevGrid(8, 8, 0.5)  # 4 m x 4 m centered on the ego

    def test_hand_built_targets(self):
        grid = self.grid()
        boxes = [
            Box3D(x=0.35, y=0.15, z=0.5, w=0.4, l=0.6, h=1.0, yaw=0.3, cls=1),
            Box3D(x=-1.2, y=-1.4, z=0.5, w=0.2, l=0.2, h=1.0, yaw=-2.0, cls=0),
        ]
        t = build_targets(boxes, grid, n_classes=3)
        assert t.n_positive == 2
        # box 0: x=0.35 -> column 4 (cells [0.25, 0.75)), center 0.25 m
        iy, ix = grid.cell_of(0.35, 0.15)
        assert (iy, ix) == (4, 4)
        assert t.occupancy[4, 4] == 1.0
        np.testing.assert_allclose(t.regression[0, 4, 4], (0.35 - 0.25) / 0.5)
        np.testing.assert_allclose(t.regression[1, 4, 4], (0.15 - 0.25) / 0.5)
        np.testing.assert_allclose(t.regression[2, 4, 4], np.log(0.4))
        np.testing.assert_allclose(t.regression[3, 4, 4], np.log(0.6))
        np.testing.assert_allclose(t.regression[4, 4, 4], np.sin(0.3))
        np.testing.assert_allclose(t.regression[5, 4, 4], np.cos(0.3))
        assert t.cls[4, 4] == 1
        assert t.occupancy.sum() == 2.0

    def test_box_outside_grid_skipped(self):
        t = build_targets([Box3D(x=50.0, y=0.0, z=0.5, w=1, l=1, h=1, yaw=0)],
                          self.grid(), 2)
        assert t.n_positive == 0 and t.occupancy.sum() == 0

    def test_bad_class_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            build_targets([Box3D(x=0, y=0, z=0.5, w=1, l=1, h=1, yaw=0, cls=5)],
                          self.grid(), 2)


class TestDetectionLoss:
    def test_perfect_prediction_near_zero(self):
        grid = BevGrid(8, 8, 0.5)
        boxes = [Box3D(x=0.3, y=-0.4, z=0.5, w=0.5, l=0.8, h=1.0, yaw=0.7, cls=1)]
        t = build_targets(boxes, grid, n_classes=2)
        pred = np.zeros((head_channels(2), 8, 8))
        pred[0] = np.where(t.occupancy > 0, 40.0, -40.0)
        pred[1:CLS_START] = t.regression
        pred[CLS_START:] = -40.0
        pos = t.occupancy > 0
        pred[CLS_START + 1][pos] = 40.0  # true class gets the high logit
        parts = {}
        loss = detection_loss(Tensor(pred), t, parts=parts)
        assert loss.item() < 1e-6
        assert parts["reg"] == 0.0

    def test_empty_scene_limit(self):
        grid = BevGrid(6, 6, 0.5)
        t = build_targets([], grid, 2)
        pred = np.zeros((head_channels(2), 6, 6))
        pred[0] = -40.0
        assert detection_loss(Tensor(pred), t).item() < 1e-12

    def test_pos_weight_scales_positive_bce(self):
        grid = BevGrid(4, 4, 0.5)
        boxes = [Box3D(x=0.1, y=0.1, z=0.5, w=1, l=1, h=1, yaw=0, cls=0)]
        t = build_targets(boxes, grid, 1)
        rng = np.random.default_rng(8)
        pred = Tensor(rng.standard_normal((head_channels(1), 4, 4)))
        p1, p8 = {}, {}
        detection_loss(pred, t, pos_weight=1.0, parts=p1)
        detection_loss(pred, t, pos_weight=8.0, parts=p8)
        x = pred.data[0][t.occupancy > 0]
        pos_term = np.logaddexp(0.0, -x).sum() / 16.0
        np.testing.assert_allclose(p8["bce"] - p1["bce"], 7.0 * pos_term,
                                   rtol=1e-12)

    def test_gradient_check(self):
        grid = BevGrid(5, 5, 0.5)
        boxes = [Box3D(x=0.2, y=0.3, z=0.5, w=0.8, l=0.9, h=1.0, yaw=1.1, cls=1)]
        t = build_targets(boxes, grid, 2)
        rng = np.random.default_rng(9)
        pred = Tensor(rng.standard_normal((head_channels(2), 5, 5)),
                      requires_grad=True)

        def loss():
            return detection_loss(pred, t)

        worst = T.grad_check(loss, [pred], rng=np.random.default_rng(10),
                             max_checks_per_param=25)
        assert worst < 1e-4


class TestDetect:
    def grid(self):
        return BevGrid(10, 10, 0.5)

    def blank(self, n_classes=2):
        data = np.zeros((head_channels(n_classes), 10, 10))
        data[0] = -10.0
        return data

    def test_zero_logits_empty(self):
        out = detect(np.zeros((head_channels(2), 10, 10)), self.grid(),
                     class_heights=[1.0, 1.0])
        assert out == []

    def test_single_peak_decoded(self):
        grid = self.grid()
        data = self.blank()
        data[0, 4, 6] = 3.0
        data[1, 4, 6] = 0.25
        data[2, 4, 6] = -0.25
        data[3, 4, 6] = np.log(2.0)
        data[4, 4, 6] = np.log(4.0)
        data[5, 4, 6] = np.sin(np.pi / 4) * 2.0  # unnormalized on purpose
        data[6, 4, 6] = np.cos(np.pi / 4) * 2.0
        data[CLS_START + 1, 4, 6] = 5.0
        boxes = detect(data, grid, class_heights=[1.0, 1.8])
        assert len(boxes) == 1
        b = boxes[0]
        xs, ys = grid.cell_centers()
        assert abs(b.x - (xs[4, 6] + 0.25 * 0.5)) < 1e-12
        assert abs(b.y - (ys[4, 6] - 0.25 * 0.5)) < 1e-12
        assert abs(b.w - 2.0) < 1e-12 and abs(b.l - 4.0) < 1e-12
        assert abs(b.yaw - np.pi / 4) < 1e-12
        assert b.cls == 1 and b.h == 1.8 and b.z == 0.9
        assert abs(b.score - 1.0 / (1.0 + np.exp(-3.0))) < 1e-15

    def test_nms_keeps_higher_peak(self):
        grid = self.grid()
        data = self.blank()
        data[0, 5, 5] = 2.0
        data[0, 5, 6] = 3.0  # neighbor within NMS radius, higher score
        boxes = detect(data, grid, class_heights=[1.0, 1.0])
        assert len(boxes) == 1
        assert abs(boxes[0].score - 1.0 / (1.0 + np.exp(-3.0))) < 1e-15

    def test_distant_peaks_both_survive(self):
        grid = self.grid()
        data = self.blank()
        data[0, 2, 2] = 3.0
        data[0, 8, 8] = 2.0
        boxes = detect(data, grid, class_heights=[1.0, 1.0])
        assert len(boxes) == 2

    def test_max_boxes_cap(self):
        grid = self.grid()
        data = self.blank()
        for iy, ix in [(1, 1), (1, 8), (8, 1), (8, 8)]:
            data[0, iy, ix] = 3.0
        assert len(detect(data, grid, class_heights=[1.0, 1.0], max_boxes=2)) == 2

    def test_missing_class_height(self):
        grid = self.grid()
        data = self.blank()
        data[0, 4, 4] = 3.0
        data[CLS_START + 1, 4, 4] = 5.0
        with pytest.raises(ValueError, match="no height"):
            detect(data, grid, class_heights=[1.0])


class TestBackgroundActivation:
    def test_hand_example(self):
        feats = np.zeros((2, 2, 2))
        feats[0] = [[1.0, -2.0], [3.0, 4.0]]
        feats[1] = [[5.0, 6.0], [-7.0, 8.0]]
        mask = np.array([[True, False], [False, False]])
        # outside cells: (0,1), (1,0), (1,1) over 2 channels
        want = (2 + 3 + 4 + 6 + 7 + 8) / 6.0
        assert background_activation(feats, mask) == want

    def test_full_mask(self):
        assert background_activation(np.ones((1, 2, 2)),
                                     np.ones((2, 2), dtype=bool)) == 0.0
