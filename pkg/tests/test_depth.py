"""Depth ground truth, decoding, metrics, and the cross-entropy loss."""

import math

import numpy as np
import pytest

from bevfuse import depth as D, geometry as G
from bevfuse.tensor import Tensor, grad_check


def test_bins_from_range():
    bins = D.DepthBins.from_range(1.0, 9.0, 4)
    np.testing.assert_allclose(bins.centers, [2.0, 4.0, 6.0, 8.0])
    assert bins.width == 2.0 and bins.d_min == 1.0 and bins.d_max == 9.0
    np.testing.assert_allclose(bins.edges(), [1.0, 3.0, 5.0, 7.0, 9.0])


def test_bins_reject_nonuniform():
    with pytest.raises(ValueError, match="uniform"):
        D.DepthBins(np.array([1.0, 2.0, 4.0]))
    with pytest.raises(ValueError, match="ascending"):
        D.DepthBins(np.array([2.0, 1.0]))


def test_bin_index_interior_edge_goes_low():
    bins = D.DepthBins.from_range(1.0, 9.0, 4)
    # Interior edges at 3, 5, 7; each belongs to the lower bin.
    np.testing.assert_array_equal(bins.index_of([3.0, 5.0, 7.0]), [0, 1, 2])
    np.testing.assert_array_equal(bins.index_of([1.0, 2.9, 3.1, 9.0]), [0, 0, 1, 3])


def test_one_hot_and_decodes():
    bins = D.DepthBins.from_range(1.0, 9.0, 4)
    dmap = D.DepthMap(np.array([[2.2, 0.0], [8.9, 5.0]]),
                      np.array([[True, False], [True, True]]))
    onehot, defined = D.one_hot_depth(dmap, bins)
    assert onehot.shape == (4, 2, 2)
    assert onehot[0, 0, 0] == 1.0 and onehot[3, 1, 0] == 1.0 and onehot[1, 1, 1] == 1.0
    assert onehot[:, 0, 1].sum() == 0.0  # undefined cell all-zero
    assert (defined == dmap.defined).all()

    # Mean decode is the expectation; mode decode is the argmax center.
    pred = np.zeros((4, 1, 1))
    pred[:, 0, 0] = [0.5, 0.5, 0.0, 0.0]
    assert D.mean_depth(pred, bins)[0, 0] == pytest.approx(3.0)
    assert D.mode_depth(pred, bins)[0, 0] == 2.0  # tie -> lowest index


def test_metrics_worked_example():
    # Single cell, prediction 10 vs truth 8.
    gt = D.DepthMap(np.array([[8.0]]), np.array([[True]]))
    m = D.depth_metrics(np.array([[10.0]]), gt)
    assert m["abs_rel"] == pytest.approx(0.25, abs=1e-15)
    assert m["sq_rel"] == pytest.approx(0.5, abs=1e-15)
    assert m["rmse"] == pytest.approx(2.0, abs=1e-15)
    assert m["rmsle"] == pytest.approx(math.log(1.25), abs=1e-15)
    assert m["rmsle"] == pytest.approx(0.22314355131420976, abs=1e-15)
    # Ratio exactly 1.25 fails the strict > 1.25 test.
    assert m["frac125"] == 0.0


def test_metrics_perfect_prediction_is_zero():
    rng = np.random.default_rng(0)
    vals = rng.uniform(2.0, 30.0, size=(5, 7))
    gt = D.DepthMap(vals, np.ones((5, 7), dtype=bool))
    m = D.depth_metrics(vals.copy(), gt)
    for name in D.METRIC_NAMES:
        assert m[name] == 0.0


def test_metrics_frac125_strictness():
    gt = D.DepthMap(np.array([[4.0, 4.0]]), np.array([[True, True]]))
    m = D.depth_metrics(np.array([[5.0, 5.1]]), gt)  # ratios 1.25, 1.275
    assert m["frac125"] == 0.5


def test_metrics_need_defined_cells():
    gt = D.DepthMap(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError, match="defined"):
        D.depth_metrics(np.ones((2, 2)), gt)


def test_metrics_ignore_undefined_cells():
    vals = np.array([[8.0, 123.0]])
    gt = D.DepthMap(vals * [[1.0, 0.0]], np.array([[True, False]]))
    m = D.depth_metrics(np.array([[10.0, 1e9]]), gt)
    assert m["abs_rel"] == pytest.approx(0.25)


def _toy_cam():
    return G.make_camera([0, 0, 1.6], yaw=0.0, pitch=0.05, focal=40.0,
                         width=64, height=32, feature_stride=4)


def test_lidar_depth_map_minimum_plane_distance():
    cam = _toy_cam()
    bins = D.DepthBins.from_range(1.0, 20.0, 10)
    # Two points projecting into the same feature cell at different plane
    # depths: the cell keeps the minimum. Build them on the same pixel ray.
    ray = cam.pixel_ray(18.0, 14.0)
    p_near = cam.center + 6.0 * ray
    p_far = cam.center + 11.0 * ray
    dmap = D.lidar_depth_map(np.array([p_far, p_near]), cam, bins)
    u, v, _, w, _ = G.project_points(cam, np.array([p_near]))
    cell = (int(v[0] // 4), int(u[0] // 4))
    assert dmap.defined[cell]
    assert dmap.values[cell] == pytest.approx(w[0], abs=1e-12)
    assert dmap.defined.sum() == 1


def test_lidar_depth_map_out_of_range_undefined():
    cam = _toy_cam()
    bins = D.DepthBins.from_range(2.0, 10.0, 4)
    ray = cam.pixel_ray(30.0, 16.0)
    close = cam.center + 0.5 * ray   # plane depth below d_min
    behind = cam.center - 3.0 * ray  # behind the camera entirely
    dmap = D.lidar_depth_map(np.array([close, behind]), cam, bins)
    assert not dmap.defined.any()


def test_lidar_depth_map_empty_cloud():
    cam = _toy_cam()
    bins = D.DepthBins.from_range(1.0, 10.0, 5)
    dmap = D.lidar_depth_map(np.zeros((0, 3)), cam, bins)
    assert dmap.values.shape == (cam.feat_h, cam.feat_w)
    assert not dmap.defined.any()


def test_quantized_gt_against_itself_is_bin_bounded():
    # Scoring bin centers against the raw values they quantize: every error
    # is at most half a bin, so rmse <= width/2 and per-cell abs_rel <=
    # (width/2)/g.
    rng = np.random.default_rng(42)
    bins = D.DepthBins.from_range(1.0, 21.0, 10)
    vals = rng.uniform(1.0, 21.0, size=(6, 8))
    gt = D.DepthMap(vals, np.ones(vals.shape, dtype=bool))
    quantized = bins.centers[bins.index_of(vals)]
    assert np.abs(quantized - vals).max() <= bins.width / 2 + 1e-12
    m = D.depth_metrics(quantized, gt)
    assert m["rmse"] <= bins.width / 2 + 1e-12
    assert m["abs_rel"] <= (bins.width / 2) * np.mean(1.0 / vals) + 1e-12


def test_ce_loss_uniform_prediction_is_log_n():
    bins = D.DepthBins.from_range(1.0, 9.0, 8)
    onehot = np.zeros((8, 2, 2))
    onehot[3] = 1.0
    defined = np.ones((2, 2), dtype=bool)
    pred = Tensor(np.full((8, 2, 2), 1.0 / 8))
    loss = D.depth_ce_loss(pred, onehot, defined)
    assert loss.item() == pytest.approx(math.log(8), abs=1e-12)


def test_ce_loss_perfect_prediction_is_zero():
    onehot = np.zeros((4, 1, 2))
    onehot[1, 0, 0] = 1.0
    onehot[2, 0, 1] = 1.0
    pred = Tensor(onehot.copy())
    loss = D.depth_ce_loss(pred, onehot, np.ones((1, 2), dtype=bool))
    assert loss.item() == 0.0


def test_ce_loss_no_defined_cells_is_zero():
    pred = Tensor(np.full((4, 2, 2), 0.25))
    loss = D.depth_ce_loss(pred, np.zeros((4, 2, 2)), np.zeros((2, 2), dtype=bool))
    assert loss.item() == 0.0


def test_ce_loss_clamps_zero_probability():
    onehot = np.zeros((2, 1, 1))
    onehot[0] = 1.0
    pred = Tensor(np.array([[[0.0]], [[1.0]]]))
    loss = D.depth_ce_loss(pred, onehot, np.ones((1, 1), dtype=bool))
    assert loss.item() == pytest.approx(-math.log(1e-12), rel=1e-12)


def test_ce_loss_gradient():
    rng = np.random.default_rng(17)
    logits = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
    onehot = np.zeros((5, 3, 4))
    defined = rng.uniform(size=(3, 4)) < 0.6
    picks = rng.integers(0, 5, size=(3, 4))
    for i in range(3):
        for j in range(4):
            onehot[picks[i, j], i, j] = 1.0 if defined[i, j] else 0.0

    from bevfuse import tensor as T

    def f():
        return D.depth_ce_loss(T.softmax(logits, axis=0), onehot, defined)

    assert grad_check(f, [logits]) < 1e-4


def test_total_loss_weighting():
    total = D.total_loss(Tensor(2.0), Tensor(3.0), 0.5)
    assert total.item() == pytest.approx(3.5)


def test_depth_pgm_roundtrip(tmp_path):
    from bevfuse.pgmio import read_pgm

    vals = np.array([[1.234, 7.5], [0.0, 65.0]])
    defined = np.array([[True, True], [False, True]])
    dmap = D.DepthMap(vals, defined)
    D.write_depth_pgm(tmp_path / "d.pgm", dmap)
    D.write_mask_pgm(tmp_path / "m.pgm", dmap)
    img = read_pgm(tmp_path / "d.pgm")
    assert img.dtype == np.uint16
    assert img[0, 0] == 1234 and img[0, 1] == 7500 and img[1, 0] == 0 and img[1, 1] == 65000
    mask = read_pgm(tmp_path / "m.pgm")
    assert (mask == defined * 255).all()


def test_metrics_csv_row_layout():
    m = {name: 0.5 for name in D.METRIC_NAMES}
    header = D.metrics_csv_header()
    row = D.metrics_csv_row("uniform", 0.25, None, m)
    assert header[:2] == ["variant", "f1"]
    assert header[2:7] == ["mode_abs_rel", "mode_sq_rel", "mode_rmse", "mode_rmsle",
                           "mode_frac125"]
    assert len(row) == len(header)
    assert row[2:7] == [""] * 5 and row[7] == "0.5"
