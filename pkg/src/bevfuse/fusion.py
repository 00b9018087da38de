"""BEV feature fusion and a dense toy detection head.

Fusion merges the lidar BEV stream with the projected camera stream in one of
three interchangeable ways (all emit the lidar stream's channel count so the
ablation harness can swap them freely):

* ``cat_conv``: channel concat, one 3x3 conv, channel norm, GELU.
* ``add``: elementwise sum (streams must already share a channel count).
* ``gated_sigmoid``: lidar plus the camera stream transformed by a 3x3 conv
  and modulated by a sigmoid gate computed from the concat.

The detection head is deliberately small and dense: per BEV cell it emits an
occupancy logit, center offsets (cells), log dimensions (meters), yaw as
(sin, cos), and class logits.  Decoding finds local occupancy maxima above a
threshold and applies center-distance non-maximum suppression.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from . import nn, tensor as T
from .boxfusion import Box3D
from .geometry import BevGrid
from .tensor import Tensor

FUSION_MODES = ("cat_conv", "add", "gated_sigmoid")

# head channel layout
OCC = 0
OFFSET = slice(1, 3)
LOGDIM = slice(3, 5)
YAW = slice(5, 7)
CLS_START = 7

LOGDIM_DECODE_CLIP = 3.0  # decoded dims stay within e^-3 .. e^3 meters


def head_channels(n_classes: int) -> int:
    return CLS_START + n_classes


class BevFusion(nn.Module):
    def __init__(self, rng, lidar_channels: int, camera_channels: int, mode: str):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of "
                             f"{FUSION_MODES}")
        if mode == "add" and lidar_channels != camera_channels:
            raise ValueError(
                f"fusion mode 'add' needs matching channel counts, got lidar "
                f"{lidar_channels} vs camera {camera_channels}")
        self.mode = mode
        self.lidar_channels = lidar_channels
        self.camera_channels = camera_channels
        self.out_channels = lidar_channels
        if mode == "cat_conv":
            self.merge = nn.Conv2d(rng, lidar_channels + camera_channels,
                                   lidar_channels, 3)
        elif mode == "gated_sigmoid":
            self.gate = nn.Conv2d(rng, lidar_channels + camera_channels,
                                  lidar_channels, 3)
            self.cam_transform = nn.Conv2d(rng, camera_channels,
                                           lidar_channels, 3)

    def __call__(self, lidar: Tensor, camera: Tensor) -> Tensor:
        if lidar.shape[1:] != camera.shape[1:]:
            raise ValueError(f"fusion needs matching spatial shapes, got "
                             f"{lidar.shape} vs {camera.shape}")
        if lidar.shape[0] != self.lidar_channels or camera.shape[0] != self.camera_channels:
            raise ValueError(
                f"fusion built for [{self.lidar_channels}] lidar / "
                f"[{self.camera_channels}] camera channels, got {lidar.shape[0]} "
                f"/ {camera.shape[0]}")
        if self.mode == "add":
            return lidar + camera
        cat = T.concat([lidar, camera], axis=0)
        if self.mode == "cat_conv":
            return T.gelu(nn.channel_norm(self.merge(cat)))
        gate = T.sigmoid(self.gate(cat))
        return lidar + gate * self.cam_transform(camera)


class DetectionHead(nn.Module):
    """Two 3x3 convolutions (5x5 receptive field) to the per-cell outputs,
    with a channel norm keeping the hidden GELU trainable."""

    def __init__(self, rng, in_channels: int, hidden: int, n_classes: int):
        if n_classes < 1:
            raise ValueError(f"need at least one class, got {n_classes}")
        self.n_classes = n_classes
        self.trunk = nn.Conv2d(rng, in_channels, hidden, 3)
        self.out = nn.Conv2d(rng, hidden, head_channels(n_classes), 3)

    def __call__(self, fused: Tensor) -> Tensor:
        return self.out(T.gelu(nn.channel_norm(self.trunk(fused))))


# -- targets and loss ----------------------------------------------------------


@dataclass
class Targets:
    occupancy: np.ndarray   # [N, M] float 0/1
    regression: np.ndarray  # [6, N, M]: dx, dy (cells), log w, log l, sin, cos
    cls: np.ndarray         # [N, M] int
    n_positive: int


def build_targets(boxes, grid: BevGrid, n_classes: int) -> Targets:
    """Rasterize ground-truth boxes: the cell holding each center goes
    positive and carries that box's regression targets.  Boxes outside the
    grid are skipped; a later box in the list overwrites an earlier one
    landing in the same cell."""
    occ = np.zeros((grid.n, grid.m))
    reg = np.zeros((6, grid.n, grid.m))
    cls = np.zeros((grid.n, grid.m), dtype=np.int64)
    n_pos = 0
    xs, ys = grid.cell_centers()
    for box in boxes:
        if not 0 <= box.cls < n_classes:
            raise ValueError(f"box class {box.cls} outside [0, {n_classes})")
        cell = grid.cell_of(box.x, box.y)
        if cell is None:
            continue
        iy, ix = cell
        if occ[iy, ix] == 0.0:
            n_pos += 1
        occ[iy, ix] = 1.0
        reg[0, iy, ix] = (box.x - xs[iy, ix]) / grid.cell_size
        reg[1, iy, ix] = (box.y - ys[iy, ix]) / grid.cell_size
        reg[2, iy, ix] = np.log(box.w)
        reg[3, iy, ix] = np.log(box.l)
        reg[4, iy, ix] = np.sin(box.yaw)
        reg[5, iy, ix] = np.cos(box.yaw)
        cls[iy, ix] = box.cls
    return Targets(occ, reg, cls, n_pos)


def detection_loss(pred: Tensor, targets: Targets, pos_weight: float = 8.0,
                   reg_weight: float = 1.0, cls_weight: float = 1.0,
                   parts: dict | None = None) -> Tensor:
    """Occupancy BCE (every cell) + masked L1 on regressions + class
    cross-entropy at positive cells.  ``parts``, if given, is filled with the
    float value of each component."""
    n_classes = pred.shape[0] - CLS_START
    if n_classes < 1:
        raise ValueError(f"prediction has {pred.shape[0]} channels, "
                         f"fewer than the {CLS_START + 1} minimum")
    occ_logit = pred[OCC]
    t = Tensor(targets.occupancy)
    # stable BCE from logits: (1-t)*softplus(x) + pos_weight*t*softplus(-x)
    bce = T.mean_((1.0 - t) * T.softplus(occ_logit)
                  + pos_weight * t * T.softplus(-occ_logit))

    total = bce
    parts_out = {"bce": bce.item(), "reg": 0.0, "cls": 0.0}
    if targets.n_positive > 0:
        mask = Tensor(targets.occupancy[None, :, :])
        reg_pred = pred[1:CLS_START]
        diff = T.abs_((reg_pred - Tensor(targets.regression)) * mask)
        reg = T.sum_(diff) * (1.0 / (6.0 * targets.n_positive))

        logp = T.log_softmax(pred[CLS_START:], axis=0)
        onehot = np.zeros((n_classes, targets.cls.shape[0], targets.cls.shape[1]))
        pos_y, pos_x = np.nonzero(targets.occupancy > 0)
        onehot[targets.cls[pos_y, pos_x], pos_y, pos_x] = 1.0
        ce = T.sum_(-(logp * Tensor(onehot))) * (1.0 / targets.n_positive)

        total = total + reg_weight * reg + cls_weight * ce
        parts_out["reg"] = reg.item()
        parts_out["cls"] = ce.item()
    if parts is not None:
        parts.update(parts_out)
    return total


# -- decoding ------------------------------------------------------------------


def detect(head_out, grid: BevGrid, class_heights,
           threshold: float = 0.5, nms_radius_cells: float = 2.0,
           max_boxes: int = 64) -> list[Box3D]:
    """Decode the head map to boxes.

    Peaks are cells whose occupancy probability beats ``threshold`` and is a
    3x3-neighborhood maximum; survivors of center-distance NMS (radius in
    cells) become boxes, best score first.  ``class_heights`` maps class id
    to the fixed toy box height (the head does not regress height; z sits at
    half height)."""
    data = head_out.data if isinstance(head_out, Tensor) else np.asarray(head_out)
    if data.shape[1:] != (grid.n, grid.m):
        raise ValueError(f"head map {data.shape} does not match grid "
                         f"[{grid.n} x {grid.m}]")
    n_classes = data.shape[0] - CLS_START
    prob = 1.0 / (1.0 + np.exp(-data[OCC]))
    neighborhood = maximum_filter(prob, size=3, mode="constant", cval=-1.0)
    peak = (prob > threshold) & (prob == neighborhood)
    iys, ixs = np.nonzero(peak)
    order = np.lexsort((ixs, iys, -prob[iys, ixs]))

    xs, ys = grid.cell_centers()
    radius = nms_radius_cells * grid.cell_size
    boxes: list[Box3D] = []
    for k in order:
        iy, ix = int(iys[k]), int(ixs[k])
        x = xs[iy, ix] + data[1, iy, ix] * grid.cell_size
        y = ys[iy, ix] + data[2, iy, ix] * grid.cell_size
        if any(np.hypot(x - b.x, y - b.y) < radius for b in boxes):
            continue
        w = float(np.exp(np.clip(data[3, iy, ix], -LOGDIM_DECODE_CLIP,
                                 LOGDIM_DECODE_CLIP)))
        l = float(np.exp(np.clip(data[4, iy, ix], -LOGDIM_DECODE_CLIP,
                                 LOGDIM_DECODE_CLIP)))
        s, c = data[5, iy, ix], data[6, iy, ix]
        norm = np.hypot(s, c)
        yaw = float(np.arctan2(s / norm, c / norm)) if norm > 1e-12 else 0.0
        cls = int(np.argmax(data[CLS_START:, iy, ix]))
        if cls >= len(class_heights):
            raise ValueError(f"no height configured for class {cls}")
        h = float(class_heights[cls])
        boxes.append(Box3D(x=float(x), y=float(y), z=h / 2.0, w=w, l=l, h=h,
                           yaw=yaw, cls=cls, score=float(prob[iy, ix])))
        if len(boxes) >= max_boxes:
            break
    return boxes


def background_activation(features, box_mask: np.ndarray) -> float:
    """Mean absolute activation outside ground-truth boxes (channel-summed
    view of how much energy a feature map spends on background)."""
    data = features.data if isinstance(features, Tensor) else np.asarray(features)
    outside = ~np.asarray(box_mask, dtype=bool)
    if not outside.any():
        return 0.0
    return float(np.abs(data[:, outside]).mean())
