"""The full camera-lidar BEV detector, assembled from the library modules.

Pipeline per frame: rendered camera maps -> small conv backbone -> projector
(one of four variants) -> BEV fusion with embedded lidar pillars -> optional
temporal merge -> dense detection head.  The lidar embedding stands in for a
big pretrained point-cloud backbone and is frozen by default; the camera
branch trains at a reduced learning rate (see trainer).

The model also exposes the two qualitative probes: saliency (gradient of a
box's class logit with respect to the rendered camera inputs) and the BEV
attention/depth scatter used by the visualization command.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import COMPONENTS, RunConfig
from .depth import DepthBins, depth_ce_loss, lidar_depth_map, one_hot_depth
from .fusion import (CLS_START, BevFusion, DetectionHead, build_targets,
                     detect, detection_loss)
from .geometry import build_projected_horizon, splat
from .projection import build_projector, merge_cameras
from .scene import SyntheticScene, footprint_mask, lidar_bev_raw
from .temporal import TfaMerge
from .tensor import Tensor


class CameraBackbone(nn.Module):
    """Two 3x3 convs with GELUs: enough receptive field and nonlinearity to
    turn the rendered class/coordinate channels into projector food (the
    image-row channel is the monocular depth cue, and one linear layer cannot
    bend it into two dozen depth bins)."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv1 = nn.Conv2d(rng, c_in, c_out, 3)
        self.conv2 = nn.Conv2d(rng, c_out, c_out, 3)

    def __call__(self, x: Tensor) -> Tensor:
        return T.gelu(self.conv2(T.gelu(self.conv1(x))))


class FusionModel(nn.Module):
    def __init__(self, cfg: RunConfig, rng):
        self.cfg = cfg
        self.grid = cfg.grid()
        self.bins = DepthBins.from_range(cfg.d_min, cfg.d_max, cfg.n_depth)
        scene_channels = cfg.n_classes + 3
        self.cam_backbone = CameraBackbone(rng, scene_channels, cfg.cam_channels)
        self.lidar_embed = nn.Conv2d(rng, 4, cfg.lidar_channels, 1)
        self.projector = build_projector(cfg.projector_config(), rng)
        self.fusion = BevFusion(rng, cfg.lidar_channels, cfg.lidar_channels,
                                cfg.fusion_mode)
        self.tfa = TfaMerge(rng, cfg.lidar_channels) if cfg.tfa_frames > 1 else None
        self.head = DetectionHead(rng, cfg.lidar_channels, cfg.head_hidden,
                                  cfg.n_classes)
        self.class_heights = cfg.scene_config().class_heights
        self._horizons = {}

    # -- wiring -----------------------------------------------------------------

    def components(self) -> dict:
        table = {"cam_backbone": self.cam_backbone,
                 "lidar_embed": self.lidar_embed,
                 "projector": self.projector,
                 "fusion": self.fusion,
                 "tfa": self.tfa,
                 "head": self.head}
        assert set(table) == set(COMPONENTS)
        return {k: v for k, v in table.items() if v is not None}

    def horizon_for(self, cam):
        key = (cam.P.tobytes(), cam.width, cam.height, cam.feature_stride)
        if key not in self._horizons:
            self._horizons[key] = build_projected_horizon(
                cam, self.grid, self.cfg.n_depth, self.cfg.d_min, self.cfg.d_max)
        return self._horizons[key]

    def camera_inputs(self, scene: SyntheticScene) -> list:
        """Rendered camera maps as gradient-tracking leaves (saliency taps)."""
        return [Tensor(f, requires_grad=True) for f in scene.features]

    def lidar_features(self, scene: SyntheticScene) -> Tensor:
        pillars = lidar_bev_raw(scene.points, self.grid)
        return self.lidar_embed(Tensor(pillars))

    def camera_bev(self, scene: SyntheticScene, cam_inputs=None):
        """Project all cameras into one BEV map.

        Returns (bev, coverage, extras); extras carries the per-camera depth
        distributions (lift_splat / lidar_depth), attention arrays
        (lift_attend_splat), and the horizons, for losses and visualization.
        """
        if cam_inputs is None:
            cam_inputs = [Tensor(f) for f in scene.features]
        feats = [self.cam_backbone(x) for x in cam_inputs]
        horizons = [self.horizon_for(cam) for cam in scene.cameras]
        extras = {"horizons": horizons, "cam_inputs": cam_inputs}

        if self.cfg.variant == "lift_attend_splat":
            lidar = self.lidar_features(scene)
            bev, cov, attns = self.projector.project_multi(
                lidar, list(zip(feats, horizons)))
            extras["attention"] = attns
            extras["lidar_bev"] = lidar
            return bev, cov, extras

        per_cam = []
        dists = []
        for cam, feat, horizon in zip(scene.cameras, feats, horizons):
            override = None
            if self.cfg.variant == "lidar_depth":
                dmap = lidar_depth_map(scene.points, cam, self.bins)
                override, _ = one_hot_depth(dmap, self.bins)
            bev_i, cov_i, dist = self.projector.project(feat, horizon,
                                                        depth_override=override)
            per_cam.append((bev_i, cov_i))
            dists.append(dist)
        bev, cov = merge_cameras(per_cam)
        if self.cfg.variant == "uniform":
            # Uniform lift carries full context at every bin (total depth mass
            # n_depth instead of 1), so rescale here to keep the fusion input
            # on the same footing as the normalized variants.
            bev = T.mul(bev, 1.0 / self.cfg.n_depth)
        extras["depth_dists"] = dists
        return bev, cov, extras

    def fused_bev(self, scene: SyntheticScene, cam_inputs=None) -> Tensor:
        cam_bev, _, _ = self.camera_bev(scene, cam_inputs)
        return self.fusion(self.lidar_features(scene), cam_bev)

    def head_logits(self, scene: SyntheticScene, cam_inputs=None,
                    fused: Tensor | None = None) -> Tensor:
        if fused is None:
            fused = self.fused_bev(scene, cam_inputs)
        return self.head(fused)

    # -- training losses ----------------------------------------------------------

    def depth_loss(self, scene: SyntheticScene, extras) -> Tensor:
        """Mean depth cross-entropy over cameras with any lidar-defined cell."""
        terms = []
        for cam, dist in zip(scene.cameras, extras.get("depth_dists", [])):
            if dist is None:
                continue
            dmap = lidar_depth_map(scene.points, cam, self.bins)
            onehot, defined = one_hot_depth(dmap, self.bins)
            if defined.any():
                terms.append(depth_ce_loss(dist, onehot, defined))
        if not terms:
            return Tensor(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return T.mul(total, 1.0 / len(terms))

    def loss(self, scene: SyntheticScene, parts: dict | None = None) -> Tensor:
        cam_bev, _, extras = self.camera_bev(scene)
        fused = self.fusion(self.lidar_features(scene), cam_bev)
        out = self.head(fused)
        targets = build_targets(scene.boxes, self.grid, self.cfg.n_classes)
        task = detection_loss(out, targets, pos_weight=self.cfg.pos_weight,
                              parts=parts)
        if self.cfg.lambda_depth > 0:
            dloss = self.depth_loss(scene, extras)
            if parts is not None:
                parts["depth"] = float(dloss.data)
            task = task + T.mul(dloss, self.cfg.lambda_depth)
        if parts is not None:
            parts["total"] = float(task.data)
        return task

    # -- inference ----------------------------------------------------------------

    def detect_scene(self, scene: SyntheticScene, fused: Tensor | None = None):
        out = self.head_logits(scene, fused=fused)
        return detect(out.data, self.grid, self.class_heights,
                      threshold=self.cfg.det_threshold,
                      nms_radius_cells=self.cfg.nms_radius_cells,
                      max_boxes=self.cfg.max_boxes)

    # -- qualitative probes ---------------------------------------------------------

    def saliency(self, scene: SyntheticScene, box_index: int):
        """Gradient of the selected box's best class logit w.r.t. each camera
        input, as per-camera |grad| maps normalized to [0, 1].

        Returns (maps [H, W] per camera, detail dict with the cell and class).
        """
        if not 0 <= box_index < len(scene.boxes):
            raise ValueError(f"box index {box_index} out of range "
                             f"(scene has {len(scene.boxes)} boxes)")
        box = scene.boxes[box_index]
        cell = self.grid.cell_of(box.x, box.y)
        if cell is None:
            raise ValueError(f"box {box_index} center lies outside the grid")
        iy, ix = cell
        cam_inputs = self.camera_inputs(scene)
        out = self.head_logits(scene, cam_inputs=cam_inputs)
        cls_logits = out.data[CLS_START:, iy, ix]
        best = int(np.argmax(cls_logits))
        scalar = out[CLS_START + best, iy, ix]
        scalar.backward()
        maps = []
        for inp in cam_inputs:
            grad = np.abs(inp.grad).max(axis=0)  # strongest channel per pixel
            peak = grad.max()
            maps.append(grad / peak if peak > 0 else grad)
        return maps, {"cell": (iy, ix), "cls": best,
                      "logit": scalar.item()}

    def attention_bev(self, scene: SyntheticScene):
        """Scatter per-frustum-cell evidence onto the BEV grid.

        For the attention variant the evidence is the cross-attention max-
        pooled over image rows; for variants with a depth distribution it is
        the distribution max-pooled the same way.  Returns (bev [N, M] after
        the max over cameras, per-camera frustum planes [n_depth, W]).
        """
        _, _, extras = self.camera_bev(scene)
        planes = []
        if "attention" in extras:
            for attn in extras["attention"]:  # [W, n_depth, H]
                planes.append(attn.max(axis=2).T)  # -> [n_depth, W]
        elif any(d is not None for d in extras.get("depth_dists", [])):
            for dist in extras["depth_dists"]:  # [n_depth, H, W]
                planes.append(dist.data.max(axis=1))
        else:
            raise ValueError(f"variant {self.cfg.variant!r} has neither "
                             "attention nor a depth distribution to scatter")
        bev = None
        for plane, horizon in zip(planes, extras["horizons"]):
            scattered, _ = splat(horizon, Tensor(plane[None]), self.grid)
            layer = scattered.data[0]
            bev = layer if bev is None else np.maximum(bev, layer)
        return bev, planes

    def attention_mass_ratio(self, scene: SyntheticScene) -> float:
        """Fraction of scattered BEV attention inside ground-truth footprints."""
        bev, _ = self.attention_bev(scene)
        mask = footprint_mask(scene.boxes, self.grid)
        total = float(bev.sum())
        return float(bev[mask].sum()) / total if total > 0 else 0.0
