"""Training and evaluation loops for the toy detector.

The schedule mirrors the reference recipe at desk scale: the lidar embedding
is frozen, the camera branch (backbone + projector) trains at a fraction of
the base learning rate, and everything else at the base rate.  All loops are
deterministic functions of (config, seed): scenes are pregenerated from
derived seeds and visited in a fixed order.

``depth_sweep_rows`` reproduces the depth-supervision study: rows for each
loss weight, plus the lidar-depth, pretrained-then-frozen, and uniform
variants, each reporting the five depth metrics under mode and mean decoding
next to the toy detection score.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .config import CAMERA_BRANCH, RunConfig
from .depth import (DepthMap, depth_ce_loss, depth_metrics, lidar_depth_map,
                    mean_depth, mode_depth, one_hot_depth)
from .fusion import build_targets, detection_loss
from .model import FusionModel
from .scene import BucketEval, bucket_eval, generate, generate_sequence
from .temporal import run_sequence
from .tensor import Tensor

TRAIN_SEED_BASE = 1_000
EVAL_SEED_BASE = 50_000


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; carries the offending step."""


class Adam:
    """Standard Adam over (parameter, learning rate) pairs."""

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.entries = []
        for params, lr in groups:
            for p in params:
                self.entries.append(
                    {"p": p, "lr": float(lr),
                     "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for e in self.entries:
            g = e["p"].grad
            if g is None:
                continue
            e["m"] = b1 * e["m"] + (1.0 - b1) * g
            e["v"] = b2 * e["v"] + (1.0 - b2) * g * g
            e["p"].data -= e["lr"] * scale * e["m"] / (np.sqrt(e["v"]) + self.eps)


# -- data ------------------------------------------------------------------------


def build_model(cfg: RunConfig) -> FusionModel:
    return FusionModel(cfg, np.random.default_rng(cfg.seed))


def training_data(cfg: RunConfig):
    """Training samples: scenes, or fixed-length sequences when TFA is on."""
    scfg = cfg.scene_config()
    if cfg.tfa_frames > 1:
        return [generate_sequence(scfg, cfg.seed + TRAIN_SEED_BASE + i,
                                  cfg.tfa_frames, speed=cfg.seq_speed,
                                  yaw_rate=cfg.seq_yaw_rate, dt=cfg.seq_dt)
                for i in range(cfg.train_scenes)]
    return [generate(scfg, cfg.seed + TRAIN_SEED_BASE + i)
            for i in range(cfg.train_scenes)]


def eval_data(cfg: RunConfig):
    scfg = cfg.scene_config()
    if cfg.tfa_frames > 1:
        return [generate_sequence(scfg, cfg.seed + EVAL_SEED_BASE + i,
                                  cfg.tfa_frames, speed=cfg.seq_speed,
                                  yaw_rate=cfg.seq_yaw_rate, dt=cfg.seq_dt)
                for i in range(cfg.eval_scenes)]
    return [generate(scfg, cfg.seed + EVAL_SEED_BASE + i)
            for i in range(cfg.eval_scenes)]


# -- optimization -----------------------------------------------------------------


def make_optimizer(model: FusionModel, cfg: RunConfig,
                   only_params: set | None = None,
                   extra_frozen: set | None = None) -> Adam:
    """Per-component groups.  ``only_params``/``extra_frozen`` filter by the
    dotted parameter name (e.g. 'projector.depth_head.weight')."""
    frozen_components = set(cfg.frozen_components())
    extra_frozen = extra_frozen or set()
    base, camera = [], []
    for name, param in model.named_parameters():
        component = name.split(".")[0]
        if component in frozen_components or name in extra_frozen:
            continue
        if only_params is not None and name not in only_params:
            continue
        (camera if component in CAMERA_BRANCH else base).append(param)
    return Adam([(base, cfg.lr), (camera, cfg.lr * cfg.lr_camera_scale)])


def sample_loss(model: FusionModel, cfg: RunConfig, sample,
                parts: dict | None = None) -> Tensor:
    """Loss of one training sample (a scene, or a list of frames)."""
    if isinstance(sample, list):
        fused = run_sequence(sample, model, train_window=cfg.tfa_frames)
        total = None
        for frame, feat in zip(sample, fused):
            out = model.head(feat)
            targets = build_targets(frame.boxes, model.grid, cfg.n_classes)
            term = detection_loss(out, targets, pos_weight=cfg.pos_weight)
            total = term if total is None else total + term
        loss = total * (1.0 / len(sample))
        if parts is not None:
            parts["total"] = float(loss.data)
        return loss
    return model.loss(sample, parts=parts)


def train(model: FusionModel, cfg: RunConfig, data,
          optimizer: Adam | None = None,
          loss_fn=None) -> list:
    """Epoch-ordered pass over ``data``; returns per-epoch mean-loss rows
    (dicts).  Raises TrainingDiverged on a non-finite loss."""
    optimizer = optimizer or make_optimizer(model, cfg)
    loss_fn = loss_fn or (lambda sample, parts: sample_loss(model, cfg, sample,
                                                            parts))
    history = []
    for epoch in range(cfg.epochs):
        sums: dict = {}
        for step, sample in enumerate(data):
            model.zero_grad()
            parts: dict = {}
            loss = loss_fn(sample, parts)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {step}")
            loss.backward()
            optimizer.step()
            parts.setdefault("total", value)
            for key, v in parts.items():
                sums[key] = sums.get(key, 0.0) + v
        row = {"epoch": epoch}
        row.update({key: sums[key] / len(data) for key in sorted(sums)})
        history.append(row)
    return history


# -- evaluation -------------------------------------------------------------------


def evaluate(model: FusionModel, cfg: RunConfig, data) -> BucketEval:
    """Detection quality over scenes or sequences (last frame of each)."""
    merged = None
    for sample in data:
        if isinstance(sample, list):
            fused = run_sequence(sample, model, train_window=None)
            scene = sample[-1]
            boxes = model.detect_scene(scene, fused=fused[-1])
        else:
            scene = sample
            boxes = model.detect_scene(scene)
        ev = bucket_eval(boxes, scene.boxes)
        merged = ev if merged is None else merged.merge(ev)
    return merged


def depth_quality(model: FusionModel, cfg: RunConfig, scenes):
    """Aggregate mode/mean depth metrics over every lidar-defined feature
    cell of every scene and camera; None when the variant predicts no depth."""
    preds_mode, preds_mean, gts = [], [], []
    for scene in scenes:
        _, _, extras = model.camera_bev(scene)
        dists = extras.get("depth_dists")
        if not dists or all(d is None for d in dists):
            return None
        for cam, dist in zip(scene.cameras, dists):
            dmap = lidar_depth_map(scene.points, cam, model.bins)
            if not dmap.defined.any():
                continue
            mode = mode_depth(dist, model.bins)
            mean = mean_depth(dist, model.bins)
            preds_mode.append(mode[dmap.defined])
            preds_mean.append(mean[dmap.defined])
            gts.append(dmap.values[dmap.defined])
    if not gts:
        return None
    gt_map = DepthMap(np.concatenate(gts)[None, :],
                      np.ones((1, sum(len(g) for g in gts)), dtype=bool))
    mode_m = depth_metrics(np.concatenate(preds_mode)[None, :], gt_map)
    mean_m = depth_metrics(np.concatenate(preds_mean)[None, :], gt_map)
    return mode_m, mean_m


# -- the depth-supervision study ----------------------------------------------------


def _train_pretrained(cfg: RunConfig):
    """Depth-only pretraining, then freeze the depth head and train the rest."""
    model = build_model(cfg)
    depth_names = {name for name, _ in model.named_parameters()
                   if name.startswith("projector.depth_head")}

    def depth_only_loss(scene, parts):
        _, _, extras = model.camera_bev(scene)
        loss = model.depth_loss(scene, extras)
        parts["depth"] = float(loss.data)
        return loss

    pre_opt = make_optimizer(model, cfg, only_params=depth_names)
    train(model, cfg, training_data(cfg), optimizer=pre_opt,
          loss_fn=depth_only_loss)
    main_cfg = dataclasses.replace(cfg, lambda_depth=0.0)
    main_opt = make_optimizer(model, main_cfg, extra_frozen=depth_names)
    history = train(model, main_cfg, training_data(main_cfg),
                    optimizer=main_opt)
    return model, history


def run_variant_row(cfg: RunConfig, label: str):
    """Train one study row and measure it.

    Returns (label, f1, mode metrics or None, mean metrics or None, history).
    """
    if label == "pretrained":
        model, history = _train_pretrained(cfg)
    else:
        model = build_model(cfg)
        history = train(model, cfg, training_data(cfg))
    samples = eval_data(cfg)
    score = evaluate(model, cfg, samples).score()
    scenes = [s[-1] if isinstance(s, list) else s for s in samples]
    quality = depth_quality(model, cfg, scenes)
    mode_m, mean_m = quality if quality else (None, None)
    return label, score, mode_m, mean_m, history


def depth_sweep_rows(cfg: RunConfig):
    """Row configs for the supervision study: each lambda, then the lidar,
    pretrained, and uniform variants.  Returns [(label, row config)]."""
    rows = []
    for lam in cfg.lambda_list():
        row_cfg = dataclasses.replace(cfg, variant="lift_splat",
                                      lambda_depth=lam)
        label = f"lambda={lam:g}"
        rows.append((label, row_cfg))
    rows.append(("lidar",
                 dataclasses.replace(cfg, variant="lidar_depth",
                                     lambda_depth=0.0)))
    rows.append(("pretrained",
                 dataclasses.replace(cfg, variant="lift_splat",
                                     lambda_depth=1.0)))
    rows.append(("uniform",
                 dataclasses.replace(cfg, variant="uniform",
                                     lambda_depth=0.0)))
    return rows
