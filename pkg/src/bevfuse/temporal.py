"""Temporal aggregation of fused BEV features.

Each frame's fused features are merged with the previous frame's output after
ego-motion compensation: current cell centers are mapped through the current
pose into the world, back into the previous ego frame, and bilinearly sampled
from the stored feature map (zero outside the grid).  Sample coordinates that
land within 1e-9 of a cell center are snapped onto it, so identity poses and
whole-cell translations resample bit-exactly instead of within float noise.

A frame with no accumulated state (the first of a run, or of each training
window) skips the merge entirely and is exactly the single-frame pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .geometry import BevGrid, _bilinear_table
from .tensor import Tensor

SNAP_TOL = 1e-9


@dataclass(frozen=True)
class EgoPose:
    """2D rigid transform world <- ego (rotation theta, then translation)."""

    theta: float
    tx: float
    ty: float
    timestamp: float = 0.0

    def to_world(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return c * x - s * y + self.tx, s * x + c * y + self.ty

    def from_world(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = x - self.tx, y - self.ty
        return c * dx + s * dy, -s * dx + c * dy

    def to_text(self) -> str:
        return " ".join(repr(float(v)) for v in
                        (self.timestamp, self.theta, self.tx, self.ty))

    @classmethod
    def from_text(cls, line: str) -> "EgoPose":
        ts, theta, tx, ty = (float(v) for v in line.split())
        return cls(theta=theta, tx=tx, ty=ty, timestamp=ts)


def _snap(f: np.ndarray) -> np.ndarray:
    r = np.round(f)
    return np.where(np.abs(f - r) < SNAP_TOL, r, f)


def ego_compensate(prev: Tensor, prev_pose: EgoPose, cur_pose: EgoPose,
                   grid: BevGrid) -> Tensor:
    """Resample the previous frame's feature map onto the current ego frame."""
    c = prev.shape[0]
    if prev.shape != (c, grid.n, grid.m):
        raise ValueError(f"feature map {prev.shape} does not match grid "
                         f"[{grid.n} x {grid.m}]")
    xs, ys = grid.cell_centers()
    wx, wy = cur_pose.to_world(xs, ys)
    px, py = prev_pose.from_world(wx, wy)
    fx, fy = grid.frac_index(px, py)
    idx, weights, _ = _bilinear_table(_snap(fx), _snap(fy), grid.m, grid.n)
    flat = T.reshape(prev, (c, grid.n * grid.m))
    out = T.weighted_gather(flat, idx, weights)
    return T.reshape(out, (c, grid.n, grid.m))


class TfaMerge(nn.Module):
    """Concat history with the current frame, one 3x3 conv, GELU."""

    def __init__(self, rng, channels: int):
        self.channels = channels
        self.merge = nn.Conv2d(rng, 2 * channels, channels, 3)

    def __call__(self, prev_aligned: Tensor, cur: Tensor) -> Tensor:
        if prev_aligned.shape != cur.shape:
            raise ValueError(f"history {prev_aligned.shape} and current "
                             f"{cur.shape} shapes differ")
        if cur.shape[0] != self.channels:
            raise ValueError(f"merge built for {self.channels} channels, "
                             f"got {cur.shape[0]}")
        return T.gelu(self.merge(T.concat([prev_aligned, cur], axis=0)))


def run_sequence(frames, model, train_window: int | None = None) -> list[Tensor]:
    """Autoregressive pass over time-ordered frames; returns per-frame fused
    features (post-merge where history exists).

    ``model`` provides ``grid``, ``fused_bev(frame) -> Tensor``, and a
    ``tfa`` attribute (a TfaMerge, or None for a single-frame model).

    ``train_window=k`` resets the state every k frames — training on
    independent k-frame subsequences with gradients intact inside each.
    ``train_window=None`` is inference: one chain over the whole run, state
    detached each step so memory stays constant in sequence length.
    """
    frames = list(frames)
    for a, b in zip(frames, frames[1:]):
        if b.ego_pose.timestamp <= a.ego_pose.timestamp:
            raise ValueError(
                f"frames out of order: timestamp {b.ego_pose.timestamp} "
                f"follows {a.ego_pose.timestamp}")
    if train_window is not None and train_window < 1:
        raise ValueError(f"train_window must be >= 1, got {train_window}")

    outputs = []
    state = None  # (features, pose) of the previous processed frame
    for i, frame in enumerate(frames):
        if train_window is not None and i % train_window == 0:
            state = None
        cur = model.fused_bev(frame)
        if state is not None and model.tfa is not None:
            prev_feat, prev_pose = state
            aligned = ego_compensate(prev_feat, prev_pose, frame.ego_pose,
                                     model.grid)
            cur = model.tfa(aligned, cur)
        if model.tfa is not None:
            kept = cur.detach() if train_window is None else cur
            state = (kept, frame.ego_pose)
        outputs.append(cur)
    return outputs
