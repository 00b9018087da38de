"""Camera-to-BEV projection variants.

Three ways to move camera features onto the BEV grid, all ending in the same
splat onto the projected horizon:

* ``lift_splat``: per-pixel context features weighted by a predicted
  distribution over depth bins (an outer product), image rows summed onto the
  horizon grid, then splat.
* ``uniform``: the same with the distribution replaced by all-ones — every
  depth bin gets the full feature, i.e. features are smeared along their ray.
* ``lidar_depth``: the same with the distribution replaced by the one-hot
  lidar ground truth; pixels without a lidar return contribute nothing.
* ``lift_attend_splat``: per-column cross-attention.  A transformer encoder
  digests one image column (its vertical stack of camera features); the
  decoder queries are the horizon cells of that column, seeded with lifted
  BEV lidar features; attention is normalized over the column's rows (keys),
  never over depth, so one camera feature may contribute at full weight to
  several BEV cells.  One weight set serves every column of every camera.

Channel/width bookkeeping lives in ``ProjectorConfig``; ``build_projector``
turns a config into a parameterized projector whose ``parameter_count`` is
the module's accounting unit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .geometry import BevGrid, ProjectedHorizon, lift, splat
from .tensor import Tensor

VARIANTS = ("lift_splat", "uniform", "lift_attend_splat", "lidar_depth")

DEPTH_MASS_TOL = 1e-6


@dataclass(frozen=True)
class ProjectorConfig:
    variant: str
    n_depth: int
    cam_channels: int
    cam_rows: int
    lidar_channels: int
    out_channels: int
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    tied_heads: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown projector variant {self.variant!r}; "
                             f"expected one of {VARIANTS}")
        for key in ("n_depth", "cam_channels", "cam_rows", "lidar_channels",
                    "out_channels"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.variant == "lift_attend_splat":
            if self.encoder_layers < 1 or self.decoder_layers < 1:
                raise ValueError("attention projector needs at least one encoder "
                                 "and one decoder layer")
            if self.d_model % self.heads != 0:
                raise ValueError(
                    f"d_model {self.d_model} not divisible by heads {self.heads}")
            if self.d_ff < 1:
                raise ValueError(f"d_ff must be >= 1, got {self.d_ff}")


# -- shared splat-side plumbing ------------------------------------------------


def check_depth_mass(depth_dist: Tensor) -> None:
    """Depth distributions must put total mass 1 on each pixel — or exactly 0
    (a pixel with no signal, e.g. no lidar return in the one-hot variant)."""
    mass = depth_dist.data.sum(axis=0)
    bad = (np.abs(mass - 1.0) > DEPTH_MASS_TOL) & (np.abs(mass) > DEPTH_MASS_TOL)
    if bad.any():
        worst = mass[bad].flat[0]
        raise ValueError(
            f"depth distribution is not normalized: {int(bad.sum())} pixels "
            f"with mass far from 0 or 1 (e.g. {worst!r})"
        )


def _reduce_rows_and_splat(context: Tensor, depth_dist: Tensor,
                           horizon: ProjectedHorizon):
    c_ctx = context.shape[0]
    n_depth = depth_dist.shape[0]
    h, w = context.shape[1], context.shape[2]
    if depth_dist.shape[1:] != (h, w):
        raise ValueError(
            f"context {context.shape} and depth distribution {depth_dist.shape} "
            f"cover different pixel grids"
        )
    if n_depth != horizon.n_depth or w != horizon.width:
        raise ValueError(
            f"depth distribution {depth_dist.shape} does not match horizon "
            f"[{horizon.n_depth} x {horizon.width}]"
        )
    vol = T.reshape(context, (c_ctx, 1, h, w)) * T.reshape(depth_dist, (1, n_depth, h, w))
    plane = T.sum_(vol, axis=2)  # [C, n_depth, W]
    return splat(horizon, plane, horizon.grid)


def lift_splat_project(context: Tensor, depth_dist: Tensor,
                       horizon: ProjectedHorizon):
    """Depth-weighted projection: Splat(sum_rows(context ⊗ depth)).

    ``context`` is [C, H, W]; ``depth_dist`` [n_depth, H, W] with per-pixel
    mass 1 (or exactly 0).  Returns ([C, N, M], coverage mask).
    """
    check_depth_mass(depth_dist)
    return _reduce_rows_and_splat(context, depth_dist, horizon)


def uniform_project(context: Tensor, horizon: ProjectedHorizon):
    """Depth-agnostic projection: every bin receives the full feature."""
    ones = Tensor(np.ones((horizon.n_depth,) + tuple(context.shape[1:])))
    return _reduce_rows_and_splat(context, ones, horizon)


def merge_cameras(per_camera):
    """Sum per-camera BEV maps; coverage is the union. Input: [(Tensor, mask)]."""
    per_camera = list(per_camera)
    if not per_camera:
        raise ValueError("merge_cameras needs at least one camera")
    total, coverage = per_camera[0]
    coverage = coverage.copy()
    for bev, mask in per_camera[1:]:
        if bev.shape != total.shape:
            raise ValueError(f"camera BEV shapes differ: {total.shape} vs {bev.shape}")
        total = total + bev
        coverage |= mask
    return total, coverage


# -- projector modules ---------------------------------------------------------


class LiftSplatProjector(nn.Module):
    """Owns the context and (for the learned variant) depth heads.

    ``uniform`` and ``lidar_depth`` variants have no depth parameters at all.
    """

    def __init__(self, config: ProjectorConfig, rng):
        if config.variant == "lift_attend_splat":
            raise ValueError("use AttentionProjector for the attention variant")
        self.config = config
        self.context_head = nn.Conv2d(rng, config.cam_channels, config.out_channels, 1)
        if config.variant == "lift_splat":
            self.depth_head = nn.Conv2d(rng, config.cam_channels, config.n_depth, 1)

    def depth_distribution(self, cam_feats: Tensor) -> Tensor:
        if self.config.variant != "lift_splat":
            raise ValueError(f"variant {self.config.variant!r} predicts no depth")
        return T.softmax(self.depth_head(cam_feats), axis=0)

    def project(self, cam_feats: Tensor, horizon: ProjectedHorizon,
                depth_override=None):
        """Returns (bev, coverage, depth distribution used or None)."""
        context = self.context_head(cam_feats)
        variant = self.config.variant
        if variant == "uniform":
            bev, cov = uniform_project(context, horizon)
            return bev, cov, None
        if variant == "lidar_depth":
            if depth_override is None:
                raise ValueError("lidar_depth projection needs a one-hot depth map")
            dist = depth_override if isinstance(depth_override, Tensor) else Tensor(depth_override)
            bev, cov = lift_splat_project(context, dist, horizon)
            return bev, cov, dist
        dist = self.depth_distribution(cam_feats)
        bev, cov = lift_splat_project(context, dist, horizon)
        return bev, cov, dist


class AttentionProjector(nn.Module):
    """Per-column encoder/decoder shared across all columns and cameras."""

    def __init__(self, config: ProjectorConfig, rng):
        if config.variant != "lift_attend_splat":
            raise ValueError(f"AttentionProjector got variant {config.variant!r}")
        self.config = config
        d = config.d_model
        self.cam_in = nn.Linear(rng, config.cam_channels, d)
        self.cam_pos = nn.PositionEmbedding(rng, config.cam_rows, d)
        self.encoder = nn.TransformerEncoder(rng, config.encoder_layers, d,
                                             config.d_ff, config.heads,
                                             config.tied_heads)
        self.lidar_in = nn.Linear(rng, config.lidar_channels, d)
        self.query_pos = nn.PositionEmbedding(rng, config.n_depth, d)
        self.decoder = nn.TransformerDecoder(rng, config.decoder_layers, d,
                                             config.d_ff, config.heads,
                                             config.tied_heads)
        self.out = nn.Linear(rng, d, config.out_channels)

    def _check_inputs(self, bev_lidar: Tensor, cam_feats: Tensor,
                      horizon: ProjectedHorizon):
        cfg = self.config
        if cam_feats.shape != (cfg.cam_channels, cfg.cam_rows, horizon.width):
            raise ValueError(
                f"camera features {cam_feats.shape} do not match configured "
                f"[{cfg.cam_channels}, {cfg.cam_rows}, {horizon.width}]"
            )
        if horizon.n_depth != cfg.n_depth:
            raise ValueError(
                f"horizon has {horizon.n_depth} depth bins, config says {cfg.n_depth}")
        if bev_lidar.shape[0] != cfg.lidar_channels:
            raise ValueError(
                f"lidar BEV has {bev_lidar.shape[0]} channels, config says "
                f"{cfg.lidar_channels}")

    def project(self, bev_lidar: Tensor, cam_feats: Tensor,
                horizon: ProjectedHorizon):
        """Single camera.  Returns (bev, coverage, cross-attention ndarray
        [W, n_depth, cam_rows] of the last decoder block, head-averaged)."""
        merged, coverage, attns = self.project_multi(bev_lidar,
                                                     [(cam_feats, horizon)])
        return merged, coverage, attns[0]

    def project_multi(self, bev_lidar: Tensor, cameras):
        """All cameras in one batched transformer pass (weights are shared, so
        columns of every camera ride one [n_cols, ...] batch axis).

        Returns (merged bev, union coverage, [per-camera attention arrays]).
        """
        cameras = list(cameras)
        if not cameras:
            raise ValueError("project_multi needs at least one camera")
        widths = []
        cam_tokens = []
        query_tokens = []
        for cam_feats, horizon in cameras:
            self._check_inputs(bev_lidar, cam_feats, horizon)
            widths.append(horizon.width)
            # [C, H, W] -> [W, H, C]
            cam_tokens.append(T.transpose(cam_feats, (2, 1, 0)))
            lifted = lift(horizon, bev_lidar)  # [C_l, n_depth, W]
            query_tokens.append(T.transpose(lifted, (2, 1, 0)))

        cams = T.concat(cam_tokens, axis=0) if len(cam_tokens) > 1 else cam_tokens[0]
        queries = T.concat(query_tokens, axis=0) if len(query_tokens) > 1 else query_tokens[0]

        memory = self.encoder(self.cam_pos(self.cam_in(cams)))
        decoded, cross = self.decoder(self.query_pos(self.lidar_in(queries)), memory)
        planes = self.out(decoded)  # [sum W, n_depth, C_out]

        outputs = []
        attns = []
        offset = 0
        for (cam_feats, horizon), width in zip(cameras, widths):
            block = planes[offset:offset + width] if len(cameras) > 1 else planes
            attn = cross.data[offset:offset + width]
            offset += width
            plane = T.transpose(block, (2, 1, 0))  # [C_out, n_depth, W]
            outputs.append(splat(horizon, plane, horizon.grid))
            attns.append(np.ascontiguousarray(attn))
        merged, coverage = merge_cameras(outputs)
        return merged, coverage, attns


def build_projector(config: ProjectorConfig, rng):
    if config.variant == "lift_attend_splat":
        return AttentionProjector(config, rng)
    return LiftSplatProjector(config, rng)


def count_parameters(config: ProjectorConfig) -> int:
    """Deterministic parameter count of the projector a config describes."""
    return build_projector(config, np.random.default_rng(0)).parameter_count()


PAPER_SCALE_CONFIG = ProjectorConfig(
    variant="lift_attend_splat", n_depth=143, cam_channels=256, cam_rows=56,
    lidar_channels=256, out_channels=80, d_model=256, d_ff=512, heads=8,
    encoder_layers=1, decoder_layers=1, tied_heads=True,
)

# Published size of the attention-based projection module at full scale; the
# count above is compared against this informationally (a warning outside
# +-20%, never a failure — whether the published figure includes position
# embeddings and IO linears is unstated).
REFERENCE_ATTENTION_PARAMS = 900_000
