"""Run configuration: one flat key=value text file drives every command.

Defaults describe the desk-scale rig (4 cameras, 48x48 BEV cells, 24 depth
bins, 24x12 camera features, d_model 32).  ``validate`` re-checks every
downstream precondition up front and names the offending key, so a bad file
fails before any work starts.  ``config_hash`` is the sha256 of the canonical
serialization; run manifests record it so outputs are traceable to an exact
configuration.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .fusion import FUSION_MODES
from .geometry import BevGrid
from .projection import VARIANTS, ProjectorConfig
from .scene import SceneConfig

COMPONENTS = ("cam_backbone", "lidar_embed", "projector", "fusion", "tfa", "head")

# components riding the camera branch: these get lr * lr_camera_scale
CAMERA_BRANCH = ("cam_backbone", "projector")


@dataclass(frozen=True)
class RunConfig:
    # scenes
    seed: int = 0
    extent: float = 24.0
    bev_cells: int = 48
    n_classes: int = 3
    n_boxes_min: int = 3
    n_boxes_max: int = 7
    noise_std: float = 0.05
    # camera rig
    n_cameras: int = 4
    img_w: int = 96
    img_h: int = 48
    stride: int = 4
    focal: float = 40.0
    cam_height: float = 1.6
    cam_pitch: float = 0.05
    # projector
    variant: str = "lift_attend_splat"
    n_depth: int = 24
    d_min: float = 1.0
    d_max: float = 20.0
    d_model: int = 32
    d_ff: int = 64
    heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 1
    tied_heads: bool = True
    # feature channels
    cam_channels: int = 16
    lidar_channels: int = 16
    # fusion / temporal
    fusion_mode: str = "cat_conv"
    tfa_frames: int = 1          # 1 = single-frame model, no temporal merge
    seq_speed: float = 2.0
    seq_yaw_rate: float = 0.0
    seq_dt: float = 0.5
    # detection head
    head_hidden: int = 24
    pos_weight: float = 128.0
    det_threshold: float = 0.6
    nms_radius_cells: float = 4.0
    max_boxes: int = 32
    # training
    train_scenes: int = 60
    eval_scenes: int = 16
    epochs: int = 10
    lr: float = 0.02
    lr_camera_scale: float = 0.05
    lambda_depth: float = 0.0
    freeze: str = "lidar_embed"
    # sweep / ensembling
    sweep_lambdas: str = "0,0.01,1,100"
    wbf_radius: float = 2.0
    out_dir: str = "runs/default"

    # -- derived builders ------------------------------------------------------

    def scene_config(self) -> SceneConfig:
        return SceneConfig(extent=self.extent, bev_cells=self.bev_cells,
                           n_classes=self.n_classes,
                           n_boxes_min=self.n_boxes_min,
                           n_boxes_max=self.n_boxes_max,
                           n_cameras=self.n_cameras, img_w=self.img_w,
                           img_h=self.img_h, stride=self.stride,
                           focal=self.focal, cam_height=self.cam_height,
                           cam_pitch=self.cam_pitch, noise_std=self.noise_std)

    def grid(self) -> BevGrid:
        return BevGrid.square(self.extent, self.bev_cells)

    def projector_config(self, variant: str | None = None) -> ProjectorConfig:
        return ProjectorConfig(
            variant=variant or self.variant, n_depth=self.n_depth,
            cam_channels=self.cam_channels, cam_rows=self.img_h // self.stride,
            lidar_channels=self.lidar_channels,
            out_channels=self.lidar_channels, d_model=self.d_model,
            d_ff=self.d_ff, heads=self.heads,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers, tied_heads=self.tied_heads)

    def frozen_components(self) -> tuple:
        names = tuple(n for n in self.freeze.split(",") if n)
        return names

    def lambda_list(self) -> list:
        try:
            return [float(v) for v in self.sweep_lambdas.split(",") if v.strip()]
        except ValueError:
            raise ValueError(f"config key 'sweep_lambdas': expected comma-"
                             f"separated numbers, got {self.sweep_lambdas!r}"
                             ) from None

    # -- validation -------------------------------------------------------------

    def validate(self) -> "RunConfig":
        def need(ok: bool, key: str, why: str):
            if not ok:
                raise ValueError(f"config key '{key}': {why}")

        need(self.variant in VARIANTS, "variant",
             f"must be one of {VARIANTS}, got {self.variant!r}")
        need(self.fusion_mode in FUSION_MODES, "fusion_mode",
             f"must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        need(self.bev_cells >= 2, "bev_cells", "needs at least 2 cells")
        need(self.extent > 0, "extent", "must be positive")
        need(self.n_depth >= 1, "n_depth", "needs at least one bin")
        need(0 < self.d_min < self.d_max, "d_min",
             f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        need(self.n_cameras >= 1, "n_cameras", "needs at least one camera")
        need(self.img_w % self.stride == 0 and self.img_h % self.stride == 0,
             "stride", f"must divide image size {self.img_w}x{self.img_h}")
        need(self.d_model % self.heads == 0, "heads",
             f"must divide d_model={self.d_model}")
        need(self.encoder_layers >= 1 and self.decoder_layers >= 1,
             "decoder_layers", "transformer needs at least one layer per stack")
        need(self.cam_channels >= 1 and self.lidar_channels >= 1,
             "lidar_channels", "channel counts must be positive")
        need(self.n_classes >= 1, "n_classes", "needs at least one class")
        need(self.n_boxes_min >= 0 and self.n_boxes_max >= self.n_boxes_min,
             "n_boxes_min", "box count range is empty")
        need(self.tfa_frames >= 1, "tfa_frames", "needs at least one frame")
        need(self.epochs >= 0, "epochs", "must be non-negative")
        need(self.lr > 0, "lr", "must be positive")
        need(self.lr_camera_scale > 0, "lr_camera_scale", "must be positive")
        need(self.lambda_depth >= 0, "lambda_depth", "must be non-negative")
        need(self.lambda_depth == 0 or self.variant == "lift_splat",
             "lambda_depth",
             f"depth supervision needs variant=lift_splat, got {self.variant!r}")
        for name in self.frozen_components():
            need(name in COMPONENTS, "freeze",
                 f"unknown component {name!r}, valid: {COMPONENTS}")
        need(self.pos_weight > 0, "pos_weight", "must be positive")
        need(0.0 < self.det_threshold < 1.0, "det_threshold",
             "must be a probability strictly inside (0, 1)")
        need(self.nms_radius_cells > 0, "nms_radius_cells", "must be positive")
        need(self.max_boxes >= 1, "max_boxes", "needs at least one slot")
        need(self.train_scenes >= 1, "train_scenes", "needs at least one scene")
        need(self.eval_scenes >= 1, "eval_scenes", "needs at least one scene")
        need(self.wbf_radius > 0, "wbf_radius", "must be positive")
        need(self.seq_dt > 0, "seq_dt", "must be positive")
        for v in self.lambda_list():
            need(v >= 0, "sweep_lambdas", f"negative weight {v}")
        # the projector/scene constructors re-check their own invariants
        self.scene_config()
        self.projector_config()
        return self


def _parse_value(field: dataclasses.Field, raw: str):
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError:
        kind = "an integer" if field.type in ("int", int) else "a number"
        raise ValueError(
            f"config key '{field.name}': expected {kind}, got {raw!r}") from None
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(f"config key '{field.name}': not a boolean: {raw!r}")
    return raw


def parse_config(text: str) -> RunConfig:
    """key=value lines; '#' starts a comment; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, "
                             f"got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        values[key] = _parse_value(fields[key], raw)
    return RunConfig(**values).validate()


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        return parse_config(f.read())


def config_text(config: RunConfig) -> str:
    """Canonical serialization: every key, declaration order, repr values."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = int(value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config_text(config).encode()).hexdigest()
