"""Deterministic synthetic scenes: boxes, lidar, rendered camera features.

A scene is a handful of boxes on a ground plane, observed by a fixed camera
rig and a surface-sampling lidar.  Everything is a pure function of the
configuration and one RNG seed, and every quantity a test oracle needs (exact
box poses, which points lie on which surface, per-pixel footprints) is kept.

Camera "features" are rendered directly at feature-map resolution: per-pixel
class one-hot channels inside each box's projected corner bounding box
(nearest box wins), two normalized image-coordinate channels, and one noise
channel.  There is no photometry; the projector learns from clean semantics.

Lidar points are sampled on ego-facing box faces, box tops, and the ground
plane, with per-face counts shrinking with range so that distant objects are
genuinely harder — the property the distance-bucket evaluation measures.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .boxfusion import Box3D, TtaTransform, box_csv_row, box_from_csv_row
from .geometry import BevGrid, CameraModel, make_camera, project_points
from .temporal import EgoPose

GROUND_TAG = -1  # ground-plane points; box points carry their box index


@dataclass(frozen=True)
class SceneConfig:
    extent: float = 24.0          # BEV side length, meters (ego centered)
    bev_cells: int = 48
    n_classes: int = 3
    n_boxes_min: int = 3
    n_boxes_max: int = 7
    r_min: float = 2.5            # box center distance from ego
    r_max: float = 10.5
    # per-class (w_lo, w_hi, l_lo, l_hi); heights are fixed per class
    class_dims: tuple = ((1.6, 2.0, 3.5, 4.5),
                         (0.4, 0.8, 0.4, 0.8),
                         (0.3, 0.5, 1.5, 2.5))
    class_heights: tuple = (1.6, 1.7, 0.9)
    # camera rig
    n_cameras: int = 4
    img_w: int = 96
    img_h: int = 48
    stride: int = 4
    focal: float = 40.0
    cam_height: float = 1.6
    cam_pitch: float = 0.05
    # lidar
    ground_points: int = 400
    box_point_density: float = 40.0  # points ~ density * area / range
    top_point_density: float = 10.0
    # rendering
    noise_std: float = 0.05

    def __post_init__(self):
        if self.n_classes != len(self.class_dims) or \
                self.n_classes != len(self.class_heights):
            raise ValueError("class_dims / class_heights must list every class")
        if self.n_boxes_min < 0 or self.n_boxes_max < self.n_boxes_min:
            raise ValueError(f"bad box count range "
                             f"[{self.n_boxes_min}, {self.n_boxes_max}]")
        if self.img_w % self.stride or self.img_h % self.stride:
            raise ValueError(f"image {self.img_w}x{self.img_h} not divisible "
                             f"by stride {self.stride}")

    def grid(self) -> BevGrid:
        return BevGrid.square(self.extent, self.bev_cells)

    @property
    def cam_channels(self) -> int:
        return self.n_classes + 3  # one-hot + u_norm + v_norm + noise

    def build_rig(self) -> list[CameraModel]:
        yaws = [2.0 * np.pi * i / self.n_cameras for i in range(self.n_cameras)]
        return [make_camera([0.0, 0.0, self.cam_height], yaw, self.cam_pitch,
                            self.focal, self.img_w, self.img_h, self.stride)
                for yaw in yaws]


@dataclass
class SyntheticScene:
    config: SceneConfig
    seed: int
    boxes: list                     # ground-truth Box3D, ego frame
    points: np.ndarray              # [P, 3] lidar, ego frame
    point_tags: np.ndarray          # [P] int, GROUND_TAG or box index
    cameras: list                   # CameraModel per rig slot, ego frame
    features: list = field(repr=False)  # per camera [C, feat_h, feat_w]
    ego_pose: EgoPose = field(default_factory=lambda: EgoPose(0.0, 0.0, 0.0))


# -- geometry helpers ----------------------------------------------------------


def box_axes(box: Box3D):
    ex = np.array([np.cos(box.yaw), np.sin(box.yaw)])  # along length
    ey = np.array([-np.sin(box.yaw), np.cos(box.yaw)])  # along width
    return ex, ey


def box_corners(box: Box3D) -> np.ndarray:
    """All 8 cuboid corners, [8, 3]; bottom face first."""
    ex, ey = box_axes(box)
    c = np.array([box.x, box.y])
    half = [(sx * box.l / 2.0, sy * box.w / 2.0)
            for sx in (-1, 1) for sy in (-1, 1)]
    bottom = [np.array([*(c + hx * ex + hy * ey), 0.0]) for hx, hy in half]
    top = [p + np.array([0.0, 0.0, box.h]) for p in bottom]
    return np.array(bottom + top)


def footprint_mask(boxes, grid: BevGrid) -> np.ndarray:
    """BEV cells whose centers lie inside some box rectangle."""
    xs, ys = grid.cell_centers()
    mask = np.zeros((grid.n, grid.m), dtype=bool)
    for box in boxes:
        ex, ey = box_axes(box)
        dx, dy = xs - box.x, ys - box.y
        along = dx * ex[0] + dy * ex[1]
        across = dx * ey[0] + dy * ey[1]
        mask |= (np.abs(along) <= box.l / 2.0) & (np.abs(across) <= box.w / 2.0)
    return mask


# -- lidar ---------------------------------------------------------------------


def _sample_face(rng, origin2, axis2, length, height, n):
    """n points on a vertical rectangle: origin + t*axis (t in [0, length]),
    z in [0, height]."""
    t = rng.uniform(0.0, length, size=n)
    z = rng.uniform(0.0, height, size=n)
    pts = np.empty((n, 3))
    pts[:, 0] = origin2[0] + t * axis2[0]
    pts[:, 1] = origin2[1] + t * axis2[1]
    pts[:, 2] = z
    return pts


def sample_box_points(rng, box: Box3D, density: float, top_density: float):
    """Surface points on ego-facing side faces and the top face; the count
    scales with face area over range, so it never grows with distance."""
    ex, ey = box_axes(box)
    c = np.array([box.x, box.y])
    r = max(float(np.hypot(box.x, box.y)), 1.0)
    pts = []
    # (face center offset, outward normal, sweep axis, sweep length)
    faces = [
        (ex * box.l / 2.0, ex, ey, box.w),
        (-ex * box.l / 2.0, -ex, ey, box.w),
        (ey * box.w / 2.0, ey, ex, box.l),
        (-ey * box.w / 2.0, -ey, ex, box.l),
    ]
    for offset, normal, sweep, length in faces:
        center = c + offset
        if np.dot(normal, -center) <= 0:  # facing away from the ego
            continue
        n = int(density * length * box.h / r)
        if n <= 0:
            continue
        origin = center - sweep * (length / 2.0)
        pts.append(_sample_face(rng, origin, sweep, length, box.h, n))
    n_top = int(top_density * box.w * box.l / r)
    if n_top > 0:
        t = rng.uniform(-box.l / 2.0, box.l / 2.0, size=n_top)
        s = rng.uniform(-box.w / 2.0, box.w / 2.0, size=n_top)
        top = np.empty((n_top, 3))
        top[:, 0] = c[0] + t * ex[0] + s * ey[0]
        top[:, 1] = c[1] + t * ex[1] + s * ey[1]
        top[:, 2] = box.h
        pts.append(top)
    if not pts:
        return np.zeros((0, 3))
    return np.concatenate(pts)


def sample_ground_points(rng, config: SceneConfig, boxes):
    half = config.extent / 2.0
    pts = np.zeros((config.ground_points, 3))
    pts[:, 0] = rng.uniform(-half, half, size=config.ground_points)
    pts[:, 1] = rng.uniform(-half, half, size=config.ground_points)
    if boxes:
        grid = config.grid()
        keep = np.ones(len(pts), dtype=bool)
        for box in boxes:
            ex, ey = box_axes(box)
            dx, dy = pts[:, 0] - box.x, pts[:, 1] - box.y
            along = dx * ex[0] + dy * ex[1]
            across = dx * ey[0] + dy * ey[1]
            keep &= ~((np.abs(along) <= box.l / 2.0)
                      & (np.abs(across) <= box.w / 2.0))
        pts = pts[keep]
    return pts


def lidar_bev_raw(points: np.ndarray, grid: BevGrid) -> np.ndarray:
    """Pillar features per BEV cell: log1p(count), max z, mean z, occupancy."""
    out = np.zeros((4, grid.n, grid.m))
    if len(points) == 0:
        return out
    ix = np.floor(points[:, 0] / grid.cell_size + grid.m / 2.0).astype(np.int64)
    iy = np.floor(points[:, 1] / grid.cell_size + grid.n / 2.0).astype(np.int64)
    ok = (ix >= 0) & (ix < grid.m) & (iy >= 0) & (iy < grid.n)
    ix, iy, z = ix[ok], iy[ok], points[ok, 2]
    count = np.zeros((grid.n, grid.m))
    np.add.at(count, (iy, ix), 1.0)
    zmax = np.full((grid.n, grid.m), -np.inf)
    np.maximum.at(zmax, (iy, ix), z)
    zsum = np.zeros((grid.n, grid.m))
    np.add.at(zsum, (iy, ix), z)
    occupied = count > 0
    out[0] = np.log1p(count)
    out[1][occupied] = zmax[occupied]
    out[2][occupied] = zsum[occupied] / count[occupied]
    out[3] = occupied.astype(np.float64)
    return out


# -- camera rendering ----------------------------------------------------------


def render_camera(boxes, cam: CameraModel, config: SceneConfig,
                  noise: np.ndarray) -> np.ndarray:
    """Feature map [n_classes + 3, feat_h, feat_w] for one camera.

    Box pixels: the one-hot class channel is set inside the axis-aligned
    bounding box of the box's projected corners (feature-pixel centers),
    nearer boxes painting over farther ones.  Coordinate channels and the
    caller-supplied noise channel fill the rest.
    """
    h, w = cam.feat_h, cam.feat_w
    feats = np.zeros((config.n_classes + 3, h, w))
    feats[config.n_classes] = (np.arange(w) + 0.5)[None, :] / w
    feats[config.n_classes + 1] = (np.arange(h) + 0.5)[:, None] / h
    feats[config.n_classes + 2] = noise

    order = sorted(boxes, key=lambda b: -np.hypot(b.x - cam.center[0],
                                                  b.y - cam.center[1]))
    for box in order:
        u, v, _, _, in_front = project_points(cam, box_corners(box))
        if not in_front.all():
            continue
        uf, vf = u / cam.feature_stride, v / cam.feature_stride
        u_lo = int(np.ceil(uf.min() - 0.5))
        u_hi = int(np.floor(uf.max() - 0.5))
        v_lo = int(np.ceil(vf.min() - 0.5))
        v_hi = int(np.floor(vf.max() - 0.5))
        u_lo, u_hi = max(u_lo, 0), min(u_hi, w - 1)
        v_lo, v_hi = max(v_lo, 0), min(v_hi, h - 1)
        if u_lo > u_hi or v_lo > v_hi:
            continue
        feats[:config.n_classes, v_lo:v_hi + 1, u_lo:u_hi + 1] = 0.0
        feats[box.cls, v_lo:v_hi + 1, u_lo:u_hi + 1] = 1.0
    return feats


# -- generation ----------------------------------------------------------------


def _place_boxes(rng, config: SceneConfig) -> list:
    n = int(rng.integers(config.n_boxes_min, config.n_boxes_max + 1))
    boxes = []
    for _ in range(n):
        for _attempt in range(100):
            cls = int(rng.integers(0, config.n_classes))
            w_lo, w_hi, l_lo, l_hi = config.class_dims[cls]
            w = float(rng.uniform(w_lo, w_hi))
            l = float(rng.uniform(l_lo, l_hi))
            h = config.class_heights[cls]
            r = float(rng.uniform(config.r_min, config.r_max))
            ang = float(rng.uniform(0.0, 2.0 * np.pi))
            x, y = r * np.cos(ang), r * np.sin(ang)
            yaw = float(rng.uniform(-np.pi, np.pi))
            clear = True
            for other in boxes:
                need = 0.6 * (max(w, l) + max(other.w, other.l)) + 0.5
                if np.hypot(x - other.x, y - other.y) < need:
                    clear = False
                    break
            if clear:
                boxes.append(Box3D(x=x, y=y, z=h / 2.0, w=w, l=l, h=h,
                                   yaw=yaw, cls=cls))
                break
        else:
            raise ValueError("could not place a box without overlap "
                             "after 100 attempts")
    return boxes


def generate(config: SceneConfig, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    boxes = _place_boxes(rng, config)
    chunks, tags = [], []
    for i, box in enumerate(boxes):
        pts = sample_box_points(rng, box, config.box_point_density,
                                config.top_point_density)
        chunks.append(pts)
        tags.append(np.full(len(pts), i, dtype=np.int64))
    ground = sample_ground_points(rng, config, boxes)
    chunks.append(ground)
    tags.append(np.full(len(ground), GROUND_TAG, dtype=np.int64))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    point_tags = np.concatenate(tags) if tags else np.zeros(0, dtype=np.int64)

    cameras = config.build_rig()
    features = []
    for cam in cameras:
        noise = rng.standard_normal((cam.feat_h, cam.feat_w)) * config.noise_std
        features.append(render_camera(boxes, cam, config, noise))
    return SyntheticScene(config=config, seed=seed, boxes=boxes, points=points,
                          point_tags=point_tags, cameras=cameras,
                          features=features)


def _to_ego(pose: EgoPose, scene_world: SyntheticScene, config: SceneConfig,
            rng) -> SyntheticScene:
    """Express a world-frame scene in the frame of ``pose``."""
    c, s = np.cos(pose.theta), np.sin(pose.theta)

    def w2e(x, y):
        return pose.from_world(x, y)

    boxes = []
    for b in scene_world.boxes:
        x, y = w2e(b.x, b.y)
        vx = c * b.vx + s * b.vy
        vy = -s * b.vx + c * b.vy
        boxes.append(replace(b, x=float(x), y=float(y),
                             yaw=b.yaw - pose.theta, vx=vx, vy=vy))
    px, py = w2e(scene_world.points[:, 0], scene_world.points[:, 1])
    points = np.stack([px, py, scene_world.points[:, 2]], axis=1)
    cameras = config.build_rig()  # the rig is rigidly attached to the ego
    features = []
    for cam in cameras:
        noise = rng.standard_normal((cam.feat_h, cam.feat_w)) * config.noise_std
        features.append(render_camera(boxes, cam, config, noise))
    return SyntheticScene(config=config, seed=scene_world.seed, boxes=boxes,
                          points=points, point_tags=scene_world.point_tags.copy(),
                          cameras=cameras, features=features, ego_pose=pose)


def generate_sequence(config: SceneConfig, seed: int, n_frames: int,
                      speed: float = 2.0, yaw_rate: float = 0.0,
                      dt: float = 0.5) -> list:
    """Static world, moving ego.  The world is sampled once (boxes and lidar
    both); each frame re-expresses it in that frame's ego pose and re-renders
    the cameras.  Frame 0 starts at the world origin."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    world = generate(config, seed)
    rng = np.random.default_rng(seed + 1)  # per-frame rendering noise
    frames = []
    theta, tx, ty = 0.0, 0.0, 0.0
    for i in range(n_frames):
        pose = EgoPose(theta=theta, tx=tx, ty=ty, timestamp=i * dt)
        frames.append(_to_ego(pose, world, config, rng))
        tx += speed * dt * np.cos(theta)
        ty += speed * dt * np.sin(theta)
        theta += yaw_rate * dt
    return frames


def transform_scene(scene: SyntheticScene, t: TtaTransform) -> SyntheticScene:
    """Re-express a scene in a TTA-augmented ego frame.

    Boxes and lidar move with the augmentation; cameras keep their feature
    maps (the image is unchanged) and get their projection matrices composed
    with the inverse point transform, so projection still lands on the same
    pixels."""
    boxes = [t.apply_box(b) for b in scene.boxes]
    pts = scene.points.copy()
    if t.mirror_y:
        pts[:, 1] = -pts[:, 1]
    rad = np.radians(t.rotation_deg)
    c, s = np.cos(rad), np.sin(rad)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y

    # inverse transform of augmented-frame points, as a 4x4 acting first
    rot_back = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    mirror = np.diag([1.0, -1.0 if t.mirror_y else 1.0, 1.0])
    inv = np.eye(4)
    inv[:3, :3] = mirror @ rot_back
    cameras = [CameraModel(cam.P @ inv, cam.width, cam.height,
                           cam.feature_stride) for cam in scene.cameras]
    return SyntheticScene(config=scene.config, seed=scene.seed, boxes=boxes,
                          points=pts, point_tags=scene.point_tags.copy(),
                          cameras=cameras,
                          features=[f.copy() for f in scene.features],
                          ego_pose=scene.ego_pose)


# -- evaluation ----------------------------------------------------------------


@dataclass
class BucketEval:
    distance_edges: tuple
    size_edges: tuple
    tp: np.ndarray  # [n_dist, n_size]
    fp: np.ndarray
    fn: np.ndarray

    @staticmethod
    def _f1(tp, fp, fn):
        denom = 2.0 * tp + fp + fn
        return 2.0 * tp / denom if denom > 0 else 0.0

    def overall_f1(self) -> float:
        return self._f1(self.tp.sum(), self.fp.sum(), self.fn.sum())

    def distance_f1(self) -> list:
        return [self._f1(self.tp[d].sum(), self.fp[d].sum(), self.fn[d].sum())
                for d in range(len(self.tp))]

    def size_f1(self) -> list:
        return [self._f1(self.tp[:, s].sum(), self.fp[:, s].sum(),
                         self.fn[:, s].sum()) for s in range(self.tp.shape[1])]

    def score(self) -> float:
        """Bucket-averaged F1: mean over distance buckets with any support."""
        vals = [self._f1(self.tp[d].sum(), self.fp[d].sum(), self.fn[d].sum())
                for d in range(len(self.tp))
                if self.tp[d].sum() + self.fp[d].sum() + self.fn[d].sum() > 0]
        return float(np.mean(vals)) if vals else 0.0

    def merge(self, other: "BucketEval") -> "BucketEval":
        if (self.distance_edges != other.distance_edges
                or self.size_edges != other.size_edges):
            raise ValueError("bucket edges differ")
        return BucketEval(self.distance_edges, self.size_edges,
                          self.tp + other.tp, self.fp + other.fp,
                          self.fn + other.fn)


DEFAULT_DISTANCE_EDGES = (4.0, 8.0)
DEFAULT_SIZE_EDGES = (1.0, 3.0)


def _bucket(value: float, edges) -> int:
    return int(np.searchsorted(np.asarray(edges), value, side="right"))


def bucket_eval(detections, gt_boxes,
                distance_edges=DEFAULT_DISTANCE_EDGES,
                size_edges=DEFAULT_SIZE_EDGES,
                radius: float = 2.0) -> BucketEval:
    """Greedy score-ordered matching by center distance (class-agnostic).

    Buckets: distance of the box from the ego origin against
    ``distance_edges``, and max(w, l) against ``size_edges``; a matched pair
    is counted in the ground-truth box's bucket, unmatched detections in
    their own."""
    nd, ns = len(distance_edges) + 1, len(size_edges) + 1
    tp = np.zeros((nd, ns))
    fp = np.zeros((nd, ns))
    fn = np.zeros((nd, ns))

    def bucket_of(box):
        return (_bucket(float(np.hypot(box.x, box.y)), distance_edges),
                _bucket(max(box.w, box.l), size_edges))

    taken = [False] * len(gt_boxes)
    for det in sorted(detections, key=lambda b: -b.score):
        best, best_d = None, radius
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            d = float(np.hypot(det.x - gt.x, det.y - gt.y))
            if d < best_d:
                best, best_d = j, d
        if best is None:
            d, s = bucket_of(det)
            fp[d, s] += 1
        else:
            taken[best] = True
            d, s = bucket_of(gt_boxes[best])
            tp[d, s] += 1
    for j, gt in enumerate(gt_boxes):
        if not taken[j]:
            d, s = bucket_of(gt)
            fn[d, s] += 1
    return BucketEval(tuple(distance_edges), tuple(size_edges), tp, fp, fn)


# -- serialization -------------------------------------------------------------

FEATURE_MAGIC = b"BVFF"


def save_scene(scene: SyntheticScene, path: str):
    """Text scene description plus a raw float64 feature blob at
    ``path + '.feat'``; round-trips bit-exactly."""
    lines = ["scene v1",
             f"seed {scene.seed}",
             f"pose {scene.ego_pose.to_text()}",
             f"boxes {len(scene.boxes)}"]
    for box in scene.boxes:
        lines.append(" ".join(box_csv_row(box)))
    lines.append(f"points {len(scene.points)}")
    for p, tag in zip(scene.points, scene.point_tags):
        lines.append(f"{tag} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    lines.append(f"cameras {len(scene.cameras)}")
    for cam in scene.cameras:
        row = [repr(float(v)) for v in cam.P.ravel()]
        row += [str(cam.width), str(cam.height), str(cam.feature_stride)]
        lines.append(" ".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")

    with open(path + ".feat", "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", len(scene.features)))
        for feat in scene.features:
            f.write(struct.pack("<III", *feat.shape))
            f.write(np.ascontiguousarray(feat, dtype="<f8").tobytes())


def load_scene(path: str, config: SceneConfig) -> SyntheticScene:
    with open(path) as f:
        lines = f.read().splitlines()
    if lines[0] != "scene v1":
        raise ValueError(f"not a scene file: {path}")
    seed = int(lines[1].split()[1])
    pose = EgoPose.from_text(lines[2].split(" ", 1)[1])
    i = 3
    n_boxes = int(lines[i].split()[1]); i += 1
    boxes = [box_from_csv_row(lines[i + j].split()) for j in range(n_boxes)]
    i += n_boxes
    n_points = int(lines[i].split()[1]); i += 1
    points = np.zeros((n_points, 3))
    tags = np.zeros(n_points, dtype=np.int64)
    for j in range(n_points):
        parts = lines[i + j].split()
        tags[j] = int(parts[0])
        points[j] = [float(v) for v in parts[1:]]
    i += n_points
    n_cams = int(lines[i].split()[1]); i += 1
    cameras = []
    for j in range(n_cams):
        parts = lines[i + j].split()
        P = np.array([float(v) for v in parts[:12]]).reshape(3, 4)
        cameras.append(CameraModel(P, int(parts[12]), int(parts[13]),
                                   int(parts[14])))

    with open(path + ".feat", "rb") as f:
        if f.read(4) != FEATURE_MAGIC:
            raise ValueError(f"bad feature blob for {path}")
        (count,) = struct.unpack("<I", f.read(4))
        features = []
        for _ in range(count):
            c, h, w = struct.unpack("<III", f.read(12))
            buf = f.read(8 * c * h * w)
            features.append(np.frombuffer(buf, dtype="<f8").reshape(c, h, w).copy())
    return SyntheticScene(config=config, seed=seed, boxes=boxes, points=points,
                          point_tags=tags, cameras=cameras, features=features,
                          ego_pose=pose)
