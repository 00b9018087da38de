"""Projective geometry: pinhole cameras, the BEV grid, and the projected
horizon plane that couples them.

Conventions (used across the whole package):

* World/ego frame: x right, y forward, z up; the ego sits at the BEV grid
  center.  BEV feature maps are [C, N, M] with row index = y cell (row-major,
  y-major) and column index = x cell.
* Camera: 3x4 projection matrix P = [M | p4].  On construction P is rescaled
  so the third row of M has unit norm; the homogeneous w of P @ [x; 1] is then
  the signed distance from the camera plane in meters (true of any K[R|t]
  with a standard K).  Points with w <= 0 are behind the camera.
* Depth along a ray is the Euclidean distance from the optical center
  (ray distance).  The camera-plane distance (w) is a separate quantity used
  by the depth-supervision module.
* The projected horizon of a camera is the plane through the optical center
  and the rays of the image's horizontal centerline (v = height/2).  Its
  feature grid is [n_depth, W]: one ray per feature column (through the
  column's pixel center), uniformly spaced ray-distance bins, bin b centered
  at d_min + (b + 0.5) * (d_max - d_min) / n_depth.

Resampling between BEV and horizon is bilinear with fixed coordinates and
zero outside; gradients flow through feature values only.  The valid/coverage
masks mark exactly the cells with full bilinear support in the source grid
(every sample inside the mask uses four real neighbors, so constant fields
are preserved on the mask; everything outside reads 0).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera with a feature grid at integer stride."""

    P: np.ndarray
    width: int
    height: int
    feature_stride: int

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        if P.shape != (3, 4):
            raise ValueError(f"projection matrix must be 3x4, got {P.shape}")
        row_norm = np.linalg.norm(P[2, :3])
        if row_norm < 1e-12:
            raise ValueError("projection matrix has a vanishing third row")
        P = P / row_norm
        det = np.linalg.det(P[:, :3])
        if abs(det) < 1e-12:
            raise ValueError("left 3x3 of the projection matrix is not invertible")
        if self.width % self.feature_stride or self.height % self.feature_stride:
            raise ValueError(
                f"feature_stride {self.feature_stride} does not divide image size "
                f"{self.width}x{self.height}"
            )
        P.flags.writeable = False
        object.__setattr__(self, "P", P)

    @property
    def feat_w(self) -> int:
        return self.width // self.feature_stride

    @property
    def feat_h(self) -> int:
        return self.height // self.feature_stride

    @property
    def left3x3(self) -> np.ndarray:
        return self.P[:, :3]

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -np.linalg.inv(self.P[:, :3]) @ self.P[:, 3]

    def pixel_ray(self, u, v) -> np.ndarray:
        """Unit direction(s) of the ray through pixel (u, v), pointing forward."""
        uv1 = np.stack(np.broadcast_arrays(u, v, np.ones_like(np.asarray(u, dtype=float))), axis=-1)
        d = uv1 @ np.linalg.inv(self.left3x3).T
        # Forward means positive camera-plane depth.
        sign = np.sign(d @ self.P[2, :3])
        d = d * sign[..., None]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_text(self) -> str:
        entries = " ".join(repr(float(x)) for x in self.P.reshape(-1))
        return (
            "# bevfuse camera v1\n"
            f"p {entries}\n"
            f"size {self.width} {self.height}\n"
            f"stride {self.feature_stride}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "CameraModel":
        rows = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            rows[key] = rest.split()
        if set(rows) != {"p", "size", "stride"}:
            raise ValueError(f"camera file needs p/size/stride lines, got {sorted(rows)}")
        if len(rows["p"]) != 12:
            raise ValueError(f"camera matrix needs 12 entries, got {len(rows['p'])}")
        P = np.array([float(x) for x in rows["p"]]).reshape(3, 4)
        width, height = (int(x) for x in rows["size"])
        return cls(P, width, height, int(rows["stride"][0]))


def make_camera(position, yaw: float, pitch: float, focal: float,
                width: int, height: int, feature_stride: int) -> CameraModel:
    """Build K[R|t] for a camera at ``position`` facing ``yaw`` (radians, from
    +x axis in the xy plane), pitched down by ``pitch`` radians."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([cy * cp, sy * cp, -sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ np.asarray(position, dtype=float)
    K = np.array([
        [focal, 0.0, width / 2.0],
        [0.0, focal, height / 2.0],
        [0.0, 0.0, 1.0],
    ])
    return CameraModel(K @ np.hstack([R, t[:, None]]), width, height, feature_stride)


@dataclass(frozen=True)
class BevGrid:
    """Ego-centered top-down grid: ``n`` rows along y, ``m`` columns along x."""

    n: int
    m: int
    cell_size: float

    def __post_init__(self):
        if self.n < 2 or self.m < 2:
            raise ValueError(f"BEV grid needs at least 2x2 cells, got {self.n}x{self.m}")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @classmethod
    def square(cls, extent: float, cells: int) -> "BevGrid":
        return cls(cells, cells, extent / cells)

    @property
    def extent_x(self) -> float:
        return self.m * self.cell_size

    @property
    def extent_y(self) -> float:
        return self.n * self.cell_size

    def cell_centers(self):
        """(X, Y) arrays of shape [n, m] holding cell-center coordinates."""
        xs = (np.arange(self.m) + 0.5) * self.cell_size - self.extent_x / 2.0
        ys = (np.arange(self.n) + 0.5) * self.cell_size - self.extent_y / 2.0
        return np.meshgrid(xs, ys)

    def frac_index(self, x, y):
        """Continuous grid indices (fx along columns/x, fy along rows/y);
        integer values land exactly on cell centers."""
        fx = np.asarray(x) / self.cell_size + (self.m / 2.0 - 0.5)
        fy = np.asarray(y) / self.cell_size + (self.n / 2.0 - 0.5)
        return fx, fy

    def cell_of(self, x, y):
        """Integer cell (iy, ix) containing a point, or None if outside."""
        ix = int(np.floor(x / self.cell_size + self.m / 2.0))
        iy = int(np.floor(y / self.cell_size + self.n / 2.0))
        if 0 <= ix < self.m and 0 <= iy < self.n:
            return iy, ix
        return None


def project_points(cam: CameraModel, points: np.ndarray):
    """Vectorized projection of [N, 3] world points.

    Returns (u, v, ray_depth, plane_depth, in_front); u/v/depths are only
    meaningful where in_front (plane depth > 0).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    h = pts @ cam.left3x3.T + cam.P[:, 3]
    w = h[:, 2]
    in_front = w > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = h[:, 0] / w
        v = h[:, 1] / w
    ray = np.linalg.norm(pts - cam.center, axis=1)
    return u, v, ray, w, in_front


def project_point(cam: CameraModel, point):
    """(u, v, ray-distance depth) of one world point, or None if behind."""
    u, v, ray, _, in_front = project_points(cam, np.asarray(point)[None, :])
    if not in_front[0]:
        return None
    return float(u[0]), float(v[0]), float(ray[0])


def horizon_plane(cam: CameraModel):
    """(point, unit normal) of the plane through the optical center and the
    image's horizontal centerline."""
    v_mid = cam.height / 2.0
    d_left = cam.pixel_ray(0.0, v_mid)
    d_right = cam.pixel_ray(float(cam.width), v_mid)
    normal = np.cross(d_left, d_right)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        raise ValueError("degenerate horizon plane (parallel edge rays)")
    return cam.center, normal / norm


def _bilinear_table(fx: np.ndarray, fy: np.ndarray, nx: int, ny: int):
    """Four-tap interpolation table over a [ny, nx] grid (row-major flat).

    Support is full bilinear support: 0 <= fx <= nx-1 and 0 <= fy <= ny-1.
    Outside, weights are zeroed (reads as exact 0).
    """
    fx = np.asarray(fx, dtype=np.float64).ravel()
    fy = np.asarray(fy, dtype=np.float64).ravel()
    support = (fx >= 0) & (fx <= nx - 1) & (fy >= 0) & (fy <= ny - 1)
    x0 = np.clip(np.floor(fx), 0, max(nx - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(fy), 0, max(ny - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    tx = fx - x0
    ty = fy - y0
    weights = np.stack([
        (1 - tx) * (1 - ty),
        tx * (1 - ty),
        (1 - tx) * ty,
        tx * ty,
    ], axis=1)
    indices = np.stack([
        y0 * nx + x0,
        y0 * nx + x1,
        y1 * nx + x0,
        y1 * nx + x1,
    ], axis=1)
    weights[~support] = 0.0
    indices[~support] = 0
    return indices, weights, support


@dataclass(eq=False)
class ProjectedHorizon:
    """A camera's horizon-plane feature grid plus precomputed resampling
    tables in both directions (BEV -> horizon for lift, horizon -> BEV for
    splat)."""

    camera: CameraModel
    grid: BevGrid
    n_depth: int
    d_min: float
    d_max: float
    centers3d: np.ndarray = field(repr=False)   # [n_depth, W, 3]
    valid_mask: np.ndarray = field(repr=False)  # [n_depth, W] bool
    coverage_mask: np.ndarray = field(repr=False)  # [n, m] bool
    _lift_idx: np.ndarray = field(repr=False)
    _lift_w: np.ndarray = field(repr=False)
    _splat_idx: np.ndarray = field(repr=False)
    _splat_w: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.camera.feat_w

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.n_depth

    def bin_centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.n_depth) + 0.5) * self.bin_width


def build_projected_horizon(cam: CameraModel, grid: BevGrid, n_depth: int,
                            d_min: float, d_max: float) -> ProjectedHorizon:
    if n_depth < 1:
        raise ValueError(f"n_depth must be >= 1, got {n_depth}")
    if not (0 < d_min < d_max):
        raise ValueError(f"need 0 < d_min < d_max, got [{d_min}, {d_max}]")
    w_feat = cam.feat_w
    bin_width = (d_max - d_min) / n_depth

    # Rays through feature-column centers on the horizontal centerline.
    u_cols = (np.arange(w_feat) + 0.5) * cam.feature_stride
    dirs = cam.pixel_ray(u_cols, np.full(w_feat, cam.height / 2.0))  # [W, 3]
    depths = d_min + (np.arange(n_depth) + 0.5) * bin_width
    centers = cam.center + depths[:, None, None] * dirs[None, :, :]  # [n_depth, W, 3]

    fx, fy = grid.frac_index(centers[..., 0], centers[..., 1])
    lift_idx, lift_w, lift_support = _bilinear_table(fx, fy, grid.m, grid.n)
    valid = lift_support.reshape(n_depth, w_feat)

    # Up-projection of BEV cell centers along +z onto the horizon plane.
    origin, normal = horizon_plane(cam)
    X, Y = grid.cell_centers()
    covered_shape = X.shape
    if abs(normal[2]) < 1e-12:
        # Vertical plane: no BEV cell lifts onto it along z.
        z = np.full(covered_shape, np.nan)
    else:
        z = origin[2] - (normal[0] * (X - origin[0]) + normal[1] * (Y - origin[1])) / normal[2]
    lifted = np.stack([X, Y, z], axis=-1).reshape(-1, 3)
    finite = np.isfinite(lifted[:, 2])
    lifted[~finite] = 0.0
    u, _, ray, _, in_front = project_points(cam, lifted)
    gcol = u / cam.feature_stride - 0.5
    gdep = (ray - d_min) / bin_width - 0.5
    usable = finite & in_front
    gcol = np.where(usable, gcol, -1e18)
    gdep = np.where(usable, gdep, -1e18)
    splat_idx, splat_w, splat_support = _bilinear_table(gcol, gdep, w_feat, n_depth)
    coverage = (splat_support & usable).reshape(covered_shape)
    splat_w = splat_w * (splat_support & usable)[:, None]

    return ProjectedHorizon(
        camera=cam, grid=grid, n_depth=n_depth, d_min=d_min, d_max=d_max,
        centers3d=centers, valid_mask=valid, coverage_mask=coverage,
        _lift_idx=lift_idx, _lift_w=lift_w,
        _splat_idx=splat_idx, _splat_w=splat_w,
    )


def lift(horizon: ProjectedHorizon, bev_features: Tensor) -> Tensor:
    """Sample BEV features [C, N, M] onto the horizon grid -> [C, n_depth, W].

    Each horizon cell center drops its z and bilinearly reads the BEV map;
    cells outside ``valid_mask`` read exact 0.  Differentiable in features.
    """
    grid = horizon.grid
    c = bev_features.shape[0]
    if bev_features.shape != (c, grid.n, grid.m):
        raise ValueError(
            f"bev features shape {bev_features.shape} does not match grid "
            f"[C, {grid.n}, {grid.m}]"
        )
    flat = T.reshape(bev_features, (c, grid.n * grid.m))
    out = T.weighted_gather(flat, horizon._lift_idx, horizon._lift_w)
    return T.reshape(out, (c, horizon.n_depth, horizon.width))


def splat(horizon: ProjectedHorizon, features: Tensor, grid: BevGrid):
    """Scatter horizon features [C, n_depth, W] onto the BEV grid.

    Each covered BEV cell center is raised along +z to the horizon plane and
    bilinearly reads the horizon grid at (projected column, ray-distance bin).
    Returns ([C, N, M] Tensor, coverage mask); uncovered cells read exact 0.
    """
    if grid != horizon.grid:
        raise ValueError("splat grid differs from the grid the horizon was built for")
    c = features.shape[0]
    if features.shape != (c, horizon.n_depth, horizon.width):
        raise ValueError(
            f"horizon features shape {features.shape} does not match "
            f"[C, {horizon.n_depth}, {horizon.width}]"
        )
    flat = T.reshape(features, (c, horizon.n_depth * horizon.width))
    out = T.weighted_gather(flat, horizon._splat_idx, horizon._splat_w)
    return T.reshape(out, (c, grid.n, grid.m)), horizon.coverage_mask.copy()


def dump_horizon_debug(horizon: ProjectedHorizon, directory, prefix: str = "horizon"):
    """Write the validity/coverage masks as PGM images for eyeballing."""
    from . import pgmio

    directory = str(directory)
    pgmio.write_pgm(f"{directory}/{prefix}_valid.pgm",
                    (horizon.valid_mask * 255).astype(np.uint8))
    pgmio.write_pgm(f"{directory}/{prefix}_coverage.pgm",
                    (horizon.coverage_mask * 255).astype(np.uint8))
