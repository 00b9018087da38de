"""Lidar depth ground truth, depth decoding, and depth quality metrics.

Depth convention in this module is **camera-plane distance** (the z-depth a
perspective camera rasterizes with, equal to the homogeneous w of a
normalized projection matrix) — not the ray distance the horizon grid uses.
Ground truth for a feature cell is the minimum plane distance of the lidar
points landing in that cell; cells with no return, or whose minimum falls
outside the bin range, are undefined and excluded everywhere downstream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import CameraModel, project_points
from .tensor import Tensor

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class DepthBins:
    """Uniformly spaced depth-bin centers spanning [d_min, d_max]."""

    centers: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 1 or c.size < 1:
            raise ValueError(f"bin centers must be a 1D array, got shape {c.shape}")
        if c.size > 1:
            gaps = np.diff(c)
            if (gaps <= 0).any():
                raise ValueError("bin centers must be strictly ascending")
            if np.abs(gaps - gaps[0]).max() > 1e-9 * gaps[0]:
                raise ValueError("bin centers must be uniformly spaced")
        c.flags.writeable = False
        object.__setattr__(self, "centers", c)

    @classmethod
    def from_range(cls, d_min: float, d_max: float, n: int) -> "DepthBins":
        if not (0 < d_min < d_max) or n < 1:
            raise ValueError(f"bad bin range [{d_min}, {d_max}] x {n}")
        width = (d_max - d_min) / n
        return cls(d_min + (np.arange(n) + 0.5) * width)

    @property
    def n(self) -> int:
        return self.centers.size

    @property
    def width(self) -> float:
        if self.centers.size == 1:
            raise ValueError("single-bin range has no defined width")
        return float(self.centers[1] - self.centers[0])

    @property
    def d_min(self) -> float:
        return float(self.centers[0] - self.width / 2.0)

    @property
    def d_max(self) -> float:
        return float(self.centers[-1] + self.width / 2.0)

    def edges(self) -> np.ndarray:
        return np.concatenate([[self.d_min], self.centers + self.width / 2.0])

    def index_of(self, values: np.ndarray) -> np.ndarray:
        """Bin index per value; values exactly on an interior edge take the
        lower bin.  Values must lie inside [d_min, d_max]."""
        rel = (np.asarray(values, dtype=np.float64) - self.d_min) / self.width
        idx = np.ceil(rel).astype(np.int64) - 1
        return np.clip(idx, 0, self.n - 1)


@dataclass
class DepthMap:
    """Per-feature-cell depth with a definedness mask."""

    values: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.defined = np.asarray(self.defined, dtype=bool)
        if self.values.shape != self.defined.shape or self.values.ndim != 2:
            raise ValueError(
                f"values/defined must be matching 2D maps, got "
                f"{self.values.shape} vs {self.defined.shape}"
            )


def lidar_depth_map(points: np.ndarray, cam: CameraModel, bins: DepthBins) -> DepthMap:
    """Ground-truth depth per feature cell: minimum camera-plane distance of
    the lidar points projecting into the cell; undefined when empty or when
    the minimum leaves the bin range."""
    h_feat, w_feat = cam.feat_h, cam.feat_w
    values = np.full((h_feat, w_feat), np.inf)
    pts = np.asarray(points, dtype=np.float64)
    if pts.size:
        u, v, _, plane, in_front = project_points(cam, pts)
        keep = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        cu = (u[keep] / cam.feature_stride).astype(np.int64)
        cv = (v[keep] / cam.feature_stride).astype(np.int64)
        np.minimum.at(values, (cv, cu), plane[keep])
    defined = np.isfinite(values) & (values >= bins.d_min) & (values <= bins.d_max)
    values = np.where(defined, values, 0.0)
    return DepthMap(values, defined)


def one_hot_depth(dmap: DepthMap, bins: DepthBins):
    """(one_hot [n_bins, H, W], defined mask); undefined cells are all-zero."""
    h, w = dmap.values.shape
    onehot = np.zeros((bins.n, h, w))
    if dmap.defined.any():
        idx = bins.index_of(dmap.values[dmap.defined])
        cv, cu = np.nonzero(dmap.defined)
        onehot[idx, cv, cu] = 1.0
    return onehot, dmap.defined.copy()


def _pred_array(pred) -> np.ndarray:
    return pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)


def mean_depth(pred, bins: DepthBins) -> np.ndarray:
    """Expectation decode: sum_n center_n * p_n per pixel."""
    p = _pred_array(pred)
    if p.shape[0] != bins.n:
        raise ValueError(f"distribution has {p.shape[0]} bins, expected {bins.n}")
    return np.tensordot(bins.centers, p, axes=(0, 0))


def mode_depth(pred, bins: DepthBins) -> np.ndarray:
    """Argmax decode; ties take the lowest bin index (argmax convention)."""
    p = _pred_array(pred)
    if p.shape[0] != bins.n:
        raise ValueError(f"distribution has {p.shape[0]} bins, expected {bins.n}")
    return bins.centers[np.argmax(p, axis=0)]


METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmsle", "frac125")


def depth_metrics(pred_map: np.ndarray, gt: DepthMap) -> dict:
    """Five Eigen-style metrics over the defined cells.

    abs_rel  mean |p - g| / g
    sq_rel   mean (p - g)^2 / g
    rmse     sqrt(mean (p - g)^2)
    rmsle    sqrt(mean (ln p - ln g)^2)
    frac125  fraction with max(p/g, g/p) strictly greater than 1.25
    """
    if not gt.defined.any():
        raise ValueError("depth metrics need at least one defined cell")
    p = np.asarray(pred_map, dtype=np.float64)[gt.defined]
    g = gt.values[gt.defined]
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("depth metrics need strictly positive depths")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return {
        "abs_rel": float(np.mean(np.abs(diff) / g)),
        "sq_rel": float(np.mean(diff * diff / g)),
        "rmse": float(np.sqrt(np.mean(diff * diff))),
        "rmsle": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "frac125": float(np.mean(ratio > 1.25)),
    }


def depth_ce_loss(pred: Tensor, onehot: np.ndarray, defined: np.ndarray) -> Tensor:
    """Cross-entropy -mean(log p_hit) over defined cells (log clamped at 1e-12).

    ``pred`` is a per-pixel distribution over bins [n_bins, H, W]; the picked
    probability is the one under the ground-truth one-hot.  With no defined
    cell the loss is the constant 0 (no supervision signal).
    """
    if pred.shape != onehot.shape:
        raise ValueError(f"pred shape {pred.shape} vs one-hot shape {onehot.shape}")
    count = int(defined.sum())
    if count == 0:
        return Tensor(0.0)
    hit = T.sum_(pred * onehot, axis=0)  # [H, W]
    logs = T.log(T.clamp_min(hit, LOG_CLAMP))
    return T.mul(T.sum_(logs * defined), -1.0 / count)


def total_loss(task_loss: Tensor, depth_loss: Tensor, weight: float) -> Tensor:
    """Supervised task loss plus weight * depth cross-entropy."""
    return task_loss + T.mul(depth_loss, float(weight))


def write_depth_pgm(path, dmap: DepthMap) -> None:
    """16-bit PGM in millimeters (clipped at the format ceiling 65.535 m)."""
    from .pgmio import write_pgm

    mm = np.clip(np.round(dmap.values * 1000.0), 0, 65535).astype(np.uint16)
    mm[~dmap.defined] = 0
    write_pgm(path, mm)


def write_mask_pgm(path, dmap: DepthMap) -> None:
    from .pgmio import write_pgm

    write_pgm(path, (dmap.defined * 255).astype(np.uint8))


def metrics_csv_header(prefix_f1: bool = True) -> list:
    cols = ["variant"]
    if prefix_f1:
        cols.append("f1")
    cols += [f"mode_{m}" for m in METRIC_NAMES] + [f"mean_{m}" for m in METRIC_NAMES]
    return cols


def metrics_csv_row(variant: str, f1, mode_metrics, mean_metrics) -> list:
    """One table row: detection score then mode/mean metric blocks; metric
    blocks may be None (printed empty) for variants without a depth estimate."""
    def block(metrics):
        if metrics is None:
            return [""] * len(METRIC_NAMES)
        return [repr(float(metrics[name])) for name in METRIC_NAMES]

    row = [variant]
    row.append("" if f1 is None else repr(float(f1)))
    return row + block(mode_metrics) + block(mean_metrics)
