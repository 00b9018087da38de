"""Detection boxes, test-time-augmentation transforms, and weighted boxes
fusion (WBF).

WBF pools boxes from several sources (TTA passes or ensemble members), sorts
them by score, and greedily clusters same-class boxes whose centers sit within
a per-class L2 threshold of a cluster's running score-weighted center.  Each
cluster collapses to one box: score-weighted averages of center, dimensions
and velocity, a circular score-weighted yaw mean, and a score of
``mean(scores) * min(n_members, n_sources) / n_sources`` — agreement across
sources keeps the score, a box seen by only some sources is discounted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; values already in range pass through untouched."""
    if -math.pi < a <= math.pi:
        return a
    return math.pi - (math.pi - a) % TWO_PI


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0
    cls: int = 0
    score: float = 1.0

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError(f"box dimensions must be positive, got "
                             f"({self.w}, {self.l}, {self.h})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


CSV_FIELDS = ("x", "y", "z", "w", "l", "h", "yaw", "vx", "vy", "cls", "score")


def box_csv_row(box: Box3D) -> list:
    return [repr(float(getattr(box, f))) if f != "cls" else str(box.cls)
            for f in CSV_FIELDS]


def box_from_csv_row(row) -> Box3D:
    vals = {f: (int(v) if f == "cls" else float(v))
            for f, v in zip(CSV_FIELDS, row)}
    return Box3D(**vals)


# -- test-time augmentation ----------------------------------------------------


@dataclass(frozen=True)
class TtaTransform:
    """Mirror across the x axis (y -> -y) then rotate about the ego origin.

    ``apply_box`` maps boxes from the original frame into the augmented one;
    ``invert_box`` is its exact inverse (rotate back, then unmirror).
    """

    mirror_y: bool = False
    rotation_deg: float = 0.0

    def _rot(self, x: float, y: float, degrees: float):
        t = math.radians(degrees)
        c, s = math.cos(t), math.sin(t)
        return c * x - s * y, s * x + c * y

    def apply_box(self, box: Box3D) -> Box3D:
        x, y, yaw, vx, vy = box.x, box.y, box.yaw, box.vx, box.vy
        if self.mirror_y:
            y, yaw, vy = -y, -yaw, -vy
        x, y = self._rot(x, y, self.rotation_deg)
        vx, vy = self._rot(vx, vy, self.rotation_deg)
        yaw += math.radians(self.rotation_deg)
        return replace(box, x=x, y=y, yaw=wrap_angle(yaw), vx=vx, vy=vy)

    def invert_box(self, box: Box3D) -> Box3D:
        x, y = self._rot(box.x, box.y, -self.rotation_deg)
        vx, vy = self._rot(box.vx, box.vy, -self.rotation_deg)
        yaw = box.yaw - math.radians(self.rotation_deg)
        if self.mirror_y:
            y, yaw, vy = -y, -yaw, -vy
        return replace(box, x=x, y=y, yaw=wrap_angle(yaw), vx=vx, vy=vy)


def default_tta_set() -> list[TtaTransform]:
    """Mirror on/off crossed with five small rotations: ten passes."""
    rotations = (-12.5, -6.25, 0.0, 6.25, 12.5)
    return [TtaTransform(mirror, rot)
            for mirror in (False, True) for rot in rotations]


# -- weighted boxes fusion -----------------------------------------------------


def _sort_key(box: Box3D):
    return (-box.score, box.x, box.y, box.cls)


class _Cluster:
    __slots__ = ("cls", "boxes", "center", "weight")

    def __init__(self, box: Box3D):
        self.cls = box.cls
        self.boxes = [box]
        self.center = box.score * box.center
        self.weight = box.score

    def running_center(self) -> np.ndarray:
        if self.weight > 0:
            return self.center / self.weight
        return sum(b.center for b in self.boxes) / len(self.boxes)

    def add(self, box: Box3D):
        self.boxes.append(box)
        self.center = self.center + box.score * box.center
        self.weight += box.score


def _fuse_cluster(cluster: _Cluster, n_sources: int) -> Box3D:
    boxes = cluster.boxes
    scores = np.array([b.score for b in boxes])
    total = scores.sum()
    if total > 0:
        weights = scores / total
    else:
        weights = np.full(len(boxes), 1.0 / len(boxes))

    def avg(field):
        return float(sum(wi * getattr(b, field) for wi, b in zip(weights, boxes)))

    sin_sum = float(sum(wi * math.sin(b.yaw) for wi, b in zip(weights, boxes)))
    cos_sum = float(sum(wi * math.cos(b.yaw) for wi, b in zip(weights, boxes)))
    score = float(scores.mean()) * min(len(boxes), n_sources) / n_sources
    return Box3D(x=avg("x"), y=avg("y"), z=avg("z"),
                 w=avg("w"), l=avg("l"), h=avg("h"),
                 yaw=math.atan2(sin_sum, cos_sum),
                 vx=avg("vx"), vy=avg("vy"),
                 cls=cluster.cls, score=score)


def wbf(box_lists, thresholds) -> list[Box3D]:
    """Fuse per-source box lists.

    ``thresholds`` maps class id to the L2 center-distance (meters) below
    which a box joins an existing same-class cluster.  Boxes are visited in a
    total order (score descending, then x, y, class) so fusion is invariant
    to input permutations; membership is tested against the cluster's running
    score-weighted center.
    """
    box_lists = [list(bl) for bl in box_lists]
    n_sources = len(box_lists)
    if n_sources == 0:
        return []
    pool = sorted((b for bl in box_lists for b in bl), key=_sort_key)

    clusters: list[_Cluster] = []
    for box in pool:
        if box.cls not in thresholds:
            raise ValueError(f"no fusion threshold for class {box.cls}")
        limit = thresholds[box.cls]
        for cluster in clusters:
            if cluster.cls != box.cls:
                continue
            if np.linalg.norm(box.center - cluster.running_center()) < limit:
                cluster.add(box)
                break
        else:
            clusters.append(_Cluster(box))
    return [_fuse_cluster(c, n_sources) for c in clusters]


def ensemble_pipeline(detect_fns, tta_set, thresholds) -> list[Box3D]:
    """TTA + WBF within each model, then WBF across models.

    ``detect_fns`` is one callable per model.  Each is handed a TtaTransform
    and must return detections *in the augmented frame* (the caller runs its
    model on the transformed scene); this function maps them back with the
    exact inverse before fusing.
    """
    detect_fns = list(detect_fns)
    if not detect_fns:
        raise ValueError("ensemble_pipeline needs at least one model")
    tta_set = list(tta_set) or [TtaTransform()]
    per_model = []
    for fn in detect_fns:
        per_pass = []
        for t in tta_set:
            boxes = [t.invert_box(b) for b in fn(t)]
            per_pass.append(boxes)
        per_model.append(wbf(per_pass, thresholds))
    if len(per_model) == 1:
        return per_model[0]
    return wbf(per_model, thresholds)
