"""Box geometry, pairwise geometric features, NMS and proposal matching.

Boxes are stored in center format (x, y, w, h), matching the JSON wire
format ``{"x":..., "y":..., "w":..., "h":...}``. All functions here are
pure and safe to evaluate in parallel across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

POSITIVE_IOU = 0.7   # proposal is positive at or above this IoU with a GT box
NEGATIVE_IOU = 0.3   # proposal is negative only if below this IoU with every GT box


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with center (x, y) and extents (w, h) in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box: w={self.w}, h={self.h}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError("box coordinates must be finite")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self):
        """(x0, y0, x1, y1) corner form."""
        return (self.x - self.w / 2, self.y - self.h / 2,
                self.x + self.w / 2, self.y + self.h / 2)

    @staticmethod
    def from_corners(x0, y0, x1, y1) -> "Box":
        return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @staticmethod
    def from_json(obj) -> "Box":
        return Box(float(obj["x"]), float(obj["y"]), float(obj["w"]), float(obj["h"]))


@dataclass
class RegionProposal:
    """A detected region: box, detector confidence, appearance feature."""

    box: Box
    confidence: float
    feature: np.ndarray
    id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"proposal confidence {self.confidence} outside [0, 1]")
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(1, -1)
        if not np.all(np.isfinite(self.feature)):
            raise ValueError("proposal feature contains non-finite values")


@dataclass
class RegionPair:
    """Ordered (subject, object) proposal pair, the unit of relational captioning."""

    subject: RegionProposal
    object: RegionProposal
    union_box: Box = field(init=False)
    geo: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.subject.id == self.object.id:
            raise ValueError("a region pair needs two distinct proposals")
        self.union_box = union_box(self.subject.box, self.object.box)
        self.geo = geometric_feature(self.subject.box, self.object.box)


@dataclass(frozen=True)
class MatchLabel:
    """Proposal-to-ground-truth assignment: positive / negative / ignore."""

    kind: str                 # "positive" | "negative" | "ignore"
    gt_index: int | None = None

    def __post_init__(self):
        if self.kind not in ("positive", "negative", "ignore"):
            raise ValueError(f"bad match kind {self.kind!r}")
        if (self.kind == "positive") != (self.gt_index is not None):
            raise ValueError("gt_index must be set exactly for positive matches")


def intersection_area(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def _corner_area(box: Box) -> float:
    x0, y0, x1, y1 = box.corners()
    return (x1 - x0) * (y1 - y0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes, exactly 1 for a == b.

    Areas are computed from corner coordinates so that they cancel exactly
    against the intersection; the final clamp guards the one-ulp cases.
    """
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return min(1.0, inter / (_corner_area(a) + _corner_area(b) - inter))


def union_box(a: Box, b: Box) -> Box:
    """Minimal axis-aligned box covering both inputs."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    return Box.from_corners(min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1))


def geometric_feature(subject: Box, obj: Box) -> np.ndarray:
    """Six-component relative geometry of an ordered box pair.

    Components, in order: x-offset and y-offset normalized by the subject
    scale sqrt(w_s * h_s), square root of the area ratio, the two aspect
    ratios w_s/h_s and w_o/h_o, and the IoU of the boxes. Invariant under
    joint translation and joint uniform scaling.
    """
    scale = math.sqrt(subject.w * subject.h)
    return np.array([
        (obj.x - subject.x) / scale,
        (obj.y - subject.y) / scale,
        math.sqrt((obj.w * obj.h) / (subject.w * subject.h)),
        subject.w / subject.h,
        obj.w / obj.h,
        iou(subject, obj),
    ])


def nms(proposals, iou_threshold: float, keep: int):
    """Greedy suppression in descending confidence, ties by ascending id.

    No two survivors overlap above ``iou_threshold``; at most ``keep``
    survivors are returned, in descending-confidence order.
    """
    if keep < 0:
        raise ValueError("nms: keep must be >= 0")
    order = sorted(proposals, key=lambda p: (-p.confidence, p.id))
    kept = []
    for cand in order:
        if len(kept) >= keep:
            break
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def match_to_gt(proposals, gt_boxes):
    """Label proposals against ground-truth boxes.

    Positive at max IoU >= 0.7 (argmax GT recorded), negative when every
    IoU < 0.3, ignore in between.
    """
    labels = []
    for prop in proposals:
        ious = [iou(prop.box, g) for g in gt_boxes]
        best = max(ious) if ious else 0.0
        if best >= POSITIVE_IOU:
            labels.append(MatchLabel("positive", int(np.argmax(ious))))
        elif best < NEGATIVE_IOU:
            labels.append(MatchLabel("negative"))
        else:
            labels.append(MatchLabel("ignore"))
    return labels


def combination_layer(proposals, max_pairs: int | None = None):
    """Expand B proposals into all B(B-1) ordered pairs.

    Output is ordered lexicographically by input position. With
    ``max_pairs`` set, the pairs with the highest subject-object
    confidence products are kept (original ordering preserved).
    """
    props = list(proposals)
    ids = [p.id for p in props]
    if len(set(ids)) != len(ids):
        raise ValueError("combination_layer: proposal ids must be distinct")
    pairs = [RegionPair(a, b) for i, a in enumerate(props) for j, b in enumerate(props) if i != j]
    if max_pairs is not None and len(pairs) > max_pairs:
        scored = sorted(
            range(len(pairs)),
            key=lambda k: (-pairs[k].subject.confidence * pairs[k].object.confidence, k),
        )
        keep = sorted(scored[:max_pairs])
        pairs = [pairs[k] for k in keep]
    return pairs
