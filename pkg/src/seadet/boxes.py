"""Axis-aligned box geometry: IoU family, anchor generation, encode/decode, NMS.

Boxes are stored in corner form (x1, y1, x2, y2); center form (cx, cy, w, h)
is a derived view. All functions are pure and accept either a `Box` or any
4-sequence; batched helpers operate on (N, 4) numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Decoded deltas are clamped so exp() cannot overflow early in training.
DELTA_CLAMP = math.log(1000.0 / 16.0)

ASPECT_RATIOS = (0.5, 1.0, 2.0)
SCALE_MULTIPLIERS = (2 ** 0.0, 2 ** (1.0 / 3.0), 2 ** (2.0 / 3.0))
ANCHORS_PER_CELL = len(ASPECT_RATIOS) * len(SCALE_MULTIPLIERS)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in corner form, image-plane pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class EncodedDelta:
    """Box regression target relative to an anchor: offsets + log-scale ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass(frozen=True)
class AnchorGrid:
    """Dense per-cell anchor set for one feature-map level."""

    level_stride: int
    height: int
    width: int
    base_scale: float
    boxes: np.ndarray  # (H*W*9, 4) corner form

    def __len__(self) -> int:
        return self.boxes.shape[0]


def _as_xyxy(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    arr = np.asarray(b, dtype=np.float64)
    if arr.shape != (4,):
        raise ValueError(f"expected a 4-vector box, got shape {arr.shape}")
    return arr


def iou(a, b) -> float:
    """Intersection-over-union of two boxes; degenerate boxes give 0."""
    a = _as_xyxy(a)
    b = _as_xyxy(b)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (N, M) between boxes a (N, 4) and b (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_terms(a, b) -> tuple[float, float]:
    """Return (iou, enclosure_penalty); GIoU = iou - enclosure_penalty.

    The penalty is |C - A∪B| / |C| where C is the smallest enclosing box.
    """
    av = _as_xyxy(a)
    bv = _as_xyxy(b)
    i = iou(av, bv)
    cx1 = min(av[0], bv[0])
    cy1 = min(av[1], bv[1])
    cx2 = max(av[2], bv[2])
    cy2 = max(av[3], bv[3])
    c_area = (cx2 - cx1) * (cy2 - cy1)
    if c_area <= 0.0:
        return i, 0.0
    ix = max(0.0, min(av[2], bv[2]) - max(av[0], bv[0]))
    iy = max(0.0, min(av[3], bv[3]) - max(av[1], bv[1]))
    inter = ix * iy
    area_a = (av[2] - av[0]) * (av[3] - av[1])
    area_b = (bv[2] - bv[0]) * (bv[3] - bv[1])
    union = area_a + area_b - inter
    return i, float((c_area - union) / c_area)


def encode_box(b, anchor) -> EncodedDelta:
    """Encode box b relative to an anchor as (tx, ty, tw, th).

    tx = (x - x_a) / w_a, tw = log(w / w_a) and likewise for y/h.
    """
    bv = _as_xyxy(b)
    av = _as_xyxy(anchor)
    wa = av[2] - av[0]
    ha = av[3] - av[1]
    if wa <= 0 or ha <= 0:
        raise ValueError("anchor must have positive width and height")
    w = bv[2] - bv[0]
    h = bv[3] - bv[1]
    if w <= 0 or h <= 0:
        raise ValueError("target box must have positive width and height")
    xa = 0.5 * (av[0] + av[2])
    ya = 0.5 * (av[1] + av[3])
    x = 0.5 * (bv[0] + bv[2])
    y = 0.5 * (bv[1] + bv[3])
    return EncodedDelta(
        tx=float((x - xa) / wa),
        ty=float((y - ya) / ha),
        tw=float(math.log(w / wa)),
        th=float(math.log(h / ha)),
    )


def decode_box(t, anchor) -> Box:
    """Invert encode_box; tw/th are clamped to ±log(1000/16) before exp."""
    if isinstance(t, EncodedDelta):
        tv = t.as_array()
    else:
        tv = np.asarray(t, dtype=np.float64).reshape(4)
    av = _as_xyxy(anchor)
    wa = av[2] - av[0]
    ha = av[3] - av[1]
    if wa <= 0 or ha <= 0:
        raise ValueError("anchor must have positive width and height")
    xa = 0.5 * (av[0] + av[2])
    ya = 0.5 * (av[1] + av[3])
    tw = min(max(tv[2], -DELTA_CLAMP), DELTA_CLAMP)
    th = min(max(tv[3], -DELTA_CLAMP), DELTA_CLAMP)
    x = tv[0] * wa + xa
    y = tv[1] * ha + ya
    w = math.exp(tw) * wa
    h = math.exp(th) * ha
    return Box.from_center(x, y, w, h)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized encode of (N, 4) boxes against (N, 4) anchors."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = 0.5 * (anchors[:, 0] + anchors[:, 2])
    ya = 0.5 * (anchors[:, 1] + anchors[:, 3])
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    x = 0.5 * (boxes[:, 0] + boxes[:, 2])
    y = 0.5 * (boxes[:, 1] + boxes[:, 3])
    return np.stack(
        [(x - xa) / wa, (y - ya) / ha, np.log(w / wa), np.log(h / ha)], axis=1
    )


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized decode of (N, 4) deltas against (N, 4) anchors."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = 0.5 * (anchors[:, 0] + anchors[:, 2])
    ya = 0.5 * (anchors[:, 1] + anchors[:, 3])
    tw = np.clip(deltas[:, 2], -DELTA_CLAMP, DELTA_CLAMP)
    th = np.clip(deltas[:, 3], -DELTA_CLAMP, DELTA_CLAMP)
    x = deltas[:, 0] * wa + xa
    y = deltas[:, 1] * ha + ya
    w = np.exp(tw) * wa
    h = np.exp(th) * ha
    return np.stack(
        [x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=1
    )


def generate_anchors(
    feature_height: int,
    feature_width: int,
    stride: int,
    base_scale: float = 4.0,
) -> AnchorGrid:
    """Generate 9 anchors per cell: 3 aspect ratios x 3 octave-scale multipliers.

    The base anchor side is base_scale * stride (RetinaNet convention);
    the scale multipliers are {2^0, 2^(1/3), 2^(2/3)}.
    """
    if feature_height <= 0 or feature_width <= 0 or stride <= 0:
        raise ValueError("feature dimensions and stride must be positive")
    base = base_scale * stride
    shapes = []
    for scale in SCALE_MULTIPLIERS:
        side = base * scale
        area = side * side
        for ratio in ASPECT_RATIOS:
            # ratio = w / h, area preserved per scale
            w = math.sqrt(area * ratio)
            h = math.sqrt(area / ratio)
            shapes.append((w, h))
    shapes = np.asarray(shapes, dtype=np.float64)  # (9, 2)

    ys = (np.arange(feature_height, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(feature_width, dtype=np.float64) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (H*W, 2)

    cxs = centers[:, None, 0]
    cys = centers[:, None, 1]
    ws = shapes[None, :, 0]
    hs = shapes[None, :, 1]
    boxes = np.stack(
        [cxs - 0.5 * ws, cys - 0.5 * hs, cxs + 0.5 * ws, cys + 0.5 * hs],
        axis=2,
    ).reshape(-1, 4)
    return AnchorGrid(
        level_stride=stride,
        height=feature_height,
        width=feature_width,
        base_scale=base_scale,
        boxes=boxes,
    )


def nms(dets, iou_threshold: float):
    """Greedy non-maximum suppression.

    `dets` is a list of (box, score) pairs (box as Box or 4-sequence).
    Returns survivors sorted by descending score; ties broken by box corners
    so the result is deterministic.
    """
    if not dets:
        return []
    entries = []
    for box, score in dets:
        arr = _as_xyxy(box)
        entries.append((float(score), arr))
    # descending score, then ascending corners for a stable deterministic order
    entries.sort(key=lambda e: (-e[0], e[1][0], e[1][1], e[1][2], e[1][3]))
    boxes = np.stack([e[1] for e in entries])
    scores = np.array([e[0] for e in entries])
    keep_idx = nms_indices(boxes, scores, iou_threshold, presorted=True)
    return [(Box(*boxes[i]), float(scores[i])) for i in keep_idx]


def nms_indices(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    presorted: bool = False,
) -> list[int]:
    """NMS over arrays; returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return []
    if presorted:
        order = np.arange(boxes.shape[0])
    else:
        order = np.lexsort(
            (boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores)
        )
    kept: list[int] = []
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    ious = pairwise_iou(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return kept
