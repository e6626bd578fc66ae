"""Anchor/proposal assignment, proposal selection, and RoI sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as boxops


@dataclass
class AssignmentResult:
    """Per-anchor assignment: label (+1 positive / 0 negative), matched GT."""

    labels: np.ndarray          # (N,) int, 1 positive / 0 negative
    matched_gt_index: np.ndarray  # (N,) int, -1 when unmatched
    matched_iou: np.ndarray     # (N,) float

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


def assign_by_iou_threshold(anchors, gts, threshold: float = 0.5,
                            force_match: bool = True) -> AssignmentResult:
    """Single-threshold assignment: IoU >= threshold positive, else negative.

    Each anchor matches the GT of maximal IoU (ties to the lowest GT index).
    With force_match, every GT's best anchor is made positive even below the
    threshold, so no GT with any overlap is left untrained.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if isinstance(anchors, boxops.AnchorGrid):
        anchor_arr = anchors.boxes
    else:
        anchor_arr = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = anchor_arr.shape[0]
    gt_arr = np.asarray(
        [g.as_array() if isinstance(g, boxops.Box) else g for g in gts],
        dtype=np.float64,
    ).reshape(-1, 4)

    if gt_arr.shape[0] == 0:
        return AssignmentResult(
            labels=np.zeros(n, dtype=np.int64),
            matched_gt_index=np.full(n, -1, dtype=np.int64),
            matched_iou=np.zeros(n, dtype=np.float64),
        )

    iou = boxops.pairwise_iou(anchor_arr, gt_arr)  # (N, G)
    best_gt = iou.argmax(axis=1)  # argmax ties -> lowest GT index
    best_iou = iou[np.arange(n), best_gt]
    labels = (best_iou >= threshold).astype(np.int64)
    matched = np.where(labels == 1, best_gt, -1)

    if force_match:
        for g in range(gt_arr.shape[0]):
            col = iou[:, g]
            if col.max() <= 0.0:
                continue
            a = int(col.argmax())
            labels[a] = 1
            matched[a] = g
            best_iou[a] = col[a]

    return AssignmentResult(
        labels=labels,
        matched_gt_index=matched.astype(np.int64),
        matched_iou=best_iou,
    )


def select_top_proposals(scored_boxes, nms_threshold: float = 0.7,
                         max_keep: int = 256):
    """NMS-filter prior-scored boxes, then keep at most max_keep by score."""
    survivors = boxops.nms(scored_boxes, nms_threshold)
    return survivors[:max_keep]


def sample_rois(assignments: AssignmentResult, batch_size: int,
                positive_fraction: float, rng_seed: int) -> np.ndarray:
    """Randomly sample RoI indices with a capped positive fraction.

    At most positive_fraction * batch_size positives are drawn; the remainder
    is filled with negatives. Shortages of either kind take all available.
    Deterministic given rng_seed.
    """
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    pos = assignments.positive_indices
    neg = assignments.negative_indices
    if len(pos) == 0 and len(neg) == 0:
        return np.empty(0, dtype=np.int64)
    n_pos = min(int(round(positive_fraction * batch_size)), len(pos))
    n_neg = min(batch_size - n_pos, len(neg))
    chosen_pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else np.empty(0, dtype=np.int64)
    chosen_neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else np.empty(0, dtype=np.int64)
    return np.concatenate([chosen_pos, chosen_neg]).astype(np.int64)
