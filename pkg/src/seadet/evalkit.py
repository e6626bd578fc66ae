"""Detection metrics and diagnostics: PR, AP/mAP/COCO AP, robustness sweeps,
style-distance analysis, and feature-statistics tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boxes as boxops
from . import watermodel

AP_RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_IOU_THRESHOLDS = np.arange(0.5, 0.96, 0.05)


@dataclass(frozen=True)
class Detection:
    """One emitted detection: box, class label, final score."""

    box: boxops.Box
    label: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    box: boxops.Box
    label: int


@dataclass(frozen=True)
class MatchRecord:
    detection_id: int
    matched_gt: int | None
    verdict: str  # "TP" or "FP"
    iou: float
    label: int
    score: float


def match_detections(dets, gts, iou_threshold: float):
    """Greedy matching by descending score within one image and class.

    A detection is a TP iff its best-IoU not-yet-matched ground truth of the
    same class clears the threshold; each GT matches at most once. Returns
    (records, fn_count).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    matched_gt = set()
    records = []
    for det_id in order:
        det = dets[det_id]
        best_iou = 0.0
        best_gt = None
        for g, gt in enumerate(gts):
            if g in matched_gt or gt.label != det.label:
                continue
            i = boxops.iou(det.box, gt.box)
            if i > best_iou:
                best_iou = i
                best_gt = g
        if best_gt is not None and best_iou >= iou_threshold:
            matched_gt.add(best_gt)
            records.append(MatchRecord(det_id, best_gt, "TP", best_iou,
                                       det.label, det.score))
        else:
            records.append(MatchRecord(det_id, None, "FP", best_iou,
                                       det.label, det.score))
    fn = sum(1 for g, gt in enumerate(gts) if g not in matched_gt)
    return records, fn


def precision_recall(records, total_gt: int):
    """Counts -> (P, R). With zero detections, P is defined as 1 and R as 0."""
    tp = sum(1 for r in records if r.verdict == "TP")
    fp = sum(1 for r in records if r.verdict == "FP")
    p = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    r = tp / total_gt if total_gt > 0 else 0.0
    return p, r


def average_precision(records, total_gt: int) -> float:
    """101-point interpolated AP over the score-sorted detection sweep."""
    if total_gt == 0:
        raise ValueError("AP is undefined with zero ground truths")
    if not records:
        return 0.0
    ordered = sorted(records, key=lambda r: (-r.score, r.detection_id))
    tps = np.cumsum([1 if r.verdict == "TP" else 0 for r in ordered])
    fps = np.cumsum([1 if r.verdict == "FP" else 0 for r in ordered])
    recall = tps / total_gt
    precision = tps / np.maximum(tps + fps, 1)
    ap = 0.0
    for r in AP_RECALL_POINTS:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / len(AP_RECALL_POINTS)


def _per_class_records(dets_per_image, gts_per_image, iou_threshold, label):
    records = []
    total_gt = 0
    offset = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        d = [x for x in dets if x.label == label]
        g = [x for x in gts if x.label == label]
        recs, _ = match_detections(d, g, iou_threshold)
        for r in recs:
            records.append(MatchRecord(r.detection_id + offset, r.matched_gt,
                                       r.verdict, r.iou, r.label, r.score))
        offset += len(d)
        total_gt += len(g)
    return records, total_gt


def dataset_map(dets_per_image, gts_per_image, iou_threshold: float = 0.5):
    """Mean AP over classes with at least one GT; classes without GT are
    excluded. Returns (mAP, per-class dict)."""
    labels = sorted({g.label for gts in gts_per_image for g in gts})
    if not labels:
        raise ValueError("no ground truths in the dataset")
    per_class = {}
    for label in labels:
        records, total_gt = _per_class_records(
            dets_per_image, gts_per_image, iou_threshold, label)
        per_class[label] = average_precision(records, total_gt)
    return mean_ap(per_class), per_class


def mean_ap(per_class_ap: dict) -> float:
    """Unweighted mean of per-class APs."""
    if not per_class_ap:
        raise ValueError("need at least one class AP")
    return float(np.mean(list(per_class_ap.values())))


def coco_ap(dets_per_image, gts_per_image) -> float:
    """Mean of mAP over the 10 IoU thresholds 0.5:0.05:0.95."""
    values = [dataset_map(dets_per_image, gts_per_image, float(t))[0]
              for t in COCO_IOU_THRESHOLDS]
    return float(np.mean(values))


def robustness_sweep(predict_fn, images, gts_per_image, kinds,
                     severity: int = 3, iou_threshold: float = 0.5,
                     seed: int = 0):
    """Per-corruption mAP table with deltas against the clean row.

    Returns a list of row dicts: the clean row first, one row per kind, and
    a final average row over the corruption kinds.
    """
    clean_dets = [predict_fn(img) for img in images]
    clean_ap, _ = dataset_map(clean_dets, gts_per_image, iou_threshold)
    rows = [{"kind": "clean", "severity": 0, "ap": clean_ap, "delta": 0.0}]
    kind_aps = []
    for kind in kinds:
        dets = [
            predict_fn(watermodel.corrupt_image(img, kind, severity, seed=seed + i))
            for i, img in enumerate(images)
        ]
        ap, _ = dataset_map(dets, gts_per_image, iou_threshold)
        kind_aps.append(ap)
        rows.append({"kind": kind, "severity": severity, "ap": ap,
                     "delta": ap - clean_ap})
    avg = float(np.mean(kind_aps)) if kind_aps else clean_ap
    rows.append({"kind": "average", "severity": severity, "ap": avg,
                 "delta": avg - clean_ap})
    return rows


def format_robustness_table(rows) -> str:
    """Human-readable table: kind, AP, parenthesized delta per row."""
    lines = [f"{'kind':<16} {'AP':>8}  {'delta':>9}"]
    for row in rows:
        lines.append(
            f"{row['kind']:<16} {row['ap']:>8.4f}  ({row['delta']:+.4f})")
    return "\n".join(lines)


def feature_stats(feature_fn, per_domain_batches):
    """Per-layer per-domain activation statistics plus cross-domain spread.

    feature_fn maps a batch to a list of per-layer activations. Returns
    (rows, cross_domain_std) where rows are (layer, domain, mean, std) and
    cross_domain_std[layer] is the std of per-domain means.
    """
    if len(per_domain_batches) < 2:
        raise ValueError("need at least 2 domains")
    rows = []
    per_layer_means: dict[int, list[float]] = {}
    for domain, batch in sorted(per_domain_batches.items()):
        layers = feature_fn(batch)
        for li, act in enumerate(layers):
            arr = np.asarray(act if not hasattr(act, "detach")
                             else act.detach().numpy(), dtype=np.float64)
            mean, std = float(arr.mean()), float(arr.std())
            rows.append({"layer": li, "domain": domain,
                         "mean": mean, "std": std})
            per_layer_means.setdefault(li, []).append(mean)
    cross = {li: float(np.std(means)) for li, means in per_layer_means.items()}
    return rows, cross


def style_distance_matrix(domain_image_sets, feature_extractor,
                          perf_gain_matrix=None):
    """Symmetric matrix of Gram style distances between domain image sets.

    Per domain, the Gram matrix of the deepest extractor features is averaged
    over its images; entries are squared Frobenius distances of those means.
    Optionally reports the Pearson correlation against a performance-gain
    matrix (toy-scale, directional only).
    """
    domains = sorted(domain_image_sets)
    grams = {}
    for d in domains:
        images = domain_image_sets[d]
        if len(images) < 2:
            raise ValueError(f"domain {d} needs at least 2 samples")
        gs = [watermodel.gram_matrix(feature_extractor(img)[-1])
              for img in images]
        grams[d] = np.mean(gs, axis=0)
    n = len(domains)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d2 = float(((grams[domains[i]] - grams[domains[j]]) ** 2).sum())
            dist[i, j] = dist[j, i] = d2
    result = {"domains": domains, "matrix": dist}
    if perf_gain_matrix is not None:
        a = dist.ravel()
        b = np.asarray(perf_gain_matrix, dtype=np.float64).ravel()
        if a.std() > 0 and b.std() > 0:
            result["pearson"] = float(np.corrcoef(a, b)[0, 1])
        else:
            result["pearson"] = 0.0
    return result
