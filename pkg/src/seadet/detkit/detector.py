"""Two-stage probabilistic detector: RetinaRPN-style first stage (objectness,
IoU prediction, box regression) fused with a softmax second stage via
marginal scoring."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torchvision.ops import roi_align

from .. import boxes as boxops
from .. import evalkit, probfusion
from ..dginvariance import DomainClassifier
from .net import STAGE_WIDTHS, Backbone, FeaturePyramid, FirstStageHead, SecondStageHead


def decode_t(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Differentiable box decode with the standard tw/th clamp."""
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    xa = 0.5 * (anchors[:, 0] + anchors[:, 2])
    ya = 0.5 * (anchors[:, 1] + anchors[:, 3])
    tw = deltas[:, 2].clamp(-boxops.DELTA_CLAMP, boxops.DELTA_CLAMP)
    th = deltas[:, 3].clamp(-boxops.DELTA_CLAMP, boxops.DELTA_CLAMP)
    x = deltas[:, 0] * wa + xa
    y = deltas[:, 1] * ha + ya
    w = torch.exp(tw) * wa
    h = torch.exp(th) * ha
    return torch.stack([x - 0.5 * w, y - 0.5 * h,
                        x + 0.5 * w, y + 0.5 * h], dim=1)


class Detector(nn.Module):
    def __init__(self, det_cfg: dict, num_domains: int = 6):
        super().__init__()
        self.cfg = dict(det_cfg)
        groups = det_cfg["gn_groups"]
        channels = det_cfg["fpn_channels"]
        self.backbone = Backbone(groups=groups)
        self.fpn = FeaturePyramid(out_channels=channels)
        self.first_head = FirstStageHead(
            channels=channels,
            depth=det_cfg["head_depth"],
            groups=groups,
            prior_pi=det_cfg["prior_pi"],
        )
        self.second_head = SecondStageHead(
            in_channels=channels, num_classes=det_cfg["num_classes"])
        self.domain_classifier = DomainClassifier(
            STAGE_WIDTHS[-1], num_domains)
        self._anchor_cache: dict = {}

    @property
    def num_classes(self) -> int:
        return self.cfg["num_classes"]

    def anchors_for(self, image_hw: tuple) -> np.ndarray:
        """Concatenated anchors over the configured pyramid strides."""
        key = tuple(image_hw)
        if key not in self._anchor_cache:
            h, w = image_hw
            parts = []
            for stride in self.cfg["fpn_strides"]:
                grid = boxops.generate_anchors(
                    -(-h // stride), -(-w // stride), stride,
                    self.cfg["anchor_base_scale"])
                parts.append(grid.boxes)
            self._anchor_cache[key] = np.concatenate(parts, axis=0)
        return self._anchor_cache[key]

    def extract_features(self, images: torch.Tensor, branch=None,
                         mix_lambdas=None, detach_branch=False):
        """Backbone (+ optional siamese mixup) and pyramid features."""
        feats, branch_feats = self.backbone(
            images, branch=branch, mix_lambdas=mix_lambdas,
            detach_branch=detach_branch)
        pyramid = self.fpn(feats)
        return feats, branch_feats, pyramid

    def forward_first_stage(self, pyramid: dict):
        """Per-anchor (objectness, iou_pred, deltas) logits across levels.

        Returned tensors have shape (B, N_total) / (B, N_total, 4) with the
        anchor ordering of anchors_for().
        """
        objs, ious, regs = [], [], []
        for stride in self.cfg["fpn_strides"]:
            o, q, r = self.first_head(pyramid[stride])
            objs.append(o)
            ious.append(q)
            regs.append(r)
        return (torch.cat(objs, dim=1), torch.cat(ious, dim=1),
                torch.cat(regs, dim=1))

    def prior_from_logits(self, obj_logits, iou_logits):
        """prior = sqrt(sigmoid(obj) * sigmoid(iou)) per anchor."""
        return probfusion.objectness_prior(
            torch.sigmoid(obj_logits), torch.sigmoid(iou_logits))

    def select_proposals(self, prior: torch.Tensor, deltas: torch.Tensor,
                         anchors: np.ndarray, image_hw: tuple,
                         pre_nms: int = 512):
        """Decode, clip, NMS-filter, and truncate one image's proposals.

        Returns (boxes (K,4) np, priors (K,) np). No gradients flow here.
        """
        with torch.no_grad():
            boxes = decode_t(deltas.double(),
                             torch.as_tensor(anchors)).numpy()
        h, w = image_hw
        boxes[:, 0::2] = boxes[:, 0::2].clip(0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clip(0, h)
        p = prior.detach().numpy().astype(np.float64)
        # drop degenerate boxes
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, p = boxes[valid], p[valid]
        if boxes.shape[0] == 0:
            return np.zeros((0, 4)), np.zeros(0)
        order = np.argsort(-p, kind="stable")[:pre_nms]
        boxes, p = boxes[order], p[order]
        keep = boxops.nms_indices(boxes, p, self.cfg["proposal_nms_threshold"])
        keep = keep[: self.cfg["max_proposals"]]
        return boxes[keep], p[keep]

    def roi_features(self, pyramid: dict, proposals_per_image: list):
        """Bilinear 7x7 crop of the stride-8 pyramid level per proposal."""
        stride = self.cfg["fpn_strides"][0]
        feature = pyramid[stride]
        rois = [torch.as_tensor(b, dtype=feature.dtype)
                for b in proposals_per_image]
        return roi_align(feature, rois, output_size=self.second_head.roi_size,
                         spatial_scale=1.0 / stride, sampling_ratio=2,
                         aligned=True)

    def forward_second_stage(self, pyramid: dict, proposals_per_image: list):
        """Per-RoI softmax class probabilities (incl. background) and deltas."""
        counts = [b.shape[0] for b in proposals_per_image]
        if sum(counts) == 0:
            empty_cls = torch.zeros((0, self.num_classes + 1))
            empty_reg = torch.zeros((0, 4))
            return ([empty_cls] * len(counts), [empty_reg] * len(counts),
                    [empty_cls] * len(counts))
        feats = self.roi_features(pyramid, proposals_per_image)
        logits, reg = self.second_head(feats)
        probs = torch.softmax(logits, dim=1)
        return (list(probs.split(counts)), list(reg.split(counts)),
                list(logits.split(counts)))

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    @torch.no_grad()
    def predict(self, image: np.ndarray) -> list:
        """Full inference on one (H, W, 3) image in [0, 1].

        Marginal scoring: final(c) = sqrt(prior * cls(c)); BR and all DG
        machinery are never touched on this path.
        """
        self.eval()
        x = torch.as_tensor(
            image.transpose(2, 0, 1)[None], dtype=torch.float32)
        _, _, pyramid = self.extract_features(x)
        obj, iou, reg = self.forward_first_stage(pyramid)
        anchors = self.anchors_for(image.shape[:2])
        prior = self.prior_from_logits(obj[0], iou[0])
        boxes, priors = self.select_proposals(
            prior, reg[0], anchors, image.shape[:2])
        if boxes.shape[0] == 0:
            return []
        probs, deltas, _ = self.forward_second_stage(pyramid, [boxes])
        probs = probs[0].double().numpy()
        deltas = deltas[0].double().numpy()
        refined = boxops.decode_boxes(deltas, boxes)
        h, w = image.shape[:2]
        refined[:, 0::2] = refined[:, 0::2].clip(0, w)
        refined[:, 1::2] = refined[:, 1::2].clip(0, h)

        final = probfusion.marginal_score(priors, probs)  # (K, C+1)
        detections = []
        for cls in range(self.num_classes):
            scores = final[:, cls]
            mask = scores >= self.cfg["score_threshold"]
            if not mask.any():
                continue
            cls_boxes = refined[mask]
            cls_scores = scores[mask]
            keep = boxops.nms_indices(
                cls_boxes, cls_scores, self.cfg["detection_nms_threshold"])
            for k in keep:
                b = cls_boxes[k]
                if b[2] <= b[0] or b[3] <= b[1]:
                    continue
                detections.append(evalkit.Detection(
                    box=boxops.Box(*b), label=cls, score=float(cls_scores[k])))
        detections.sort(key=lambda d: -d.score)
        return detections[: self.cfg["max_detections"]]
