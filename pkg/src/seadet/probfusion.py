"""Probabilistic fusion core: objectness prior, marginal scores, BR weights.

All functions accept floats, numpy arrays, or torch tensors and preserve the
input container type where it matters for gradient flow.
"""

from __future__ import annotations

import numpy as np
import torch

from . import boxes as boxops


def _sqrt(x):
    if isinstance(x, torch.Tensor):
        return torch.sqrt(x)
    return np.sqrt(x)


def objectness_prior(objectness, iou_pred):
    """prior = sqrt(iou_pred * objectness): geometric mean of the two heads."""
    return _sqrt(iou_pred * objectness)


def marginal_score(prior, cls):
    """Final per-class score s(c) = sqrt(prior * cls(c)).

    The prior scales all classes equally, so the foreground argmax is
    unchanged for any prior > 0.
    """
    if isinstance(cls, torch.Tensor) or isinstance(prior, torch.Tensor):
        prior_t = prior if isinstance(prior, torch.Tensor) else torch.as_tensor(prior)
        cls_t = cls if isinstance(cls, torch.Tensor) else torch.as_tensor(cls)
        return torch.sqrt(prior_t * cls_t)
    prior_a = np.asarray(prior, dtype=np.float64)
    cls_a = np.asarray(cls, dtype=np.float64)
    return np.sqrt(prior_a[..., None] * cls_a) if cls_a.ndim > prior_a.ndim else np.sqrt(prior_a * cls_a)


def boosting_weights(priors, is_foreground, gamma: float):
    """Boosting Reweighting: w = (1-prior)^gamma foreground, prior^gamma else.

    Hard examples are proposals whose prior the first stage misjudged; their
    classification loss is amplified. gamma = 0 gives weight 1 everywhere
    (plain Faster R-CNN). Weights are values, not loss terms: callers must
    detach priors from the graph before weighting.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if isinstance(priors, torch.Tensor):
        fg = torch.as_tensor(is_foreground, dtype=torch.bool, device=priors.device)
        return torch.where(fg, (1.0 - priors) ** gamma, priors ** gamma)
    priors_a = np.asarray(priors, dtype=np.float64)
    fg = np.asarray(is_foreground, dtype=bool)
    return np.where(fg, (1.0 - priors_a) ** gamma, priors_a ** gamma)


def iou_prediction_target(decoded_pred, matched_gt=None) -> float:
    """Soft target for the IoU-prediction head: IoU of decoded box vs its GT.

    Negative samples (no matched GT) get target 0. The caller is responsible
    for computing decoded_pred without gradient flow into the target.
    """
    if matched_gt is None:
        return 0.0
    return boxops.iou(decoded_pred, matched_gt)
