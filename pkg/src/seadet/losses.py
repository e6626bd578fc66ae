"""Classification and regression loss family with verified gradients.

All losses are scalar differentiable torch expressions so that analytic
gradients (autograd) can be checked against central finite differences.
Scalar python inputs are promoted to float64 tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

PROB_EPS = 1e-7

REGRESSION_KINDS = (
    "l1",
    "l2",
    "smooth_l1",
    "balanced_l1",
    "iou",
    "giou",
    "ciou",
    "eiou",
    "focal_eiou",
)

# kinds whose inputs are encoded deltas rather than corner-form boxes
DELTA_KINDS = ("l1", "l2", "smooth_l1", "balanced_l1")


@dataclass
class LossValue:
    """A reduced loss plus its pre-reduction per-sample values."""

    value: float
    per_sample: list = field(default_factory=list)
    reduction: str = "mean"


def reduce_loss(per_sample: torch.Tensor, reduction: str = "mean",
                weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted mean/sum reduction; weights default to 1 (plain reduction)."""
    if weights is not None:
        per_sample = per_sample * weights
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    raise ValueError(f"unknown reduction: {reduction}")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def binary_cross_entropy(p, y) -> torch.Tensor:
    """-[y log p + (1-y) log(1-p)], p clamped to [eps, 1-eps]."""
    p = _t(p)
    y = _t(y)
    if bool((p < 0).any()) or bool((p > 1).any()):
        raise ValueError("probability outside [0, 1]")
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum()


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss: modulating factor (1-p)^gamma (or p^gamma) on top of CE.

    gamma=0 reduces exactly to the alpha-weighted cross entropy.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = _t(p)
    y = _t(y)
    if bool((p < 0).any()) or bool((p > 1).any()):
        raise ValueError("probability outside [0, 1]")
    pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * (1.0 - pc) ** gamma * torch.log(pc)
    neg = -(1.0 - alpha) * pc ** gamma * torch.log(1.0 - pc)
    return (y * pos + (1.0 - y) * neg).sum()


# ---------------------------------------------------------------------------
# differentiable box geometry (torch mirrors of seadet.boxes)
# ---------------------------------------------------------------------------

def box_iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable IoU of corner-form boxes (last dim = 4)."""
    a = _t(a)
    b = _t(b)
    iw = (torch.minimum(a[..., 2], b[..., 2])
          - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3])
          - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return inter / union.clamp(min=1e-12)


def encode_t(b: torch.Tensor, anchor: torch.Tensor) -> torch.Tensor:
    """Differentiable (tx, ty, tw, th) of box b against an anchor."""
    b = _t(b)
    anchor = _t(anchor)
    wa = anchor[..., 2] - anchor[..., 0]
    ha = anchor[..., 3] - anchor[..., 1]
    xa = 0.5 * (anchor[..., 0] + anchor[..., 2])
    ya = 0.5 * (anchor[..., 1] + anchor[..., 3])
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    x = 0.5 * (b[..., 0] + b[..., 2])
    y = 0.5 * (b[..., 1] + b[..., 3])
    return torch.stack(
        [(x - xa) / wa, (y - ya) / ha,
         torch.log(w / wa), torch.log(h / ha)], dim=-1)


def _enclosing(a: torch.Tensor, b: torch.Tensor):
    x1 = torch.minimum(a[..., 0], b[..., 0])
    y1 = torch.minimum(a[..., 1], b[..., 1])
    x2 = torch.maximum(a[..., 2], b[..., 2])
    y2 = torch.maximum(a[..., 3], b[..., 3])
    return x1, y1, x2, y2


def _center_dist_sq(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    ax = 0.5 * (a[..., 0] + a[..., 2])
    ay = 0.5 * (a[..., 1] + a[..., 3])
    bx = 0.5 * (b[..., 0] + b[..., 2])
    by = 0.5 * (b[..., 1] + b[..., 3])
    return (ax - bx) ** 2 + (ay - by) ** 2


def iou_loss_t(pred, target) -> torch.Tensor:
    return (1.0 - box_iou_t(pred, target)).sum()


def giou_loss_t(pred, target) -> torch.Tensor:
    pred = _t(pred)
    target = _t(target)
    i = box_iou_t(pred, target)
    x1, y1, x2, y2 = _enclosing(pred, target)
    c_area = ((x2 - x1) * (y2 - y1)).clamp(min=1e-12)
    iw = (torch.minimum(pred[..., 2], target[..., 2])
          - torch.maximum(pred[..., 0], target[..., 0])).clamp(min=0)
    ih = (torch.minimum(pred[..., 3], target[..., 3])
          - torch.maximum(pred[..., 1], target[..., 1])).clamp(min=0)
    area_p = (pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1])
    area_t = (target[..., 2] - target[..., 0]) * (target[..., 3] - target[..., 1])
    union = area_p + area_t - iw * ih
    return (1.0 - i + (c_area - union) / c_area).sum()


def ciou_loss_t(pred, target) -> torch.Tensor:
    """CIoU: overlap + normalized center distance + aspect-ratio consistency.

    The trade-off coefficient alpha = v / ((1 - IoU) + v) participates in
    the gradient, keeping the loss an exact differentiable expression.
    """
    pred = _t(pred)
    target = _t(target)
    i = box_iou_t(pred, target)
    x1, y1, x2, y2 = _enclosing(pred, target)
    c_sq = ((x2 - x1) ** 2 + (y2 - y1) ** 2).clamp(min=1e-12)
    rho_sq = _center_dist_sq(pred, target)
    w = (pred[..., 2] - pred[..., 0]).clamp(min=1e-12)
    h = (pred[..., 3] - pred[..., 1]).clamp(min=1e-12)
    wt = (target[..., 2] - target[..., 0]).clamp(min=1e-12)
    ht = (target[..., 3] - target[..., 1]).clamp(min=1e-12)
    v = (4.0 / math.pi ** 2) * (torch.atan(wt / ht) - torch.atan(w / h)) ** 2
    alpha = v / ((1.0 - i) + v).clamp(min=1e-12)
    return (1.0 - i + rho_sq / c_sq + alpha * v).sum()


def eiou_loss_t(pred, target) -> torch.Tensor:
    """EIoU = IoU term + center-distance term + width/height distance terms."""
    pred = _t(pred)
    target = _t(target)
    i = box_iou_t(pred, target)
    x1, y1, x2, y2 = _enclosing(pred, target)
    cw_sq = ((x2 - x1) ** 2).clamp(min=1e-12)
    ch_sq = ((y2 - y1) ** 2).clamp(min=1e-12)
    c_sq = cw_sq + ch_sq
    rho_sq = _center_dist_sq(pred, target)
    w = pred[..., 2] - pred[..., 0]
    h = pred[..., 3] - pred[..., 1]
    wt = target[..., 2] - target[..., 0]
    ht = target[..., 3] - target[..., 1]
    return (1.0 - i + rho_sq / c_sq
            + (w - wt) ** 2 / cw_sq + (h - ht) ** 2 / ch_sq).sum()


def focal_eiou_loss_t(pred, target, gamma: float = 0.5) -> torch.Tensor:
    """F-EIoU = IoU^gamma * EIoU, suppressing low-overlap outliers."""
    i = box_iou_t(_t(pred), _t(target))
    pred = _t(pred)
    target = _t(target)
    # recompute EIoU elementwise so the product stays per-pair
    x1, y1, x2, y2 = _enclosing(pred, target)
    cw_sq = ((x2 - x1) ** 2).clamp(min=1e-12)
    ch_sq = ((y2 - y1) ** 2).clamp(min=1e-12)
    c_sq = cw_sq + ch_sq
    rho_sq = _center_dist_sq(pred, target)
    w = pred[..., 2] - pred[..., 0]
    h = pred[..., 3] - pred[..., 1]
    wt = target[..., 2] - target[..., 0]
    ht = target[..., 3] - target[..., 1]
    eiou = (1.0 - i + rho_sq / c_sq
            + (w - wt) ** 2 / cw_sq + (h - ht) ** 2 / ch_sq)
    return (i ** gamma * eiou).sum()


_BALANCED_ALPHA = 0.5
_BALANCED_GAMMA = 1.5


def _balanced_l1(e: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    # b solves alpha * ln(b + 1) = gamma, which makes the pieces C1-continuous
    b = math.exp(gamma / alpha) - 1.0
    c = alpha / b * (b + 1.0) * math.log(b + 1.0) - alpha - gamma
    ae = e.abs()
    inner = alpha / b * (b * ae + 1.0) * torch.log(b * ae + 1.0) - alpha * ae
    outer = gamma * ae + c
    return torch.where(ae < 1.0, inner, outer)


def reference_regression_loss(kind: str, prediction, target, **params) -> torch.Tensor:
    """Evaluate one member of the regression-loss family.

    Delta kinds (l1/l2/smooth_l1/balanced_l1) take encoded-delta tensors and
    sum the elementwise loss; IoU-family kinds take corner-form boxes.
    """
    if kind not in REGRESSION_KINDS:
        raise ValueError(f"unknown regression loss kind: {kind}")
    if kind in DELTA_KINDS:
        p = _t(prediction)
        t = _t(target)
        e = p - t
        if kind == "l1":
            return e.abs().sum()
        if kind == "l2":
            return (e ** 2).sum()
        if kind == "smooth_l1":
            return torch.where(e.abs() < 1.0, 0.5 * e ** 2, e.abs() - 0.5).sum()
        return _balanced_l1(
            e,
            params.get("alpha", _BALANCED_ALPHA),
            params.get("gamma", _BALANCED_GAMMA),
        ).sum()
    if kind == "iou":
        return iou_loss_t(prediction, target)
    if kind == "giou":
        return giou_loss_t(prediction, target)
    if kind == "ciou":
        return ciou_loss_t(prediction, target)
    if kind == "eiou":
        return eiou_loss_t(prediction, target)
    return focal_eiou_loss_t(prediction, target, params.get("gamma", 0.5))


def fiou_loss(pred, target, anchor, eta: float = 0.5,
              detach_factor: bool = False) -> torch.Tensor:
    """Fast IoU loss: IoU^eta * (1 - IoU + sum_i (t_i - t_i*)^2).

    The deltas t / t* encode pred / target against the shared anchor; the
    IoU^eta factor suppresses zero-overlap outliers when eta > 0.

    detach_factor treats IoU^eta as a pure sample weight (no gradient flows
    through it). The literal product has a spurious global minimum at
    IoU = 0 (the factor rewards pushing boxes apart), so optimization must
    use the weighting form; leave it False only to study the raw formula.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    pred = _t(pred)
    target = _t(target)
    anchor = _t(anchor)
    i = box_iou_t(pred, target)
    t = encode_t(pred, anchor)
    t_star = encode_t(target, anchor)
    sq = ((t - t_star) ** 2).sum(dim=-1)
    if eta == 0:
        factor = torch.ones_like(i)
    else:
        # i^eta has an unbounded derivative at i = 0 for eta < 1; mask the
        # zero-overlap entries (their factor is exactly 0) and floor the
        # rest so near-disjoint boxes cannot produce exploding gradients
        overlap = i > 0
        safe = torch.where(overlap, i.clamp(min=1e-6), torch.ones_like(i))
        factor = torch.where(overlap, safe ** eta, torch.zeros_like(i))
        if detach_factor:
            factor = factor.detach()
    return (factor * (1.0 - i + sq)).sum()


def grad_check(loss_fn, point, epsilon: float = 1e-5) -> float:
    """Max per-coordinate error between autograd and central finite differences.

    The error is scaled by max(1, |g_analytic|, |g_numeric|) so that tiny
    gradients do not inflate the ratio. Non-finite gradients raise.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    x = _t(point).detach().clone().double().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite analytic gradient")
    flat = x.detach().reshape(-1)
    g_num = torch.zeros_like(flat)
    for i in range(flat.numel()):
        xp = flat.clone()
        xm = flat.clone()
        xp[i] += epsilon
        xm[i] -= epsilon
        lp = float(loss_fn(xp.reshape(x.shape)))
        lm = float(loss_fn(xm.reshape(x.shape)))
        g_num[i] = (lp - lm) / (2.0 * epsilon)
    ga = grad.reshape(-1)
    denom = torch.maximum(
        torch.ones_like(ga), torch.maximum(ga.abs(), g_num.abs()))
    return float(((ga - g_num).abs() / denom).max())
