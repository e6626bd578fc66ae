"""Domain-generalization training losses.

Domain Mixup over siamese feature streams, the spatially selective margin
contrastive (SSMC) loss with its SSC/SC reductions, a domain-adversarial
loss behind a gradient-reversal layer, and IRM penalties computed by
differentiating each loss term with respect to a unit output scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class MixPlan:
    """Per-layer Beta(alpha, alpha) mix ratios for one training step."""

    layers: tuple
    alpha: float
    lambdas: dict  # layer index -> ratio in [0, 1]


def domain_mixup(main: torch.Tensor, branch: torch.Tensor,
                 lambda_k: float) -> torch.Tensor:
    """Elementwise convex mix: lambda * main + (1 - lambda) * branch."""
    if main.shape != branch.shape:
        raise ValueError(f"shape mismatch: {tuple(main.shape)} vs {tuple(branch.shape)}")
    if not 0.0 <= lambda_k <= 1.0:
        raise ValueError("lambda_k must lie in [0, 1]")
    if lambda_k == 1.0:
        return main
    if lambda_k == 0.0:
        return branch
    return lambda_k * main + (1.0 - lambda_k) * branch


def sample_mix_ratios(layers, alpha: float, rng_seed: int) -> MixPlan:
    """Draw one Beta(alpha, alpha) ratio per mixed layer, i.i.d. per step."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    layers = tuple(sorted(layers))
    rng = np.random.default_rng(rng_seed)
    lambdas = {k: float(rng.beta(alpha, alpha)) for k in layers}
    return MixPlan(layers=layers, alpha=alpha, lambdas=lambdas)


def k_maxpooling(h: torch.Tensor, k: int) -> torch.Tensor:
    """Mean of the k largest values of a 2-D map: max at k=1, mean at k=H*W."""
    h = torch.as_tensor(h)
    n = h.numel()
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    top = torch.topk(h.reshape(-1), k).values
    return top.mean()


def default_topk(height: int, width: int) -> int:
    """The k = H*W/16 rule, floored at 1 for tiny maps."""
    return max(1, (height * width) // 16)


def _channel_mean_variance(main: torch.Tensor, branch: torch.Tensor,
                           normalize: bool) -> torch.Tensor:
    if main.shape != branch.shape:
        raise ValueError(f"shape mismatch: {tuple(main.shape)} vs {tuple(branch.shape)}")
    if main.dim() != 3:
        raise ValueError("expected (C, H, W) feature maps")
    if normalize:
        main = torch.nn.functional.normalize(main, dim=0, eps=1e-8)
        branch = torch.nn.functional.normalize(branch, dim=0, eps=1e-8)
    v = (main - branch) ** 2
    return v.mean(dim=0)  # (H, W) channel-mean variance


def ssmc_loss(main: torch.Tensor, branch: torch.Tensor, k: int | None = None,
              delta: float = 0.01, normalize: bool = True) -> torch.Tensor:
    """SSMC: top-k mean of margin-clamped cross-domain feature variance.

    Features are L2-normalized per spatial position, the squared difference
    is channel-averaged, clamped at the margin delta, and the k most variant
    positions are averaged. delta=0 recovers SSC; additionally k=H*W
    recovers the plain spatial contrastive (SC) mean.
    """
    vmean = _channel_mean_variance(main, branch, normalize)
    hh, ww = vmean.shape
    if k is None:
        k = default_topk(hh, ww)
    clamped = torch.clamp(vmean - delta, min=0.0)
    return k_maxpooling(clamped, k)


def ssc_loss(main: torch.Tensor, branch: torch.Tensor,
             k: int | None = None, normalize: bool = True) -> torch.Tensor:
    """SSC loss: SSMC without the margin (delta = 0)."""
    return ssmc_loss(main, branch, k=k, delta=0.0, normalize=normalize)


def sc_loss(main: torch.Tensor, branch: torch.Tensor,
            normalize: bool = True) -> torch.Tensor:
    """SC loss: mean channel-mean variance over all positions (k = H*W)."""
    vmean = _channel_mean_variance(main, branch, normalize)
    return vmean.mean()


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.scale * grad_output, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; negates (and scales) the gradient."""
    return _GradReverse.apply(x, scale)


class DomainClassifier(nn.Module):
    """Small MLP over globally pooled features predicting the domain label."""

    def __init__(self, in_channels: int, num_domains: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, num_domains),
        )
        self.num_domains = num_domains

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        # features: (B, C, H, W) -> (B, num_domains) logits
        pooled = features.mean(dim=(2, 3))
        return self.net(pooled)


def domain_adversarial_loss(features: torch.Tensor, domain_labels,
                            classifier: DomainClassifier,
                            grl_scale: float = 1.0) -> torch.Tensor:
    """Multi-class CE of the domain classifier behind a gradient reversal.

    Gradients flowing into `features` are negated (scaled by grl_scale);
    the classifier's own parameters receive un-negated gradients.
    """
    labels = torch.as_tensor(domain_labels, dtype=torch.long,
                             device=features.device)
    if labels.min() < 0 or labels.max() >= classifier.num_domains:
        raise ValueError("domain label out of range")
    logits = classifier(grad_reverse(features, grl_scale))
    return nn.functional.cross_entropy(logits, labels)


def irm_penalty(loss_term_fn) -> torch.Tensor:
    """IRM penalty: squared gradient of the risk w.r.t. a unit output scale.

    `loss_term_fn` maps a scalar tensor r to the loss with its outputs
    multiplied by r; the penalty is (dL/dr at r=1)^2.
    """
    r = torch.ones((), dtype=torch.float64, requires_grad=True)
    loss = loss_term_fn(r)
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise ValueError("loss_term_fn must return a scalar tensor")
    (grad,) = torch.autograd.grad(loss, r, create_graph=True)
    if not torch.isfinite(grad):
        raise FloatingPointError("non-finite gradient in IRM penalty")
    return grad ** 2
