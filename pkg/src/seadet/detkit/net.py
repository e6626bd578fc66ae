"""Desk-scale detector networks: tiny backbone, 2-level pyramid, heads."""

from __future__ import annotations

import math

import torch
from torch import nn

STAGE_WIDTHS = (16, 32, 64, 128)


def _gn(channels: int, groups: int = 32) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, channels), channels)


class _Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
            _gn(out_ch, groups),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            _gn(out_ch, groups),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Backbone(nn.Module):
    """4-stage convnet at strides 2/4/8/16; stages exposed for feature mixup."""

    def __init__(self, groups: int = 32):
        super().__init__()
        widths = STAGE_WIDTHS
        ins = (3,) + widths[:-1]
        self.stages = nn.ModuleList(
            _Stage(i, o, groups) for i, o in zip(ins, widths))

    def forward(self, x, branch=None, mix_lambdas=None, detach_branch=False):
        """Run all stages; optionally mix a siamese branch stream per stage.

        mix_lambdas maps stage index -> lambda. Returns (main_features,
        branch_features), each a list of per-stage maps; branch_features is
        None when no branch input is given.
        """
        feats = []
        branch_feats = [] if branch is not None else None
        h1, h2 = x, branch
        for k, stage in enumerate(self.stages):
            h1 = stage(h1)
            if h2 is not None:
                h2 = stage(h2)
                branch_feats.append(h2)
                if mix_lambdas is not None and k in mix_lambdas:
                    lam = mix_lambdas[k]
                    other = h2.detach() if detach_branch else h2
                    h1 = lam * h1 + (1.0 - lam) * other
            feats.append(h1)
        return feats, branch_feats


class FeaturePyramid(nn.Module):
    """Lateral 1x1 + top-down sum over the last two stages (strides 8, 16)."""

    def __init__(self, out_channels: int = 64):
        super().__init__()
        self.lateral8 = nn.Conv2d(STAGE_WIDTHS[2], out_channels, 1)
        self.lateral16 = nn.Conv2d(STAGE_WIDTHS[3], out_channels, 1)
        self.smooth8 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, stage_feats):
        c8, c16 = stage_feats[2], stage_feats[3]
        p16 = self.lateral16(c16)
        up = nn.functional.interpolate(p16, size=c8.shape[-2:], mode="nearest")
        p8 = self.smooth8(self.lateral8(c8) + up)
        return {8: p8, 16: p16}


class FirstStageHead(nn.Module):
    """Shared conv tower emitting objectness, IoU prediction, and deltas.

    The tower is `depth` conv+GN+ReLU blocks shared across pyramid levels;
    the objectness bias is initialized so a fresh net predicts probability
    prior_pi, the focal-loss convention.
    """

    def __init__(self, channels: int = 64, depth: int = 4, groups: int = 32,
                 anchors_per_cell: int = 9, prior_pi: float = 0.01):
        super().__init__()
        blocks = []
        for _ in range(depth):
            blocks += [
                nn.Conv2d(channels, channels, 3, padding=1, bias=False),
                _gn(channels, groups),
                nn.ReLU(inplace=True),
            ]
        self.tower = nn.Sequential(*blocks)
        self.obj = nn.Conv2d(channels, anchors_per_cell, 3, padding=1)
        self.iou = nn.Conv2d(channels, anchors_per_cell, 3, padding=1)
        self.reg = nn.Conv2d(channels, anchors_per_cell * 4, 3, padding=1)
        self.anchors_per_cell = anchors_per_cell

        bias = -math.log((1.0 - prior_pi) / prior_pi)
        nn.init.constant_(self.obj.bias, bias)
        nn.init.constant_(self.iou.bias, 0.0)
        nn.init.normal_(self.reg.weight, std=0.01)
        nn.init.constant_(self.reg.bias, 0.0)

    def forward(self, feature):
        t = self.tower(feature)
        b = feature.shape[0]
        a = self.anchors_per_cell

        def _flatten(x, last):
            # (B, A*last, H, W) -> (B, H*W*A, last)
            bb, _, h, w = x.shape
            return (x.view(bb, a, last, h, w)
                    .permute(0, 3, 4, 1, 2)
                    .reshape(bb, h * w * a, last))

        obj = _flatten(self.obj(t), 1).squeeze(-1)
        iou = _flatten(self.iou(t), 1).squeeze(-1)
        reg = _flatten(self.reg(t), 4)
        assert obj.shape[0] == b
        return obj, iou, reg


class SecondStageHead(nn.Module):
    """RoI head: 7x7 bilinear crop -> 2-layer MLP -> class logits + deltas."""

    def __init__(self, in_channels: int = 64, num_classes: int = 4,
                 roi_size: int = 7, hidden: int = 256):
        super().__init__()
        self.roi_size = roi_size
        flat = in_channels * roi_size * roi_size
        self.mlp = nn.Sequential(
            nn.Linear(flat, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden),
            nn.ReLU(inplace=True),
        )
        self.cls = nn.Linear(hidden, num_classes + 1)  # + background
        self.reg = nn.Linear(hidden, 4)
        nn.init.normal_(self.cls.weight, std=0.01)
        nn.init.constant_(self.cls.bias, 0.0)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.constant_(self.reg.bias, 0.0)

    def forward(self, roi_features):
        x = self.mlp(roi_features.flatten(1))
        return self.cls(x), self.reg(x)
