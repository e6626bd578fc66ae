import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


def random_box(rng, lo=0.0, hi=64.0, min_side=1.0, max_side=32.0):
    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, max_side)
    x1 = rng.uniform(lo, hi - w)
    y1 = rng.uniform(lo, hi - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def overlapping_pair(rng, min_iou=0.05):
    """A (pred, target) box pair guaranteed to overlap decently."""
    while True:
        t = random_box(rng)
        jitter = rng.uniform(-0.25, 0.25, size=4) * np.array(
            [t[2] - t[0], t[3] - t[1], t[2] - t[0], t[3] - t[1]])
        p = t + jitter
        if p[2] - p[0] < 1.0 or p[3] - p[1] < 1.0:
            continue
        from seadet import boxes as boxops
        if boxops.iou(p, t) >= min_iou:
            return p, t
