"""Synthetic underwater domains and color-transfer machinery.

Images are float64/float32 numpy arrays of shape (H, W, 3) in [0, 1].
Domain synthesis uses the image-formation model I = J*t + B*(1-t) with
per-channel transmission t = Nrer^d, plus an optional per-channel affine
post transform. The bilateral grid is a 16x16x8 lattice of 3x4 affine color
matrices sliced per pixel with normalized tent weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

INSTANCE_NORM_EPS = 1e-5

GRID_H = 16
GRID_W = 16
GRID_D = 8


@dataclass(frozen=True)
class WaterParams:
    """Per-channel background light, residual-energy ratio, and scene depth."""

    background: tuple = (0.0, 0.0, 0.0)   # B per channel in [0, 1]
    nrer: tuple = (1.0, 1.0, 1.0)         # Nrer per channel in (0, 1]
    depth: float = 0.0                    # meters; uniform depth map

    def transmission(self) -> np.ndarray:
        nrer = np.asarray(self.nrer, dtype=np.float64)
        if np.any(nrer <= 0) or np.any(nrer > 1):
            raise ValueError("Nrer must lie in (0, 1]")
        return nrer ** self.depth


@dataclass(frozen=True)
class DomainSpec:
    """One synthetic water-quality domain: IFM params plus optional affine."""

    domain_id: int
    water: WaterParams = field(default_factory=WaterParams)
    gain: tuple = (1.0, 1.0, 1.0)
    bias: tuple = (0.0, 0.0, 0.0)


def ifm_synthesize(clear: np.ndarray, params: WaterParams) -> np.ndarray:
    """Underwater image formation: I = J*t + B*(1-t) per channel."""
    j = np.asarray(clear, dtype=np.float64)
    if j.ndim != 3 or j.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    t = params.transmission()[None, None, :]
    b = np.asarray(params.background, dtype=np.float64)[None, None, :]
    return np.clip(j * t + b * (1.0 - t), 0.0, 1.0)


def make_domain_transform(spec: DomainSpec):
    """Deterministic color-only image transform for one domain.

    Annotation geometry is untouched: the transform maps pixel values only.
    """
    gain = np.asarray(spec.gain, dtype=np.float64)[None, None, :]
    bias = np.asarray(spec.bias, dtype=np.float64)[None, None, :]

    def transform(image: np.ndarray) -> np.ndarray:
        out = ifm_synthesize(image, spec.water)
        out = out * gain + bias
        return np.clip(out, 0.0, 1.0)

    return transform


def conditional_instance_norm(x: np.ndarray, style_id: int, params: dict) -> np.ndarray:
    """CIN(x; s) = gamma_s * (x - mu) / sigma + beta_s over spatial dims.

    `params` maps style ids to (gamma, beta) channel vectors.
    """
    if style_id not in params:
        raise KeyError(f"unknown style id: {style_id}")
    gamma, beta = params[style_id]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("expected a (C, H, W) feature map")
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1, 1, 1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1, 1, 1)
    if gamma.shape[0] != x.shape[0] or beta.shape[0] != x.shape[0]:
        raise ValueError("gamma/beta length must equal channel count")
    mu = x.mean(axis=(1, 2), keepdims=True)
    sigma = x.std(axis=(1, 2), keepdims=True)
    return gamma * (x - mu) / (sigma + INSTANCE_NORM_EPS) + beta


# ---------------------------------------------------------------------------
# bilateral grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BilateralGrid:
    """16x16x8 lattice of 3x4 affine color matrices."""

    cells: np.ndarray  # (GRID_H, GRID_W, GRID_D, 3, 4)

    def __post_init__(self):
        if self.cells.shape != (GRID_H, GRID_W, GRID_D, 3, 4):
            raise ValueError(
                f"grid must have shape {(GRID_H, GRID_W, GRID_D, 3, 4)}")

    @classmethod
    def constant(cls, matrix: np.ndarray) -> "BilateralGrid":
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 4)
        return cls(np.broadcast_to(m, (GRID_H, GRID_W, GRID_D, 3, 4)).copy())

    @classmethod
    def identity(cls) -> "BilateralGrid":
        m = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
        return cls.constant(m)


def tent(x: np.ndarray) -> np.ndarray:
    """The slicing kernel tau(x) = max(1 - |x|, 0)."""
    return np.maximum(1.0 - np.abs(np.asarray(x, dtype=np.float64)), 0.0)


def _axis_weights(n_pix: int, n_cells: int):
    """Tent weights of each pixel against its two neighbor cells, clamped.

    Pixel centers map to continuous cell coordinates; with unit cell spacing
    the tent weights of the two flanking cells are the bilinear fractions and
    already sum to 1, so edge clamping realizes the unit-sum normalization.
    """
    pos = (np.arange(n_pix, dtype=np.float64) + 0.5) * n_cells / n_pix - 0.5
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    idx0 = np.clip(i0, 0, n_cells - 1)
    idx1 = np.clip(i0 + 1, 0, n_cells - 1)
    return idx0, idx1, 1.0 - frac, frac


def grid_coords(height: int, width: int):
    """Continuous grid coordinates of every pixel center (for oracles)."""
    ys = (np.arange(height, dtype=np.float64) + 0.5) * GRID_H / height - 0.5
    xs = (np.arange(width, dtype=np.float64) + 0.5) * GRID_W / width - 0.5
    return ys, xs


def slice_bilateral_grid(grid: BilateralGrid, guidance: np.ndarray) -> np.ndarray:
    """Slice the grid into a per-pixel (H, W, 3, 4) affine field.

    Trilinear tent interpolation over (y, x, guidance); weights are
    normalized to unit sum per pixel, so a constant grid reproduces its cell
    value everywhere and slicing is linear in the grid.
    """
    g = np.asarray(guidance, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("guidance must be a 2-D map")
    if np.any(g < 0) or np.any(g > 1):
        raise ValueError("guidance must lie in [0, 1]")
    h, w = g.shape
    yi0, yi1, wy0, wy1 = _axis_weights(h, GRID_H)
    xi0, xi1, wx0, wx1 = _axis_weights(w, GRID_W)

    gz = g * (GRID_D - 1)
    zi0 = np.floor(gz).astype(np.int64)
    zf = gz - zi0
    zi0c = np.clip(zi0, 0, GRID_D - 1)
    zi1c = np.clip(zi0 + 1, 0, GRID_D - 1)
    wz0, wz1 = 1.0 - zf, zf

    cells = grid.cells
    out = np.zeros((h, w, 3, 4), dtype=np.float64)
    for yi, wy in ((yi0, wy0), (yi1, wy1)):
        for xi, wx in ((xi0, wx0), (xi1, wx1)):
            wyx = wy[:, None] * wx[None, :]
            for zi, wz in ((zi0c, wz0), (zi1c, wz1)):
                weight = (wyx * wz)[:, :, None, None]
                out += weight * cells[yi[:, None], xi[None, :], zi]
    return out


def apply_affine_color(image: np.ndarray, field_: np.ndarray) -> np.ndarray:
    """Apply a per-pixel 3x4 affine field: O = A[:, :3] @ I + A[:, 3]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    if field_.shape != (img.shape[0], img.shape[1], 3, 4):
        raise ValueError("affine field shape must be (H, W, 3, 4)")
    linear = np.einsum("hwoc,hwc->hwo", field_[:, :, :, :3], img)
    return linear + field_[:, :, :, 3]


def luminance_guidance(image: np.ndarray) -> np.ndarray:
    """Default guidance map: channel-mean luminance."""
    return np.asarray(image, dtype=np.float64).mean(axis=2)


# ---------------------------------------------------------------------------
# style statistics and CBST losses
# ---------------------------------------------------------------------------

def gram_matrix(features: np.ndarray) -> np.ndarray:
    """G(f)_{c,c'} = (1 / (C*H*W)) sum_{h,w} f_{c,h,w} f_{c',h,w}."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ValueError("expected a (C, H, W) feature map")
    c, h, w = f.shape
    flat = f.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def gram_style_distance(f1: np.ndarray, f2: np.ndarray) -> float:
    """Squared Frobenius distance between normalized Gram matrices."""
    g1 = gram_matrix(f1)
    g2 = gram_matrix(f2)
    if g1.shape != g2.shape:
        raise ValueError("feature maps must have equal channel counts")
    return float(((g1 - g2) ** 2).sum())


class RandomConvFeatureExtractor:
    """Deterministic random convolutional stack used as a feature extractor.

    Stands in for pretrained VGG19 layers in style/content losses; a real
    pretrained extractor can be injected anywhere one is accepted.
    """

    def __init__(self, seed: int = 0, channels: tuple = (8, 16), kernel: int = 3):
        gen = torch.Generator().manual_seed(seed)
        self.weights = []
        in_ch = 3
        for out_ch in channels:
            w = torch.randn(out_ch, in_ch, kernel, kernel, generator=gen,
                            dtype=torch.float64) / (kernel * math.sqrt(in_ch))
            self.weights.append(w)
            in_ch = out_ch

    def __call__(self, image: np.ndarray) -> list[np.ndarray]:
        x = torch.as_tensor(
            np.asarray(image, dtype=np.float64).transpose(2, 0, 1)
        ).unsqueeze(0)
        feats = []
        with torch.no_grad():
            for i, w in enumerate(self.weights):
                x = torch.nn.functional.conv2d(x, w, stride=2, padding=1)
                if i + 1 < len(self.weights):
                    x = torch.relu(x)
                feats.append(x[0].numpy())
        return feats


def grid_laplacian_regularizer(grid: BilateralGrid) -> float:
    """Sum of squared Frobenius differences over the 6-neighborhood."""
    cells = grid.cells
    total = 0.0
    for axis in range(3):
        diff = np.diff(cells, axis=axis)
        # each adjacent pair contributes twice (s->t and t->s)
        total += 2.0 * float((diff ** 2).sum())
    return total


def _feature_mean_std(f: np.ndarray):
    c = f.shape[0]
    flat = f.reshape(c, -1)
    return flat.mean(axis=1), flat.std(axis=1)


def cbst_losses(output: np.ndarray, content: np.ndarray, style: np.ndarray,
                grid: BilateralGrid, mask_boxes, feature_extractor,
                weights: tuple = (0.5, 1.0, 0.015, 1.0)) -> dict:
    """Content, style (mean/std matching), grid smoothness, and mask losses.

    total = 0.5*L_c + 1*L_sa + 0.015*L_r + 1*L_mask by default. The mask is
    1 inside annotated boxes, 0.01 elsewhere, penalizing semantic drift.
    """
    f_out = feature_extractor(output)
    f_content = feature_extractor(content)
    f_style = feature_extractor(style)

    l_c = sum(float(((fo - fc) ** 2).sum())
              for fo, fc in zip(f_out, f_content))

    l_sa = 0.0
    for fo, fs in zip(f_out, f_style):
        mo, so = _feature_mean_std(fo)
        ms, ss = _feature_mean_std(fs)
        l_sa += float(((mo - ms) ** 2).sum() + ((so - ss) ** 2).sum())

    l_r = grid_laplacian_regularizer(grid)

    h, w = output.shape[:2]
    mask = np.full((h, w, 1), 0.01, dtype=np.float64)
    for box in mask_boxes:
        bx = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=np.float64)
        x1, y1 = int(np.floor(bx[0])), int(np.floor(bx[1]))
        x2, y2 = int(np.ceil(bx[2])), int(np.ceil(bx[3]))
        mask[max(0, y1):max(0, y2), max(0, x1):max(0, x2)] = 1.0
    diff = (np.asarray(output, dtype=np.float64)
            - np.asarray(content, dtype=np.float64)) * mask
    l_mask = float((diff ** 2).sum()) / (h * w * 3)

    wc, wsa, wr, wm = weights
    total = wc * l_c + wsa * l_sa + wr * l_r + wm * l_mask
    return {
        "content": l_c,
        "style": l_sa,
        "grid_reg": l_r,
        "mask": l_mask,
        "total": total,
    }


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

CORRUPTION_KINDS = (
    "gaussian_noise",
    "brightness",
    "contrast",
    "defocus_blur",
    "motion_blur",
    "pixelate",
    "jpeg",
)

_NOISE_SIGMA = (0.0, 0.04, 0.08, 0.12, 0.18, 0.26)
_BRIGHTNESS_SHIFT = (0.0, 0.08, 0.16, 0.24, 0.32, 0.42)
_CONTRAST_SCALE = (1.0, 0.75, 0.6, 0.45, 0.3, 0.2)
_DEFOCUS_RADIUS = (0, 1, 2, 3, 4, 6)
_MOTION_LENGTH = (1, 3, 5, 7, 9, 13)
_PIXELATE_FACTOR = (1, 2, 3, 4, 6, 8)
_JPEG_LEVELS = (0, 64, 32, 16, 8, 5)


def _disk_kernel(radius: int) -> np.ndarray:
    size = 2 * radius + 1
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    mask = (x ** 2 + y ** 2 <= radius ** 2).astype(np.float64)
    return mask / mask.sum() if mask.sum() else np.ones((size, size)) / size ** 2


def _convolve2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    x = torch.as_tensor(img.transpose(2, 0, 1), dtype=torch.float64).unsqueeze(1)
    k = torch.as_tensor(kernel, dtype=torch.float64)[None, None]
    pad = (kernel.shape[1] // 2, kernel.shape[0] // 2)
    with torch.no_grad():
        out = torch.nn.functional.conv2d(
            torch.nn.functional.pad(
                x, (pad[0], pad[0], pad[1], pad[1]), mode="replicate"),
            k)
    return out.squeeze(1).numpy().transpose(1, 2, 0)


def corrupt_image(image: np.ndarray, kind: str, severity: int,
                  seed: int = 0) -> np.ndarray:
    """Apply one corruption at integer severity 0..5; severity 0 is identity."""
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption kind: {kind}")
    if not 0 <= severity <= 5:
        raise ValueError("severity must lie in [0, 5]")
    img = np.asarray(image, dtype=np.float64)
    if severity == 0:
        return img.copy()

    if kind == "gaussian_noise":
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, _NOISE_SIGMA[severity], size=img.shape)
        return np.clip(img + noise, 0.0, 1.0)
    if kind == "brightness":
        return np.clip(img + _BRIGHTNESS_SHIFT[severity], 0.0, 1.0)
    if kind == "contrast":
        mean = img.mean()
        return np.clip(mean + (img - mean) * _CONTRAST_SCALE[severity], 0.0, 1.0)
    if kind == "defocus_blur":
        return np.clip(_convolve2d(img, _disk_kernel(_DEFOCUS_RADIUS[severity])),
                       0.0, 1.0)
    if kind == "motion_blur":
        length = _MOTION_LENGTH[severity]
        kernel = np.zeros((1, length))
        kernel[0, :] = 1.0 / length
        return np.clip(_convolve2d(img, kernel), 0.0, 1.0)
    if kind == "pixelate":
        f = _PIXELATE_FACTOR[severity]
        h, w = img.shape[:2]
        hs, ws = max(1, h // f), max(1, w // f)
        small = img[:hs * f, :ws * f].reshape(hs, f, ws, f, 3).mean(axis=(1, 3))
        rows = np.clip(np.arange(h) // f, 0, hs - 1)
        cols = np.clip(np.arange(w) // f, 0, ws - 1)
        return small[rows][:, cols]
    # jpeg-like quantization
    levels = _JPEG_LEVELS[severity]
    return np.round(img * levels) / levels
