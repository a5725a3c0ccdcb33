"""Perturbation-removal transforms: block-DCT quantization (JPEG-like) and crop-and-resize."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

# IJG baseline luminance quantization table (quality 50)
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled with the IJG quality formula, entries clipped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise UsageError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50) / 100), 1, 255)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix: ``D @ v`` transforms a length-n column."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2 / n)
    d[0] /= math.sqrt(2)
    return d


_D8 = dct_matrix(8)


def _as_hwc(img) -> np.ndarray:
    x = np.asarray(img, np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise UsageError(f"image must be (H, W) or (H, W, C), got {x.shape}")
    return x


def dct_quantize_purify(img, quality: int) -> np.ndarray:
    """JPEG-style quantization of every 8x8 block, per channel, without entropy coding.

    Values are mapped to 0..255 and level-shifted before the transform; the
    result is rounded back to 8-bit levels and returned in [0, 1].
    """
    q = quant_table(quality)
    x = _as_hwc(img)
    H, W, C = x.shape
    ph, pw = (-H) % 8, (-W) % 8
    xp = np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="reflect") if ph or pw else x
    Hp, Wp = xp.shape[:2]
    # (C, by, bx, 8, 8) blocks
    blocks = (xp * 255.0 - 128.0).transpose(2, 0, 1).reshape(C, Hp // 8, 8, Wp // 8, 8) \
        .transpose(0, 1, 3, 2, 4)
    coef = _D8 @ blocks @ _D8.T
    coef = np.round(coef / q) * q
    rec = _D8.T @ coef @ _D8
    out = rec.transpose(0, 1, 3, 2, 4).reshape(C, Hp, Wp).transpose(1, 2, 0) + 128.0
    out = np.clip(np.round(out), 0, 255)[:H, :W] / 255.0
    return out.reshape(np.shape(img)).astype(np.float32)


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment and edge clamping."""
    x = _as_hwc(img)
    H, W, _ = x.shape

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(H, out_h)
    x0, x1, fx = axis(W, out_w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = x[y0][:, x0] * (1 - fx) + x[y0][:, x1] * fx
    bot = x[y1][:, x0] * (1 - fx) + x[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_resize_purify(img, f: float) -> np.ndarray:
    """Centre crop to floor(f*H) x floor(f*W), then bilinear resize back."""
    if not 0 < f <= 1:
        raise UsageError(f"crop fraction must be in (0, 1], got {f}")
    x = _as_hwc(img)
    H, W, _ = x.shape
    ch, cw = int(math.floor(f * H)), int(math.floor(f * W))
    if ch < 8 or cw < 8:
        raise UsageError(f"crop {ch}x{cw} is smaller than 8x8")
    top, left = (H - ch) // 2, (W - cw) // 2
    crop = x[top:top + ch, left:left + cw]
    out = crop if (ch, cw) == (H, W) else bilinear_resize(crop, H, W)
    return np.clip(out, 0, 1).reshape(np.shape(img)).astype(np.float32)


@dataclass(frozen=True)
class PurifyConfig:
    kind: str  # "dct_quantize" or "crop_resize"
    quality: int = 75
    f: float = 0.9

    def __post_init__(self):
        if self.kind == "dct_quantize":
            quant_table(self.quality)
        elif self.kind == "crop_resize":
            if not 0 < self.f <= 1:
                raise UsageError(f"crop fraction must be in (0, 1], got {self.f}")
        else:
            raise UsageError(f"unknown purifier {self.kind!r}")

    @property
    def label(self) -> str:
        return f"dct_q{self.quality}" if self.kind == "dct_quantize" else f"crop_f{self.f:g}"

    def __call__(self, img) -> np.ndarray:
        if self.kind == "dct_quantize":
            return dct_quantize_purify(img, self.quality)
        return crop_resize_purify(img, self.f)


def parse_purifier(label: str) -> PurifyConfig:
    """Inverse of ``PurifyConfig.label`` (e.g. ``dct_q65``, ``crop_f0.9``)."""
    if label.startswith("dct_q"):
        return PurifyConfig("dct_quantize", quality=int(label[5:]))
    if label.startswith("crop_f"):
        return PurifyConfig("crop_resize", f=float(label[6:]))
    raise UsageError(f"unknown purifier label {label!r}")
