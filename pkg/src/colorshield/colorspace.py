"""Pixel conversions between RGB and the HSV / CIELAB / YUV ensemble spaces.

All conversions are pure array functions on (..., 3) channel-last data,
computed in float64 and returned in the input's float dtype. YUV uses BT.601
analog coefficients, LAB uses sRGB primaries with D65 white, HSV stores hue
scaled to [0, 1). Conversions route through RGB; direct non-RGB pairs are
rejected.

The ``*_vjp`` functions are the piecewise-analytic adjoints of the RGB->space
maps (plus per-space input normalization), used when attack gradients must
flow through a conversion. Branch masks (channel argmax/argmin, achromatic
pixels, gamma segments) are taken from the forward pass, which is the a.e.
derivative with deterministic tie handling.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "ColorSpace",
    "Image",
    "convert",
    "round_trip_error",
    "to_model_input",
    "to_model_input_vjp",
]


class ColorSpace(Enum):
    RGB = "rgb"
    HSV = "hsv"
    LAB = "lab"
    YUV = "yuv"


class UnsupportedConversionError(ValueError):
    """Direct non-RGB <-> non-RGB conversion was requested."""


@dataclass
class Image:
    """H x W x 3 float raster tagged with its color space."""

    data: np.ndarray
    space: ColorSpace = ColorSpace.RGB

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"Image: need HxWx3 data, got {self.data.shape}")
        if self.data.dtype != np.float64:
            self.data = self.data.astype(np.float32)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# BT.601 analog YUV
_YUV_M = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.14713769751693002, -0.28886230248307, 0.436],
        [0.615, -0.5149857346647646, -0.10001426533523537],
    ]
)
_YUV_M_INV = np.linalg.inv(_YUV_M)

# sRGB -> XYZ (D65)
_XYZ_M = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_M_INV = np.linalg.inv(_XYZ_M)
_D65 = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA = 6.0 / 29.0


def _f64(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64)


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    out = _f64(rgb) @ _YUV_M.T
    return out.astype(np.asarray(rgb).dtype)


def yuv_to_rgb(yuv: np.ndarray) -> np.ndarray:
    out = _f64(yuv) @ _YUV_M_INV.T
    return out.astype(np.asarray(yuv).dtype)


def rgb_to_yuv_vjp(rgb: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return _f64(grad) @ _YUV_M


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    x = _f64(rgb)
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    v = x.max(axis=-1)
    mn = x.min(axis=-1)
    d = v - mn
    chromatic = d > 0
    s = np.where(v > 0, d / np.where(v > 0, v, 1.0), 0.0)

    dd = np.where(chromatic, d, 1.0)
    h_r = np.mod((g - b) / dd, 6.0)
    h_g = (b - r) / dd + 2.0
    h_b = (r - g) / dd + 4.0
    amax = x.argmax(axis=-1)
    h = np.choose(amax, [h_r, h_g, h_b]) / 6.0
    h = np.where(chromatic, h, 0.0)
    h = np.where(h >= 1.0, h - 1.0, h)  # keep hue in [0,1)
    out = np.stack([h, s, v], axis=-1)
    return out.astype(np.asarray(rgb).dtype)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    x = _f64(hsv)
    h, s, v = x[..., 0], x[..., 1], x[..., 2]
    h6 = np.mod(h, 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    out = np.stack([r, g, b], axis=-1)
    return out.astype(np.asarray(hsv).dtype)


def rgb_to_hsv_vjp(rgb: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Adjoint of rgb_to_hsv; achromatic/black pixels get zero h/s gradient."""
    x = _f64(rgb)
    g = _f64(grad)
    r, gr, b = x[..., 0], x[..., 1], x[..., 2]
    amax = x.argmax(axis=-1)
    amin = x.argmin(axis=-1)
    v = x.max(axis=-1)
    mn = x.min(axis=-1)
    d = v - mn
    chromatic = d > 0
    nonblack = v > 0
    dd = np.where(chromatic, d, 1.0)
    vv = np.where(nonblack, v, 1.0)

    emax = np.eye(3)[amax]  # (...,3) one-hot of the max channel
    emin = np.eye(3)[amin]

    gh, gs, gv = g[..., 0], g[..., 1], g[..., 2]

    # v = x[amax]
    out = emax * gv[..., None]

    # s = (v - mn)/v  =>  ds/dv = mn/v^2 routed to argmax, ds/dmn = -1/v
    sv = np.where(chromatic & nonblack, mn / (vv * vv), 0.0)
    smn = np.where(chromatic & nonblack, -1.0 / vv, 0.0)
    out += (emax * sv[..., None] + emin * smn[..., None]) * gs[..., None]

    # hue branch by argmax channel; each is (num - den-coupled)/(6 d)
    # d/dnum terms
    zero = np.zeros_like(r)
    one = np.ones_like(r)
    num_grads = [
        np.stack([zero, one, -one], axis=-1),  # (g - b)
        np.stack([-one, zero, one], axis=-1),  # (b - r)
        np.stack([one, -one, zero], axis=-1),  # (r - g)
    ]
    nums = [gr - b, b - r, r - gr]
    gnum = np.choose(amax[..., None], num_grads)
    num = np.choose(amax, nums)
    hd = np.where(chromatic, 1.0 / (6.0 * dd), 0.0)
    # dh/dd = -num/(6 d^2); d = x[amax] - x[amin]
    hdd = np.where(chromatic, -num / (6.0 * dd * dd), 0.0)
    out += (gnum * hd[..., None] + (emax - emin) * hdd[..., None]) * gh[..., None]
    return out


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.maximum(c, 0.0031308) ** (1.0 / 2.4) - 0.055)


def _srgb_to_linear_deriv(c: np.ndarray) -> np.ndarray:
    hi = (2.4 / 1.055) * ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 1.4
    return np.where(c <= 0.04045, 1.0 / 12.92, hi)


def _lab_f(t: np.ndarray) -> np.ndarray:
    d3 = _LAB_DELTA**3
    return np.where(t > d3, np.cbrt(np.maximum(t, d3)), t / (3.0 * _LAB_DELTA**2) + 4.0 / 29.0)


def _lab_f_inv(u: np.ndarray) -> np.ndarray:
    return np.where(u > _LAB_DELTA, u**3, 3.0 * _LAB_DELTA**2 * (u - 4.0 / 29.0))


def _lab_f_deriv(t: np.ndarray) -> np.ndarray:
    d3 = _LAB_DELTA**3
    hi = np.cbrt(np.maximum(t, d3)) ** -2 / 3.0
    return np.where(t > d3, hi, 1.0 / (3.0 * _LAB_DELTA**2))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    lin = _srgb_to_linear(_f64(rgb))
    xyz = lin @ _XYZ_M.T / _D65
    fx, fy, fz = _lab_f(xyz[..., 0]), _lab_f(xyz[..., 1]), _lab_f(xyz[..., 2])
    out = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return out.astype(np.asarray(rgb).dtype)


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    x = _f64(lab)
    fy = (x[..., 0] + 16.0) / 116.0
    fx = fy + x[..., 1] / 500.0
    fz = fy - x[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1) * _D65
    lin = xyz @ _XYZ_M_INV.T
    out = _linear_to_srgb(np.clip(lin, 0.0, None))
    return out.astype(np.asarray(lab).dtype)


def rgb_to_lab_vjp(rgb: np.ndarray, grad: np.ndarray) -> np.ndarray:
    x = _f64(rgb)
    g = _f64(grad)
    lin = _srgb_to_linear(x)
    xyz = lin @ _XYZ_M.T / _D65
    # Lab is linear in (fx, fy, fz)
    gf = np.stack(
        [500.0 * g[..., 1], 116.0 * g[..., 0] - 500.0 * g[..., 1] + 200.0 * g[..., 2], -200.0 * g[..., 2]],
        axis=-1,
    )
    gxyz = gf * _lab_f_deriv(xyz)
    glin = (gxyz / _D65) @ _XYZ_M
    return glin * _srgb_to_linear_deriv(x)


_TO_SPACE = {ColorSpace.HSV: rgb_to_hsv, ColorSpace.LAB: rgb_to_lab, ColorSpace.YUV: rgb_to_yuv}
_FROM_SPACE = {ColorSpace.HSV: hsv_to_rgb, ColorSpace.LAB: lab_to_rgb, ColorSpace.YUV: yuv_to_rgb}


def convert(img: Image, target: ColorSpace) -> Image:
    """Convert an image to the target space; one side must be RGB."""
    if img.space == target:
        return Image(img.data.copy(), img.space)
    if img.space == ColorSpace.RGB:
        return Image(_TO_SPACE[target](img.data), target)
    if target == ColorSpace.RGB:
        return Image(_FROM_SPACE[img.space](img.data), ColorSpace.RGB)
    raise UnsupportedConversionError(
        f"convert: direct {img.space.value} -> {target.value} unsupported; route through RGB"
    )


def round_trip_error(img: Image, space: ColorSpace) -> float:
    """Max abs elementwise |RGB - from(to(RGB))| for a given space."""
    if img.space != ColorSpace.RGB:
        raise ValueError("round_trip_error: input must be RGB")
    back = convert(convert(img, space), ColorSpace.RGB)
    return float(np.abs(img.data.astype(np.float64) - back.data.astype(np.float64)).max())


# Nominal channel ranges used to min-max normalize model inputs to [0,1].
_RANGES = {
    ColorSpace.RGB: (np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0])),
    ColorSpace.HSV: (np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0])),
    ColorSpace.LAB: (np.array([0.0, -128.0, -128.0]), np.array([100.0, 127.0, 127.0])),
    ColorSpace.YUV: (np.array([0.0, -0.436, -0.615]), np.array([1.0, 0.436, 0.615])),
}


def to_model_input(rgb: np.ndarray, space: ColorSpace) -> np.ndarray:
    """RGB (...,3) in [0,1] -> model-space channels min-max scaled to [0,1]."""
    if space == ColorSpace.RGB:
        return np.asarray(rgb).copy()
    converted = _TO_SPACE[space](rgb)
    lo, hi = _RANGES[space]
    out = (converted.astype(np.float64) - lo) / (hi - lo)
    return out.astype(np.asarray(rgb).dtype)


def to_model_input_vjp(rgb: np.ndarray, space: ColorSpace, grad: np.ndarray) -> np.ndarray:
    if space == ColorSpace.RGB:
        return np.asarray(grad).copy()
    lo, hi = _RANGES[space]
    gs = _f64(grad) / (hi - lo)
    if space == ColorSpace.HSV:
        return rgb_to_hsv_vjp(rgb, gs)
    if space == ColorSpace.LAB:
        return rgb_to_lab_vjp(rgb, gs)
    return rgb_to_yuv_vjp(rgb, gs)
