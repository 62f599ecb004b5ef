"""Sliding-window structural similarity and dissimilarity maps.

The per-pixel index over a centered square window with uniform (box)
statistics is

    SSIM = (2*mu_x*mu_y + C1) * (2*cov_xy + C2)
           -------------------------------------
           (mu_x^2 + mu_y^2 + C1) * (var_x + var_y + C2)

computed for every pixel with mirror (reflect-without-border) padding, so the
output map has the same size as the inputs. The dissimilarity map is
(1 - SSIM) / 2, which lands in [0, 1]: 0 for identical windows, 1 for maximal
structural inversion. Color inputs are reduced to luminance first.

Two implementations are kept on purpose: ``ssim_map`` uses separable
sliding-window sums (each window sum touches only its own pixels, so equal
windows give SSIM exactly 1), ``ssim_map_naive`` evaluates each window
directly. They must agree to 1e-6 and the naive one is the oracle in the
self-check suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ForgemapError, ShapeError

#: Rec. 601 luminance weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class DssimParams:
    window: int = 7
    c1: float = 0.01 ** 2  # (K1 * L)^2 with K1=0.01, dynamic range L=1
    c2: float = 0.03 ** 2
    padding: str = "reflect"

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ForgemapError(f"window must be odd and >= 3, got {self.window}")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ForgemapError("stability constants must be positive")
        if self.padding != "reflect":
            raise ForgemapError(f"unsupported padding mode {self.padding!r}")


DEFAULT_PARAMS = DssimParams()


def _validate_pair(x, y, p):
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes differ, {x.shape} vs {y.shape}")
    if x.ndim != 2:
        raise ShapeError(f"ssim: expected 2-D grayscale input, got {x.shape}")
    r = p.window // 2
    if min(x.shape) <= r:
        raise ShapeError(f"ssim: image {x.shape} too small for window {p.window}")
    for name, img in (("x", x), ("y", y)):
        if img.min() < -1e-6 or img.max() > 1 + 1e-6:
            raise ForgemapError(f"ssim: {name} has values outside [0, 1]")


def _box_sums(img: np.ndarray, window: int) -> np.ndarray:
    """Sum of every centered window, via separable sliding sums on mirror
    padding. Each output touches only its own window's pixels, which keeps
    the locality property exact (no global cumulative coupling)."""
    r = window // 2
    padded = np.pad(img, r, mode="reflect")
    v = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0).sum(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(v, window, axis=1).sum(axis=-1)


def ssim_map(x: np.ndarray, y: np.ndarray, p: DssimParams = DEFAULT_PARAMS) -> np.ndarray:
    """Per-pixel SSIM of two grayscale images in [0, 1]; float64 output."""
    _validate_pair(x, y, p)
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    n = float(p.window * p.window)
    mx = _box_sums(x, p.window) / n
    my = _box_sums(y, p.window) / n
    vx = _box_sums(x * x, p.window) / n - mx * mx
    vy = _box_sums(y * y, p.window) / n - my * my
    cxy = _box_sums(x * y, p.window) / n - mx * my
    num = (2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2)
    den = (mx * mx + my * my + p.c1) * (vx + vy + p.c2)
    return num / den


def ssim_map_naive(x: np.ndarray, y: np.ndarray, p: DssimParams = DEFAULT_PARAMS) -> np.ndarray:
    """Direct per-window evaluation; the oracle for ``ssim_map``."""
    _validate_pair(x, y, p)
    r = p.window // 2
    xp = np.pad(x.astype(np.float64), r, mode="reflect")
    yp = np.pad(y.astype(np.float64), r, mode="reflect")
    h, w = x.shape
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            wx = xp[i:i + p.window, j:j + p.window]
            wy = yp[i:i + p.window, j:j + p.window]
            mx = wx.mean()
            my = wy.mean()
            vx = (wx * wx).mean() - mx * mx
            vy = (wy * wy).mean() - my * my
            cxy = (wx * wy).mean() - mx * my
            out[i, j] = ((2 * mx * my + p.c1) * (2 * cxy + p.c2)
                         / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2)))
    return out


def dssim_map(x: np.ndarray, y: np.ndarray, p: DssimParams = DEFAULT_PARAMS) -> np.ndarray:
    """Normalized dissimilarity map in [0, 1], float32."""
    d = (1.0 - ssim_map(x, y, p)) / 2.0
    return np.clip(d, 0.0, 1.0).astype(np.float32)


def luminance(img: np.ndarray) -> np.ndarray:
    """[3, H, W] color image -> [H, W] luminance."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"luminance: expected [3,H,W], got {img.shape}")
    r, g, b = LUMA_WEIGHTS
    return (r * img[0].astype(np.float64) + g * img[1].astype(np.float64)
            + b * img[2].astype(np.float64))


def gt_map_for_sample(real: np.ndarray, fake: np.ndarray | None,
                      p: DssimParams = DEFAULT_PARAMS) -> np.ndarray:
    """Ground-truth map for one aligned pair; pure black for real samples."""
    if fake is None:
        return np.zeros(real.shape[-2:], dtype=np.float32)
    if fake.shape != real.shape:
        raise ShapeError(f"gt map: misaligned pair {real.shape} vs {fake.shape}")
    return dssim_map(luminance(real), luminance(fake), p)
