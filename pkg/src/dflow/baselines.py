"""Handcrafted segmentation baselines: adaptive thresholding and a
distance-transform cut.

All three operate on a single grayscale channel in [0, 1] (the luma channel
in this repo's pipelines) and return {0, 1} masks of the input shape. Window
statistics use edge-replication padding; the distance transform is the exact
two-pass Euclidean one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ThresholdParams",
    "adaptive_threshold_mean",
    "adaptive_threshold_gaussian",
    "distance_transform_threshold",
    "otsu_threshold",
    "euclidean_distance_transform",
]


@dataclass(frozen=True)
class ThresholdParams:
    window: int = 11
    c: float = 2.0 / 255.0
    gaussian_sigma: float | None = None  # None -> window / 6
    dt_fraction: float = 0.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if not 0.0 < self.dt_fraction < 1.0:
            raise ValueError(f"dt_fraction must lie in (0, 1), got {self.dt_fraction}")
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0.0:
            raise ValueError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")

    @property
    def sigma(self):
        return self.window / 6.0 if self.gaussian_sigma is None else self.gaussian_sigma


def _as_gray(gray):
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3 and g.shape[0] == 1:
        g = g[0]
    if g.ndim != 2:
        raise ValueError(f"expected grayscale (H, W) or (1, H, W), got shape {g.shape}")
    return g


def _windowed_weighted_mean(g, window, weights):
    pad = window // 2
    gp = np.pad(g, pad, mode="edge")
    h, w = g.shape
    acc = np.zeros_like(g)
    for i in range(window):
        for j in range(window):
            acc += weights[i, j] * gp[i:i + h, j:j + w]
    return acc


def adaptive_threshold_mean(gray, params):
    """1 where pixel > local windowed mean - C, else 0."""
    g = _as_gray(gray)
    w = params.window
    weights = np.full((w, w), 1.0 / (w * w))
    local = _windowed_weighted_mean(g, w, weights)
    return (g > local - params.c).astype(np.float64).reshape(np.shape(gray))


def _gaussian_weights(window, sigma):
    half = window // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    w = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def adaptive_threshold_gaussian(gray, params):
    """Same rule with a normalised Gaussian-weighted window mean."""
    g = _as_gray(gray)
    weights = _gaussian_weights(params.window, params.sigma)
    local = _windowed_weighted_mean(g, params.window, weights)
    return (g > local - params.c).astype(np.float64).reshape(np.shape(gray))


def otsu_threshold(gray):
    """Otsu's threshold over a 256-bin histogram; returns the bin value in
    [0, 1] maximising between-class variance, or None when the image has a
    single occupied bin (no split possible)."""
    g = _as_gray(gray)
    levels = np.clip(np.round(g * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(levels.reshape(-1), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    total = hist.sum()
    omega = np.cumsum(hist) / total            # class-0 mass for thresholds 0..255
    mu = np.cumsum(hist * np.arange(256)) / total
    mu_total = mu[-1]
    valid = (omega > 0.0) & (omega < 1.0)
    sigma_b = np.zeros(256)
    sigma_b[valid] = (mu_total * omega[valid] - mu[valid]) ** 2 / (
        omega[valid] * (1.0 - omega[valid]))
    return int(np.argmax(sigma_b)) / 255.0


def _edt_1d_squared(f):
    """Lower-envelope 1D squared distance transform of sampled function f.

    f must be finite (background encoded as 0, unreachable as a large finite
    sentinel, never inf)."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)   # locations of parabolas in the envelope
    z = np.empty(n + 1)               # boundaries between parabolas
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        while True:
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def euclidean_distance_transform(mask):
    """Exact Euclidean distance of each foreground (1) pixel to the nearest
    background (0) pixel, via two 1D passes. All-foreground inputs yield +inf."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    h, w = m.shape
    # finite sentinel strictly above any achievable squared distance
    large = float(h * h + w * w + 1)
    sq = np.where(m, large, 0.0)
    for i in range(h):
        if sq[i].any():
            sq[i] = _edt_1d_squared(sq[i])
    for j in range(w):
        if sq[:, j].any():
            sq[:, j] = _edt_1d_squared(sq[:, j])
    sq[sq >= large] = np.inf
    return np.sqrt(sq)


def distance_transform_threshold(gray, params):
    """Otsu-binarise, distance-transform the foreground, keep pixels whose
    distance exceeds dt_fraction of the maximum. Degenerate inputs (no
    foreground/background split) produce an empty mask."""
    g = _as_gray(gray)
    thresh = otsu_threshold(g)
    if thresh is None:
        return np.zeros(np.shape(gray))
    fg = np.clip(np.round(g * 255.0), 0, 255) > thresh * 255.0
    if not fg.any() or fg.all():
        return np.zeros(np.shape(gray))
    dist = euclidean_distance_transform(fg)
    cut = params.dt_fraction * dist.max()
    return (dist > cut).astype(np.float64).reshape(np.shape(gray))
