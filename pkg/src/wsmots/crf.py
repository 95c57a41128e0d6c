"""Potts/CRF relaxation loss with a dense Gaussian RGBXY affinity.

Two ways to apply the affinity matrix ``W``:

* :func:`affinity_apply_dense` evaluates every pixel pair, O(N^2). It is
  the reference.
* :func:`affinity_apply_fast` splats the signal onto a regular 5-D lattice
  over (x, y, r, g, b), blurs it with separable Gaussians and slices it back
  with multilinear weights. The lattice operator is symmetric, so the loss
  gradient formula holds for it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "AffinityParams",
    "rgbxy_features",
    "affinity_apply_dense",
    "affinity_apply_fast",
    "BilateralLattice",
    "crf_loss",
    "batch_crf_loss",
]


@dataclass(frozen=True)
class AffinityParams:
    """Kernel bandwidths (``sigma_rgb`` in units of colors scaled to [0, 1]).

    ``spacing`` is the fast path's lattice spacing in bandwidth units; smaller
    is more accurate and slower.
    """

    sigma_xy: float = 10.0
    sigma_rgb: float = 0.1
    zero_diagonal: bool = True
    spacing: float = 0.6

    def __post_init__(self):
        if self.sigma_xy <= 0 or self.sigma_rgb <= 0:
            raise ValueError("bandwidths must be positive")
        if not 0 < self.spacing < math.sqrt(3):
            raise ValueError("spacing must lie in (0, sqrt(3))")


def _check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {image.shape}")
    return image


def rgbxy_features(image, params: AffinityParams) -> np.ndarray:
    """Per-pixel features ``(x, y, r, g, b)`` divided by their bandwidths, row-major."""
    image = _check_image(image)
    h, w, _ = image.shape
    yy, xx = np.mgrid[0:h, 0:w]
    return np.column_stack([
        xx.ravel() / params.sigma_xy,
        yy.ravel() / params.sigma_xy,
        image.reshape(-1, 3) / params.sigma_rgb,
    ])


def _as_columns(v, n):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != n:
        raise ValueError(f"signal has {v.shape[0]} entries, image has {n} pixels")
    return v.reshape(n, -1)


def affinity_apply_dense(v, image, params: AffinityParams = AffinityParams(), chunk=2048):
    """Exact ``W v``; ``v`` has one entry (or one row of columns) per pixel, row-major."""
    f = rgbxy_features(image, params)
    n = f.shape[0]
    shape = np.shape(v)
    cols = _as_columns(v, n)
    sq = (f * f).sum(axis=1)
    out = np.empty_like(cols)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * f[start:stop] @ f.T
        K = np.exp(-0.5 * np.maximum(d2, 0.0))
        if params.zero_diagonal:
            K[np.arange(stop - start), np.arange(start, stop)] = 0.0
        out[start:stop] = K @ cols
    return out.reshape(shape)


class BilateralLattice:
    """Splat/blur/slice operator on a regular lattice in bandwidth-normalized feature space.

    Multilinear splatting followed by multilinear slicing adds a variance
    of ``spacing**2 / 3`` per axis on average, so the blur kernel is narrowed
    to keep the effective variance at 1 and rescaled to keep its mass equal
    to that of the unit Gaussian. Each point's weights are then divided by
    the square root of its own response, which makes the diagonal exactly 1
    and removes the bias between points that share a coordinate (flat color
    regions). Both corrections keep the operator symmetric.
    """

    def __init__(self, features, spacing=0.6):
        f = np.asarray(features, dtype=np.float64)
        n, d = f.shape
        self.n_points, self.d = n, d
        h = float(spacing)
        g = (f - f.min(axis=0)) / h
        base = np.floor(g).astype(np.int64)
        frac = g - base
        self.shape = tuple(int(s) for s in base.max(axis=0) + 2)
        strides = np.array([int(np.prod(self.shape[i + 1:])) for i in range(d)], dtype=np.int64)
        lin = base @ strides
        bits = (np.arange(2 ** d)[:, None] >> np.arange(d)[None, :]) & 1
        self._index = lin[None, :] + (bits @ strides)[:, None]          # (2^d, n)
        weight = np.prod(np.where(bits[:, None, :] == 1, frac[None], 1.0 - frac[None]), axis=2)

        blur_var = 1.0 - h * h / 3.0
        var = blur_var / (h * h)
        radius = int(math.ceil(4.0 * math.sqrt(var)))
        taps = np.arange(-radius, radius + 1)
        self._kernel = np.exp(-taps ** 2 / (2.0 * var)) / math.sqrt(blur_var)
        k0, k1 = self._kernel[radius], self._kernel[radius + 1]
        own = np.prod((frac ** 2 + (1.0 - frac) ** 2) * k0 + 2.0 * frac * (1.0 - frac) * k1, axis=1)
        self._weight = weight / np.sqrt(own)

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    def apply(self, cols):
        """Apply to one signal (n,) or several columns (n, c)."""
        cols = np.asarray(cols, dtype=np.float64)
        single = cols.ndim == 1
        cols = cols.reshape(self.n_points, -1)
        idx = self._index.ravel()
        out = np.empty_like(cols)
        for c in range(cols.shape[1]):
            grid = np.bincount(idx, weights=(self._weight * cols[:, c]).ravel(), minlength=self.n_cells)
            grid = grid.reshape(self.shape)
            for axis in range(self.d):
                grid = correlate1d(grid, self._kernel, axis=axis, mode="constant")
            grid = grid.ravel()
            out[:, c] = (self._weight * grid[self._index]).sum(axis=0)
        return out[:, 0] if single else out


def affinity_apply_fast(v, image, params: AffinityParams = AffinityParams(), lattice=None):
    """Approximate ``W v`` through :class:`BilateralLattice`.

    Pass a prebuilt ``lattice`` to reuse it across signals on the same image.
    """
    if lattice is None:
        lattice = BilateralLattice(rgbxy_features(image, params), params.spacing)
    shape = np.shape(v)
    cols = _as_columns(v, lattice.n_points)
    out = lattice.apply(cols)
    if params.zero_diagonal:
        # the lattice operator has a unit diagonal
        out -= cols
    return out.reshape(shape)


def crf_loss(image, masks, params: AffinityParams = AffinityParams(), method="dense"):
    """Relaxed Potts loss ``sum_k <S_k, W (1 - S_k)>`` and its gradient.

    Parameters
    ----------
    image : array (H, W, 3), colors in [0, 1]
    masks : array (K, H, W), one soft mask per class
    method : {"dense", "fast"}

    Returns
    -------
    loss : float
    grads : ndarray (K, H, W), ``W 1 - 2 W S_k``
    """
    image = _check_image(image)
    S = np.asarray(masks, dtype=np.float64)
    if S.ndim == 2:
        S = S[None]
    if S.ndim != 3 or S.shape[1:] != image.shape[:2]:
        raise ValueError(f"masks {S.shape} do not match image {image.shape[:2]}")
    if S.size and (S.min() < 0.0 or S.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    k, h, w = S.shape
    n = h * w
    cols = np.column_stack([np.ones(n), S.reshape(k, n).T])
    if method == "dense":
        Wc = affinity_apply_dense(cols, image, params)
    elif method == "fast":
        Wc = affinity_apply_fast(cols, image, params)
    else:
        raise ValueError(f"unknown method {method!r}")
    W1, WS = Wc[:, 0], Wc[:, 1:]
    flat = S.reshape(k, n).T
    # <S, W(1-S)> = <S, W1> - <S, WS>
    loss = float(np.sum(flat * (W1[:, None] - WS)))
    grads = (W1[:, None] - 2.0 * WS).T.reshape(k, h, w)
    return loss, grads


def batch_crf_loss(items, params: AffinityParams = AffinityParams(), method="dense") -> float:
    """Mean CRF loss over ``(image, masks)`` pairs; 0 for an empty batch."""
    losses = [crf_loss(image, masks, params, method)[0] for image, masks in items]
    if not losses:
        return 0.0
    return math.fsum(losses) / len(losses)
