"""Grad-CAM heatmaps from exported activations and score gradients."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_array

__all__ = ["VARIANTS", "gradcam", "normalize_minmax", "GradCAM"]

VARIANTS = ("original", "absolute")


def normalize_minmax(raw):
    """Rescale to ``[0, 1]``; a constant input maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    out = (raw - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def gradcam(activations, gradients, variant="absolute"):
    """Heatmap for one ROI.

    Parameters
    ----------
    activations, gradients : array of shape (K, H, W)
        Feature maps and the gradient of the class score with respect to them.
        Whether the score is taken before or after the softmax is up to the
        exporter; the arithmetic is the same.
    variant : {"original", "absolute"}
        ``original`` weights maps by the pooled gradients and applies a ReLU;
        ``absolute`` weights by their magnitude and skips the ReLU.

    Returns
    -------
    heatmap : ndarray of shape (H, W), min-max normalized
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    A = check_array(activations, 3, "activations")
    G = check_array(gradients, 3, "gradients")
    if A.shape != G.shape:
        raise ValueError(f"activations {A.shape} and gradients {G.shape} differ")
    if A.shape[0] < 1:
        raise ValueError("need at least one feature map")
    alpha = G.mean(axis=(1, 2))
    if variant == "absolute":
        raw = np.tensordot(np.abs(alpha), A, axes=1)
    else:
        raw = np.maximum(np.tensordot(alpha, A, axes=1), 0.0)
    return normalize_minmax(raw)


class GradCAM(TransformerMixin, BaseEstimator):
    """Batch Grad-CAM over ROIs.

    ``transform(X, gradients)`` takes activations and gradients of shape
    (n_rois, K, H, W) and returns heatmaps of shape (n_rois, H, W).
    """

    def __init__(self, variant="absolute"):
        self.variant = variant

    def fit(self, X=None, y=None):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return self

    def transform(self, X, gradients):
        X = np.asarray(X, dtype=np.float64)
        gradients = np.asarray(gradients, dtype=np.float64)
        if X.ndim != 4 or X.shape != gradients.shape:
            raise ValueError("expected activations and gradients of equal shape (n_rois, K, H, W)")
        return np.stack([gradcam(a, g, self.variant) for a, g in zip(X, gradients)]) if len(X) else np.zeros((0,) + X.shape[2:])

    def fit_transform(self, X, gradients=None, **fit_params):
        return self.fit(X).transform(X, gradients)
