"""Pseudo labels from heatmaps and ground-truth boxes, and the localization loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_prob_mask
from .masks import BBox, roi_cell_centers

__all__ = [
    "VOID",
    "EPS",
    "WeakLabelConfig",
    "make_pseudo_label",
    "loc_loss",
    "batch_loc_loss",
    "PseudoLabeler",
]

# label value for cells that carry no supervision
VOID = 255
EPS = 1e-7

_OTHER_BOX_POLICIES = ("void", "heatmap")


@dataclass(frozen=True)
class WeakLabelConfig:
    """Pseudo-label settings.

    ``other_boxes`` decides cells that fall inside another object's
    ground-truth box but not the ROI's own box: ``"void"`` ignores them,
    ``"heatmap"`` applies the own heatmap threshold there too.
    """

    mu_a: float = 0.5
    other_boxes: str = "void"

    def __post_init__(self):
        if not 0.0 <= self.mu_a <= 1.0:
            raise ValueError("mu_a must lie in [0, 1]")
        if self.other_boxes not in _OTHER_BOX_POLICIES:
            raise ValueError(f"other_boxes must be one of {_OTHER_BOX_POLICIES}")


def make_pseudo_label(heatmap, roi_box: BBox, gt_boxes, cfg: WeakLabelConfig = WeakLabelConfig(),
                      match: int = 0, frame_shape=None) -> np.ndarray:
    """Trinary label on the ROI grid.

    Each grid cell is located at its center in frame coordinates. Cells
    outside every ground-truth box are background (0). Cells inside the
    matched box ``gt_boxes[match]`` are foreground (1) where the heatmap
    reaches ``cfg.mu_a`` and :data:`VOID` elsewhere.

    Returns a ``uint8`` array with values in {0, 1, VOID}.
    """
    G = check_prob_mask(heatmap, "heatmap")
    if G.shape[0] != G.shape[1]:
        raise ValueError("heatmap must be a square ROI grid")
    gt_boxes = list(gt_boxes)
    if not 0 <= match < len(gt_boxes):
        raise ValueError(f"match index {match} out of range for {len(gt_boxes)} boxes")
    if frame_shape is not None:
        h, w = frame_shape
        if roi_box.x1 <= 0 or roi_box.y1 <= 0 or roi_box.x0 >= w or roi_box.y0 >= h:
            raise ValueError(f"ROI {roi_box.as_list()} is disjoint from the {h}x{w} frame")

    cx, cy = roi_cell_centers(roi_box, G.shape[0])
    in_own = gt_boxes[match].contains(cx, cy)
    in_any = np.zeros_like(in_own)
    for box in gt_boxes:
        in_any |= box.contains(cx, cy)

    fg = in_own if cfg.other_boxes == "void" else in_any
    label = np.zeros(G.shape, dtype=np.uint8)
    label[in_any] = VOID
    label[fg & (G >= cfg.mu_a)] = 1
    return label


def loc_loss(label, pred):
    """Cross entropy over the non-void cells of a pseudo label.

    ``pred`` is clamped to ``[EPS, 1 - EPS]``; the returned gradient is the
    derivative of the clamped loss, so it is zero where the clamp is active
    and at every void cell.

    Returns
    -------
    loss : float
    grad : ndarray, same shape as ``pred``
    """
    label = np.asarray(label)
    S = np.asarray(pred, dtype=np.float64)
    if label.shape != S.shape:
        raise ValueError(f"label {label.shape} and prediction {S.shape} differ")
    valid = label != VOID
    n = np.count_nonzero(valid)
    grad = np.zeros_like(S)
    if n == 0:
        return 0.0, grad
    Sc = np.clip(S, EPS, 1.0 - EPS)
    Y = (label == 1)
    pos = valid & Y
    neg = valid & ~Y
    loss = -(np.log(Sc[pos]).sum() + np.log1p(-Sc[neg]).sum()) / n
    live = (S > EPS) & (S < 1.0 - EPS)
    grad[pos & live] = -1.0 / (n * Sc[pos & live])
    grad[neg & live] = 1.0 / (n * (1.0 - Sc[neg & live]))
    return float(loss), grad


def batch_loc_loss(items) -> float:
    """Mean localization loss over ``(label, pred)`` pairs; 0 for an empty batch."""
    losses = [loc_loss(label, pred)[0] for label, pred in items]
    if not losses:
        return 0.0
    # fsum is correctly rounded, so the mean does not depend on item order
    return math.fsum(losses) / len(losses)


class PseudoLabeler(TransformerMixin, BaseEstimator):
    """Turn ROI heatmaps into pseudo labels.

    ``transform(X, roi_boxes, gt_boxes, matches)`` with ``X`` of shape
    (n_rois, S, S); ``gt_boxes`` is the list of frame ground-truth boxes and
    ``matches[i]`` the index of the box ROI ``i`` was matched to.
    """

    def __init__(self, mu_a=0.5, other_boxes="void"):
        self.mu_a = mu_a
        self.other_boxes = other_boxes

    def fit(self, X=None, y=None):
        self.config_ = WeakLabelConfig(self.mu_a, self.other_boxes)
        return self

    def transform(self, X, roi_boxes, gt_boxes, matches=None):
        cfg = getattr(self, "config_", None) or WeakLabelConfig(self.mu_a, self.other_boxes)
        X = np.asarray(X, dtype=np.float64)
        if matches is None:
            matches = [0] * len(X)
        if not (len(X) == len(roi_boxes) == len(matches)):
            raise ValueError("heatmaps, roi_boxes and matches must have equal length")
        out = np.zeros(X.shape, dtype=np.uint8)
        for i, (hm, roi, m) in enumerate(zip(X, roi_boxes, matches)):
            out[i] = make_pseudo_label(hm, roi, gt_boxes, cfg, match=int(m))
        return out

    def fit_transform(self, X, y=None, roi_boxes=None, gt_boxes=None, matches=None):
        return self.fit(X).transform(X, roi_boxes, gt_boxes, matches)
