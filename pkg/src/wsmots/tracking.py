"""Embedding similarity, mask pooling, hard-triplet loss and track association."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from .masks import BBox, RleMask, bbox_iou

__all__ = [
    "TrackObservation",
    "TrackerConfig",
    "cosine_similarity",
    "cosine_distance",
    "mask_pool",
    "triplet_loss",
    "similarity_matrix",
    "associate",
    "run_tracker",
    "Tracker",
]


@dataclass(frozen=True)
class TrackObservation:
    frame: int
    bbox: BBox
    class_id: int
    score: float
    embedding: np.ndarray = field(repr=False)
    identity: int | None = None
    mask: RleMask | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "embedding", np.asarray(self.embedding, dtype=np.float64).ravel())


@dataclass(frozen=True)
class TrackerConfig:
    window: int = 10
    det_threshold: float = 0.9
    margin: float = 0.2
    embedding_metric: str = "cosine_similarity"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if not 0.0 <= self.det_threshold <= 1.0:
            raise ValueError("det_threshold must lie in [0, 1]")
        if self.embedding_metric not in ("cosine_similarity", "cosine_distance"):
            raise ValueError("embedding_metric must be cosine_similarity or cosine_distance")


def _norm(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cosine is undefined for a zero vector")
    return n


def cosine_similarity(v, w) -> float:
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return float(np.dot(v, w) / (_norm(v) * _norm(w)))


def cosine_distance(v, w) -> float:
    return 1.0 - cosine_similarity(v, w)


def mask_pool(features, mask, eps=1e-6):
    """Average ``features`` (C, H, W) over pixels weighted by a soft mask (H, W).

    Falls back to the plain mean when the mask has (almost) no mass.
    """
    F = np.asarray(features, dtype=np.float64)
    S = np.asarray(mask, dtype=np.float64)
    if F.ndim != 3 or F.shape[1:] != S.shape:
        raise ValueError(f"features {F.shape} and mask {S.shape} do not agree")
    total = S.sum()
    if total < eps:
        return F.mean(axis=(1, 2))
    return np.tensordot(F, S, axes=([1, 2], [0, 1])) / total


def _cosine_distance_grad(a, b):
    """Distance matrix between rows and d dist / d a_i for every pair, shapes (n, n) and (n, n, D)."""
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("embeddings must be non-zero")
    unit = a / norms[:, None]
    sim = unit @ unit.T
    # d sim_ij / d a_i = (u_j - sim_ij u_i) / |a_i|
    dsim = (unit[None, :, :] - sim[:, :, None] * unit[:, None, :]) / norms[:, None, None]
    return 1.0 - sim, -dsim


def triplet_loss(embeddings, identities, margin=0.2):
    """Batch-hard triplet loss on cosine distance.

    For each anchor with at least one other same-identity sample and one
    different-identity sample: ``max(max_pos d - min_neg d + margin, 0)``.
    The anchor itself is not its own positive. Anchors missing either side
    are skipped; with no valid anchor the loss is 0.

    Returns
    -------
    loss : float
    grad : ndarray (n, D), subgradient; ties pick the lowest index and the
        hinge kink contributes zero.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(identities)
    if E.ndim != 2 or len(ids) != len(E):
        raise ValueError("embeddings must be (n, D) with one identity per row")
    n = len(E)
    grad = np.zeros_like(E)
    if n < 2:
        return 0.0, grad
    dist, ddist = _cosine_distance_grad(E, E)
    same = ids[:, None] == ids[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, grad
    total = 0.0
    for i in np.flatnonzero(valid):
        p = int(np.argmax(np.where(pos_mask[i], dist[i], -np.inf)))
        q = int(np.argmin(np.where(neg_mask[i], dist[i], np.inf)))
        h = dist[i, p] - dist[i, q] + margin
        if h <= 0.0:
            continue
        total += h
        # d(a_i, a_p) depends on both endpoints; the matrix is symmetric
        grad[i] += ddist[i, p] - ddist[i, q]
        grad[p] += ddist[p, i]
        grad[q] -= ddist[q, i]
    return total / n_valid, grad / n_valid


def similarity_matrix(tracks, detections, metric="cosine_similarity"):
    """Pairwise box-IoU times embedding term; class mismatches score 0."""
    sim = np.zeros((len(tracks), len(detections)))
    for i, t in enumerate(tracks):
        for j, d in enumerate(detections):
            if t.class_id != d.class_id:
                continue
            iou = bbox_iou(t.bbox, d.bbox)
            if iou <= 0.0:
                continue
            if metric == "cosine_similarity":
                e = cosine_similarity(t.embedding, d.embedding)
            else:
                e = cosine_distance(t.embedding, d.embedding)
            sim[i, j] = iou * e
    return sim


def _canonical_order(detections):
    def key(k):
        d = detections[k]
        return (d.class_id, *d.bbox.as_list(), -d.score, tuple(d.embedding.tolist()), k)
    return sorted(range(len(detections)), key=key)


def associate(history, current, cfg: TrackerConfig = TrackerConfig(), next_id=None):
    """Assign track ids to the detections of one frame.

    Parameters
    ----------
    history : list of TrackObservation
        Past observations carrying an ``identity``. For every identity only
        the most recent observation no more than ``cfg.window`` frames old is
        a candidate.
    current : list of TrackObservation
        Detections of the current frame, already filtered by score.
    next_id : int, optional
        First id handed to unmatched detections; defaults to one past the
        largest id in ``history``.

    Returns
    -------
    list of int, one id per detection in ``current`` order.
    """
    if not current:
        return []
    frame = current[0].frame
    latest = {}
    for obs in history:
        if obs.identity is None or frame - obs.frame > cfg.window or obs.frame >= frame:
            continue
        prev = latest.get(obs.identity)
        if prev is None or obs.frame > prev.frame:
            latest[obs.identity] = obs
    track_ids = sorted(latest)
    tracks = [latest[t] for t in track_ids]
    if next_id is None:
        known = [o.identity for o in history if o.identity is not None]
        next_id = max(known, default=0) + 1

    order = _canonical_order(current)
    dets = [current[k] for k in order]
    assigned = [None] * len(dets)
    if tracks:
        sim = similarity_matrix(tracks, dets, cfg.embedding_metric)
        sim_pos = np.where(sim > 0.0, sim, 0.0)
        cost = sim_pos.max() - sim_pos
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            if sim[r, c] > 0.0:
                assigned[c] = track_ids[r]
    for j in range(len(dets)):
        if assigned[j] is None:
            assigned[j] = next_id
            next_id += 1
    ids = [0] * len(current)
    for pos, k in enumerate(order):
        ids[k] = assigned[pos]
    return ids


def run_tracker(frames, cfg: TrackerConfig = TrackerConfig()):
    """Track a whole sequence.

    ``frames`` is an iterable of per-frame observation lists in temporal
    order. Detections below ``cfg.det_threshold`` are dropped. Returns the
    kept observations with ``identity`` filled in, frame by frame.
    """
    history: list[TrackObservation] = []
    next_id = 1
    out = []
    for dets in frames:
        kept = [d for d in dets if d.score >= cfg.det_threshold]
        if not kept:
            out.append([])
            continue
        ids = associate(history, kept, cfg, next_id=next_id)
        next_id = max(next_id, max(ids) + 1)
        tracked = [replace(d, identity=i) for d, i in zip(kept, ids)]
        out.append(tracked)
        frame = kept[0].frame
        history = [o for o in history if frame - o.frame < cfg.window] + tracked
    return out


class Tracker(BaseEstimator):
    """Estimator wrapper around :func:`run_tracker`.

    ``fit_predict(frames)`` returns the tracked observations and stores the
    number of distinct tracks in ``n_tracks_``.
    """

    def __init__(self, window=10, det_threshold=0.9, embedding_metric="cosine_similarity"):
        self.window = window
        self.det_threshold = det_threshold
        self.embedding_metric = embedding_metric

    def fit(self, frames, y=None):
        self.fit_predict(frames)
        return self

    def fit_predict(self, frames, y=None):
        cfg = TrackerConfig(window=self.window, det_threshold=self.det_threshold,
                            embedding_metric=self.embedding_metric)
        tracked = run_tracker(frames, cfg)
        self.n_tracks_ = len({o.identity for f in tracked for o in f})
        return tracked
