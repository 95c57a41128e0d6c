"""Synthetic MOTS sequences: moving rectangles and ellipses with per-identity embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion

from .masks import BBox, rle_encode, rle_to_bbox
from .metrics import CAR, PEDESTRIAN, FrameAnnotations, Instance
from .tracking import TrackObservation

__all__ = ["SynthConfig", "SynthSequence", "generate"]


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings; all noise terms default to zero.

    ``disappear`` holds ``(object, start_frame, length)`` triples during
    which the object is absent. ``id_switch`` holds ``(object, frame)``
    pairs from which the object's detections carry a flipped embedding,
    so a tracker cannot continue its track.
    """

    frames: int = 20
    objects: int = 4
    height: int = 128
    width: int = 256
    motion: float = 3.0
    seed: int = 0
    occlusion: float = 0.0
    box_jitter: float = 0.0
    embedding_noise: float = 0.0
    erosion: int = 0
    distractors: int = 0
    embedding_dim: int = 8
    disappear: tuple = field(default_factory=tuple)
    id_switch: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.frames < 1 or self.objects < 0:
            raise ValueError("need at least one frame and a non-negative object count")
        if self.height < 16 or self.width < 16:
            raise ValueError("image must be at least 16x16")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion probability must lie in [0, 1]")
        if min(self.box_jitter, self.embedding_noise, self.motion) < 0 or self.erosion < 0:
            raise ValueError("noise levels must be non-negative")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")


@dataclass
class SynthSequence:
    ground_truth: dict[int, FrameAnnotations]
    detections: list[list[TrackObservation]]


def _identity_embeddings(rng, n, dim):
    emb = rng.standard_normal((n, dim))
    k = min(n, dim)
    if k:
        q, _ = np.linalg.qr(rng.standard_normal((dim, k)))
        emb[:k] = q.T
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def _shape_mask(kind, cx, cy, half_w, half_h, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:
        return (np.abs(xx + 0.5 - cx) <= half_w) & (np.abs(yy + 0.5 - cy) <= half_h)
    return ((xx + 0.5 - cx) / half_w) ** 2 + ((yy + 0.5 - cy) / half_h) ** 2 <= 1.0


def generate(cfg: SynthConfig) -> SynthSequence:
    rng = np.random.default_rng(cfg.seed)
    h, w, n = cfg.height, cfg.width, cfg.objects
    kinds = rng.integers(0, 2, n)
    classes = np.where(rng.random(n) < 0.5, CAR, PEDESTRIAN)
    half = np.column_stack([rng.uniform(0.06, 0.14, n) * w, rng.uniform(0.1, 0.25, n) * h])
    pos = np.column_stack([rng.uniform(half[:, 0], w - half[:, 0]), rng.uniform(half[:, 1], h - half[:, 1])])
    vel = rng.uniform(-cfg.motion, cfg.motion, (n, 2))
    depth = rng.permutation(n)
    centers = _identity_embeddings(rng, n, cfg.embedding_dim)

    absent = set()
    for obj, start, length in cfg.disappear:
        absent.update((int(obj), f) for f in range(int(start), int(start) + int(length)))
    switched = {int(o): int(f) for o, f in cfg.id_switch}

    gt: dict[int, FrameAnnotations] = {}
    dets: list[list[TrackObservation]] = []
    for f in range(cfg.frames):
        occluded = rng.random(n) < cfg.occlusion
        visible = np.zeros((h, w), dtype=bool)
        frame_gt = FrameAnnotations(f)
        frame_dets = []
        # nearest object first, so farther ones only keep uncovered pixels
        for i in depth:
            if occluded[i] or (i, f) in absent:
                continue
            m = _shape_mask(kinds[i], pos[i, 0], pos[i, 1], half[i, 0], half[i, 1], h, w) & ~visible
            if not m.any():
                continue
            visible |= m
            rle = rle_encode(m)
            frame_gt.instances.append(Instance(int(classes[i]) * 1000 + i + 1, int(classes[i]), rle))

            pm = binary_erosion(m, iterations=cfg.erosion) if cfg.erosion else m
            if not pm.any():
                continue
            box = rle_to_bbox(rle_encode(pm))
            if cfg.box_jitter:
                j = rng.normal(0.0, cfg.box_jitter, 4)
                x0, y0 = box.x0 + j[0], box.y0 + j[1]
                box = BBox(x0, y0, max(box.x1 + j[2], x0 + 1.0), max(box.y1 + j[3], y0 + 1.0))
            emb = centers[i] * (-1.0 if f >= switched.get(i, cfg.frames) else 1.0)
            if cfg.embedding_noise:
                emb = emb + rng.normal(0.0, cfg.embedding_noise, emb.shape)
            frame_dets.append(TrackObservation(f, box, int(classes[i]), 1.0, emb, mask=rle_encode(pm)))

        for _ in range(cfg.distractors):
            x0, y0 = rng.uniform(0, w - 8), rng.uniform(0, h - 8)
            box = BBox(x0, y0, x0 + 8.0, y0 + 8.0)
            score = float(rng.uniform(0.1, 0.5))
            frame_dets.append(TrackObservation(f, box, int(rng.choice([CAR, PEDESTRIAN])), score,
                                               rng.standard_normal(cfg.embedding_dim)))
        if frame_gt.instances:
            gt[f] = frame_gt
        dets.append(frame_dets)

        pos += vel
        for axis, limit in ((0, w), (1, h)):
            lo = pos[:, axis] < half[:, axis]
            hi = pos[:, axis] > limit - half[:, axis]
            vel[lo | hi, axis] *= -1.0
            pos[:, axis] = np.clip(pos[:, axis], half[:, axis], limit - half[:, axis])
    return SynthSequence(gt, dets)
