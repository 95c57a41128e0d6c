"""sMOTSA / MOTSA / MOTSP over mask tracks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import RleMask, rle_decode

__all__ = [
    "CAR",
    "PEDESTRIAN",
    "IGNORE_CLASS",
    "IGNORE_ID",
    "Instance",
    "FrameAnnotations",
    "OverlapError",
    "MetricsAccumulator",
    "MotsScores",
    "match_frame",
    "accumulate_sequence",
    "scores",
    "evaluate",
]

CAR = 1
PEDESTRIAN = 2
IGNORE_CLASS = 10
IGNORE_ID = 10000
CLASS_NAMES = {CAR: "car", PEDESTRIAN: "pedestrian"}


class OverlapError(ValueError):
    """Two instance masks of one frame share pixels."""


@dataclass(frozen=True)
class Instance:
    track_id: int
    class_id: int
    mask: RleMask


@dataclass
class FrameAnnotations:
    frame: int
    instances: list[Instance] = field(default_factory=list)
    ignore_regions: list[RleMask] = field(default_factory=list)


@dataclass
class MetricsAccumulator:
    gt_count: int = 0
    tp: int = 0
    soft_tp: float = 0.0
    fp: int = 0
    ids: int = 0

    def __iadd__(self, other: "MetricsAccumulator"):
        self.gt_count += other.gt_count
        self.tp += other.tp
        self.soft_tp += other.soft_tp
        self.fp += other.fp
        self.ids += other.ids
        return self

    @property
    def fn(self) -> int:
        return self.gt_count - self.tp


@dataclass(frozen=True)
class MotsScores:
    smotsa: float
    motsa: float
    motsp: float


def _decode_all(instances, what):
    masks = [rle_decode(inst.mask) for inst in instances]
    if len(masks) > 1:
        stack = np.stack(masks)
        if (stack.sum(axis=0) > 1).any():
            raise OverlapError(f"overlapping {what} masks")
    return masks


def _pairwise_iou(gt_masks, pr_masks):
    iou = np.zeros((len(gt_masks), len(pr_masks)))
    if not gt_masks or not pr_masks:
        return iou
    shape = gt_masks[0].shape
    for m in pr_masks:
        if m.shape != shape:
            raise ValueError(f"mask size mismatch: {m.shape} vs {shape}")
    g = np.stack(gt_masks).reshape(len(gt_masks), -1).astype(np.float64)
    p = np.stack(pr_masks).reshape(len(pr_masks), -1).astype(np.float64)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    np.divide(inter, union, out=iou, where=union > 0)
    return iou


def match_frame(gt: FrameAnnotations, pred: FrameAnnotations, class_id=None):
    """Pairs ``(gt_index, pred_index, iou)`` with mask IoU above 0.5.

    Non-overlapping masks on both sides make the pairing unique. With
    ``class_id`` set only instances of that class take part, and indices
    refer to the filtered lists.
    """
    g = [i for i in gt.instances if class_id is None or i.class_id == class_id]
    p = [i for i in pred.instances if class_id is None or i.class_id == class_id]
    iou = _pairwise_iou(_decode_all(g, "ground-truth"), _decode_all(p, "predicted"))
    rows, cols = np.nonzero(iou > 0.5)
    return [(int(r), int(c), float(iou[r, c])) for r, c in zip(rows, cols)]


def _ignore_mask(frame: FrameAnnotations, shape):
    mask = np.zeros(shape, dtype=bool)
    for region in frame.ignore_regions:
        mask |= rle_decode(region)
    return mask


def accumulate_sequence(gt_frames, pred_frames, class_id) -> MetricsAccumulator:
    """Fold one sequence into counts for ``class_id``.

    ``gt_frames`` and ``pred_frames`` map frame index to
    :class:`FrameAnnotations` (missing frames are empty). Overlap checks
    cover all instances of a frame, whatever their class. An unmatched
    prediction counts as a false positive unless at least half of its area
    lies in the frame's ignore regions. An identity switch is counted when
    a ground-truth track is matched to a different predicted id than at
    its most recent earlier match.
    """
    acc = MetricsAccumulator()
    last_match: dict[int, int] = {}
    for f in sorted(set(gt_frames) | set(pred_frames)):
        gt = gt_frames.get(f) or FrameAnnotations(f)
        pr = pred_frames.get(f) or FrameAnnotations(f)
        gt_all = _decode_all(gt.instances, "ground-truth")
        pr_all = _decode_all(pr.instances, "predicted")
        g_idx = [k for k, inst in enumerate(gt.instances) if inst.class_id == class_id]
        p_idx = [k for k, inst in enumerate(pr.instances) if inst.class_id == class_id]
        iou = _pairwise_iou([gt_all[k] for k in g_idx], [pr_all[k] for k in p_idx])
        acc.gt_count += len(g_idx)
        matched_pred = set()
        for r, c in zip(*np.nonzero(iou > 0.5)):
            acc.tp += 1
            acc.soft_tp += float(iou[r, c])
            matched_pred.add(int(c))
            gt_id = gt.instances[g_idx[r]].track_id
            pr_id = pr.instances[p_idx[c]].track_id
            if gt_id in last_match and last_match[gt_id] != pr_id:
                acc.ids += 1
            last_match[gt_id] = pr_id
        unmatched = [c for c in range(len(p_idx)) if c not in matched_pred]
        if unmatched:
            ignore = _ignore_mask(gt, pr_all[p_idx[unmatched[0]]].shape) if gt.ignore_regions else None
            for c in unmatched:
                m = pr_all[p_idx[c]]
                area = np.count_nonzero(m)
                if ignore is not None and area and np.count_nonzero(m & ignore) >= 0.5 * area:
                    continue
                acc.fp += 1
    return acc


def scores(acc: MetricsAccumulator) -> MotsScores:
    if acc.gt_count <= 0:
        raise ValueError("no ground-truth masks: scores are undefined")
    m = acc.gt_count
    motsp = acc.soft_tp / acc.tp if acc.tp else 0.0
    return MotsScores(
        smotsa=(acc.soft_tp - acc.fp - acc.ids) / m,
        motsa=(acc.tp - acc.fp - acc.ids) / m,
        motsp=motsp,
    )


def evaluate(gt_dir, pred_dir, classes=(CAR, PEDESTRIAN)):
    """Score every ``<sequence>.txt`` of ``gt_dir`` against ``pred_dir``.

    A sequence without a prediction file counts as empty predictions.
    Returns ``(scores_by_class, accumulators_by_class)``; classes without
    ground truth are left out of the scores.
    """
    from .formats import FormatError, parse_kitti

    gt_dir, pred_dir = Path(gt_dir), Path(pred_dir)
    gt_files = sorted(gt_dir.glob("*.txt"))
    pred_names = {p.name for p in pred_dir.glob("*.txt")}
    stray = sorted(pred_names - {p.name for p in gt_files})
    if stray:
        raise FormatError(f"predictions for unknown sequences: {', '.join(stray)}")
    accs = {c: MetricsAccumulator() for c in classes}
    for gt_path in gt_files:
        gt_frames = parse_kitti(gt_path)
        pred_path = pred_dir / gt_path.name
        pred_frames = parse_kitti(pred_path) if pred_path.exists() else {}
        _check_alignment(gt_frames, pred_frames, gt_path.name)
        for c in classes:
            accs[c] += accumulate_sequence(gt_frames, pred_frames, c)
    results = {c: scores(a) for c, a in accs.items() if a.gt_count > 0}
    return results, accs


def _frame_shape(frame: FrameAnnotations):
    for inst in frame.instances:
        return inst.mask.height, inst.mask.width
    for region in frame.ignore_regions:
        return region.height, region.width
    return None


def _check_alignment(gt_frames, pred_frames, name):
    from .formats import FormatError

    for f, pr in pred_frames.items():
        if f not in gt_frames:
            continue
        a, b = _frame_shape(gt_frames[f]), _frame_shape(pr)
        if a and b and a != b:
            raise FormatError(f"{name}: frame {f} size {b} does not match ground truth {a}")


def format_table(results) -> str:
    """Aligned console table of per-class scores (percentages)."""
    lines = [f"{'class':<12}{'sMOTSA':>9}{'MOTSA':>9}{'MOTSP':>9}"]
    for c, s in sorted(results.items()):
        name = CLASS_NAMES.get(c, str(c))
        lines.append(f"{name:<12}{100 * s.smotsa:>9.2f}{100 * s.motsa:>9.2f}{100 * s.motsp:>9.2f}")
    return "\n".join(lines)
