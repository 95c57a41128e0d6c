"""Weakly supervised multi-object tracking and segmentation: losses, tracking, metrics."""

from .crf import AffinityParams, BilateralLattice, affinity_apply_dense, affinity_apply_fast, batch_crf_loss, crf_loss
from .formats import (FormatError, parse_kitti, read_blob, read_detections, write_blob, write_detections,
                      write_kitti)
from .gradcam import GradCAM, gradcam, normalize_minmax
from .masks import (CRF_SIZE, ROI_SIZE, BBox, RleError, RleMask, bbox_iou, crop_and_rasterize, mask_iou,
                    resize_bilinear, rle_decode, rle_encode)
from .metrics import (FrameAnnotations, Instance, MetricsAccumulator, MotsScores, accumulate_sequence, evaluate,
                      match_frame, scores)
from .tracking import (Tracker, TrackerConfig, TrackObservation, associate, cosine_distance, cosine_similarity,
                       mask_pool, run_tracker, triplet_loss)
from .weak_labels import VOID, PseudoLabeler, WeakLabelConfig, batch_loc_loss, loc_loss, make_pseudo_label

__version__ = "0.1.0"
