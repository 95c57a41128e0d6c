"""Command-line entry point: ``wsmots {eval,track,losses,gradcheck,synth}``.

Exit codes: 0 success, 1 a check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .crf import AffinityParams, crf_loss
from .formats import (FormatError, atomic_write, format_kitti, read_blob, read_detections,
                      write_blob, write_detections)
from .gradcam import gradcam
from .masks import BBox, RleError, resize_bilinear
from .metrics import FrameAnnotations, Instance, OverlapError, evaluate, format_table
from .synth import SynthConfig, generate
from .tracking import TrackerConfig, run_tracker, triplet_loss
from .weak_labels import WeakLabelConfig, loc_loss, make_pseudo_label

log = logging.getLogger("wsmots")

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2

# training defaults, overridable through --config
DEFAULTS = {
    "embedding_dim": 8,
    "margin": 0.2,
    "lambda_crf": 2e-7,
    "lambda": 1.0,
    "mu_a": 0.5,
    "window": 10,
    "det_threshold": 0.9,
    "sigma_xy": 10.0,
    "sigma_rgb": 0.1,
}


class InputError(Exception):
    pass


def load_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise InputError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = type(DEFAULTS[key])(float(value)) if isinstance(DEFAULTS[key], int) else float(value)
        except ValueError:
            raise InputError(f"{path}:{lineno}: bad value for {key}") from None
    return values


def _settings(args):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


# -- eval --------------------------------------------------------------------------

def cmd_eval(args):
    for d in (args.gt, args.pred):
        if not Path(d).is_dir():
            raise InputError(f"not a directory: {d}")
    results, accs = evaluate(args.gt, args.pred)
    print(format_table(results))
    if args.json:
        payload = {
            str(c): {**asdict(results[c]), **asdict(accs[c])} for c in results
        }
        with atomic_write(args.json) as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if args.txt:
        with atomic_write(args.txt) as fh:
            for c in sorted(results):
                s, a = results[c], accs[c]
                for key, val in {**asdict(s), **asdict(a)}.items():
                    fh.write(f"class{c}.{key} {val}\n")
    return EXIT_OK


# -- track -------------------------------------------------------------------------

def _group_frames(detections):
    if not detections:
        return []
    last = max(d.frame for d in detections)
    frames = [[] for _ in range(last + 1)]
    for d in detections:
        frames[d.frame].append(d)
    return frames


def _tracked_to_kitti(tracked):
    frames = {}
    for obs in (o for f in tracked for o in f):
        if obs.mask is None:
            raise InputError(f"frame {obs.frame}: detection without mask cannot be written as KITTI MOTS")
        if obs.identity >= 1000:
            raise InputError("more than 999 tracks do not fit the KITTI MOTS object id scheme")
        fa = frames.setdefault(obs.frame, FrameAnnotations(obs.frame))
        fa.instances.append(Instance(obs.class_id * 1000 + obs.identity, obs.class_id, obs.mask))
    return frames


def write_overlays(frames, out_dir, shape):
    """One PNG per frame with masks tinted by track id."""
    from PIL import Image

    from .masks import rle_decode

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = np.random.default_rng(0).integers(64, 256, (1000, 3), dtype=np.uint8)
    for f, fa in sorted(frames.items()):
        img = np.zeros(shape + (3,), dtype=np.uint8)
        for inst in fa.instances:
            img[rle_decode(inst.mask)] = palette[inst.track_id % 1000]
        Image.fromarray(img).save(out_dir / f"{f:06d}.png")


def cmd_track(args):
    cfg = _settings(args)
    detections = read_detections(args.detections)
    tracker_cfg = TrackerConfig(window=int(cfg["window"]), det_threshold=cfg["det_threshold"])
    tracked = run_tracker(_group_frames(detections), tracker_cfg)
    kitti = _tracked_to_kitti(tracked) if (args.kitti or args.overlay) else None
    buf = io.StringIO()
    write_detections([o for f in tracked for o in f], buf)
    with atomic_write(args.out) as fh:
        fh.write(buf.getvalue())
    if args.kitti:
        with atomic_write(args.kitti) as fh:
            fh.write(format_kitti(kitti))
    if args.overlay and kitti:
        first = next(iter(kitti.values())).instances[0].mask
        write_overlays(kitti, args.overlay, (first.height, first.width))
    n_tracks = len({o.identity for f in tracked for o in f})
    print(f"{sum(map(len, tracked))} detections kept, {n_tracks} tracks")
    return EXIT_OK


# -- losses ------------------------------------------------------------------------

@dataclass
class LossBundle:
    l_loc: float
    l_crf: float
    l_t: float
    lambda_crf: float
    lam: float = 1.0

    @property
    def mask_loss(self) -> float:
        return self.l_loc + self.lambda_crf * self.l_crf

    @property
    def total(self) -> float:
        # only the in-scope terms: the tracking loss plus the mask part of the head loss
        return self.l_t + self.lam * self.mask_loss

    def as_dict(self):
        return {"l_loc": self.l_loc, "l_crf": self.l_crf, "l_t": self.l_t,
                "lambda_crf": self.lambda_crf, "lambda": self.lam,
                "mask_loss": self.mask_loss, "total": self.total}


def _optional_blob(batch, name):
    path = batch / f"{name}.motk"
    return read_blob(path).astype(np.float64) if path.exists() else None


def compute_losses(batch, cfg, variant="absolute", method="fast"):
    """Evaluate the three losses on a batch directory of tensor blobs.

    Returns the bundle and a dict of gradient arrays.
    """
    batch = Path(batch)
    if not batch.is_dir():
        raise InputError(f"not a directory: {batch}")
    grads = {}
    preds = _optional_blob(batch, "pred_masks")
    heatmaps = _optional_blob(batch, "heatmaps")
    if heatmaps is None:
        acts, gr = _optional_blob(batch, "activations"), _optional_blob(batch, "gradients")
        if acts is not None and gr is not None:
            if acts.ndim != 4 or acts.shape != gr.shape:
                raise InputError("activations and gradients must share shape (R, K, H, W)")
            heatmaps = np.stack([gradcam(a, g, variant) for a, g in zip(acts, gr)])
    l_loc = 0.0
    if preds is not None:
        if preds.ndim != 3:
            raise InputError("pred_masks must have shape (R, S, S)")
        if np.any((preds < 0) | (preds > 1)):
            raise InputError("pred_masks must lie in [0, 1]")
        if heatmaps is not None:
            if heatmaps.shape != preds.shape:
                raise InputError(f"heatmaps {heatmaps.shape} do not match pred_masks {preds.shape}")
            labels = _pseudo_labels(batch, heatmaps, cfg)
            per = [loc_loss(y, s) for y, s in zip(labels, preds)]
            if per:
                l_loc = float(np.mean([p[0] for p in per]))
                grads["loc_grad"] = np.stack([p[1] for p in per]) / len(per)

    l_crf = 0.0
    images = _optional_blob(batch, "images")
    if images is not None:
        if preds is None:
            raise InputError("images.motk needs pred_masks.motk")
        if images.ndim != 4 or images.shape[-1] != 3 or len(images) != len(preds):
            raise InputError("images must have shape (R, H, W, 3) with one image per mask")
        params = AffinityParams(sigma_xy=cfg["sigma_xy"], sigma_rgb=cfg["sigma_rgb"])
        per = []
        for img, s in zip(images, preds):
            fg = resize_bilinear(s, img.shape[0], img.shape[1])
            per.append(crf_loss(np.clip(img, 0, 1), np.stack([fg, 1.0 - fg]), params, method))
        if per:
            l_crf = float(np.mean([p[0] for p in per]))
            grads["crf_grad"] = np.stack([p[1] for p in per]) / len(per)

    l_t = 0.0
    emb, ids = _optional_blob(batch, "embeddings"), _optional_blob(batch, "ids")
    if emb is not None:
        if ids is None or emb.ndim != 2 or len(ids) != len(emb):
            raise InputError("embeddings.motk (N, D) needs ids.motk (N,)")
        l_t, grads["triplet_grad"] = triplet_loss(emb, ids.astype(np.int64), cfg["margin"])
    return LossBundle(l_loc, l_crf, l_t, cfg["lambda_crf"], cfg["lambda"]), grads


def _pseudo_labels(batch, heatmaps, cfg):
    rois = _optional_blob(batch, "roi_boxes")
    gts = _optional_blob(batch, "gt_boxes")
    matches = _optional_blob(batch, "matches")
    wcfg = WeakLabelConfig(mu_a=cfg["mu_a"])
    size = heatmaps.shape[-1]
    labels = []
    for r, hm in enumerate(heatmaps):
        if rois is None:
            # without boxes the ROI is its own matched ground-truth box
            box = BBox(0.0, 0.0, float(size), float(size))
            labels.append(make_pseudo_label(hm, box, [box], wcfg))
            continue
        if gts is None:
            raise InputError("roi_boxes.motk needs gt_boxes.motk")
        m = int(matches[r]) if matches is not None else r
        labels.append(make_pseudo_label(hm, BBox.from_list(rois[r]), [BBox.from_list(b) for b in gts], wcfg, match=m))
    return labels


def cmd_losses(args):
    cfg = _settings(args)
    bundle, grads = compute_losses(args.batch, cfg, args.variant, args.crf_method)
    print(json.dumps(bundle.as_dict(), indent=2))
    if args.grads:
        out = Path(args.grads)
        out.mkdir(parents=True, exist_ok=True)
        for name, g in grads.items():
            write_blob(g, out / f"{name}.motk")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------

def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    results = run_gradcheck(args.seed, args.trials, corrupt=args.inject_error)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<16} max rel err {r.max_error:.3e}  tol {r.tolerance:.0e}  {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# -- synth -------------------------------------------------------------------------

def _triples(values, n, flag):
    out = []
    for v in values or ():
        parts = v.split(":")
        if len(parts) != n:
            raise InputError(f"{flag} expects {n} colon-separated integers, got {v!r}")
        try:
            out.append(tuple(int(p) for p in parts))
        except ValueError:
            raise InputError(f"{flag}: non-integer in {v!r}") from None
    return tuple(out)


def cmd_synth(args):
    cfg = _settings(args)
    try:
        scfg = SynthConfig(
            frames=args.frames, objects=args.objects, height=args.height, width=args.width,
            motion=args.motion, seed=args.seed, occlusion=args.occlusion,
            box_jitter=args.box_jitter, embedding_noise=args.embedding_noise,
            erosion=args.erosion, distractors=args.distractors,
            embedding_dim=int(cfg["embedding_dim"]),
            disappear=_triples(args.disappear, 3, "--disappear"),
            id_switch=_triples(args.id_switch, 2, "--id-switch"),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    seq = generate(scfg)
    out = Path(args.out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    name = f"{args.sequence:04d}"
    with atomic_write(out / "gt" / f"{name}.txt") as fh:
        fh.write(format_kitti(seq.ground_truth))
    with atomic_write(out / f"{name}.jsonl") as fh:
        write_detections([d for f in seq.detections for d in f], fh)
    print(f"wrote {out / 'gt' / (name + '.txt')} and {out / (name + '.jsonl')}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="wsmots", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", help="score KITTI MOTS predictions")
    e.add_argument("--gt", required=True)
    e.add_argument("--pred", required=True)
    e.add_argument("--json", help="write scores and counts as JSON")
    e.add_argument("--txt", help="write scores and counts as flat key/value text")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("track", help="assign track ids to a detections file")
    t.add_argument("--detections", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--window", type=int)
    t.add_argument("--det-thresh", dest="det_threshold", type=float)
    t.add_argument("--kitti", help="also write tracked masks as a KITTI MOTS file")
    t.add_argument("--overlay", help="write per-frame PNGs of tracked masks to this directory")
    t.add_argument("--config")
    t.set_defaults(func=cmd_track)

    lo = sub.add_parser("losses", help="evaluate the losses on a batch of tensor blobs")
    lo.add_argument("--batch", required=True)
    lo.add_argument("--mu-a", dest="mu_a", type=float)
    lo.add_argument("--lambda-crf", dest="lambda_crf", type=float)
    lo.add_argument("--lambda", dest="lambda", type=float)
    lo.add_argument("--margin", type=float)
    lo.add_argument("--sigma-xy", dest="sigma_xy", type=float)
    lo.add_argument("--sigma-rgb", dest="sigma_rgb", type=float)
    lo.add_argument("--variant", choices=("original", "absolute"), default="absolute")
    lo.add_argument("--crf-method", choices=("dense", "fast"), default="fast")
    lo.add_argument("--grads", help="directory for gradient blobs")
    lo.add_argument("--config")
    lo.set_defaults(func=cmd_losses)

    g = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=10)
    g.add_argument("--inject-error", action="store_true", help="perturb the analytic gradients")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--objects", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--motion", type=float, default=3.0)
    s.add_argument("--occlusion", type=float, default=0.0)
    s.add_argument("--box-jitter", type=float, default=0.0)
    s.add_argument("--embedding-noise", type=float, default=0.0)
    s.add_argument("--erosion", type=int, default=0)
    s.add_argument("--distractors", type=int, default=0)
    s.add_argument("--sequence", type=int, default=0)
    s.add_argument("--disappear", action="append", metavar="OBJ:START:LEN")
    s.add_argument("--id-switch", action="append", metavar="OBJ:FRAME")
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FormatError, OverlapError, RleError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
