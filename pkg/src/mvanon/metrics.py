"""Detection evaluation: precision, recall, AP, hard-case and holistic recall.

Face and eye levels are scored on fixed-size pseudo boxes centred on
keypoints, for ground truth and predictions alike.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Box2D, iou_matrix

LEVELS = ("whole_body", "face", "eye")
DEFAULT_IOU = {"whole_body": 0.5, "face": 0.3, "eye": 0.3}


@dataclass
class EvalConfig:
    level: str = "whole_body"
    iou_thresh: Optional[float] = None  # None -> 0.5 whole body, 0.3 face/eye
    pseudo_box_size: float = 40.0
    score_thresh: float = 0.1

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"level must be one of {LEVELS}")
        if self.iou_thresh is None:
            self.iou_thresh = DEFAULT_IOU[self.level]
        if not 0.0 < self.iou_thresh <= 1.0:
            raise ValueError("iou_thresh must lie in (0, 1]")
        if self.pseudo_box_size <= 0:
            raise ValueError("pseudo_box_size must be positive")


@dataclass
class EvalBox:
    """A box to score: image key (video, frame, camera), geometry, and either
    a prediction score or ground-truth attributes."""

    image: tuple
    box: tuple
    score: float = 1.0
    identity: Optional[int] = None
    hard: bool = False


@dataclass
class MatchResult:
    gt_match: list  # per GT: index of matched prediction or None
    pred_tp: list  # per prediction: True/False
    scores: list
    flags: list = field(default_factory=list)


def keypoint_pseudobox(kp, size: float = 40.0, image_size=None) -> Box2D:
    """size x size box centred on a keypoint, clipped to (width, height) if given."""
    u, v = float(kp[0]), float(kp[1])
    half = size / 2.0
    x1, y1, x2, y2 = u - half, v - half, u + half, v + half
    if image_size is not None:
        w, h = image_size
        x1, x2 = max(x1, 0.0), min(x2, float(w))
        y1, y2 = max(y1, 0.0), min(y2, float(h))
    return Box2D(x1, y1, x2, y2)


def match_predictions(preds: Sequence[EvalBox], gts: Sequence[EvalBox], iou_thresh: float) -> MatchResult:
    """Greedy one-to-one matching in descending score order, per image.

    Each prediction takes the unmatched ground truth of its image with the
    highest IoU, provided that IoU reaches ``iou_thresh``.
    """
    gt_by_image: dict = {}
    for k, g in enumerate(gts):
        gt_by_image.setdefault(g.image, []).append(k)
    gt_boxes = {img: np.array([gts[k].box for k in idx]) for img, idx in gt_by_image.items()}
    taken = {img: np.zeros(len(idx), dtype=bool) for img, idx in gt_by_image.items()}
    gt_match: list = [None] * len(gts)
    pred_tp = [False] * len(preds)
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].score, k))
    for k in order:
        p = preds[k]
        idx = gt_by_image.get(p.image)
        if not idx:
            continue
        ov = iou_matrix(p.box, gt_boxes[p.image])[0]
        ov[taken[p.image]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_thresh:
            taken[p.image][j] = True
            gt_match[idx[j]] = k
            pred_tp[k] = True
    return MatchResult(gt_match, pred_tp, [p.score for p in preds])


def average_precision(scores, tp, num_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if num_gt == 0:
        return 0.0 if len(scores) else 1.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _thresholded(preds, cfg):
    return [p for p in preds if p.score >= cfg.score_thresh]


def match_and_score(preds: Sequence[EvalBox], gts: Sequence[EvalBox], cfg: EvalConfig) -> dict:
    """P and R at the score threshold, AP over all predictions."""
    flags = []
    kept = _thresholded(preds, cfg)
    m = match_predictions(kept, gts, cfg.iou_thresh)
    tp = sum(m.pred_tp)
    if kept:
        precision = tp / len(kept)
    else:
        precision = 1.0
        flags.append("precision_empty_denominator")
    if gts:
        recall = sum(x is not None for x in m.gt_match) / len(gts)
    else:
        recall = 1.0
        flags.append("recall_empty_denominator")
    full = match_predictions(list(preds), gts, cfg.iou_thresh)
    ap = average_precision(full.scores, full.pred_tp, len(gts))
    return {"P": precision, "R": recall, "AP": ap, "flags": flags, "tp": tp,
            "num_pred": len(kept), "num_gt": len(gts)}


def hard_recall(preds: Sequence[EvalBox], gts: Sequence[EvalBox], cfg: EvalConfig):
    """Recall over ground truth flagged hard. Returns (value, flags)."""
    m = match_predictions(_thresholded(preds, cfg), gts, cfg.iou_thresh)
    hard = [k for k, g in enumerate(gts) if g.hard]
    if not hard:
        return 1.0, ["hard_recall_empty_denominator"]
    return sum(m.gt_match[k] is not None for k in hard) / len(hard), []


def holistic_recall(preds: Sequence[EvalBox], gts: Sequence[EvalBox], cfg: EvalConfig):
    """Share of (frame set, identity) pairs found in every view where visible.

    Returns (value, flags).
    """
    if any(g.identity is None for g in gts):
        raise ValueError("holistic recall needs identity labels on every ground-truth box")
    m = match_predictions(_thresholded(preds, cfg), gts, cfg.iou_thresh)
    full: dict = {}
    for k, g in enumerate(gts):
        key = (g.image[0], g.image[1], g.identity)
        full[key] = full.get(key, True) and m.gt_match[k] is not None
    if not full:
        return 1.0, ["holistic_recall_empty_denominator"]
    return sum(full.values()) / len(full), []


# ---------------------------------------------------------------- adapters


def gt_boxes(records, cfg: EvalConfig, image_sizes=None) -> list[EvalBox]:
    """Ground-truth records -> boxes at the configured level.

    Face boxes sit on the centroid of the eye and chin keypoints; eye level
    yields one box per eye. Records without keypoints are skipped for face
    and eye levels.
    """
    out = []
    for r in records:
        image = (r.video_id, r.frame, r.camera)
        size = None if image_sizes is None else image_sizes.get(r.camera)
        if cfg.level == "whole_body":
            out.append(EvalBox(image, r.box.as_tuple(), 1.0, r.identity, r.hard))
            continue
        if not r.keypoints:
            continue
        for pt in _level_points(r.keypoints, cfg.level):
            b = keypoint_pseudobox(pt, cfg.pseudo_box_size, size)
            out.append(EvalBox(image, b.as_tuple(), 1.0, r.identity, r.hard))
    return out


def pred_boxes(dets, cfg: EvalConfig, keypoints=None, image_sizes=None) -> list[EvalBox]:
    """Detections (or keypoint predictions) -> scored boxes at the configured level.

    ``keypoints`` maps a detection position to its predicted keypoint dict,
    or the detections themselves may carry a ``keypoints`` attribute.
    """
    out = []
    for k, d in enumerate(dets):
        image = (d.video_id, d.frame, d.camera)
        if cfg.level == "whole_body":
            out.append(EvalBox(image, d.box.as_tuple(), d.score))
            continue
        kps = keypoints[k] if keypoints is not None else getattr(d, "keypoints", None)
        if not kps:
            continue
        size = None if image_sizes is None else image_sizes.get(d.camera)
        for pt in _level_points(kps, cfg.level):
            b = keypoint_pseudobox(pt, cfg.pseudo_box_size, size)
            out.append(EvalBox(image, b.as_tuple(), d.score))
    return out


def _level_points(kps: dict, level: str):
    if level == "eye":
        return [kps[k] for k in ("left_eye", "right_eye") if k in kps]
    pts = np.array([kps[k] for k in ("left_eye", "right_eye", "chin") if k in kps], dtype=float)
    return [tuple(pts.mean(axis=0))] if len(pts) else []


def evaluate(preds: Sequence[EvalBox], gts: Sequence[EvalBox], cfg: EvalConfig,
             with_holistic: bool = True) -> "OrderedDict[str, object]":
    """Full report with a stable key order."""
    scored = match_and_score(preds, gts, cfg)
    r_hard, hard_flags = hard_recall(preds, gts, cfg)
    flags = list(scored["flags"]) + hard_flags
    hor = None
    if with_holistic:
        hor, hor_flags = holistic_recall(preds, gts, cfg)
        flags += hor_flags
    return OrderedDict([
        ("level", cfg.level),
        ("iou_thresh", cfg.iou_thresh),
        ("P", scored["P"]),
        ("R", scored["R"]),
        ("AP", scored["AP"]),
        ("hard_recall", r_hard),
        ("holistic_recall", hor),
        ("counts", OrderedDict([
            ("predictions", scored["num_pred"]),
            ("ground_truth", len(gts)),
            ("true_positives", scored["tp"]),
            ("hard_ground_truth", sum(g.hard for g in gts)),
        ])),
        ("flags", flags),
    ])
