"""Detection augmentation: tracking, cross-view retrieval, NMS merge, pseudo labels."""
from __future__ import annotations

import json
import logging
import shutil
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import formats, metrics
from .core import CameraMeta, Detection, hungarian, nms
from .mva import (
    AssocConfig,
    GeometricEncoder,
    TrainingData,
    checkpoint_bytes,
    load_checkpoint,
    train,
    unit_distance,
    unit_rows,
    normalized_corners,
)
from .tracker import TrackerConfig, run_bidirectional, tracked_detections

log = logging.getLogger(__name__)

TRACKED = "tracked"
CROSS_VIEW = "cross_view"


@dataclass
class RoundConfig:
    round_index: int = 1
    nms_thresh: float = 0.6
    assoc_accept_thresh: float = 0.3
    sampling_rate: float = 0.1  # pseudo-label frames per second
    num_rounds: int = 2

    def __post_init__(self):
        if not 0.0 <= self.assoc_accept_thresh <= 1.0:
            raise ValueError("assoc_accept_thresh must lie in [0, 1]")
        if self.sampling_rate <= 0:
            raise ValueError("sampling_rate must be positive")
        if not 0.0 < self.nms_thresh <= 1.0:
            raise ValueError("nms_thresh must lie in (0, 1]")


@dataclass
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    assoc: AssocConfig = field(default_factory=AssocConfig)
    round: RoundConfig = field(default_factory=RoundConfig)
    eval: metrics.EvalConfig = field(default_factory=metrics.EvalConfig)


@dataclass
class DetectionPool:
    """Per (frame, camera) detections above the low threshold, split by score."""

    all: dict
    high: dict
    low: dict

    @classmethod
    def build(cls, dets: Sequence[Detection], cfg: TrackerConfig) -> "DetectionPool":
        all_, high, low = {}, {}, {}
        for d in dets:
            if d.score <= cfg.low_thresh:
                continue
            key = (d.frame, d.camera)
            all_.setdefault(key, []).append(d)
            (high if d.score > cfg.high_thresh else low).setdefault(key, []).append(d)
        return cls(all_, high, low)

    def flat(self, which: str = "all") -> list[Detection]:
        table = getattr(self, which)
        return [d for k in sorted(table) for d in table[k]]


def track_all(dets: Sequence[Detection], cfg: TrackerConfig) -> list:
    """Bidirectional tracking per camera with globally unique track ids."""
    by_cam: dict[int, list[Detection]] = {}
    for d in dets:
        if d.score > cfg.low_thresh:
            by_cam.setdefault(d.camera, []).append(d)
    tracklets = []
    next_id = 0
    for cam in sorted(by_cam):
        ts = run_bidirectional(by_cam[cam], cfg, start_id=next_id)
        next_id += len(ts)
        tracklets.extend(ts)
    return tracklets


class _FeatureCache:
    """Geometric features and unit appearance rows for one view's detections."""

    def __init__(self, dets, enc, cameras, need_app):
        self.dets = list(dets)
        if self.dets:
            feat, _ = enc.forward(normalized_corners(self.dets, cameras), [d.camera for d in self.dets])
            self.geo = unit_rows(feat.astype(np.float64))
        else:
            self.geo = np.zeros((0, enc.feature_dim))
        self.app = None
        if need_app:
            if any(d.embedding is None for d in self.dets):
                raise ValueError("appearance embeddings are required when alpha > 0")
            self.app = unit_rows(np.array([d.embedding for d in self.dets], dtype=np.float64)) if self.dets else None


def associate_views(
    tracked: Mapping[int, Sequence[Detection]],
    all_dets: Mapping[int, Sequence[Detection]],
    enc: GeometricEncoder,
    alpha: float,
    tau: float,
    cameras: Mapping[int, CameraMeta],
) -> dict[int, list[Detection]]:
    """Cross-view retrieval for one frame.

    Tracked boxes of each view query the full detection set of every other
    view. Hungarian-matched pairs within ``tau`` are accepted; a gallery box
    claimed by several queries keeps its closest one. Returned boxes are the
    original gallery detections relabelled with the query's track id.
    """
    views = sorted(set(tracked) | set(all_dets))
    if not any(tracked.get(v) for v in views):
        return {v: [] for v in views}
    need_app = alpha > 0
    q_cache = {v: _FeatureCache(tracked.get(v, []), enc, cameras, need_app) for v in views}
    g_cache = {v: _FeatureCache(all_dets.get(v, []), enc, cameras, need_app) for v in views}
    best: dict[tuple, tuple] = {}  # (view, gallery idx) -> (distance, query det)
    for i in views:
        q = q_cache[i]
        if not q.dets:
            continue
        for j in views:
            g = g_cache[j]
            if j == i or not g.dets:
                continue
            E = (1.0 - alpha) * unit_distance(q.geo, g.geo) if alpha < 1 else 0.0
            if need_app:
                E = E + alpha * unit_distance(q.app, g.app)
            res = hungarian(E)
            for r, c in res.pairs():
                dist = float(E[r, c])
                if dist > tau:
                    continue
                cur = best.get((j, c))
                if cur is None or dist < cur[0]:
                    best[(j, c)] = (dist, q.dets[r])
    out: dict[int, list[Detection]] = {v: [] for v in views}
    for (j, c), (_, query) in sorted(best.items()):
        src = g_cache[j].dets[c]
        out[j].append(src.with_(track_id=query.track_id, provenance=CROSS_VIEW))
    return out


def augment_merge(tracked: Sequence[Detection], cross: Sequence[Detection], nms_thresh: float) -> list[Detection]:
    """NMS over tracked then cross-view boxes of one view; tracked win equal scores."""
    pool = [d.with_(provenance=TRACKED) for d in tracked] + [
        d if d.provenance == CROSS_VIEW else d.with_(provenance=CROSS_VIEW) for d in cross
    ]
    return nms(pool, nms_thresh)


def augment_stream(
    pool: DetectionPool,
    tracked: Sequence[Detection],
    enc: Optional[GeometricEncoder],
    cameras: Mapping[int, CameraMeta],
    alpha: float,
    round_cfg: RoundConfig,
) -> list[Detection]:
    """The augmented set for every frame, sorted (video, frame, camera, x1)."""
    tracked_by: dict[tuple, list[Detection]] = {}
    for d in tracked:
        tracked_by.setdefault((d.frame, d.camera), []).append(d)
    frames = sorted({k[0] for k in pool.all} | {k[0] for k in tracked_by})
    view_ids = sorted(cameras)
    out = []
    for t in frames:
        t_views = {v: tracked_by.get((t, v), []) for v in view_ids}
        if enc is not None:
            d_views = {v: pool.all.get((t, v), []) for v in view_ids}
            cross = associate_views(t_views, d_views, enc, alpha, round_cfg.assoc_accept_thresh, cameras)
        else:
            cross = {v: [] for v in view_ids}
        for v in view_ids:
            out.extend(augment_merge(t_views[v], cross.get(v, []), round_cfg.nms_thresh))
    out.sort(key=_emit_order)
    return out


def _emit_order(d: Detection):
    return (d.video_id, d.frame, d.camera, d.box.x1, d.box.y1, d.box.x2, d.box.y2, -d.score)


def sampling_stride(fps: float, rate: float) -> int:
    return max(1, int(round(fps / rate)))


def emit_pseudo_labels(
    augmented: Sequence[Detection],
    round_cfg: RoundConfig,
    out_path,
    fps: float,
    embedding_dim: int = 0,
    cameras_ref: str = "cameras.json",
) -> int:
    """Write the sampled augmented boxes as pseudo labels; returns the record count."""
    stride = sampling_stride(fps, round_cfg.sampling_rate)
    kept = sorted((d for d in augmented if d.frame % stride == 0), key=_emit_order)
    header = formats.stream_header(
        embedding_dim, fps, cameras_ref, round=round_cfg.round_index,
        sampling_rate=round_cfg.sampling_rate, frame_stride=stride,
    )
    formats.write_detections(out_path, kept, header, round_index=round_cfg.round_index)
    return len(kept)


def _embedding_dim(dets: Sequence[Detection]) -> int:
    for d in dets:
        if d.embedding is not None:
            return int(np.asarray(d.embedding).shape[0])
    return 0


@dataclass
class RoundArtifacts:
    directory: Path
    tracklets: list
    encoder: Optional[GeometricEncoder]
    augmented: list
    report: dict


def build_report(
    pool: DetectionPool,
    tracked: Sequence[Detection],
    augmented: Sequence[Detection],
    gt=None,
    eval_cfg: Optional[metrics.EvalConfig] = None,
) -> "OrderedDict[str, object]":
    report = OrderedDict([
        ("counts", OrderedDict([
            ("pool", sum(len(v) for v in pool.all.values())),
            ("high", sum(len(v) for v in pool.high.values())),
            ("low", sum(len(v) for v in pool.low.values())),
            ("tracked", len(tracked)),
            ("augmented", len(augmented)),
            ("cross_view", sum(d.provenance == CROSS_VIEW for d in augmented)),
        ])),
    ])
    if gt is not None:
        cfg = eval_cfg or metrics.EvalConfig()
        gts = metrics.gt_boxes(gt, cfg)
        evals = OrderedDict()
        for name, dets in (("high", pool.flat("high")), ("tracked", tracked), ("augmented", augmented)):
            evals[name] = metrics.evaluate(metrics.pred_boxes(dets, cfg), gts, cfg)
        report["metrics"] = evals
    return report


def run_round(
    detections,
    cameras: Mapping[int, CameraMeta],
    cfg: PipelineConfig,
    out_root,
    encoder_ckpt=None,
    gt=None,
    fps: Optional[float] = None,
) -> RoundArtifacts:
    """One full round written to ``out_root/round_<k>/``.

    ``detections`` is a path to a detection stream or a list of detections.
    Outputs are assembled in a scratch directory and moved into place only
    when every step succeeded.
    """
    header = None
    if isinstance(detections, (str, Path)):
        header, detections = formats.read_detections(detections)
    detections = list(detections)
    if fps is None:
        fps = float(header["fps"]) if header else next(iter(cameras.values())).fps
    k = cfg.round.round_index
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    final = out_root / f"round_{k}"
    scratch = Path(tempfile.mkdtemp(prefix=f".round_{k}.", dir=out_root))
    try:
        pool = DetectionPool.build(detections, cfg.tracker)
        tracklets = track_all(detections, cfg.tracker)
        tracked = tracked_detections(tracklets)
        dim = _embedding_dim(detections)
        hdr = formats.stream_header(dim, fps)
        formats.write_detections(scratch / "tracklets.jsonl", tracked, hdr)

        if encoder_ckpt is not None:
            enc, opt = load_checkpoint(encoder_ckpt)
        else:
            data = TrainingData.build(detections, tracked, cameras, cfg.tracker.low_thresh)
            result = train(data, cfg.assoc, log=lambda e, l: log.info("epoch %d %s", e, l))
            enc, opt = result.encoder, result.optimizer
        (scratch / "encoder.ckpt").write_bytes(checkpoint_bytes(enc, opt))

        augmented = augment_stream(pool, tracked, enc, cameras, cfg.assoc.alpha, cfg.round)
        formats.write_detections(scratch / "augmented.jsonl", augmented, hdr)
        emit_pseudo_labels(augmented, cfg.round, scratch / "pseudo_labels.jsonl", fps, dim)
        report = build_report(pool, tracked, augmented, gt, cfg.eval)
        report["round"] = k
        formats.atomic_write_bytes(scratch / "report.json", (json.dumps(report, indent=2) + "\n").encode())
        if final.exists():
            shutil.rmtree(final)
        scratch.rename(final)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    return RoundArtifacts(final, tracklets, enc, augmented, report)
