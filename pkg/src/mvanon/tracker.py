"""Per-view two-stage (BYTE) tracking over high- and low-score detections.

Every camera is tracked independently. A frame's detections are split by
score; live tracklets are first matched to the high-score boxes and the
leftovers get a second chance against the low-score boxes, which is how
occluded people with weak detector responses are recovered.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import Box2D, Detection, boxes_array, hungarian, iou_matrix


class TrackStatus(str, enum.Enum):
    ACTIVE = "active"
    LOST = "lost"
    REMOVED = "removed"


@dataclass
class KalmanState:
    """Mean over (cx, cy, aspect, height, vcx, vcy, vaspect, vheight), pixels/frame."""

    mean: np.ndarray
    covariance: np.ndarray

    def to_box(self) -> Box2D:
        cx, cy, a, h = self.mean[:4]
        h = max(float(h), 1e-6)
        w = max(float(a) * h, 1e-6)
        return Box2D(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class KalmanFilter:
    """Constant-velocity filter with height-proportional noise."""

    std_weight_position: float = 1.0 / 20
    std_weight_velocity: float = 1.0 / 160
    measurement_noise_scale: float = 1.0

    @staticmethod
    def measurement(box: Box2D) -> np.ndarray:
        w = box.x2 - box.x1
        h = box.y2 - box.y1
        return np.array([box.x1 + w / 2, box.y1 + h / 2, w / h, h])

    def initiate(self, box: Box2D) -> KalmanState:
        z = self.measurement(box)
        h = z[3]
        sp, sv = self.std_weight_position, self.std_weight_velocity
        std = np.array([2 * sp * h, 2 * sp * h, 1e-2, 2 * sp * h,
                        10 * sv * h, 10 * sv * h, 1e-5, 10 * sv * h])
        return KalmanState(np.r_[z, np.zeros(4)], np.diag(std**2))

    def process_noise(self, h: float) -> np.ndarray:
        sp, sv = self.std_weight_position, self.std_weight_velocity
        std = np.array([sp * h, sp * h, 1e-2, sp * h, sv * h, sv * h, 1e-5, sv * h])
        return np.diag(std**2)

    def measurement_noise(self, h: float) -> np.ndarray:
        sp = self.std_weight_position
        std = np.array([sp * h, sp * h, 1e-1, sp * h])
        return np.diag(std**2) * self.measurement_noise_scale

    def predict(self, s: KalmanState) -> KalmanState:
        mean = _F @ s.mean
        cov = _F @ s.covariance @ _F.T + self.process_noise(abs(s.mean[3]))
        return KalmanState(mean, 0.5 * (cov + cov.T))

    def update(self, s: KalmanState, obs: Box2D) -> KalmanState:
        z = self.measurement(obs)
        R = self.measurement_noise(abs(s.mean[3]))
        P = s.covariance
        S = _H @ P @ _H.T + R
        gain = np.linalg.solve(S, _H @ P).T
        mean = s.mean + gain @ (z - _H @ s.mean)
        # Joseph form keeps the covariance symmetric PSD.
        A = np.eye(8) - gain @ _H
        cov = A @ P @ A.T + gain @ R @ gain.T
        return KalmanState(mean, 0.5 * (cov + cov.T))


_F = np.eye(8)
_F[:4, 4:] = np.eye(4)
_H = np.eye(4, 8)

DEFAULT_KF = KalmanFilter()


def kalman_predict(s: KalmanState, kf: KalmanFilter = DEFAULT_KF) -> KalmanState:
    return kf.predict(s)


def kalman_update(s: KalmanState, obs: Box2D, kf: KalmanFilter = DEFAULT_KF) -> KalmanState:
    return kf.update(s, obs)


@dataclass
class TrackerConfig:
    high_thresh: float = 0.6
    low_thresh: float = 0.1
    match_iou_first: float = 0.8
    match_iou_second: float = 0.5
    max_lost_age: int = 30
    new_track_min_score: float = 0.6
    bidirectional: bool = True
    dedup_iou: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.low_thresh < self.high_thresh <= 1.0:
            raise ValueError("need 0 <= low_thresh < high_thresh <= 1")
        if self.max_lost_age < 1:
            raise ValueError("max_lost_age must be >= 1")


@dataclass
class Tracklet:
    track_id: int
    state: KalmanState
    history: list = field(default_factory=list)  # (frame, Detection)
    status: TrackStatus = TrackStatus.ACTIVE
    frames_since_update: int = 0

    @property
    def camera(self) -> int:
        return self.history[0][1].camera

    @property
    def last_frame(self) -> int:
        return self.history[-1][0]

    def detections(self) -> list[Detection]:
        return [d.with_(track_id=self.track_id) for _, d in self.history]


def _gated_assignment(cost: np.ndarray, thresh: float):
    if cost.size == 0:
        return []
    gated = np.where(cost > thresh, 1e6, cost)
    res = hungarian(gated)
    return [(r, c) for r, c in res.pairs() if cost[r, c] <= thresh]


def byte_step(
    tracklets: list[Tracklet],
    frame_dets: Sequence[Detection],
    cfg: TrackerConfig,
    frame: Optional[int] = None,
    kf: KalmanFilter = DEFAULT_KF,
) -> list[Tracklet]:
    """Advance all tracklets of one camera by one frame.

    ``tracklets`` is the full list ever created for this camera (removed ones
    included, so new ids stay unique as ``len(tracklets)`` offsets).
    Returns a new list; input tracklets are not mutated.
    """
    cams = {d.camera for d in frame_dets} | {t.camera for t in tracklets if t.history}
    if len(cams) > 1:
        raise ValueError(f"byte_step got detections from several cameras: {sorted(cams)}")
    if frame is None:
        frames = {d.frame for d in frame_dets}
        if len(frames) > 1:
            raise ValueError("byte_step got detections from several frames")
        frame = frames.pop() if frames else (max((t.last_frame for t in tracklets), default=-1) + 1)

    out = [
        Tracklet(t.track_id, t.state, list(t.history), t.status, t.frames_since_update)
        for t in tracklets
    ]
    live = [t for t in out if t.status != TrackStatus.REMOVED]
    for t in live:
        t.state = kf.predict(t.state)

    dets = [d for d in frame_dets if d.score > cfg.low_thresh]
    high = [d for d in dets if d.score > cfg.high_thresh]
    low = [d for d in dets if d.score <= cfg.high_thresh]

    def match(pool, cand, thresh):
        if not pool or not cand:
            return [], list(range(len(pool))), list(range(len(cand)))
        pred = np.array([t.state.to_box().as_tuple() for t in pool])
        cost = 1.0 - iou_matrix(pred, boxes_array(cand))
        pairs = _gated_assignment(cost, thresh)
        used_r = {r for r, _ in pairs}
        used_c = {c for _, c in pairs}
        return (
            pairs,
            [i for i in range(len(pool)) if i not in used_r],
            [j for j in range(len(cand)) if j not in used_c],
        )

    def commit(t: Tracklet, d: Detection):
        t.state = kf.update(t.state, d.box)
        t.history.append((frame, d))
        t.status = TrackStatus.ACTIVE
        t.frames_since_update = 0

    pairs, rest, unmatched_high = match(live, high, cfg.match_iou_first)
    for r, c in pairs:
        commit(live[r], high[c])
    pool2 = [live[i] for i in rest]
    pairs2, rest2, _ = match(pool2, low, cfg.match_iou_second)
    for r, c in pairs2:
        commit(pool2[r], low[c])
    for i in rest2:
        t = pool2[i]
        t.frames_since_update += 1
        t.status = TrackStatus.REMOVED if t.frames_since_update >= cfg.max_lost_age else TrackStatus.LOST

    for j in unmatched_high:
        d = high[j]
        if d.score <= cfg.new_track_min_score:
            continue
        out.append(Tracklet(len(out), kf.initiate(d.box), [(frame, d)]))
    return out


def run_tracker(
    dets: Iterable[Detection],
    cfg: TrackerConfig,
    reverse: bool = False,
    kf: KalmanFilter = DEFAULT_KF,
) -> list[Tracklet]:
    """Track one camera's stream in forward (or reverse) frame order."""
    by_frame: dict[int, list[Detection]] = {}
    for d in dets:
        by_frame.setdefault(d.frame, []).append(d)
    if not by_frame:
        return []
    frames = range(min(by_frame), max(by_frame) + 1)
    if reverse:
        frames = reversed(frames)
    tracklets: list[Tracklet] = []
    for f in frames:
        tracklets = byte_step(tracklets, by_frame.get(f, []), cfg, frame=f, kf=kf)
    return [t for t in tracklets if t.history]


def run_bidirectional(
    dets: Sequence[Detection],
    cfg: TrackerConfig,
    start_id: int = 0,
    kf: KalmanFilter = DEFAULT_KF,
) -> list[Tracklet]:
    """Forward and backward tracking merged into one tracklet set.

    Forward boxes are always kept. A backward-only box is added unless it
    overlaps an already kept box of the same frame by IoU > ``cfg.dedup_iou``
    (backward extras are considered in descending score order). Extras join
    the forward tracklet their backward tracklet shares most boxes with, or
    form a new tracklet. Ids are renumbered from ``start_id`` in order of
    first appearance.
    """
    dets = list(dets)
    index = {id(d): k for k, d in enumerate(dets)}
    forward = run_tracker(dets, cfg, kf=kf)
    if not cfg.bidirectional:
        return _renumber(forward, start_id)
    backward = run_tracker(dets, cfg, reverse=True, kf=kf)

    owner = {}  # det index -> forward tracklet position
    kept: dict[int, list[int]] = {}  # frame -> det indices kept
    for pos, t in enumerate(forward):
        for f, d in t.history:
            owner[index[id(d)]] = pos
            kept.setdefault(f, []).append(index[id(d)])

    extras = []
    for bpos, t in enumerate(backward):
        for f, d in t.history:
            k = index[id(d)]
            if k not in owner:
                extras.append((-d.score, f, k, bpos))
    extras.sort()
    accepted: dict[int, list[tuple[int, int]]] = {}
    for _, f, k, bpos in extras:
        others = kept.get(f, [])
        if others:
            ov = iou_matrix(dets[k].box.as_tuple(), boxes_array([dets[o] for o in others]))
            if ov.max() > cfg.dedup_iou:
                continue
        kept.setdefault(f, []).append(k)
        accepted.setdefault(bpos, []).append((f, k))

    merged = [
        Tracklet(t.track_id, t.state, list(t.history), t.status, t.frames_since_update)
        for t in forward
    ]
    for bpos in sorted(accepted):
        t = backward[bpos]
        votes: dict[int, int] = {}
        for _, d in t.history:
            pos = owner.get(index[id(d)])
            if pos is not None:
                votes[pos] = votes.get(pos, 0) + 1
        items = sorted(accepted[bpos])
        target = None
        if votes:
            best = min(votes, key=lambda p: (-votes[p], p))
            taken = {f for f, _ in merged[best].history}
            if not any(f in taken for f, _ in items):
                target = merged[best]
        if target is None:
            target = Tracklet(-1, t.state, [], t.status, t.frames_since_update)
            merged.append(target)
        target.history.extend((f, dets[k]) for f, k in items)
        target.history.sort(key=lambda e: e[0])
    return _renumber(merged, start_id)


def _renumber(tracklets: list[Tracklet], start_id: int) -> list[Tracklet]:
    ordered = sorted(
        (t for t in tracklets if t.history),
        key=lambda t: (t.history[0][0], t.history[0][1].box.x1, t.history[0][1].box.y1),
    )
    for k, t in enumerate(ordered):
        t.track_id = start_id + k
    return ordered


def tracked_detections(tracklets: Sequence[Tracklet]) -> list[Detection]:
    """Flatten tracklets into detections carrying their track id (the tracked set)."""
    out = []
    for t in tracklets:
        out.extend(t.detections())
    out.sort(key=lambda d: (d.frame, d.camera, d.box.x1, d.box.y1, d.track_id))
    return out
