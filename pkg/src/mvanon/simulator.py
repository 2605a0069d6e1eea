"""Synthetic multi-camera scene with ground truth and a corrupted detector.

People are upright 3-D boxes walking between random waypoints on a floor
plan, watched by pinhole cameras. Projected boxes become ground truth; a
corruption model turns them into detector outputs whose confidence drops
with occlusion, mimicking a detector that misses partially hidden people.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Box2D, CameraMeta, Detection, nms

HARD_OCCLUSION = 0.67


@dataclass
class PinholeCamera:
    camera: int
    position: tuple  # world (x, y, z), metres
    look_at: tuple
    focal: float = 400.0
    principal: tuple = (320.0, 240.0)
    width: int = 640
    height: int = 480

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation with rows (right, down, forward)."""
        fwd = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def to_camera(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        return (pts - np.asarray(self.position, float)) @ self.rotation().T

    def project(self, pts):
        """Pixel coordinates (n, 2) and depth (n,) of world points."""
        pc = self.to_camera(pts)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[:, 0] / z + self.principal[0]
            v = self.focal * pc[:, 1] / z + self.principal[1]
        return np.stack([u, v], axis=1), z

    def meta(self, fps: float) -> CameraMeta:
        return CameraMeta(self.camera, self.width, self.height, fps)


def default_cameras(num_cameras: int, arena=(8.0, 6.0), height: float = 2.8,
                    focal: float = 400.0, image_size=(640, 480)) -> list[PinholeCamera]:
    """Cameras on an ellipse just outside the arena, all aimed at its centre."""
    cx, cy = arena[0] / 2, arena[1] / 2
    rx, ry = cx * math.sqrt(2) + 0.5, cy * math.sqrt(2) + 0.5
    cams = []
    for k in range(num_cameras):
        ang = math.pi / 4 + 2 * math.pi * k / num_cameras
        pos = (cx + rx * math.cos(ang), cy + ry * math.sin(ang), height)
        cams.append(PinholeCamera(
            k, pos, (cx, cy, 0.9), focal,
            (image_size[0] / 2, image_size[1] / 2), image_size[0], image_size[1],
        ))
    return cams


@dataclass
class WorldConfig:
    num_agents: int = 6
    arena: tuple = (8.0, 6.0)
    num_cameras: int = 4
    cameras: Optional[list] = None  # PinholeCamera list; None -> default_cameras
    duration: int = 600
    fps: float = 15.0
    speed_range: tuple = (0.3, 1.2)  # m/s
    agent_size: tuple = (0.5, 0.5, 1.7)
    min_visible_pixels: float = 400.0
    video_id: str = "sim"
    seed: int = 0

    def __post_init__(self):
        if self.num_cameras < 2:
            raise ValueError("the world needs at least two cameras")
        if self.num_agents < 0 or self.duration < 1 or self.fps <= 0:
            raise ValueError("invalid world size")
        if not 0 <= self.speed_range[0] <= self.speed_range[1]:
            raise ValueError("invalid speed range")
        if self.cameras is None:
            self.cameras = default_cameras(self.num_cameras, self.arena)
        if len(self.cameras) != self.num_cameras:
            raise ValueError("camera list does not match num_cameras")

    def camera_metas(self) -> dict[int, CameraMeta]:
        return {c.camera: c.meta(self.fps) for c in self.cameras}


@dataclass
class Trajectories:
    positions: np.ndarray  # (agents, frames, 2)
    headings: np.ndarray  # (agents, frames, 2) unit vectors

    @property
    def num_agents(self) -> int:
        return self.positions.shape[0]


@dataclass
class GroundTruthRecord:
    video_id: str
    frame: int
    camera: int
    identity: int
    box: Box2D
    occlusion_fraction: float
    hard: bool
    visible: bool = True
    keypoints: Optional[dict] = None  # name -> (u, v)


@dataclass
class CorruptionModel:
    score_curve: tuple = ((0.0, 0.9), (0.3, 0.85), (0.5, 0.55), (0.8, 0.3), (1.0, 0.2))
    score_noise: float = 0.05
    miss_curve: tuple = ((0.0, 0.02), (0.5, 0.05), (0.8, 0.15), (1.0, 0.4))
    fp_rate: float = 0.3  # expected false positives per (frame, camera)
    fp_slots: int = 4
    fp_score_range: tuple = (0.1, 0.5)
    box_jitter: float = 2.0  # pixels
    embedding_dim: int = 32
    embedding_noise: float = 0.35
    nms_thresh: Optional[float] = 0.6  # detector-side NMS; None keeps every box
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.fp_rate <= self.fp_slots:
            raise ValueError("fp_rate must lie in [0, fp_slots]")

    def mean_score(self, occlusion) -> np.ndarray:
        xs, ys = zip(*self.score_curve)
        return np.interp(occlusion, xs, ys)

    def miss_probability(self, occlusion) -> np.ndarray:
        xs, ys = zip(*self.miss_curve)
        return np.interp(occlusion, xs, ys)


@dataclass
class SimulationResult:
    detections: list
    ground_truth: list
    cameras: dict  # id -> CameraMeta
    trajectories: Trajectories
    world: WorldConfig = field(repr=False, default=None)


def simulate_world(cfg: WorldConfig) -> Trajectories:
    """Piecewise-linear waypoint walks sampled at every frame."""
    n, T = cfg.num_agents, cfg.duration
    pos = np.zeros((n, T, 2))
    head = np.zeros((n, T, 2))
    dt = 1.0 / cfg.fps
    margin = 0.5
    lo = np.array([margin, margin])
    hi = np.array(cfg.arena, float) - margin
    for a in range(n):
        rng = np.random.default_rng([cfg.seed, 1, a])
        p = rng.uniform(lo, hi)
        ang = rng.uniform(0, 2 * math.pi)
        h = np.array([math.cos(ang), math.sin(ang)])
        goal = rng.uniform(lo, hi)
        speed = rng.uniform(*cfg.speed_range)
        for t in range(T):
            pos[a, t] = p
            head[a, t] = h
            step = speed * dt
            while step > 0:
                delta = goal - p
                dist = float(np.linalg.norm(delta))
                if dist > 1e-9:
                    h = delta / dist
                if dist > step:
                    p = p + h * step
                    step = 0.0
                else:
                    p = goal.copy()
                    step -= dist
                    goal = rng.uniform(lo, hi)
                    speed = rng.uniform(*cfg.speed_range)
                    if speed == 0.0:
                        break
    return Trajectories(pos, head)


def _box_corners(xy, size) -> np.ndarray:
    sx, sy, sz = size
    xs = (xy[0] - sx / 2, xy[0] + sx / 2)
    ys = (xy[1] - sy / 2, xy[1] + sy / 2)
    return np.array([(x, y, z) for x in xs for y in ys for z in (0.0, sz)])


def coverage_fraction(target, occluders) -> float:
    """Fraction of ``target`` (x1, y1, x2, y2) covered by the union of ``occluders``."""
    x1, y1, x2, y2 = target
    area = (x2 - x1) * (y2 - y1)
    if area <= 0:
        return 0.0
    rects = []
    for o in occluders:
        ix1, iy1 = max(x1, o[0]), max(y1, o[1])
        ix2, iy2 = min(x2, o[2]), min(y2, o[3])
        if ix1 < ix2 and iy1 < iy2:
            rects.append((ix1, iy1, ix2, iy2))
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    ys = sorted({r[1] for r in rects} | {r[3] for r in rects})
    covered = np.zeros((len(xs) - 1, len(ys) - 1), dtype=bool)
    for r in rects:
        i0, i1 = xs.index(r[0]), xs.index(r[2])
        j0, j1 = ys.index(r[1]), ys.index(r[3])
        covered[i0:i1, j0:j1] = True
    wx = np.diff(xs)
    wy = np.diff(ys)
    return float(min(1.0, (covered * np.outer(wx, wy)).sum() / area))


def _keypoints_3d(xy, heading, height):
    lateral = np.array([-heading[1], heading[0]])
    head = np.array([xy[0], xy[1]]) + 0.1 * heading
    z_eye = height - 0.08
    return {
        "left_eye": (*(head + 0.032 * lateral), z_eye),
        "right_eye": (*(head - 0.032 * lateral), z_eye),
        "chin": (*(np.array(xy) + 0.08 * heading), height - 0.2),
    }


def project_to_views(traj: Trajectories, cfg: WorldConfig) -> list[GroundTruthRecord]:
    """Ground-truth boxes per (frame, camera), ordered by frame, camera, identity.

    Only agents whose clipped box reaches ``min_visible_pixels`` are emitted.
    Occlusion is the share of a box covered by boxes of agents whose centre
    is nearer to the camera.
    """
    records = []
    size = cfg.agent_size
    for t in range(traj.positions.shape[1]):
        for cam in cfg.cameras:
            boxes = {}
            depth = {}
            for a in range(traj.num_agents):
                xy = traj.positions[a, t]
                uv, z = cam.project(_box_corners(xy, size))
                if np.any(z <= 0.1):
                    continue
                x1, y1 = uv.min(axis=0)
                x2, y2 = uv.max(axis=0)
                x1, x2 = np.clip([x1, x2], 0, cam.width)
                y1, y2 = np.clip([y1, y2], 0, cam.height)
                if x2 <= x1 or y2 <= y1 or (x2 - x1) * (y2 - y1) < cfg.min_visible_pixels:
                    continue
                boxes[a] = (float(x1), float(y1), float(x2), float(y2))
                _, zc = cam.project([(xy[0], xy[1], size[2] / 2)])
                depth[a] = float(zc[0])
            for a, box in boxes.items():
                nearer = [boxes[b] for b in boxes if depth[b] < depth[a]]
                occ = coverage_fraction(box, nearer)
                kps = None
                bw, bh = box[2] - box[0], box[3] - box[1]
                head_box = (box[0] + 0.3 * bw, box[1], box[2] - 0.3 * bw, box[1] + 0.12 * bh)
                to_cam = np.asarray(cam.position[:2]) - traj.positions[a, t]
                facing = float(np.dot(traj.headings[a, t], to_cam)) > 0
                if facing and coverage_fraction(head_box, nearer) < 0.5:
                    kp3 = _keypoints_3d(traj.positions[a, t], traj.headings[a, t], size[2])
                    uv, z = cam.project(list(kp3.values()))
                    inside = np.all((uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height))
                    if np.all(z > 0.1) and inside:
                        kps = {k: (float(p[0]), float(p[1])) for k, p in zip(kp3, uv)}
                records.append(GroundTruthRecord(
                    cfg.video_id, t, cam.camera, a, Box2D(*box), occ,
                    occ > HARD_OCCLUSION, True, kps,
                ))
    return records


def identity_embeddings(num_agents: int, model: CorruptionModel) -> np.ndarray:
    out = np.zeros((num_agents, model.embedding_dim))
    for a in range(num_agents):
        out[a] = np.random.default_rng([model.seed, 2, a]).standard_normal(model.embedding_dim)
    return out


def corrupt_detections(
    gt: Sequence[GroundTruthRecord],
    model: CorruptionModel,
    cameras: dict,
    num_frames: Optional[int] = None,
    num_agents: Optional[int] = None,
) -> list[Detection]:
    """Detector-like outputs from ground truth.

    Randomness is drawn from a generator seeded by (seed, frame, camera), so
    any frame can be regenerated independently.
    """
    by_image: dict[tuple, list[GroundTruthRecord]] = {}
    for r in gt:
        by_image.setdefault((r.frame, r.camera), []).append(r)
    if num_frames is None:
        num_frames = 1 + max((r.frame for r in gt), default=-1)
    if num_agents is None:
        num_agents = 1 + max((r.identity for r in gt), default=-1)
    base = identity_embeddings(num_agents, model)
    video = gt[0].video_id if gt else "sim"
    out = []
    for t in range(num_frames):
        for cam_id in sorted(cameras):
            meta = cameras[cam_id]
            rng = np.random.default_rng([model.seed, 3, t, cam_id])
            dets = []
            for r in by_image.get((t, cam_id), []):
                u_miss, u_score = rng.random(), rng.standard_normal()
                jitter = rng.standard_normal(4) * model.box_jitter
                noise = rng.standard_normal(model.embedding_dim) * model.embedding_noise
                if u_miss < model.miss_probability(r.occlusion_fraction):
                    continue
                score = float(np.clip(model.mean_score(r.occlusion_fraction) + model.score_noise * u_score, 0, 1))
                box = _jittered(r.box.as_tuple(), jitter, meta)
                if box is None:
                    continue
                emb = (base[r.identity] + noise).astype(np.float32)
                dets.append(Detection(video, t, cam_id, box, score, emb, identity=r.identity))
            n_fp = rng.binomial(model.fp_slots, model.fp_rate / model.fp_slots) if model.fp_rate > 0 else 0
            for _ in range(n_fp):
                h = rng.uniform(0.15, 0.5) * meta.height
                w = h * rng.uniform(0.3, 0.5)
                x1 = rng.uniform(0, meta.width - w)
                y1 = rng.uniform(0, meta.height - h)
                score = float(rng.uniform(*model.fp_score_range))
                emb = rng.standard_normal(model.embedding_dim).astype(np.float32)
                dets.append(Detection(video, t, cam_id, Box2D(x1, y1, x1 + w, y1 + h), score, emb))
            if model.nms_thresh is not None and dets:
                dets = nms(dets, model.nms_thresh)
            dets.sort(key=lambda d: (d.box.x1, d.box.y1, -d.score))
            out.extend(dets)
    return out


def _jittered(box, jitter, meta) -> Optional[Box2D]:
    x1, y1, x2, y2 = (np.asarray(box) + jitter).tolist()
    x1, x2 = min(max(x1, 0.0), meta.width), min(max(x2, 0.0), meta.width)
    y1, y2 = min(max(y1, 0.0), meta.height), min(max(y2, 0.0), meta.height)
    if x2 - x1 < 1.0 or y2 - y1 < 1.0:
        return None
    return Box2D(x1, y1, x2, y2)


def simulate(cfg: Optional[WorldConfig] = None, model: Optional[CorruptionModel] = None) -> SimulationResult:
    cfg = cfg or WorldConfig()
    model = model or CorruptionModel(seed=cfg.seed)
    traj = simulate_world(cfg)
    gt = project_to_views(traj, cfg)
    cams = cfg.camera_metas()
    dets = corrupt_detections(gt, model, cams, cfg.duration, cfg.num_agents)
    return SimulationResult(dets, gt, cams, traj, cfg)
