"""Self-supervised geometric encoder for cross-view person association.

A box is described by its normalized corners and its camera. Corners go
through a learnable Fourier feature map, get concatenated with a learnable
camera embedding and pass through FC + LayerNorm blocks. The encoder is
trained on a synchronization pretext: two views at the same instant should
look closer (after Hungarian matching of their boxes) than the same pair of
views a few frames apart. A linear head decodes the feature back to the box
corners and an L1 loss on that reconstruction regularizes the feature.

Everything is plain numpy with hand-written backward passes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import CameraMeta, Detection, hungarian

FORMAT_VERSION = 1
_MAGIC = b"MVAENC\x00\x01"
_GELU_K = math.sqrt(2.0 / math.pi)
_LN_EPS = 1e-5
_DIST_EPS = 1e-12


@dataclass
class AssocConfig:
    alpha: float = 0.5
    margin: float = 1.0
    t_min: int = 5
    t_max: int = 20
    epochs: int = 160
    lr: float = 1e-4
    lr_decay_epoch: int = 120
    lr_decay_factor: float = 0.1
    batch_frames: int = 4
    seed: int = 0
    num_frequencies: int = 128
    camera_dim: int = 256
    hidden_dim: int = 512
    feature_dim: int = 256
    num_blocks: int = 3
    reprojection_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 1 <= self.t_min <= self.t_max:
            raise ValueError("need 1 <= t_min <= t_max")
        if self.epochs < 0 or self.batch_frames < 1:
            raise ValueError("epochs must be >= 0 and batch_frames >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_decay_factor if epoch >= self.lr_decay_epoch else 1.0)


@dataclass(frozen=True)
class LossBreakdown:
    l_syn: float
    l_pro: float

    @property
    def l_total(self) -> float:
        return self.l_syn + self.l_pro


@dataclass(frozen=True)
class TripletSample:
    anchor: tuple  # (frame, camera)
    positive: tuple
    negative: tuple
    h_pos: float = float("nan")
    h_neg: float = float("nan")


# --------------------------------------------------------------------------- model


@dataclass
class FourierBasis:
    frequencies: np.ndarray  # (N, 2)

    @property
    def N(self) -> int:
        return self.frequencies.shape[0]


@dataclass
class CameraEmbeddings:
    table: np.ndarray  # (C, V)

    @property
    def C(self) -> int:
        return self.table.shape[0]

    @property
    def V(self) -> int:
        return self.table.shape[1]


@dataclass
class FCBlock:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray


@dataclass
class GeometricEncoder:
    basis: FourierBasis
    cams: CameraEmbeddings
    blocks: list
    head_weight: np.ndarray  # (G, 4)
    head_bias: np.ndarray
    seed: int = 0

    @classmethod
    def init(
        cls,
        num_cameras: int,
        num_frequencies: int = 128,
        camera_dim: int = 256,
        hidden_dim: int = 512,
        feature_dim: int = 256,
        num_blocks: int = 3,
        seed: int = 0,
        dtype=np.float32,
    ) -> "GeometricEncoder":
        rng = np.random.default_rng(seed)
        freqs = rng.standard_normal((num_frequencies, 2))
        table = rng.standard_normal((num_cameras, camera_dim))
        widths = [4 * num_frequencies + camera_dim] + [hidden_dim] * (num_blocks - 1) + [feature_dim]
        blocks = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            blocks.append(FCBlock(
                rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype),
                rng.uniform(-bound, bound, fan_out).astype(dtype),
                np.ones(fan_out, dtype=dtype),
                np.zeros(fan_out, dtype=dtype),
            ))
        bound = 1.0 / math.sqrt(feature_dim)
        return cls(
            FourierBasis(freqs.astype(dtype)),
            CameraEmbeddings(table.astype(dtype)),
            blocks,
            rng.uniform(-bound, bound, (feature_dim, 4)).astype(dtype),
            rng.uniform(-bound, bound, 4).astype(dtype),
            seed,
        )

    @classmethod
    def from_config(cls, num_cameras: int, cfg: AssocConfig, dtype=np.float32) -> "GeometricEncoder":
        return cls.init(num_cameras, cfg.num_frequencies, cfg.camera_dim, cfg.hidden_dim,
                        cfg.feature_dim, cfg.num_blocks, cfg.seed, dtype)

    @property
    def dtype(self):
        return self.head_weight.dtype

    @property
    def input_dim(self) -> int:
        return 4 * self.basis.N + self.cams.V

    @property
    def feature_dim(self) -> int:
        return self.head_weight.shape[0]

    @property
    def widths(self) -> list[int]:
        return [self.blocks[0].weight.shape[0]] + [b.weight.shape[1] for b in self.blocks]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in the fixed checkpoint order; arrays are live references."""
        out = [("fourier.frequencies", self.basis.frequencies), ("camera.table", self.cams.table)]
        for k, b in enumerate(self.blocks):
            out += [
                (f"fc{k}.weight", b.weight),
                (f"fc{k}.bias", b.bias),
                (f"ln{k}.gain", b.ln_gain),
                (f"ln{k}.bias", b.ln_bias),
            ]
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out

    def copy(self, dtype=None) -> "GeometricEncoder":
        dtype = dtype or self.dtype
        c = lambda a: np.array(a, dtype=dtype)  # noqa: E731
        return GeometricEncoder(
            FourierBasis(c(self.basis.frequencies)),
            CameraEmbeddings(c(self.cams.table)),
            [FCBlock(c(b.weight), c(b.bias), c(b.ln_gain), c(b.ln_bias)) for b in self.blocks],
            c(self.head_weight),
            c(self.head_bias),
            self.seed,
        )

    # forward / backward ---------------------------------------------------

    def forward(self, corners: np.ndarray, cameras: np.ndarray):
        """Geometric features for normalized corners (n, 4) seen from ``cameras`` (n,)."""
        corners = np.asarray(corners, dtype=self.dtype).reshape(-1, 4)
        cameras = np.asarray(cameras, dtype=np.int64).reshape(-1)
        if cameras.size and (cameras.min() < 0 or cameras.max() >= self.cams.C):
            raise ValueError(f"camera id outside [0, {self.cams.C})")
        two_pi = self.dtype.type(2 * math.pi)
        phase_l = two_pi * corners[:, :2] @ self.basis.frequencies.T
        phase_r = two_pi * corners[:, 2:] @ self.basis.frequencies.T
        x = np.concatenate(
            [_interleave(phase_l), _interleave(phase_r), self.cams.table[cameras]], axis=1
        )
        h = x
        block_cache = []
        for b in self.blocks:
            z = h @ b.weight + b.bias
            mu = z.mean(axis=1, keepdims=True)
            zc = z - mu
            inv_std = 1.0 / np.sqrt((zc * zc).mean(axis=1, keepdims=True) + _LN_EPS)
            xhat = zc * inv_std
            y = xhat * b.ln_gain + b.ln_bias
            t = np.tanh(_GELU_K * (y + 0.044715 * (y * y * y)))
            a = 0.5 * y * (1.0 + t)
            block_cache.append((h, xhat, inv_std, y, t))
            h = a
        cache = (corners, cameras, phase_l, phase_r, block_cache)
        return h, cache

    def backward(self, cache, d_feat: np.ndarray) -> dict[str, np.ndarray]:
        corners, cameras, phase_l, phase_r, block_cache = cache
        grads: dict[str, np.ndarray] = {}
        g = d_feat
        for k in reversed(range(len(self.blocks))):
            b = self.blocks[k]
            h_in, xhat, inv_std, y, t = block_cache[k]
            dgelu = 0.5 * (1.0 + t) + 0.5 * y * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * y * y)
            dy = g * dgelu
            grads[f"ln{k}.gain"] = (dy * xhat).sum(axis=0)
            grads[f"ln{k}.bias"] = dy.sum(axis=0)
            dxhat = dy * b.ln_gain
            dz = inv_std * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            grads[f"fc{k}.weight"] = h_in.T @ dz
            grads[f"fc{k}.bias"] = dz.sum(axis=0)
            g = dz @ b.weight.T
        N = self.basis.N
        two_pi = self.dtype.type(2 * math.pi)
        d_freq = np.zeros_like(self.basis.frequencies)
        for part, phase, v in ((g[:, : 2 * N], phase_l, corners[:, :2]), (g[:, 2 * N : 4 * N], phase_r, corners[:, 2:])):
            d_phase = part[:, 0::2] * np.cos(phase) - part[:, 1::2] * np.sin(phase)
            d_freq += two_pi * d_phase.T @ v
        grads["fourier.frequencies"] = d_freq
        d_table = np.zeros_like(self.cams.table)
        np.add.at(d_table, cameras, g[:, 4 * N :])
        grads["camera.table"] = d_table
        return grads

    def reproject(self, feat: np.ndarray) -> np.ndarray:
        return np.asarray(feat, dtype=self.dtype) @ self.head_weight + self.head_bias


def _interleave(phase: np.ndarray) -> np.ndarray:
    out = np.empty((phase.shape[0], 2 * phase.shape[1]), dtype=phase.dtype)
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def fourier_encode(v, basis: FourierBasis) -> np.ndarray:
    """[sin f_1, cos f_1, ..., sin f_N, cos f_N] with f_j = 2*pi*b_j . v."""
    v = np.asarray(v, dtype=np.float64)
    phase = 2 * np.pi * v.reshape(-1, 2) @ np.asarray(basis.frequencies, dtype=np.float64).T
    out = _interleave(phase)
    return out[0] if v.ndim == 1 else out


def normalized_corners(dets: Sequence[Detection], cameras: Mapping[int, CameraMeta]) -> np.ndarray:
    out = np.zeros((len(dets), 4))
    for k, d in enumerate(dets):
        if d.camera not in cameras:
            raise ValueError(f"unknown camera id {d.camera}")
        meta = cameras[d.camera]
        out[k] = d.box.normalized(meta.width, meta.height)
    return out


def encode_geometric(det, enc: GeometricEncoder, cameras: Mapping[int, CameraMeta]) -> np.ndarray:
    """Geometric feature(s) for one detection or a list of them."""
    single = isinstance(det, Detection)
    dets = [det] if single else list(det)
    for d in dets:
        if not 0 <= d.camera < enc.cams.C:
            raise ValueError(f"unknown camera id {d.camera}")
    feat, _ = enc.forward(normalized_corners(dets, cameras), [d.camera for d in dets])
    return feat[0] if single else feat


def reproject(feat, enc: GeometricEncoder) -> np.ndarray:
    return enc.reproject(feat)


# ------------------------------------------------------------------ distances


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def unit_distance(uq: np.ndarray, ug: np.ndarray) -> np.ndarray:
    """Euclidean distance between unit vectors, halved so it lies in [0, 1]."""
    s = np.maximum(2.0 - 2.0 * (uq @ ug.T), 0.0)
    return 0.5 * (np.sqrt(s + _DIST_EPS) - math.sqrt(_DIST_EPS))


def combine_distances(app: Optional[np.ndarray], geo: np.ndarray, alpha: float) -> np.ndarray:
    if alpha == 0.0:
        return geo
    if app is None:
        raise ValueError("appearance embeddings are required when alpha > 0")
    if alpha == 1.0:
        return app
    return alpha * app + (1.0 - alpha) * geo


def _stack_embeddings(dets: Sequence[Detection]) -> Optional[np.ndarray]:
    if any(d.embedding is None for d in dets):
        return None
    if not dets:
        return np.zeros((0, 1))
    return np.stack([np.asarray(d.embedding, dtype=np.float64) for d in dets])


def instance_distance_matrix(
    queries: Sequence[Detection],
    gallery: Sequence[Detection],
    enc: GeometricEncoder,
    alpha: float,
    cameras: Mapping[int, CameraMeta],
) -> np.ndarray:
    """alpha * appearance distance + (1 - alpha) * geometric distance, entries in [0, 1]."""
    app = None
    if alpha > 0:
        eq, eg = _stack_embeddings(queries), _stack_embeddings(gallery)
        if eq is None or eg is None:
            raise ValueError("appearance embeddings are required when alpha > 0")
        app = unit_distance(unit_rows(eq), unit_rows(eg))
    geo = np.zeros((len(queries), len(gallery)))
    if alpha < 1 and queries and gallery:
        fq = encode_geometric(list(queries), enc, cameras).astype(np.float64)
        fg = encode_geometric(list(gallery), enc, cameras).astype(np.float64)
        geo = unit_distance(unit_rows(fq), unit_rows(fg))
    return combine_distances(app, geo, alpha)


def image_distance(E) -> float:
    """Mean of the Hungarian-matched entries; 1.0 when either side is empty."""
    E = np.asarray(E, dtype=np.float64)
    if E.size == 0:
        return 1.0
    res = hungarian(E)
    return float(E[res.row_indices, res.col_indices].mean())


def triplet_loss(h_pos: float, h_neg: float, margin: float = 1.0) -> float:
    return max(0.0, h_pos - h_neg + margin)


def reprojection_loss(dets, enc: GeometricEncoder, cameras: Mapping[int, CameraMeta]) -> float:
    """Mean over detections of the L1 error between decoded and true corners."""
    corners = normalized_corners(list(dets), cameras)
    if len(corners) == 0:
        raise ValueError("reprojection loss needs a non-empty batch")
    feat, _ = enc.forward(corners, [d.camera for d in dets])
    pred = enc.reproject(feat).astype(np.float64)
    return float(np.abs(pred - corners).sum(axis=1).mean())


# ------------------------------------------------------------- training data


@dataclass
class ImageData:
    """Boxes of one (frame, camera) image prepared for the encoder."""

    frame: int
    camera: int
    corners: np.ndarray  # (n, 4) normalized, gallery = every pooled detection
    appearance: Optional[np.ndarray]  # (n, D) unit rows
    query_idx: np.ndarray  # rows of ``corners`` that are tracked boxes


@dataclass
class TrainingData:
    images: dict  # (frame, camera) -> ImageData
    cameras: list[int]
    frames: list[int]
    num_cameras: int

    @classmethod
    def build(
        cls,
        detections: Sequence[Detection],
        tracked: Sequence[Detection],
        cameras: Mapping[int, CameraMeta],
        low_thresh: float = 0.1,
    ) -> "TrainingData":
        """Gallery = detections above ``low_thresh``; queries = tracked boxes."""
        gallery: dict[tuple, list[Detection]] = {}
        for d in detections:
            if d.score > low_thresh:
                gallery.setdefault((d.frame, d.camera), []).append(d)
        tracked_keys: dict[tuple, set] = {}
        for d in tracked:
            tracked_keys.setdefault((d.frame, d.camera), set()).add(d.key)
        images = {}
        for key in sorted(gallery):
            dets = gallery[key]
            tk = tracked_keys.get(key, set())
            q = np.array([k for k, d in enumerate(dets) if d.key in tk], dtype=np.int64)
            emb = _stack_embeddings(dets)
            images[key] = ImageData(
                key[0], key[1],
                normalized_corners(dets, cameras),
                None if emb is None else unit_rows(emb),
                q,
            )
        cams = sorted(cameras)
        frames = sorted({k[0] for k in images})
        return cls(images, cams, frames, max(cams) + 1 if cams else 0)


def sample_triplets(data: TrainingData, anchor_frames, cfg: AssocConfig, rng) -> list[TripletSample]:
    """One triplet per (anchor image, other camera) pair.

    The negative offset is drawn once per (frame, paired camera), so anchors
    of the same frame share negative images. Offsets that leave the stream
    flip sign; if both signs leave it the pair is skipped.
    """
    frame_set = set(data.frames)
    lo, hi = (data.frames[0], data.frames[-1]) if data.frames else (0, -1)
    out = []
    for t in anchor_frames:
        neg = {}
        for j in data.cameras:
            dt = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            sign = 1 if rng.random() < 0.5 else -1
            for s in (sign, -sign):
                if lo <= t + s * dt <= hi and t + s * dt in frame_set:
                    neg[j] = t + s * dt
                    break
        for i in data.cameras:
            anchor = data.images.get((t, i))
            if anchor is None or len(anchor.query_idx) == 0:
                continue
            for j in data.cameras:
                if j == i or j not in neg:
                    continue
                out.append(TripletSample((t, i), (t, j), (neg[j], j)))
    return out


def triplet_loss_and_grads(
    enc: GeometricEncoder,
    data: TrainingData,
    triplets: Sequence[TripletSample],
    cfg: AssocConfig,
    need_grads: bool = True,
):
    """Loss over a batch of triplets; gradients treat the matching as constant.

    Returns (LossBreakdown, grads or None, triplets with realized distances).
    """
    keys = []
    slot = {}
    for tr in triplets:
        for key in (tr.anchor, tr.positive, tr.negative):
            if key in data.images and key not in slot:
                slot[key] = len(keys)
                keys.append(key)
    if not keys:
        zero = {n: np.zeros_like(p) for n, p in enc.parameters()}
        return LossBreakdown(0.0, 0.0), (zero if need_grads else None), list(triplets)
    offsets = np.cumsum([0] + [len(data.images[k].corners) for k in keys])
    corners = np.concatenate([data.images[k].corners for k in keys])
    cams = np.concatenate([np.full(len(data.images[k].corners), k[1]) for k in keys])
    feat, cache = enc.forward(corners, cams)
    feat64 = feat.astype(np.float64)
    norms = np.maximum(np.linalg.norm(feat64, axis=1, keepdims=True), 1e-12)
    unit = feat64 / norms

    alpha = cfg.alpha
    d_unit = np.zeros_like(unit)
    syn_total = 0.0
    realized = []
    scatter_q, scatter_g, scatter_c = [], [], []
    for tr in triplets:
        a = data.images[tr.anchor]
        qa = offsets[slot[tr.anchor]] + a.query_idx
        hs = []
        matched = []
        for key in (tr.positive, tr.negative):
            img = data.images.get(key)
            if img is None or len(img.corners) == 0:
                hs.append(1.0)
                matched.append(None)
                continue
            g = np.arange(offsets[slot[key]], offsets[slot[key] + 1])
            E = (1.0 - alpha) * unit_distance(unit[qa], unit[g])
            if alpha > 0:
                if a.appearance is None or img.appearance is None:
                    raise ValueError("appearance embeddings are required when alpha > 0")
                E = E + alpha * unit_distance(a.appearance[a.query_idx], img.appearance)
            res = hungarian(E)
            hs.append(float(E[res.row_indices, res.col_indices].mean()))
            matched.append((qa[res.row_indices], g[res.col_indices]))
        h_pos, h_neg = hs
        loss = h_pos - h_neg + cfg.margin
        realized.append(TripletSample(tr.anchor, tr.positive, tr.negative, h_pos, h_neg))
        if loss <= 0:
            continue
        syn_total += loss
        if not need_grads or alpha == 1.0:
            continue
        for sign, pairs in ((1.0, matched[0]), (-1.0, matched[1])):
            if pairs is None:
                continue
            q, g = pairs
            scatter_q.append(q)
            scatter_g.append(g)
            scatter_c.append(np.full(len(q), sign / len(q)))
    if scatter_q:
        q = np.concatenate(scatter_q)
        g = np.concatenate(scatter_g)
        c = np.einsum("ij,ij->i", unit[q], unit[g])
        s = np.maximum(2.0 - 2.0 * c, 0.0)
        dd_dc = np.where(s > 0, -1.0 / (2.0 * np.sqrt(s + _DIST_EPS)), 0.0)
        coef = ((1.0 - alpha) * np.concatenate(scatter_c) * dd_dc)[:, None]
        np.add.at(d_unit, np.concatenate([q, g]), np.concatenate([coef * unit[g], coef * unit[q]]))
    # Summed over the batch: a per-triplet mean leaves the synchronization
    # gradient far below the reprojection term, which then dominates.
    l_syn = syn_total

    pred = enc.reproject(feat).astype(np.float64)
    resid = pred - corners.astype(np.float64)
    l_pro = float(np.abs(resid).sum(axis=1).mean())
    breakdown = LossBreakdown(l_syn, l_pro)
    w_pro = cfg.reprojection_weight
    if not need_grads:
        return breakdown, None, realized

    n = len(corners)
    d_pred = w_pro * np.sign(resid) / n
    d_feat = d_pred @ enc.head_weight.astype(np.float64).T
    # back through the unit normalization
    d_feat += (d_unit - unit * np.einsum("ij,ij->i", d_unit, unit)[:, None]) / norms
    grads = enc.backward(cache, d_feat.astype(enc.dtype))
    grads["head.weight"] = (feat64.T @ d_pred).astype(enc.dtype)
    grads["head.bias"] = d_pred.sum(axis=0).astype(enc.dtype)
    return breakdown, grads, realized


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def apply(self, enc: GeometricEncoder, grads: Mapping[str, np.ndarray], lr: float):
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step
        c2 = 1.0 - b2**self.step
        for name, p in enc.parameters():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainResult:
    encoder: GeometricEncoder
    optimizer: AdamState
    history: list  # LossBreakdown per epoch


def train(
    data: TrainingData,
    cfg: AssocConfig,
    encoder: Optional[GeometricEncoder] = None,
    optimizer: Optional[AdamState] = None,
    anchor_frames: Optional[Sequence[int]] = None,
    epochs: Optional[int] = None,
    log=None,
) -> TrainResult:
    """Fit the encoder on the synchronization pretext with Adam.

    Training resumes from ``optimizer.epoch`` when a state is given; per-epoch
    randomness is derived from (seed, epoch) so a resumed run follows the
    same trajectory as an uninterrupted one.
    """
    if len(data.cameras) < 2:
        raise ValueError("training needs >= 2 camera views")
    enc = encoder if encoder is not None else GeometricEncoder.from_config(data.num_cameras, cfg)
    opt = optimizer if optimizer is not None else AdamState()
    frames = list(data.frames if anchor_frames is None else anchor_frames)
    stop = cfg.epochs if epochs is None else min(cfg.epochs, opt.epoch + epochs)
    history = []
    while opt.epoch < stop:
        epoch = opt.epoch
        rng = np.random.default_rng([cfg.seed, epoch])
        order = [frames[k] for k in rng.permutation(len(frames))]
        lr = cfg.lr_at(epoch)
        syn = pro = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_frames):
            triplets = sample_triplets(data, order[start : start + cfg.batch_frames], cfg, rng)
            if not triplets:
                continue
            loss, grads, _ = triplet_loss_and_grads(enc, data, triplets, cfg)
            opt.apply(enc, grads, lr)
            syn += loss.l_syn
            pro += loss.l_pro
            n_batches += 1
        opt.epoch += 1
        entry = LossBreakdown(syn / max(n_batches, 1), pro / max(n_batches, 1))
        history.append(entry)
        if log is not None:
            log(epoch, entry)
    return TrainResult(enc, opt, history)


def triplet_accuracy(
    enc: GeometricEncoder,
    data: TrainingData,
    anchor_frames: Sequence[int],
    cfg: AssocConfig,
    seed: int = 12345,
) -> float:
    """Fraction of sampled triplets where the synchronized pair is strictly closer."""
    rng = np.random.default_rng(seed)
    triplets = sample_triplets(data, list(anchor_frames), cfg, rng)
    if not triplets:
        return float("nan")
    correct = 0
    for start in range(0, len(triplets), 256):
        _, _, realized = triplet_loss_and_grads(enc, data, triplets[start : start + 256], cfg, need_grads=False)
        correct += sum(t.h_pos < t.h_neg for t in realized)
    return correct / len(triplets)


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(path, enc: GeometricEncoder, optimizer: Optional[AdamState] = None) -> None:
    from .formats import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(enc, optimizer))


def checkpoint_bytes(enc: GeometricEncoder, optimizer: Optional[AdamState] = None) -> bytes:
    """Versioned container: magic, u32 header length, JSON header, raw <f4 tensors."""
    tensors = [(n, p) for n, p in enc.parameters()]
    if optimizer is not None:
        for prefix, table in (("adam_m/", optimizer.m), ("adam_v/", optimizer.v)):
            for name, p in enc.parameters():
                tensors.append((prefix + name, table.get(name, np.zeros_like(p))))
    header = {
        "format_version": FORMAT_VERSION,
        "N": enc.basis.N,
        "V": enc.cams.V,
        "C": enc.cams.C,
        "G": enc.feature_dim,
        "widths": enc.widths,
        "seed": int(enc.seed),
        "activation": "gelu_tanh",
        "optimizer": None if optimizer is None else {
            "step": optimizer.step,
            "epoch": optimizer.epoch,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        },
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in tensors],
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", len(head)), head]
    parts += [np.ascontiguousarray(p, dtype="<f4").tobytes() for _, p in tensors]
    return b"".join(parts)


def load_checkpoint(path) -> tuple[GeometricEncoder, Optional[AdamState]]:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(raw: bytes) -> tuple[GeometricEncoder, Optional[AdamState]]:
    if raw[:8] != _MAGIC:
        raise ValueError("not an encoder checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    pos = 12 + hlen
    arrays = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float32)
        pos += 4 * count
    if pos != len(raw):
        raise ValueError("checkpoint has trailing bytes")
    widths = header["widths"]
    blocks = [
        FCBlock(arrays[f"fc{k}.weight"], arrays[f"fc{k}.bias"], arrays[f"ln{k}.gain"], arrays[f"ln{k}.bias"])
        for k in range(len(widths) - 1)
    ]
    enc = GeometricEncoder(
        FourierBasis(arrays["fourier.frequencies"]),
        CameraEmbeddings(arrays["camera.table"]),
        blocks,
        arrays["head.weight"],
        arrays["head.bias"],
        header["seed"],
    )
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = AdamState(
            o["step"], o["epoch"],
            {n: arrays["adam_m/" + n] for n, _ in enc.parameters()},
            {n: arrays["adam_v/" + n] for n, _ in enc.parameters()},
            o["beta1"], o["beta2"], o["eps"],
        )
    return enc, opt
