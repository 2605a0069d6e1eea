import math

import numpy as np
import pytest

from mvanon import mva, simulator, pipeline, tracker
from mvanon.core import Box2D, CameraMeta, Detection
from mvanon.mva import (
    AssocConfig,
    FourierBasis,
    GeometricEncoder,
    ImageData,
    LossBreakdown,
    TrainingData,
    TripletSample,
    checkpoint_bytes,
    checkpoint_from_bytes,
    encode_geometric,
    fourier_encode,
    image_distance,
    instance_distance_matrix,
    reprojection_loss,
    triplet_loss,
    triplet_loss_and_grads,
    unit_rows,
)

CAMS = {0: CameraMeta(0, 100, 100), 1: CameraMeta(1, 100, 100)}


def small_encoder(seed=0, dtype=np.float32, cameras=2):
    return GeometricEncoder.init(cameras, num_frequencies=8, camera_dim=16, hidden_dim=32,
                                 feature_dim=16, num_blocks=3, seed=seed, dtype=dtype)


def det(box, camera=0, emb=None, frame=0, score=0.9):
    return Detection("v", frame, camera, Box2D(*box), score, None if emb is None else np.asarray(emb, float))


def hand_distance(a, b):
    """Halved Euclidean distance between L2-normalized rows, written longhand."""
    out = np.zeros((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = np.linalg.norm(x / np.linalg.norm(x) - y / np.linalg.norm(y)) / 2
    return out


# ----------------------------------------------------------------- fourier


def test_fourier_origin_alternates():
    basis = FourierBasis(np.random.default_rng(0).normal(size=(5, 2)))
    np.testing.assert_allclose(fourier_encode([0.0, 0.0], basis), [0, 1] * 5)


def test_fourier_quarter_turn():
    out = fourier_encode([0.25, 0.7], FourierBasis(np.array([[1.0, 0.0]])))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_fourier_length_and_bounds():
    basis = FourierBasis(np.random.default_rng(1).normal(size=(128, 2)) * 5)
    out = fourier_encode(np.random.default_rng(2).random((50, 2)), basis)
    assert out.shape == (50, 256)
    assert np.abs(out).max() <= 1.0


def test_fourier_derivative_matches_finite_difference():
    b = np.random.default_rng(3).normal(size=(4, 2))
    basis = FourierBasis(b)
    v = np.array([0.3, 0.6])
    h = 1e-6
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = h
        fd = (fourier_encode(v + e, basis) - fourier_encode(v - e, basis)) / (2 * h)
        phase = 2 * np.pi * b @ v
        analytic = np.empty(8)
        analytic[0::2] = 2 * np.pi * b[:, axis] * np.cos(phase)
        analytic[1::2] = -2 * np.pi * b[:, axis] * np.sin(phase)
        np.testing.assert_allclose(fd, analytic, rtol=1e-6, atol=1e-6)


# ----------------------------------------------------------------- encoder


def test_default_input_width():
    enc = GeometricEncoder.from_config(4, AssocConfig())
    # [gamma(v_l), gamma(v_r), v_c] = 2N + 2N + V = 256 + 256 + 256
    assert enc.input_dim == 768
    assert enc.widths == [768, 512, 512, 256]
    assert enc.head_weight.shape == (256, 4)


def test_encode_geometric_deterministic_and_camera_sensitive():
    enc = small_encoder()
    a = det((10, 20, 30, 60), camera=0)
    np.testing.assert_array_equal(encode_geometric(a, enc, CAMS), encode_geometric(a, enc, CAMS))
    b = a.with_(camera=1)
    assert not np.array_equal(encode_geometric(a, enc, CAMS), encode_geometric(b, enc, CAMS))


def test_encode_geometric_unknown_camera():
    enc = small_encoder(cameras=2)
    cams = dict(CAMS)
    cams[5] = CameraMeta(5, 100, 100)
    with pytest.raises(ValueError):
        encode_geometric(det((10, 20, 30, 60), camera=5), enc, cams)


def test_reproject_zero_head_and_linearity():
    enc = small_encoder()
    f = encode_geometric([det((10, 20, 30, 60))], enc, CAMS)
    enc.head_weight[:] = 0
    enc.head_bias[:] = 0
    np.testing.assert_array_equal(mva.reproject(f, enc), np.zeros((1, 4)))
    enc = small_encoder(dtype=np.float64)
    enc.head_bias[:] = 0
    f = np.random.default_rng(0).normal(size=(3, enc.feature_dim))
    np.testing.assert_allclose(mva.reproject(2.5 * f, enc), 2.5 * mva.reproject(f, enc), rtol=1e-12)


# --------------------------------------------------------------- distances


def test_distance_alpha_extremes_and_mix():
    enc = small_encoder(dtype=np.float64)
    q = [det((10, 10, 30, 50), 0, [1.0, 0.0]), det((50, 10, 70, 60), 0, [0.0, 2.0])]
    g = [det((20, 15, 35, 55), 1, [3.0, 0.0]), det((60, 20, 80, 70), 1, [-1.0, 0.0])]
    app = np.array([[0.0, 1.0], [math.sqrt(2) / 2, math.sqrt(2) / 2]])
    geo = hand_distance(encode_geometric(q, enc, CAMS), encode_geometric(g, enc, CAMS))
    # the smoothed square root is exact at 0 and within sqrt(1e-12) / 2 elsewhere
    tol = 1e-6
    np.testing.assert_allclose(instance_distance_matrix(q, g, enc, 1.0, CAMS), app, atol=tol)
    np.testing.assert_allclose(instance_distance_matrix(q, g, enc, 0.0, CAMS), geo, atol=tol)
    np.testing.assert_allclose(instance_distance_matrix(q, g, enc, 0.5, CAMS), 0.5 * app + 0.5 * geo, atol=tol)


def test_distance_entries_bounded():
    rng = np.random.default_rng(4)
    enc = small_encoder()
    q = [det(tuple(b), 0, rng.normal(size=8)) for b in [(1, 1, 9, 9), (30, 40, 60, 90), (5, 50, 20, 99)]]
    g = [det(tuple(b), 1, rng.normal(size=8)) for b in [(2, 2, 50, 50), (70, 10, 90, 40)]]
    E = instance_distance_matrix(q, g, enc, 0.3, CAMS)
    assert E.shape == (3, 2) and E.min() >= 0 and E.max() <= 1


def test_distance_needs_embeddings_when_alpha_positive():
    enc = small_encoder()
    with pytest.raises(ValueError):
        instance_distance_matrix([det((1, 1, 9, 9))], [det((1, 1, 9, 9), 1)], enc, 0.5, CAMS)
    # alpha = 0 does not touch embeddings
    instance_distance_matrix([det((1, 1, 9, 9))], [det((1, 1, 9, 9), 1)], enc, 0.0, CAMS)


def test_image_distance_examples():
    assert image_distance([[0.37]]) == 0.37
    assert image_distance([[0.0, 1.0], [1.0, 0.0]]) == 0.0
    assert image_distance(np.zeros((0, 3))) == 1.0
    assert image_distance(np.zeros((2, 0))) == 1.0


def test_image_distance_bounds_and_column_permutation():
    rng = np.random.default_rng(9)
    for _ in range(50):
        E = rng.random((rng.integers(1, 6), rng.integers(1, 6)))
        h = image_distance(E)
        assert E.min() <= h <= E.max()
        perm = rng.permutation(E.shape[1])
        assert image_distance(E[:, perm]) == pytest.approx(h, abs=1e-12)


# ------------------------------------------------------------------ losses


def test_triplet_loss_examples():
    assert triplet_loss(0.2, 0.9, 1.0) == pytest.approx(0.3)
    assert triplet_loss(0.1, 1.5, 1.0) == 0.0
    assert AssocConfig().margin == 1.0


def test_reprojection_loss_examples():
    enc = small_encoder(dtype=np.float64)
    d = det((10, 10, 40, 60))  # normalized (0.1, 0.1, 0.4, 0.6) on a 100 x 100 image
    enc.head_weight[:] = 0
    enc.head_bias[:] = 0
    assert reprojection_loss([d], enc, CAMS) == pytest.approx(1.2)
    enc.head_bias[:] = [0.1, 0.1, 0.4, 0.6]
    assert reprojection_loss([d], enc, CAMS) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        reprojection_loss([], enc, CAMS)


def test_loss_breakdown_identity():
    lb = LossBreakdown(0.25, 0.5)
    assert lb.l_total == 0.75


def test_lr_schedule():
    cfg = AssocConfig()
    assert (cfg.epochs, cfg.lr_decay_epoch) == (160, 120)
    assert cfg.lr_at(119) == 1e-4
    assert cfg.lr_at(120) == pytest.approx(1e-5)


@pytest.mark.parametrize("kwargs", [{"alpha": 1.5}, {"margin": 0.0}, {"t_min": 9, "t_max": 3}])
def test_assoc_config_validation(kwargs):
    with pytest.raises(ValueError):
        AssocConfig(**kwargs)


# ---------------------------------------------------------------- gradients


def _toy_data(rng, sizes, queries):
    images = {}
    for key, n in sizes.items():
        lo = rng.uniform(0.05, 0.45, (n, 2))
        hi = lo + rng.uniform(0.1, 0.4, (n, 2))
        images[key] = ImageData(key[0], key[1], np.c_[lo, hi], unit_rows(rng.normal(size=(n, 4))),
                                np.arange(queries.get(key, 0)))
    frames = sorted({k[0] for k in images})
    return TrainingData(images, [0, 1], frames, 2)


def _fd_check(enc, data, triplets, cfg, names, h=1e-3):
    _, grads, _ = triplet_loss_and_grads(enc, data, triplets, cfg)
    worst = 0.0
    for name, p in enc.parameters():
        if name not in names:
            continue
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = triplet_loss_and_grads(enc, data, triplets, cfg, need_grads=False)[0].l_total
            p[idx] = old - h
            lm = triplet_loss_and_grads(enc, data, triplets, cfg, need_grads=False)[0].l_total
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        g = grads[name]
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-300))
    return worst


def test_gradients_with_multi_box_matching():
    # 3 tracked queries against 4-box galleries, two triplets in the batch
    rng = np.random.default_rng(8)
    data = _toy_data(rng, {(0, 0): 3, (0, 1): 4, (6, 1): 4, (6, 0): 3}, {(0, 0): 3, (6, 0): 2})
    cfg = AssocConfig(num_frequencies=4, camera_dim=6, hidden_dim=10, feature_dim=6, alpha=0.3)
    enc = GeometricEncoder.init(2, 4, 6, 10, 6, 3, seed=2, dtype=np.float64)
    trips = [TripletSample((0, 0), (0, 1), (6, 1)), TripletSample((6, 0), (6, 1), (0, 1))]
    names = {"fourier.frequencies", "camera.table", "fc0.weight", "ln1.gain", "fc2.bias", "head.weight"}
    assert _fd_check(enc, data, trips, cfg, names) < 1e-4


# ------------------------------------------------------------------ triplets


def test_sample_triplets_contract():
    sim = simulator.simulate(simulator.WorldConfig(seed=1, duration=80))
    tracked = tracker.tracked_detections(pipeline.track_all(sim.detections, tracker.TrackerConfig()))
    data = TrainingData.build(sim.detections, tracked, sim.cameras)
    cfg = AssocConfig()
    trips = mva.sample_triplets(data, data.frames, cfg, np.random.default_rng(0))
    assert trips
    for t in trips:
        assert t.anchor[0] == t.positive[0]
        assert t.anchor[1] != t.positive[1] == t.negative[1]
        assert cfg.t_min <= abs(t.negative[0] - t.anchor[0]) <= cfg.t_max
        assert len(data.images[t.anchor].query_idx) > 0
    # at most one triplet per (anchor image, paired camera)
    pairs = [(t.anchor, t.positive[1]) for t in trips]
    assert len(pairs) == len(set(pairs))


def test_sample_triplets_skips_anchor_without_tracked_boxes():
    rng = np.random.default_rng(0)
    data = _toy_data(rng, {(f, c): 2 for f in range(30) for c in (0, 1)}, {(f, 1): 1 for f in range(30)})
    trips = mva.sample_triplets(data, range(30), AssocConfig(), rng)
    assert trips and all(t.anchor[1] == 1 for t in trips)


# ------------------------------------------------------- training & resume


@pytest.fixture(scope="module")
def small_training():
    sim = simulator.simulate(simulator.WorldConfig(seed=2, duration=60))
    tracked = tracker.tracked_detections(pipeline.track_all(sim.detections, tracker.TrackerConfig()))
    data = TrainingData.build(sim.detections, tracked, sim.cameras)
    cfg = AssocConfig(epochs=3, lr_decay_epoch=2, num_frequencies=8, camera_dim=16, hidden_dim=32,
                      feature_dim=16, lr=1e-3)
    return data, cfg


def test_training_is_reproducible_and_resumable(small_training):
    data, cfg = small_training
    full = mva.train(data, cfg)
    again = mva.train(data, cfg)
    assert checkpoint_bytes(full.encoder, full.optimizer) == checkpoint_bytes(again.encoder, again.optimizer)
    part = mva.train(data, cfg, epochs=1)
    enc, opt = checkpoint_from_bytes(checkpoint_bytes(part.encoder, part.optimizer))
    assert opt.epoch == 1
    rest = mva.train(data, cfg, encoder=enc, optimizer=opt)
    assert checkpoint_bytes(rest.encoder, rest.optimizer) == checkpoint_bytes(full.encoder, full.optimizer)
    assert [h.l_total for h in part.history + rest.history] == [h.l_total for h in full.history]


def test_training_needs_two_views():
    data = TrainingData({}, [0], [], 1)
    with pytest.raises(ValueError):
        mva.train(data, AssocConfig(epochs=1))


def test_checkpoint_round_trip_and_validation(tmp_path, small_training):
    data, cfg = small_training
    res = mva.train(data, cfg, epochs=1)
    raw = checkpoint_bytes(res.encoder, res.optimizer)
    enc, opt = checkpoint_from_bytes(raw)
    assert checkpoint_bytes(enc, opt) == raw
    path = tmp_path / "enc.ckpt"
    mva.save_checkpoint(path, enc)
    enc2, opt2 = mva.load_checkpoint(path)
    assert opt2 is None and checkpoint_bytes(enc2) == path.read_bytes()
    with pytest.raises(ValueError):
        checkpoint_from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(raw + b"\x00")


def test_reprojection_error_after_training(trained_encoder, default_scene):
    enc, data, cfg, _ = trained_encoder
    held = [d for d in default_scene.detections if d.frame >= 450 and d.identity is not None]
    corners = mva.normalized_corners(held, default_scene.cameras)
    feat, _ = enc.forward(corners, [d.camera for d in held])
    err = np.abs(enc.reproject(feat).astype(np.float64) - corners).mean()
    assert err < 0.05
