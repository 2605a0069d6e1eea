import json

import numpy as np
import pytest

from mvanon import formats, pipeline, simulator, tracker
from mvanon.core import Box2D, CameraMeta, Detection, iou_matrix, nms
from mvanon.mva import AssocConfig, GeometricEncoder
from mvanon.pipeline import (
    CROSS_VIEW,
    TRACKED,
    DetectionPool,
    PipelineConfig,
    RoundConfig,
    associate_views,
    augment_merge,
    augment_stream,
    emit_pseudo_labels,
    run_round,
    sampling_stride,
)

CAMS = {c: CameraMeta(c, 640, 480) for c in range(3)}


def enc():
    return GeometricEncoder.init(3, 8, 16, 32, 16, 3, seed=0)


def det(box, score, camera, emb, frame=0, track_id=None):
    return Detection("v", frame, camera, Box2D(*box), score, np.asarray(emb, dtype=float), track_id)


E0 = [1.0, 0.0, 0.0, 0.0]
E1 = [0.0, 1.0, 0.0, 0.0]


def test_pool_split():
    dets = [det((0, 0, 10, 10), s, 0, E0) for s in (0.05, 0.1, 0.3, 0.6, 0.61, 0.9)]
    pool = DetectionPool.build(dets, tracker.TrackerConfig())
    assert [d.score for d in pool.flat("all")] == [0.3, 0.6, 0.61, 0.9]
    assert [d.score for d in pool.flat("high")] == [0.61, 0.9]
    assert [d.score for d in pool.flat("low")] == [0.3, 0.6]


def test_associate_constructed_correspondence():
    q = det((100, 100, 150, 250), 0.9, 0, E0, track_id=4)
    true = det((300, 120, 340, 260), 0.25, 1, [0.99, 0.05, 0.0, 0.0])
    other = det((400, 100, 450, 250), 0.4, 1, E1)
    out = associate_views({0: [q]}, {0: [q], 1: [true, other]}, enc(), 1.0, 0.3, CAMS)
    assert len(out[1]) == 1
    got = out[1][0]
    assert got.box == true.box and got.score == true.score
    assert got.track_id == 4 and got.provenance == CROSS_VIEW
    assert out[0] == []


def test_associate_tau_zero_and_empty_queries():
    q = det((100, 100, 150, 250), 0.9, 0, E0, track_id=1)
    g = det((300, 120, 340, 260), 0.25, 1, [0.9, 0.1, 0.0, 0.0])
    assert associate_views({0: [q]}, {0: [q], 1: [g]}, enc(), 0.5, 0.0, CAMS)[1] == []
    assert associate_views({0: [], 1: []}, {0: [q], 1: [g]}, enc(), 0.5, 0.3, CAMS) == {0: [], 1: []}


def test_associate_conflict_keeps_closest_query():
    near = det((100, 100, 150, 250), 0.9, 0, [1.0, 0.1, 0, 0], track_id=1)
    far = det((100, 100, 150, 250), 0.9, 2, [1.0, 0.4, 0, 0], track_id=2)
    g = det((300, 120, 340, 260), 0.3, 1, E0)
    out = associate_views({0: [near], 2: [far]}, {0: [near], 1: [g], 2: [far]}, enc(), 1.0, 0.5, CAMS)
    assert [d.track_id for d in out[1]] == [1]


def test_associate_requires_embeddings_when_alpha_positive():
    q = Detection("v", 0, 0, Box2D(0, 0, 10, 10), 0.9, None, 1)
    g = Detection("v", 0, 1, Box2D(0, 0, 10, 10), 0.3)
    with pytest.raises(ValueError):
        associate_views({0: [q]}, {0: [q], 1: [g]}, enc(), 0.5, 0.3, CAMS)
    associate_views({0: [q]}, {0: [q], 1: [g]}, enc(), 0.0, 0.3, CAMS)


def test_merge_examples():
    t = [det((0, 0, 10, 10), 0.9, 0, E0, track_id=0), det((100, 0, 110, 10), 0.5, 0, E0, track_id=1)]
    assert [d.key for d in augment_merge(t, [], 0.6)] == [d.key for d in nms(t, 0.6)]
    dup = t[1].with_(provenance=CROSS_VIEW, track_id=7)
    merged = augment_merge(t, [dup], 0.6)
    assert len(merged) == 2 and all(d.provenance == TRACKED for d in merged)
    v = [det((200, 0, 210, 10), 0.3, 0, E1, track_id=5)]
    merged = augment_merge(t, v, 0.6)
    assert len(merged) == 3 and sum(d.provenance == CROSS_VIEW for d in merged) == 1


def test_sampling_stride():
    assert sampling_stride(15.0, 0.1) == 150
    assert sampling_stride(15.0, 100.0) == 1


def test_emit_pseudo_labels(tmp_path):
    cfg = RoundConfig(round_index=2)
    aug = [det((0, 0, 10, 10), 0.9, c, E0, frame=f, track_id=0).with_(provenance=TRACKED)
           for f in range(400) for c in (1, 0)]
    n = emit_pseudo_labels(aug, cfg, tmp_path / "p.jsonl", 15.0, 4)
    header, recs = formats.read_jsonl(tmp_path / "p.jsonl")
    assert n == len(recs) == 6
    assert [(r["frame"], r["camera"]) for r in recs] == [(0, 0), (0, 1), (150, 0), (150, 1), (300, 0), (300, 1)]
    assert all(r["round"] == 2 and r["provenance"] == TRACKED for r in recs)
    assert header["frame_stride"] == 150
    assert emit_pseudo_labels([], cfg, tmp_path / "e.jsonl", 15.0) == 0
    assert (tmp_path / "e.jsonl").read_text().count("\n") == 1


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(assoc_accept_thresh=1.5)
    with pytest.raises(ValueError):
        RoundConfig(sampling_rate=0)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    sim = simulator.simulate(simulator.WorldConfig(seed=6, duration=60))
    cfg = PipelineConfig(assoc=AssocConfig(epochs=2, num_frequencies=8, camera_dim=16, hidden_dim=32,
                                           feature_dim=16, lr=1e-3))
    root = tmp_path_factory.mktemp("rounds")
    art = run_round(sim.detections, sim.cameras, cfg, root, gt=sim.ground_truth)
    return sim, cfg, root, art


def test_run_round_layout(small_run):
    sim, cfg, root, art = small_run
    assert art.directory == root / "round_1"
    names = sorted(p.name for p in art.directory.iterdir())
    assert names == ["augmented.jsonl", "encoder.ckpt", "pseudo_labels.jsonl", "report.json", "tracklets.jsonl"]
    assert [p.name for p in root.iterdir()] == ["round_1"]
    report = json.loads((art.directory / "report.json").read_text())
    assert set(report["metrics"]) == {"high", "tracked", "augmented"}


def test_augmented_boxes_come_from_the_pool(small_run):
    sim, cfg, _, art = small_run
    pool_keys = {d.key for d in sim.detections if d.score > cfg.tracker.low_thresh}
    by_image = {}
    for d in art.augmented:
        assert d.key in pool_keys
        assert d.provenance in (TRACKED, CROSS_VIEW) and d.track_id is not None
        by_image.setdefault((d.frame, d.camera), []).append(d.box.as_tuple())
    for boxes in by_image.values():
        m = iou_matrix(boxes, boxes)
        np.fill_diagonal(m, 0)
        assert m.max(initial=0) <= cfg.round.nms_thresh


def test_tracked_boxes_survive_unless_suppressed(small_run):
    sim, cfg, _, art = small_run
    tracked = tracker.tracked_detections(art.tracklets)
    kept = {d.key for d in art.augmented}
    aug_by = {}
    for d in art.augmented:
        aug_by.setdefault((d.frame, d.camera), []).append(d)
    for d in tracked:
        if d.key in kept:
            continue
        rivals = [a for a in aug_by.get((d.frame, d.camera), []) if a.score >= d.score]
        assert rivals and iou_matrix(d.box.as_tuple(), [a.box.as_tuple() for a in rivals]).max() > cfg.round.nms_thresh


def test_second_round_and_determinism(small_run, tmp_path):
    sim, cfg, root, art = small_run
    ckpt = art.directory / "encoder.ckpt"
    cfg2 = PipelineConfig(cfg.tracker, cfg.assoc, RoundConfig(round_index=2), cfg.eval)
    art2 = run_round(sim.detections, sim.cameras, cfg2, root, encoder_ckpt=ckpt)
    assert sorted(p.name for p in root.iterdir()) == ["round_1", "round_2"]
    assert (art2.directory / "encoder.ckpt").read_bytes() == ckpt.read_bytes()
    again = run_round(sim.detections, sim.cameras, cfg, tmp_path, gt=sim.ground_truth)
    for name in ("augmented.jsonl", "tracklets.jsonl", "encoder.ckpt", "pseudo_labels.jsonl", "report.json"):
        assert (again.directory / name).read_bytes() == (art.directory / name).read_bytes()


def test_failed_round_leaves_nothing(tmp_path):
    sim = simulator.simulate(simulator.WorldConfig(seed=1, duration=20))
    cams = {0: sim.cameras[0]}  # detections reference cameras missing here
    with pytest.raises(ValueError):
        run_round(sim.detections, cams, PipelineConfig(assoc=AssocConfig(epochs=1)), tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_recall_not_below_tracking(small_run):
    report = json.loads((small_run[3].directory / "report.json").read_text())["metrics"]
    assert report["augmented"]["R"] >= report["tracked"]["R"]
    assert report["tracked"]["R"] > report["high"]["R"]
