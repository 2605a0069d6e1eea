"""Shared fixtures and the acceptance summary printed after the run."""
from __future__ import annotations

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mvanon import mva, pipeline, simulator, tracker

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def default_scene():
    """The default synthetic scene: 4 cameras, 6 agents, 600 frames, seed 0."""
    return simulator.simulate(simulator.WorldConfig(seed=0))


@pytest.fixture(scope="session")
def tracked_scene(default_scene):
    cfg = tracker.TrackerConfig()
    tracklets = pipeline.track_all(default_scene.detections, cfg)
    return tracker.tracked_detections(tracklets)


HELD_OUT_START = 450
ACCEPT_EPOCHS = 40


@pytest.fixture(scope="session")
def trained_encoder(default_scene, tracked_scene):
    """40 epochs on frames [0, 450); frames [450, 600) stay held out.

    Returns (encoder, training data, config, wall seconds)."""
    import time

    cfg = mva.AssocConfig(epochs=ACCEPT_EPOCHS, lr_decay_epoch=30)
    data = mva.TrainingData.build(default_scene.detections, tracked_scene, default_scene.cameras)
    train_frames = [f for f in data.frames if f < HELD_OUT_START]
    t0 = time.perf_counter()
    result = mva.train(data, cfg, anchor_frames=train_frames)
    return result.encoder, data, cfg, time.perf_counter() - t0


def random_boxes(rng: np.random.Generator, n: int, size: float = 100.0, span: float = 400.0) -> np.ndarray:
    xy = rng.uniform(0, span, (n, 2))
    wh = rng.uniform(5, size, (n, 2))
    return np.c_[xy, xy + wh]
