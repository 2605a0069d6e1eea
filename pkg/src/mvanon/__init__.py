"""Multi-view detection augmentation for uncalibrated camera streams.

Missed people are recovered by tracking weak detections over time within
each view and by retrieving them across views with a self-supervised
geometric association model. The outputs feed detector fine-tuning as
pseudo labels.
"""
from .core import Box2D, CameraMeta, Detection, hungarian, iou, nms
from .formats import SCHEMA_VERSION
from .mva import FORMAT_VERSION, AssocConfig, GeometricEncoder
from .pipeline import PipelineConfig, RoundConfig, run_round
from .tracker import TrackerConfig, run_bidirectional

__version__ = "0.1.0"

__all__ = [
    "Box2D", "CameraMeta", "Detection", "hungarian", "iou", "nms",
    "SCHEMA_VERSION", "FORMAT_VERSION", "AssocConfig", "GeometricEncoder",
    "PipelineConfig", "RoundConfig", "run_round", "TrackerConfig", "run_bidirectional",
]
