"""JSON-lines wire formats, camera files and atomic writes."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import Box2D, CameraMeta, Detection
from .simulator import GroundTruthRecord

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Malformed or inconsistent input file."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_jsonl(path, header: Optional[dict], records: Iterable[dict]) -> None:
    lines = [] if header is None else [_dumps(header)]
    lines.extend(_dumps(r) for r in records)
    text = "\n".join(lines) + ("\n" if lines else "")
    atomic_write_bytes(path, text.encode("utf-8"))


def read_jsonl(path) -> tuple[Optional[dict], list[dict]]:
    header = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{n + 1}: {exc}") from None
            if n == 0 and "schema_version" in obj:
                header = obj
            else:
                records.append(obj)
    return header, records


def stream_header(embedding_dim: int, fps: float, cameras: str = "cameras.json", **extra) -> dict:
    h = {"schema_version": SCHEMA_VERSION, "embedding_dim": int(embedding_dim), "cameras": cameras, "fps": float(fps)}
    h.update(extra)
    return h


def detection_to_record(d: Detection, round_index: Optional[int] = None) -> dict:
    rec = {
        "video": d.video_id,
        "frame": int(d.frame),
        "camera": int(d.camera),
        "bbox": [float(v) for v in d.box.as_tuple()],
        "score": float(d.score),
    }
    if d.embedding is not None:
        rec["embedding"] = [float(v) for v in np.asarray(d.embedding).tolist()]
    if d.track_id is not None:
        rec["track_id"] = int(d.track_id)
    if d.identity is not None:
        rec["identity"] = int(d.identity)
    if d.provenance is not None:
        rec["provenance"] = d.provenance
    if round_index is not None:
        rec["round"] = int(round_index)
    return rec


def record_to_detection(rec: dict, embedding_dim: Optional[int] = None) -> Detection:
    try:
        bbox = rec["bbox"]
        emb = rec.get("embedding")
        if emb is not None:
            emb = np.asarray(emb, dtype=np.float32)
            if embedding_dim is not None and emb.shape != (embedding_dim,):
                raise SchemaError(f"embedding of length {emb.shape[0]}, header says {embedding_dim}")
        return Detection(
            str(rec["video"]), int(rec["frame"]), int(rec["camera"]),
            Box2D(float(bbox[0]), float(bbox[1]), float(bbox[2]), float(bbox[3])),
            float(rec["score"]), emb, rec.get("track_id"), rec.get("identity"), rec.get("provenance"),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SchemaError(f"bad detection record: {exc}") from None


def read_detections(path) -> tuple[dict, list[Detection]]:
    header, records = read_jsonl(path)
    if header is None:
        raise SchemaError(f"{path}: missing stream header")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    dim = header.get("embedding_dim") or None
    return header, [record_to_detection(r, dim) for r in records]


def write_detections(path, dets: Iterable[Detection], header: dict, round_index: Optional[int] = None) -> None:
    write_jsonl(path, header, (detection_to_record(d, round_index) for d in dets))


def gt_to_record(r: GroundTruthRecord) -> dict:
    rec = {
        "video": r.video_id,
        "frame": int(r.frame),
        "camera": int(r.camera),
        "identity": None if r.identity is None else int(r.identity),
        "bbox": [float(v) for v in r.box.as_tuple()],
        "occlusion": float(r.occlusion_fraction),
        "hard": bool(r.hard),
        "visible": bool(r.visible),
    }
    if r.keypoints is not None:
        rec["keypoints"] = {k: [float(v[0]), float(v[1])] for k, v in r.keypoints.items()}
    return rec


def record_to_gt(rec: dict) -> GroundTruthRecord:
    try:
        kps = rec.get("keypoints")
        return GroundTruthRecord(
            str(rec["video"]), int(rec["frame"]), int(rec["camera"]), rec.get("identity"),
            Box2D(*[float(v) for v in rec["bbox"]]),
            float(rec.get("occlusion", 0.0)), bool(rec.get("hard", False)), bool(rec.get("visible", True)),
            None if kps is None else {k: (float(v[0]), float(v[1])) for k, v in kps.items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad ground-truth record: {exc}") from None


def write_ground_truth(path, records: Iterable[GroundTruthRecord]) -> None:
    write_jsonl(path, {"schema_version": SCHEMA_VERSION, "kind": "ground_truth"}, (gt_to_record(r) for r in records))


def read_ground_truth(path) -> list[GroundTruthRecord]:
    _, records = read_jsonl(path)
    return [record_to_gt(r) for r in records]


def write_cameras(path, cameras: dict) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "cameras": [
            {"camera": c.camera, "width": c.width, "height": c.height, "fps": float(c.fps)}
            for c in (cameras[k] for k in sorted(cameras))
        ],
    }
    atomic_write_bytes(path, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))


def read_cameras(path) -> dict[int, CameraMeta]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return {
            int(c["camera"]): CameraMeta(int(c["camera"]), int(c["width"]), int(c["height"]), float(c.get("fps", 15.0)))
            for c in doc["cameras"]
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad camera file: {exc}") from None
