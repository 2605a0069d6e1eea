"""Command-line entry point: simulate, track, train-assoc, augment, eval, round, version.

Exit codes: 0 success, 1 runtime failure, 2 input or configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from threadpoolctl import threadpool_limits

from . import formats, metrics, mva, pipeline, simulator, tracker
from .core import CameraMeta

log = logging.getLogger("mvanon")


class InputError(Exception):
    """Bad input file, path or configuration (exit code 2)."""


# ------------------------------------------------------------------- config

_SECTIONS = {
    "world": simulator.WorldConfig,
    "corruption": simulator.CorruptionModel,
    "tracker": tracker.TrackerConfig,
    "assoc": mva.AssocConfig,
    "round": pipeline.RoundConfig,
    "eval": metrics.EvalConfig,
}


@dataclasses.dataclass
class RunConfig:
    world: simulator.WorldConfig
    corruption: simulator.CorruptionModel
    tracker: tracker.TrackerConfig
    assoc: mva.AssocConfig
    round: pipeline.RoundConfig
    eval: metrics.EvalConfig
    seed: int = 0

    def pipeline(self) -> pipeline.PipelineConfig:
        return pipeline.PipelineConfig(self.tracker, self.assoc, self.round, self.eval)


def _build(cls, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise InputError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, list) and k != "cameras":
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[k] = v
    if cls is simulator.WorldConfig and kwargs.get("cameras") is not None:
        try:
            kwargs["cameras"] = [simulator.PinholeCamera(**c) for c in kwargs["cameras"]]
        except TypeError as exc:
            raise InputError(f"bad camera in 'world': {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid '{where}' config: {exc}") from None


def load_config(path: Optional[str], seed: Optional[int] = None) -> RunConfig:
    """Strict JSON config. A top-level ``seed`` seeds every section that does
    not set its own; ``--seed`` on the command line overrides both."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise InputError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise InputError(f"unknown top-level config key(s): {', '.join(unknown)}")
    base_seed = doc.get("seed", 0)
    if not isinstance(base_seed, int):
        raise InputError("seed must be an integer")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise InputError(f"config section '{name}' must be an object")
        values = dict(values)
        if "seed" in {f.name for f in dataclasses.fields(cls)}:
            if seed is not None:
                values["seed"] = seed
            else:
                values.setdefault("seed", base_seed)
        sections[name] = _build(cls, values, name)
    return RunConfig(**sections, seed=base_seed if seed is None else seed)


# ----------------------------------------------------------------- helpers


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {path}")
    return p


def _read_stream(path, what: str):
    p = _need_file(path, what)
    try:
        return formats.read_detections(p)
    except formats.SchemaError as exc:
        raise InputError(str(exc)) from None


def _cameras_for(det_path: Path, header: dict, override: Optional[str]) -> dict[int, CameraMeta]:
    if override is not None:
        ref = Path(override)
    else:
        ref = det_path.parent / header.get("cameras", "cameras.json")
    _need_file(ref, "camera file")
    try:
        return formats.read_cameras(ref)
    except formats.SchemaError as exc:
        raise InputError(str(exc)) from None


def _embedding_dim(header: dict) -> int:
    return int(header.get("embedding_dim") or 0)


# ------------------------------------------------------------- subcommands


def cmd_simulate(args) -> None:
    cfg = load_config(args.config, args.seed)
    result = simulator.simulate(cfg.world, cfg.corruption)
    out = Path(args.out)
    formats.write_cameras(out / "cameras.json", result.cameras)
    header = formats.stream_header(cfg.corruption.embedding_dim, cfg.world.fps)
    formats.write_detections(out / "detections.jsonl", result.detections, header)
    formats.write_ground_truth(out / "gt.jsonl", result.ground_truth)
    log.info("simulated %d detections, %d ground-truth boxes", len(result.detections), len(result.ground_truth))


def cmd_track(args) -> None:
    cfg = load_config(args.config)
    path = Path(args.inp)
    header, dets = _read_stream(path, "detection stream")
    if args.cameras is not None:
        _need_file(args.cameras, "camera file")
    tracklets = pipeline.track_all(dets, cfg.tracker)
    tracked = tracker.tracked_detections(tracklets)
    out_header = formats.stream_header(_embedding_dim(header), header["fps"], header.get("cameras", "cameras.json"))
    formats.write_detections(args.out, tracked, out_header)
    log.info("%d tracklets, %d tracked boxes", len(tracklets), len(tracked))


def cmd_train_assoc(args) -> None:
    cfg = load_config(args.config, args.seed)
    det_path = Path(args.detections)
    header, dets = _read_stream(det_path, "detection stream")
    _, tracked = _read_stream(args.tracklets, "tracklet stream")
    cameras = _cameras_for(det_path, header, args.cameras)
    if len(cameras) < 2 or len({d.camera for d in dets}) < 2:
        raise InputError("association training needs >= 2 views")
    assoc = cfg.assoc
    if args.epochs is not None:
        assoc = dataclasses.replace(assoc, epochs=args.epochs)
    enc = opt = None
    if args.resume is not None:
        _need_file(args.resume, "checkpoint")
        try:
            enc, opt = mva.load_checkpoint(args.resume)
        except (ValueError, KeyError) as exc:
            raise InputError(f"{args.resume}: {exc}") from None
    data = mva.TrainingData.build(dets, tracked, cameras, cfg.tracker.low_thresh)
    result = mva.train(
        data, assoc, encoder=enc, optimizer=opt,
        log=lambda e, l: log.info("epoch %d  l_syn %.5f  l_pro %.5f", e, l.l_syn, l.l_pro),
    )
    mva.save_checkpoint(args.out, result.encoder, result.optimizer)


def cmd_augment(args) -> None:
    cfg = load_config(args.config)
    det_path = Path(args.detections)
    header, dets = _read_stream(det_path, "detection stream")
    _, tracked = _read_stream(args.tracklets, "tracklet stream")
    cameras = _cameras_for(det_path, header, args.cameras)
    _need_file(args.ckpt, "checkpoint")
    try:
        enc, _ = mva.load_checkpoint(args.ckpt)
    except (ValueError, KeyError) as exc:
        raise InputError(f"{args.ckpt}: {exc}") from None
    pool = pipeline.DetectionPool.build(dets, cfg.tracker)
    augmented = pipeline.augment_stream(pool, tracked, enc, cameras, cfg.assoc.alpha, cfg.round)
    out = Path(args.out)
    dim = _embedding_dim(header)
    fps = float(header["fps"])
    formats.write_detections(
        out / "augmented.jsonl", augmented,
        formats.stream_header(dim, fps, header.get("cameras", "cameras.json")),
    )
    n = pipeline.emit_pseudo_labels(
        augmented, cfg.round, out / "pseudo_labels.jsonl", fps, dim, header.get("cameras", "cameras.json"),
    )
    log.info("%d augmented boxes, %d pseudo labels", len(augmented), n)


def _load_predictions(path, cfg: metrics.EvalConfig):
    p = _need_file(path, "prediction file")
    try:
        header, records = formats.read_jsonl(p)
    except formats.SchemaError as exc:
        raise InputError(str(exc)) from None
    if header is None:
        raise InputError(f"{path}: missing stream header")
    if header.get("kind") == "ground_truth":
        gts = [formats.record_to_gt(r) for r in records]
        return metrics.gt_boxes(gts, cfg) if cfg.level != "whole_body" else [
            metrics.EvalBox((g.video_id, g.frame, g.camera), g.box.as_tuple(), 1.0) for g in gts
        ]
    try:
        dets = [formats.record_to_detection(r) for r in records]
    except formats.SchemaError as exc:
        raise InputError(str(exc)) from None
    kps = [r.get("keypoints") for r in records]
    return metrics.pred_boxes(dets, cfg, keypoints=kps)


def cmd_eval(args) -> None:
    cfg = load_config(args.config)
    ecfg = cfg.eval
    if args.level is not None:
        iou = args.iou if args.iou is not None else None
        try:
            ecfg = metrics.EvalConfig(args.level, iou, ecfg.pseudo_box_size, ecfg.score_thresh)
        except ValueError as exc:
            raise InputError(str(exc)) from None
    preds = _load_predictions(args.pred, ecfg)
    gt_path = _need_file(args.gt, "ground-truth file")
    try:
        gt = formats.read_ground_truth(gt_path)
    except formats.SchemaError as exc:
        raise InputError(str(exc)) from None
    gts = metrics.gt_boxes(gt, ecfg)
    try:
        report = metrics.evaluate(preds, gts, ecfg, with_holistic=not args.no_holistic)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    formats.atomic_write_bytes(args.out, (json.dumps(report, indent=2) + "\n").encode("utf-8"))


def cmd_round(args) -> None:
    cfg = load_config(args.config, args.seed)
    pcfg = cfg.pipeline()
    if args.round is not None:
        pcfg.round = dataclasses.replace(pcfg.round, round_index=args.round)
    det_path = Path(args.detections)
    header, dets = _read_stream(det_path, "detection stream")
    cameras = _cameras_for(det_path, header, args.cameras)
    gt = None
    if args.gt is not None:
        try:
            gt = formats.read_ground_truth(_need_file(args.gt, "ground-truth file"))
        except formats.SchemaError as exc:
            raise InputError(str(exc)) from None
    if args.ckpt is not None:
        _need_file(args.ckpt, "checkpoint")
    art = pipeline.run_round(dets, cameras, pcfg, args.out, encoder_ckpt=args.ckpt, gt=gt, fps=float(header["fps"]))
    log.info("round written to %s", art.directory)


def cmd_version(args) -> None:
    from . import __version__

    print(json.dumps({
        "version": __version__,
        "schema_version": formats.SCHEMA_VERSION,
        "checkpoint_format_version": mva.FORMAT_VERSION,
    }))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvanon", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP threads (1 = bitwise deterministic)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthetic multi-camera scene")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="bidirectional per-view tracking")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--cameras")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("train-assoc", help="train the geometric association encoder")
    p.add_argument("--detections", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--cameras")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="total epochs (overrides the config)")
    p.add_argument("--resume", help="continue from a checkpoint with optimizer state")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_assoc)

    p = sub.add_parser("augment", help="cross-view retrieval, merge, pseudo labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--tracklets", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cameras")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", help="precision, recall, AP, hard and holistic recall")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--level", choices=metrics.LEVELS)
    p.add_argument("--iou", type=float)
    p.add_argument("--no-holistic", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("round", help="one full augmentation round into OUT/round_k")
    p.add_argument("--detections", required=True)
    p.add_argument("--cameras")
    p.add_argument("--ckpt")
    p.add_argument("--gt")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--round", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_round)

    p = sub.add_parser("version", help="print schema and checkpoint versions")
    p.set_defaults(func=cmd_version)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (InputError, formats.SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
