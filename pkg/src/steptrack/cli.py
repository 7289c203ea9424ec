"""``steptrack`` command line: synth, train, track and eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, describe_keys, load_config, write_echo
from .data import DatasetError, SchemaError, Sequence, letterbox_scale, load_dataset, load_frame_dir, make_toy_frame, save_dataset, synth_sequence
from .metrics import MetricError, evaluate_run
from .network import CheckpointError, STEPNet, load_model
from .trainer import NonFiniteLossError, train_loop
from .tracker import POLICIES, TrackerError, run_many

log = logging.getLogger("steptrack")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_MISMATCH = 5
EXIT_SCHEMA = 6


class UsageError(ValueError):
    pass


class MismatchError(ValueError):
    pass


# ----------------------------------------------------------------- helpers
def _parse_set(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _parse_numbers(text: str, count: int | None, what: str) -> list[float]:
    try:
        values = [float(v) for v in text.replace(" ", "").split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"malformed {what} {text!r}") from exc
    if count is not None and len(values) != count:
        raise UsageError(f"{what} needs {count} comma-separated numbers, got {text!r}")
    if not all(np.isfinite(values)):
        raise UsageError(f"{what} {text!r} has non-finite values")
    return values


def _config(args, extra: dict | None = None) -> RunConfig:
    overrides = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key, value in (extra or {}).items():
        if value is not None:
            overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def _explicit_model_keys(args) -> set[str]:
    keys = {k.split(".", 1)[1] for k in _parse_set(getattr(args, "set", None)) if k.startswith("model.")}
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        keys |= set(doc.get("model", {}))
    return keys


def _dataset_k(sequences: list[Sequence]) -> int:
    for seq in sequences:
        for frame in seq.frames:
            for ann in frame.annotations:
                return ann.k
    raise DatasetError("dataset has no annotations")


# ---------------------------------------------------------------- commands
def cmd_synth(args) -> int:
    cfg = _config(args, {"synth.n_frames": args.n_frames})
    if args.toy is None and args.source is None:
        raise UsageError("synth needs --source DATASET or --toy N")
    if args.toy is not None:
        if args.toy < 1:
            raise UsageError("--toy must be >= 1")
        sources = [make_toy_frame(cfg.seed * 1000 + i, k=args.k) for i in range(args.toy)]
    else:
        sources = [f for seq in load_dataset(args.source, size=cfg.model.image_size) for f in seq.frames]
        sources = [f for f in sources if f.annotations]
    if not sources:
        raise DatasetError("no annotated source frames")
    sequences = []
    ranges = cfg.synth.ranges()
    for i, frame in enumerate(sources):
        for j in range(args.per_image):
            seq = synth_sequence(frame, cfg.synth.n_frames, ranges, seed=int(np.random.SeedSequence([cfg.seed, i, j]).generate_state(1)[0]))
            seq.seq_id = len(sequences)
            sequences.append(seq)
    out = Path(args.out) / "dataset.json"
    save_dataset(sequences, out)
    write_echo(cfg, out)
    log.info("wrote %d sequences to %s", len(sequences), out)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    extra = {"train.epochs": args.epochs, "train.lr": args.lr, "train.max_steps": args.max_steps, "train.decay_epoch": args.decay_epoch}
    raw = load_dataset(args.data, size=None, load_images=False)
    k = _dataset_k(raw)
    if "k" not in _explicit_model_keys(args):
        extra["model.k"] = k
    cfg = _config(args, extra)
    sequences = load_dataset(args.data, size=cfg.model.image_size)
    if cfg.model.k != k:
        raise MismatchError(f"dataset has k={k} keypoints, config asks for k={cfg.model.k}")
    model = STEPNet(cfg.model)

    def report(rec):
        if rec["step"] % args.log_every == 0:
            log.info("step %d epoch %d lr %.2e total %.4f", rec["step"], rec["epoch"], rec["lr"], rec["total"])

    ckpt = train_loop(model, sequences, cfg.train, args.out, cfg.loss, resume=not args.no_resume, on_step=report)
    write_echo(cfg, ckpt)
    print(ckpt)
    return EXIT_OK


def _check_model(model: STEPNet, args) -> None:
    user = _explicit_model_keys(args)
    cfg = _config(args)
    for key in ("k", "n"):
        if key in user and getattr(cfg.model, key) != getattr(model.cfg, key):
            raise MismatchError(f"checkpoint has {key}={getattr(model.cfg, key)}, config asks for {key}={getattr(cfg.model, key)}")


def _track_jobs_from_dataset(args, model: STEPNet, cfg: RunConfig):
    sequences = load_dataset(args.dataset, size=model.cfg.image_size)
    if _dataset_k(sequences) != model.cfg.k:
        raise MismatchError(f"dataset has k={_dataset_k(sequences)}, checkpoint has k={model.cfg.k}")
    # undo letterboxing so records are in the dataset's own coordinates
    raw = load_dataset(args.dataset, size=None, load_images=False)
    policy = cfg.track.update_policy()
    for seq, raw_seq in zip(sequences, raw):
        first = seq.frames[0]
        raw_first = raw_seq.frames[0]
        scale = letterbox_scale(raw_first.height, raw_first.width, model.cfg.image_size)
        jobs, tids = [], []
        for ann in first.annotations:
            job = {"init_bbox": ann.bbox, "policy": policy, "memory_encoding": cfg.track.memory_encoding}
            if not model.cfg.use_gmsp:
                job["init_keypoints"] = ann.keypoints
            if args.gt_boxes:
                boxes, last = [], ann.bbox
                for frame in seq.frames:
                    a = frame.annotation(ann.target_id)
                    last = a.bbox if a is not None else last
                    boxes.append(last)
                job["per_frame_boxes"] = boxes
            jobs.append(job)
            tids.append(ann.target_id)
        yield seq.seq_id, [f.image for f in seq.frames], jobs, tids, scale


def _track_jobs_from_frames(args, model: STEPNet, cfg: RunConfig):
    if not args.init_bbox:
        raise UsageError("--frames needs at least one --init-bbox")
    frames, scales = load_frame_dir(args.frames, model.cfg.image_size)
    if not frames:
        raise DatasetError(f"no images in {args.frames}")
    sx, sy = scales[0]
    boxes_doc = None
    if args.boxes:
        boxes_doc = json.loads(Path(args.boxes).read_text())
        if len(args.init_bbox) == 1 and boxes_doc and not isinstance(boxes_doc[0][0], list):
            boxes_doc = [boxes_doc]
        if len(boxes_doc) != len(args.init_bbox):
            raise UsageError("--boxes must hold one per-frame box list per --init-bbox")
    if args.init_keypoints and len(args.init_keypoints) != len(args.init_bbox):
        raise UsageError("give one --init-keypoints per --init-bbox")
    if not model.cfg.use_gmsp and not args.init_keypoints:
        raise UsageError("a checkpoint trained without GMSP needs --init-keypoints")
    policy = cfg.track.update_policy()

    def to_canvas(box):
        x1, y1, x2, y2 = box
        return (x1 * sx, y1 * sy, x2 * sx, y2 * sy)

    jobs = []
    for i, text in enumerate(args.init_bbox):
        job = {"init_bbox": to_canvas(_parse_numbers(text, 4, "--init-bbox")), "policy": policy, "memory_encoding": cfg.track.memory_encoding}
        if args.init_keypoints:
            kps = np.asarray(_parse_numbers(args.init_keypoints[i], 3 * model.cfg.k, "--init-keypoints")).reshape(-1, 3)
            kps[:, 0] *= sx
            kps[:, 1] *= sy
            job["init_keypoints"] = kps
        if boxes_doc is not None:
            job["per_frame_boxes"] = [to_canvas(b) for b in boxes_doc[i]]
        jobs.append(job)
    yield args.sequence_id, frames, jobs, list(range(len(jobs))), (sx, sy)


def cmd_track(args) -> int:
    if (args.frames is None) == (args.dataset is None):
        raise UsageError("track needs exactly one of --frames or --dataset")
    cfg = _config(args, {"track.policy": args.policy, "track.capacity": args.capacity})
    model, _, _ = load_model(args.ckpt)
    _check_model(model, args)
    source = _track_jobs_from_dataset(args, model, cfg) if args.dataset else _track_jobs_from_frames(args, model, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for seq_id, frames, jobs, tids, (sx, sy) in source:
        try:
            results = run_many(model, frames, jobs, workers=args.workers)
        except TrackerError as exc:
            raise UsageError(str(exc)) from exc
        for tid, outputs in zip(tids, results):
            for o in outputs:
                rec = o.to_record(sequence=seq_id, target_id=tid)
                x1, y1, x2, y2 = rec["bbox"]
                rec["bbox"] = [x1 / sx, y1 / sy, x2 / sx, y2 / sy]
                rec["keypoints"] = [[x / sx, y / sy, c] for x, y, c in rec["keypoints"]]
                lines.append(json.dumps(rec))
    out.write_text("".join(l + "\n" for l in lines))
    write_echo(cfg, out)
    print(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, {"eval.kappa": args.kappa})
    report = evaluate_run(args.pred, args.gt, cfg.eval)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    write_echo(cfg, out)
    print(f"{'metric':<12}{'value':>12}")
    print(f"{'MSE':<12}{report.mse:>12.3f}")
    print(f"{'OKS':<12}{report.oks:>12.4f}")
    for x, v in report.pdj.items():
        print(f"{'PDJ@' + x:<12}{v:>12.4f}")
    print(f"{'mean IoU':<12}{report.mean_iou:>12.4f}")
    print(f"{'targets':<12}{report.n_targets:>12d}")
    if report.unmatched:
        print(f"unmatched targets: {report.unmatched}")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (config_version 1)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key; flags win over the file")
    p.add_argument("--seed", type=int, help="global seed (model init, sampling, synthesis)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steptrack",
        description="Joint tracking and keypoint estimation with transformer-predicted target models.",
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = {"epilog": describe_keys(), "formatter_class": argparse.RawDescriptionHelpFormatter}

    p = sub.add_parser("synth", help="make affine-warped clips from annotated frames", **fmt)
    _common(p)
    p.add_argument("--source", help="dataset JSON whose annotated frames seed the clips")
    p.add_argument("--toy", type=int, help="use N generated stick-figure frames instead of --source")
    p.add_argument("--k", type=int, default=5, help="keypoints per toy figure (default 5)")
    p.add_argument("--n-frames", type=int, help="frames per clip (synth.n_frames)")
    p.add_argument("--per-image", type=int, default=1, help="clips per source frame")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset", **fmt)
    _common(p)
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--out", required=True, help="run directory (checkpoint, log, config echo)")
    p.add_argument("--epochs", type=int, help="train.epochs")
    p.add_argument("--lr", type=float, help="train.lr")
    p.add_argument("--decay-epoch", type=int, help="train.decay_epoch")
    p.add_argument("--max-steps", type=int, help="train.max_steps")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint in --out")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track targets through frames", **fmt)
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", help="directory of frames (sorted by file name)")
    p.add_argument("--dataset", help="dataset JSON: track every target of every sequence from its first-frame box")
    p.add_argument("--init-bbox", action="append", metavar="X1,Y1,X2,Y2", help="initial box; repeat for several targets")
    p.add_argument("--init-keypoints", action="append", metavar="X,Y,V,...", help="initial keypoints (needed without GMSP)")
    p.add_argument("--boxes", help="JSON per-frame boxes; switches to the top-down protocol")
    p.add_argument("--gt-boxes", action="store_true", help="with --dataset: use ground-truth boxes every frame")
    p.add_argument("--sequence-id", type=int, default=0, help="sequence id written to records in --frames mode")
    p.add_argument("--policy", choices=POLICIES, help="track.policy")
    p.add_argument("--capacity", type=int, choices=(2, 3), help="track.capacity")
    p.add_argument("--workers", type=int, help="threads for concurrent targets")
    p.add_argument("--out", required=True, help="output JSONL")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracker output against ground truth", **fmt)
    _common(p)
    p.add_argument("--pred", required=True, help="tracker JSONL")
    p.add_argument("--gt", required=True, help="dataset JSON")
    p.add_argument("--kappa", type=float, help="eval.kappa")
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, TrackerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except MismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (SchemaError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, DatasetError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
