"""Keypoint and box metrics plus run-level evaluation against a dataset file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SchemaError, load_dataset

DEFAULT_KAPPA = 0.08
PDJ_THRESHOLDS = (0.05, 0.08)


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. no visible keypoints)."""


def _visible(pred, gt, visibility) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)[:, :2]
    gt = np.asarray(gt, dtype=np.float64)[:, :2]
    vis = np.asarray(visibility, dtype=bool).ravel()
    if pred.shape != gt.shape or vis.size != len(gt):
        raise MetricError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, visibility {vis.size}")
    if not vis.any():
        raise MetricError("no visible keypoints")
    return pred[vis], gt[vis]


def _sq_dist(pred, gt, visibility) -> np.ndarray:
    p, g = _visible(pred, gt, visibility)
    return ((p - g) ** 2).sum(axis=1)


def _area(bbox) -> float:
    x1, y1, x2, y2 = (float(b) for b in bbox)
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def mse_keypoints(pred, gt, visibility) -> float:
    """Mean squared Euclidean error (px^2) over visible keypoints."""
    return float(_sq_dist(pred, gt, visibility).mean())


def oks(pred, gt, visibility, bbox, kappa: float = DEFAULT_KAPPA) -> float:
    """Mean of exp(-d^2 / (2 A kappa^2)) over visible keypoints, A the box area."""
    area = _area(bbox)
    if area <= 0:
        raise MetricError(f"degenerate bbox {bbox}")
    d2 = _sq_dist(pred, gt, visibility)
    return float(np.exp(-d2 / (2.0 * area * kappa**2)).mean())


def pdj(pred, gt, visibility, bbox, x: float) -> float:
    """Fraction of visible keypoints whose error is strictly below x times the box diagonal."""
    x1, y1, x2, y2 = (float(b) for b in bbox)
    diag = float(np.hypot(x2 - x1, y2 - y1))
    d = np.sqrt(_sq_dist(pred, gt, visibility))
    return float(np.mean(d < x * diag))


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    if not (ax1 < ax2 and ay1 < ay2 and bx1 < bx2 and by1 < by2):
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = _area(box_a) + _area(box_b) - inter
    return inter / union if union > 0 else 0.0


def default_op_thresholds(steps: int = 100) -> np.ndarray:
    """Uniform grid over (0, 1]."""
    return np.arange(1, steps + 1) / steps


def op_curve(ious, thresholds=None) -> dict[float, float]:
    """OP_T = fraction of frames with IoU >= T (inclusive, so perfect boxes score 1 at T = 1)."""
    ious = np.asarray(list(ious), dtype=np.float64)
    if ious.size == 0:
        raise MetricError("no IoU values")
    thresholds = default_op_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    return {float(t): float(np.mean(ious >= t)) for t in thresholds}


# --------------------------------------------------------------- run level
@dataclass(frozen=True)
class EvalConfig:
    kappa: float = DEFAULT_KAPPA
    pdj_thresholds: tuple[float, ...] = PDJ_THRESHOLDS
    op_steps: int = 100

    def __post_init__(self):
        object.__setattr__(self, "pdj_thresholds", tuple(float(x) for x in self.pdj_thresholds))
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.op_steps < 1:
            raise ValueError("op_steps must be >= 1")


@dataclass
class EvalReport:
    mse: float
    oks: float
    pdj: dict[str, float]
    mean_iou: float
    op_curve: dict[str, float]
    n_targets: int
    n_frames: int
    unmatched: list[dict] = field(default_factory=list)
    per_target: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _FrameScore:
    iou: float
    mse: float | None = None
    oks: float | None = None
    pdj: dict[float, float] | None = None


def _score_frame(rec: dict, gt, cfg: EvalConfig) -> _FrameScore:
    score = _FrameScore(iou=iou(rec["bbox"], gt.bbox))
    vis = gt.visible
    if vis.any():
        pred = np.asarray(rec["keypoints"], dtype=np.float64)
        score.mse = mse_keypoints(pred, gt.keypoints, vis)
        score.oks = oks(pred, gt.keypoints, vis, gt.bbox, cfg.kappa)
        score.pdj = {x: pdj(pred, gt.keypoints, vis, gt.bbox, x) for x in cfg.pdj_thresholds}
    return score


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def read_predictions(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open() as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{n}: not JSON ({exc})") from exc
            missing = {"frame", "bbox", "keypoints"} - rec.keys()
            if missing:
                raise SchemaError(f"{path}:{n}: record lacks {sorted(missing)}")
            records.append(rec)
    return records


def evaluate_records(records: list[dict], sequences, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Join predictions to ground truth by (sequence, frame, target) and macro-average per target."""
    gt_index = {}
    for seq in sequences:
        for t, frame in enumerate(seq.frames):
            for ann in frame.annotations:
                gt_index[(seq.seq_id, t, ann.target_id)] = ann
    per_target: dict[tuple[int, int], list[_FrameScore]] = {}
    unmatched: dict[tuple[int, int], int] = {}
    for rec in records:
        key = (int(rec.get("sequence", 0)), int(rec["frame"]), int(rec.get("target_id", 0)))
        gt = gt_index.get(key)
        if gt is None:
            unmatched[(key[0], key[2])] = unmatched.get((key[0], key[2]), 0) + 1
            continue
        if len(rec["keypoints"]) != gt.k or len(rec["bbox"]) != 4:
            raise SchemaError(f"record {key}: {len(rec['keypoints'])} keypoints, dataset has {gt.k}")
        per_target.setdefault((key[0], key[2]), []).append(_score_frame(rec, gt, cfg))
    if not per_target:
        raise MetricError("no prediction matched the ground truth")

    thresholds = default_op_thresholds(cfg.op_steps)
    rows = []
    for (seq_id, tid), scores in sorted(per_target.items()):
        ious = [s.iou for s in scores]
        rows.append(
            {
                "sequence": seq_id,
                "target_id": tid,
                "frames": len(scores),
                "mse": _mean(s.mse for s in scores),
                "oks": _mean(s.oks for s in scores),
                "pdj": {str(x): _mean(s.pdj[x] if s.pdj else None for s in scores) for x in cfg.pdj_thresholds},
                "mean_iou": float(np.mean(ious)),
                "op_curve": [v for v in op_curve(ious, thresholds).values()],
            }
        )
    curve = np.mean([r["op_curve"] for r in rows], axis=0)
    return EvalReport(
        mse=_mean(r["mse"] for r in rows if np.isfinite(r["mse"])),
        oks=_mean(r["oks"] for r in rows if np.isfinite(r["oks"])),
        pdj={str(x): _mean(r["pdj"][str(x)] for r in rows if np.isfinite(r["pdj"][str(x)])) for x in cfg.pdj_thresholds},
        mean_iou=_mean(r["mean_iou"] for r in rows),
        op_curve={f"{t:g}": float(v) for t, v in zip(thresholds, curve)},
        n_targets=len(rows),
        n_frames=sum(r["frames"] for r in rows),
        unmatched=[{"sequence": s, "target_id": t, "records": n} for (s, t), n in sorted(unmatched.items())],
        per_target=rows,
    )


def evaluate_run(pred_file: str | Path, gt_file: str | Path, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Score a tracker JSONL file against a dataset JSON (coordinates as stored in the dataset)."""
    try:
        sequences = load_dataset(gt_file, size=None, load_images=False)
    except KeyError as exc:
        raise SchemaError(f"{gt_file}: missing field {exc}") from exc
    return evaluate_records(read_predictions(pred_file), sequences, cfg)

