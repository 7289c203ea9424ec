"""Composite training objective: hinged classification, GIoU, offset MSE and GMSP terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .encodings import EncodingConfig, TargetStateMaps
from .tensor import DimensionError, Tensor

FG_THRESHOLD = 0.05
HOM_RADIUS = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for (cls_box, giou, cls_kp, hom, gmsp), in that order."""

    cls_box: float = 100.0
    giou: float = 10.0
    cls_kp: float = 100.0
    hom: float = 10.0
    gmsp: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be a finite non-negative number, got {value}")


@dataclass
class LossReport:
    cls_box: float
    giou: float
    cls_kp: float
    hom: float
    gmsp: float
    total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("cls_box", "giou", "cls_kp", "hom", "gmsp", "total")}


def _check_same(pred: Tensor, target: np.ndarray, what: str) -> None:
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise DimensionError(f"{what}: prediction {pred.shape} vs target {np.shape(target)}")


def _zero(like: Tensor) -> Tensor:
    # keeps the result attached to the graph so backward() stays valid
    return (like * 0.0).sum()


def cls_loss(pred: Tensor, target, fg_threshold: float = FG_THRESHOLD) -> Tensor:
    """Foreground cells regress to the Gaussian target, background is hinged.

    Background cells only pay for predictions above their (near-zero) target,
    so matching the target exactly costs nothing anywhere.
    """
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target, "cls_loss")
    fg = target >= fg_threshold
    diff = pred - target
    residual = T.where(fg, diff, T.relu(diff))
    return (residual * residual).mean()


def _cell_centers(cfg: EncodingConfig) -> tuple[np.ndarray, np.ndarray]:
    return cfg.cell_centers()


def giou_loss(B_om_hat: Tensor, B_om, B_gm, cfg: EncodingConfig, fg_threshold: float = FG_THRESHOLD) -> Tensor:
    """Mean of 1 - GIoU between decoded predicted and target boxes over foreground cells."""
    B_om = np.asarray(B_om, dtype=np.float64)
    _check_same(B_om_hat, B_om, "giou_loss")
    mask = np.asarray(B_gm).reshape(cfg.H_f, cfg.W_f) >= fg_threshold
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return _zero(B_om_hat)
    cx, cy = _cell_centers(cfg)
    cx, cy = cx[rows, cols], cy[rows, cols]
    off = B_om_hat[:, rows, cols]  # 4 x M
    px1, py1, px2, py2 = cx - off[0], cy - off[1], cx - off[2], cy - off[3]
    g = B_om[:, rows, cols]
    gx1, gy1, gx2, gy2 = cx - g[0], cy - g[1], cx - g[2], cy - g[3]

    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    area_p = T.relu(px2 - px1) * T.relu(py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    enclose = cw * ch
    giou = inter / union - (enclose - union) / enclose
    return (1.0 - giou).mean()


def _support(K_gm: np.ndarray, radius: float) -> np.ndarray:
    """Cells within ``radius`` of the channel's peak cell."""
    h, w = K_gm.shape
    jy, jx = np.mgrid[0:h, 0:w]
    py, px = divmod(int(np.argmax(K_gm)), w)
    return (jx - px) ** 2 + (jy - py) ** 2 <= radius**2


def hinged_offset_mse(K_om_hat: Tensor, K_om, visibility, K_gm, radius: float = HOM_RADIUS) -> Tensor:
    """Per visible keypoint: mean over its support cells of (dx^2 + dy^2) / 2, then mean over keypoints."""
    K_om = np.asarray(K_om, dtype=np.float64)
    K_gm = np.asarray(K_gm, dtype=np.float64)
    _check_same(K_om_hat, K_om, "hinged_offset_mse")
    vis = np.asarray(visibility, dtype=bool).ravel()
    k = K_gm.shape[0]
    if K_om.shape[0] != 2 * k or vis.size != k:
        raise DimensionError(f"offset map has {K_om.shape[0]} channels for {k} keypoints")
    visible = np.flatnonzero(vis)
    if visible.size == 0:
        return _zero(K_om_hat)
    weight = np.zeros_like(K_om)
    for i in visible:
        sup = _support(K_gm[i], radius)
        w = sup / (2.0 * sup.sum() * visible.size)
        weight[2 * i] = w
        weight[2 * i + 1] = w
    diff = K_om_hat - K_om
    return (diff * diff * weight).sum()


def total_loss(
    outputs,
    test_maps: TargetStateMaps,
    train_maps: Sequence[TargetStateMaps],
    cfg: EncodingConfig,
    lw: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted sum of the test-frame terms and the train-frame GMSP term.

    ``outputs`` is a NetworkOutputs; ``graph`` on the report is the
    differentiable total.
    """
    terms = {
        "cls_box": cls_loss(outputs.B_gm_hat, test_maps.B_gm),
        "giou": giou_loss(outputs.B_om_hat, test_maps.B_om, test_maps.B_gm, cfg),
        "cls_kp": cls_loss(outputs.K_gm_hat, test_maps.K_gm),
        "hom": hinged_offset_mse(outputs.K_om_hat, test_maps.K_om, test_maps.visibility, test_maps.K_gm),
    }
    soft = outputs.K_gmsp_hat_train
    if soft is None:
        terms["gmsp"] = _zero(outputs.B_gm_hat)
    else:
        if soft.shape[0] != len(train_maps):
            raise DimensionError(f"{soft.shape[0]} GMSP maps for {len(train_maps)} training frames")
        parts = [cls_loss(soft[i], m.K_gmsp) for i, m in enumerate(train_maps)]
        terms["gmsp"] = T.stack(parts).mean()
    weights = asdict(lw)
    total = None
    for name, value in terms.items():
        scaled = value * weights[name]
        total = scaled if total is None else total + scaled
    values = {name: float(v.data) for name, v in terms.items()}
    return LossReport(**values, total=float(total.data), graph=total)
