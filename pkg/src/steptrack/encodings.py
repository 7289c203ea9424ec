"""Target-state maps on the stride-s feature grid and their inverse decoding.

Cell (jx, jy) has its centre at image position (s//2 + s*jx, s//2 + s*jy).
Offset maps store ``centre - coordinate`` in pixels, so a coordinate is
recovered at any cell as ``centre - offset``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Annotation
from .nn import MLP2, Module
from .tensor import DimensionError, Parameter, Tensor


@dataclass(frozen=True)
class EncodingConfig:
    s: int = 16
    k: int = 17
    n: int = 64
    sigma: float = 1.0
    H_f: int = 18
    W_f: int = 18

    def __post_init__(self):
        if self.s < 1:
            raise ValueError("stride s must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.k < 1 or self.n < 1:
            raise ValueError("k and n must be positive")

    @property
    def H_i(self) -> int:
        return self.s * self.H_f

    @property
    def W_i(self) -> int:
        return self.s * self.W_f

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Image-space centres (cx over columns, cy over rows), each H_f×W_f."""
        half = self.s // 2
        jy, jx = np.mgrid[0 : self.H_f, 0 : self.W_f]
        return half + self.s * jx.astype(np.float64), half + self.s * jy.astype(np.float64)

    def to_grid(self, x: float, y: float) -> tuple[float, float]:
        half = self.s // 2
        return (x - half) / self.s, (y - half) / self.s


@dataclass
class TargetStateMaps:
    B_om: np.ndarray  # 4 x H_f x W_f, pixels
    B_gm: np.ndarray  # 1 x H_f x W_f
    K_om: np.ndarray  # 2k x H_f x W_f, pixels
    K_gm: np.ndarray  # k x H_f x W_f, target keypoints only
    K_gmsp: np.ndarray  # k x H_f x W_f, keypoints of every annotated object
    visibility: np.ndarray  # k flags, True where v > 0


def keypoint_offset_map(keypoints: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Channels (2i, 2i+1) hold (cx - x_i, cy - y_i); zero for v = 0 keypoints."""
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    cx, cy = cfg.cell_centers()
    out = np.zeros((2 * len(kps), cfg.H_f, cfg.W_f))
    for i, (x, y, v) in enumerate(kps):
        if v > 0:
            out[2 * i] = cx - x
            out[2 * i + 1] = cy - y
    return out


def bbox_offset_map(bbox, cfg: EncodingConfig) -> np.ndarray:
    """LTRB offsets (cx - x1, cy - y1, cx - x2, cy - y2) at every cell."""
    x1, y1, x2, y2 = (float(b) for b in bbox)
    cx, cy = cfg.cell_centers()
    return np.stack([cx - x1, cy - y1, cx - x2, cy - y2])


def gaussian_map(centers, cfg: EncodingConfig) -> np.ndarray:
    """One channel per (x, y, active) centre: exp(-d^2 / 2 sigma^2), d in cells."""
    jy, jx = np.mgrid[0 : cfg.H_f, 0 : cfg.W_f]
    out = np.zeros((len(centers), cfg.H_f, cfg.W_f))
    for c, (x, y, active) in enumerate(centers):
        if not active:
            continue
        gx, gy = cfg.to_grid(x, y)
        d2 = (jx - gx) ** 2 + (jy - gy) ** 2
        out[c] = np.exp(-d2 / (2.0 * cfg.sigma**2))
    return out


def bbox_center(bbox) -> tuple[float, float]:
    x1, y1, x2, y2 = bbox
    return (x1 + x2) / 2.0, (y1 + y2) / 2.0


def target_state_maps(target: Annotation, cfg: EncodingConfig, others=()) -> TargetStateMaps:
    """Encode ``target``; ``others`` are the remaining annotations in the frame."""
    if target.k != cfg.k:
        raise DimensionError(f"annotation has {target.k} keypoints, config expects {cfg.k}")
    kps = target.keypoints
    K_gm = gaussian_map([(x, y, v > 0) for x, y, v in kps], cfg)
    K_gmsp = K_gm.copy()
    for other in others:
        if other is target:
            continue
        # overlapping objects combine by max so the map stays in [0, 1]
        K_gmsp = np.maximum(K_gmsp, gaussian_map([(x, y, v > 0) for x, y, v in other.keypoints], cfg))
    cx, cy = bbox_center(target.bbox)
    return TargetStateMaps(
        B_om=bbox_offset_map(target.bbox, cfg),
        B_gm=gaussian_map([(cx, cy, True)], cfg),
        K_om=keypoint_offset_map(kps, cfg),
        K_gm=K_gm,
        K_gmsp=K_gmsp,
        visibility=kps[:, 2] > 0,
    )


def bbox_state_maps(bbox, cfg: EncodingConfig) -> tuple[np.ndarray, np.ndarray]:
    """(B_om, B_gm) for a bare box, as used at tracker initialisation."""
    cx, cy = bbox_center(bbox)
    return bbox_offset_map(bbox, cfg), gaussian_map([(cx, cy, True)], cfg)


# ------------------------------------------------------------ embeddings
class EmbeddingSet(Module):
    """Learned tokens and offset MLPs that inject target state into features."""

    def __init__(self, rng: np.random.Generator, cfg: EncodingConfig):
        n, k = cfg.n, cfg.k
        self.phi_loc = Parameter(rng.normal(0, 0.5, size=(1, n)))
        self.phi_kp = Parameter(rng.normal(0, 0.5, size=(k, n)))
        self.phi_test = Parameter(rng.normal(0, 0.5, size=(1, n)))
        self.psi_b = MLP2(rng, 4, n, n)
        self.psi_kp = MLP2(rng, 2 * k, n, n)
        self.cfg = cfg


def _as_map(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _mlp_over_cells(mlp: MLP2, offsets: Tensor, scale: float) -> Tensor:
    c, h, w = offsets.shape
    tokens = (offsets * (1.0 / scale)).reshape(c, h * w).T
    return mlp(tokens).T.reshape(-1, h, w)


def _embed(phi: Tensor, maps: Tensor) -> Tensor:
    """Per cell: sum over channels c of phi[c] * map[c]."""
    c, h, w = maps.shape
    return (phi.T @ maps.reshape(c, h * w)).reshape(-1, h, w)


def compose_train_features(
    X: Tensor,
    maps: TargetStateMaps,
    emb: EmbeddingSet,
    use_gmsp: bool,
    gmsp_map=None,
) -> Tensor:
    """Inject a training frame's target state into its backbone features.

    Without GMSP: X + Psi_b(B_om) + Psi_kp(K_om) + phi_loc.B_gm + phi_kp.K_gm.
    With GMSP the keypoint terms are replaced by phi_kp.gmsp_map.
    Offsets are divided by the image side before the MLPs.
    """
    cfg = emb.cfg
    if X.shape != (cfg.n, cfg.H_f, cfg.W_f):
        raise DimensionError(f"features {X.shape} do not match config {(cfg.n, cfg.H_f, cfg.W_f)}")
    side = float(cfg.H_i)
    f = X + _mlp_over_cells(emb.psi_b, _as_map(maps.B_om), side) + _embed(emb.phi_loc, _as_map(maps.B_gm))
    if use_gmsp:
        if gmsp_map is None:
            raise ValueError("use_gmsp=True needs a GMSP soft map")
        soft = _as_map(gmsp_map)
        if soft.shape != (cfg.k, cfg.H_f, cfg.W_f):
            raise DimensionError(f"GMSP map {soft.shape} does not match k={cfg.k}")
        return f + _embed(emb.phi_kp, soft)
    return f + _mlp_over_cells(emb.psi_kp, _as_map(maps.K_om), side) + _embed(emb.phi_kp, _as_map(maps.K_gm))


def compose_test_features(X_test: Tensor, emb: EmbeddingSet) -> Tensor:
    """X_test plus the test token repeated at every cell."""
    return X_test + emb.phi_test.reshape(-1, 1, 1)


# ---------------------------------------------------------------- decoding
def _argmax_cell(score: np.ndarray, mask: np.ndarray | None = None) -> tuple[int, int, float]:
    s = score if mask is None else np.where(mask, score, -np.inf)
    flat = int(np.argmax(s))  # first maximum in row-major order
    jy, jx = divmod(flat, score.shape[1])
    return jx, jy, float(score[jy, jx])


def decode_keypoints(K_gm_hat: np.ndarray, K_om_hat: np.ndarray, cfg: EncodingConfig, mask: np.ndarray | None = None) -> np.ndarray:
    """k×3 array of (x, y, confidence) from score and offset maps.

    ``mask`` (H_f×W_f bool) optionally restricts the peak search.
    """
    K_gm_hat = np.asarray(K_gm_hat)
    K_om_hat = np.asarray(K_om_hat)
    half = cfg.s // 2
    out = np.zeros((K_gm_hat.shape[0], 3))
    for i in range(K_gm_hat.shape[0]):
        jx, jy, conf = _argmax_cell(K_gm_hat[i], mask)
        out[i] = (
            half + cfg.s * jx - K_om_hat[2 * i, jy, jx],
            half + cfg.s * jy - K_om_hat[2 * i + 1, jy, jx],
            conf,
        )
    return out


def decode_bbox(B_gm_hat: np.ndarray, B_om_hat: np.ndarray, cfg: EncodingConfig) -> tuple[tuple[float, float, float, float], float]:
    """Box at the peak cell of the localisation map; invalid geometry gets confidence 0."""
    score = np.asarray(B_gm_hat).reshape(cfg.H_f, cfg.W_f)
    jx, jy, conf = _argmax_cell(score)
    cx, cy = cfg.s // 2 + cfg.s * jx, cfg.s // 2 + cfg.s * jy
    l, t, r, b = np.asarray(B_om_hat)[:, jy, jx]
    box = (float(cx - l), float(cy - t), float(cx - r), float(cy - b))
    if not (box[0] < box[2] and box[1] < box[3]):
        conf = 0.0
    return box, conf
