"""Online tracking: bbox initialisation, per-frame prediction and confidence-gated memory."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .encodings import TargetStateMaps, bbox_state_maps, decode_bbox, decode_keypoints, gaussian_map, keypoint_offset_map
from .network import STEPNet
from .tensor import Tensor, no_grad

POLICIES = ("conf-rolling", "fixed-initial-plus-recent", "rolling-recent", "initial-only")


class TrackerError(ValueError):
    pass


@dataclass(frozen=True)
class UpdatePolicy:
    name: str = "conf-rolling"
    capacity: int = 2
    tau_m: float = 0.6
    min_kp_fraction: float = 0.5

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ValueError(f"unknown memory policy {self.name!r}; choose from {POLICIES}")
        if self.capacity not in (2, 3):
            raise ValueError("memory capacity must be 2 or 3")
        if not 0 < self.tau_m < 1:
            raise ValueError("tau_m must lie in (0, 1)")
        if not 0 < self.min_kp_fraction <= 1:
            raise ValueError("min_kp_fraction must lie in (0, 1]")

    def min_keypoints(self, k: int) -> int:
        return math.ceil(self.min_kp_fraction * k)

    def confident(self, bbox_conf: float, kp_confs) -> bool:
        kp_confs = np.asarray(kp_confs, dtype=np.float64)
        hits = int(np.count_nonzero(kp_confs > self.tau_m))
        return bbox_conf > self.tau_m and hits >= self.min_keypoints(kp_confs.size)


@dataclass
class MemoryEntry:
    features: np.ndarray  # composed training features f, n x H_f x W_f
    provenance: str  # "initial" or "rolled"
    frame_idx: int


def memory_update(entries: list, new_entry: Any, policy: UpdatePolicy, bbox_conf: float, kp_confs) -> tuple[list, bool]:
    """Pure update rule; returns (new entry list, whether memory changed).

    Entry 0 is the initial frame for every policy except rolling-recent,
    which keeps only the most recent frames.
    """
    if policy.name == "initial-only":
        return list(entries), False
    if policy.name == "conf-rolling" and not policy.confident(bbox_conf, kp_confs):
        return list(entries), False
    if policy.name == "rolling-recent":
        return list(entries[1:]) + [new_entry], True
    return [entries[0]] + list(entries[2:]) + [new_entry], True


@dataclass
class TrackOutput:
    frame_idx: int
    bbox: tuple[float, float, float, float]
    bbox_conf: float
    keypoints: np.ndarray  # k x 3 of (x, y, conf)
    memory_updated: bool = False

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec.update(
            frame=self.frame_idx,
            bbox=[float(v) for v in self.bbox],
            bbox_conf=float(self.bbox_conf),
            keypoints=[[float(x), float(y), float(c)] for x, y, c in self.keypoints],
            memory_updated=bool(self.memory_updated),
        )
        return rec


def _validate_bbox(bbox, width: int, height: int) -> tuple[float, float, float, float]:
    try:
        x1, y1, x2, y2 = (float(v) for v in bbox)
    except (TypeError, ValueError) as exc:
        raise TrackerError(f"malformed bbox {bbox!r}") from exc
    if not (x1 < x2 and y1 < y2):
        raise TrackerError(f"degenerate bbox {bbox!r}")
    if x2 <= 0 or y2 <= 0 or x1 >= width or y1 >= height:
        raise TrackerError(f"bbox {bbox!r} lies outside the {width}x{height} frame")
    return x1, y1, x2, y2


@dataclass
class Tracker:
    """Tracks one target. The model is only read, so trackers can share it across threads.

    ``memory_encoding`` selects how a rolled frame enters memory: "predicted"
    re-encodes the predicted keypoints as offset/Gaussian maps, "gmsp" uses the
    frame's GMSP soft map. Without GMSP only "predicted" is possible.
    """

    model: STEPNet
    policy: UpdatePolicy = field(default_factory=UpdatePolicy)
    memory_encoding: str | None = None
    memory: list[MemoryEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.memory_encoding is None:
            self.memory_encoding = "gmsp" if self.model.cfg.use_gmsp else "predicted"
        if self.memory_encoding not in ("gmsp", "predicted"):
            raise ValueError(f"memory_encoding must be 'gmsp' or 'predicted', got {self.memory_encoding!r}")
        if self.memory_encoding == "gmsp" and not self.model.cfg.use_gmsp:
            raise ValueError("memory_encoding='gmsp' needs a model built with GMSP")

    # -------------------------------------------------------------- encoding
    def _encode(self, X: Tensor, bbox, keypoints: np.ndarray | None, gmsp: Tensor | None) -> np.ndarray:
        enc = self.model.enc_cfg
        B_om, B_gm = bbox_state_maps(bbox, enc)
        k = enc.k
        if keypoints is None:
            K_om = np.zeros((2 * k, enc.H_f, enc.W_f))
            K_gm = np.zeros((k, enc.H_f, enc.W_f))
        else:
            K_om = keypoint_offset_map(keypoints, enc)
            K_gm = gaussian_map([(x, y, v > 0) for x, y, v in keypoints], enc)
        maps = TargetStateMaps(B_om, B_gm, K_om, K_gm, K_gm, np.ones(k, dtype=bool))
        if self.model.cfg.use_gmsp:
            soft = gmsp.data if (self.memory_encoding == "gmsp" or keypoints is None) else K_gm
            return self.model.compose(X, maps, soft).data
        if keypoints is None:
            raise TrackerError("a model without GMSP needs initial keypoints")
        return self.model.compose(X, maps).data

    def _frame_features(self, image: np.ndarray) -> tuple[Tensor, Tensor | None]:
        X = self.model.features(image[None])
        gmsp = self.model.soft_maps(X)[0] if self.model.cfg.use_gmsp else None
        return X[0], gmsp

    def _predict(self, X: Tensor, gmsp: Tensor | None):
        out = self.model.predict([Tensor(e.features) for e in self.memory], X, gmsp)
        return out

    @staticmethod
    def _box_mask(bbox, enc) -> np.ndarray | None:
        cx, cy = enc.cell_centers()
        x1, y1, x2, y2 = bbox
        half = enc.s / 2.0
        mask = (cx >= x1 - half) & (cx <= x2 + half) & (cy >= y1 - half) & (cy <= y2 + half)
        return mask if mask.any() else None

    # ----------------------------------------------------------------- API
    def init(self, image: np.ndarray, bbox, keypoints=None) -> TrackOutput:
        """Set memory to copies of the first frame and echo the given box."""
        _, h, w = image.shape
        bbox = _validate_bbox(bbox, w, h)
        kps = None
        if keypoints is not None:
            kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
            if len(kps) != self.model.cfg.k:
                raise TrackerError(f"{len(kps)} initial keypoints for a k={self.model.cfg.k} model")
        with no_grad():
            X, gmsp = self._frame_features(image)
            # the initial frame always carries the GMSP map (keypoints unknown) unless given
            f0 = self._encode(X, bbox, kps if not self.model.cfg.use_gmsp else None, gmsp)
            self.memory = [MemoryEntry(f0, "initial", 0) for _ in range(self.policy.capacity)]
            out = self._predict(X, gmsp)
            kp = decode_keypoints(out.K_gm_hat.data, out.K_om_hat.data, self.model.enc_cfg, self._box_mask(bbox, self.model.enc_cfg))
        return TrackOutput(0, bbox, 1.0, kp, False)

    def step(self, image: np.ndarray, frame_idx: int, gt_bbox=None) -> TrackOutput:
        """Predict on ``image``; with ``gt_bbox`` the supplied box replaces the predicted one."""
        if not self.memory:
            raise TrackerError("tracker used before init()")
        enc = self.model.enc_cfg
        with no_grad():
            X, gmsp = self._frame_features(image)
            out = self._predict(X, gmsp)
            if gt_bbox is not None:
                _, h, w = image.shape
                bbox, bbox_conf = _validate_bbox(gt_bbox, w, h), 1.0
                mask = self._box_mask(bbox, enc)
            else:
                bbox, bbox_conf = decode_bbox(out.B_gm_hat.data, out.B_om_hat.data, enc)
                mask = None
            kp = decode_keypoints(out.K_gm_hat.data, out.K_om_hat.data, enc, mask)
            updated = False
            confident = self.policy.name != "conf-rolling" or self.policy.confident(bbox_conf, kp[:, 2])
            if self.policy.name != "initial-only" and confident and bbox[0] < bbox[2] and bbox[1] < bbox[3]:
                rolled = np.column_stack([kp[:, :2], np.ones(len(kp))])
                entry = MemoryEntry(self._encode(X, bbox, rolled, gmsp), "rolled", frame_idx)
                self.memory, updated = memory_update(self.memory, entry, self.policy, bbox_conf, kp[:, 2])
        return TrackOutput(frame_idx, tuple(float(b) for b in bbox), float(bbox_conf), kp, updated)


def run_sequence(
    model: STEPNet,
    frames: Sequence[np.ndarray],
    init_bbox,
    policy: UpdatePolicy = UpdatePolicy(),
    per_frame_boxes: Sequence | None = None,
    init_keypoints=None,
    memory_encoding: str | None = None,
) -> list[TrackOutput]:
    """Initialise on frame 0, then step through the rest (STEP* mode when boxes are given)."""
    if len(frames) == 0:
        raise TrackerError("no frames to track")
    if per_frame_boxes is not None and len(per_frame_boxes) != len(frames):
        raise TrackerError(f"{len(per_frame_boxes)} boxes for {len(frames)} frames")
    tracker = Tracker(model, policy, memory_encoding)
    outputs = [tracker.init(frames[0], init_bbox, init_keypoints)]
    for t in range(1, len(frames)):
        box = per_frame_boxes[t] if per_frame_boxes is not None else None
        outputs.append(tracker.step(frames[t], t, box))
    return outputs


def run_many(model: STEPNet, frames: Sequence[np.ndarray], jobs: Sequence[dict], workers: int | None = None) -> list[list[TrackOutput]]:
    """Independent trackers for several targets; each job holds run_sequence keyword arguments."""
    if workers == 1 or len(jobs) <= 1:
        return [run_sequence(model, frames, **job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers or len(jobs)) as pool:
        futures = [pool.submit(run_sequence, model, frames, **job) for job in jobs]
        return [f.result() for f in futures]
