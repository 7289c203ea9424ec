"""Annotated frames and sequences: dataset I/O, affine sequence synthesis, triplet sampling.

Coordinates are continuous pixel positions with the origin at the top-left
corner of the top-left pixel, so pixel (r, c) has its centre at (c + 0.5, r + 0.5).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw

CANONICAL_SIZE = 288


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset records."""


class SchemaError(DatasetError):
    """Keypoint layout does not match the configured keypoint count."""


class SamplingError(ValueError):
    pass


@dataclass
class Annotation:
    target_id: int
    bbox: tuple[float, float, float, float]  # x1, y1, x2, y2
    keypoints: np.ndarray  # k x 3 rows of (x, y, v)
    ann_id: int | None = None

    def __post_init__(self):
        self.bbox = tuple(float(b) for b in self.bbox)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        x1, y1, x2, y2 = self.bbox
        if not (x1 < x2 and y1 < y2):
            raise DatasetError(f"annotation {self.ann_id}: degenerate bbox {self.bbox}")

    @property
    def k(self) -> int:
        return len(self.keypoints)

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def copy(self) -> Annotation:
        return replace(self, keypoints=self.keypoints.copy())


@dataclass
class Frame:
    image: np.ndarray  # 3 x H x W, values in [0, 1]
    annotations: list[Annotation] = field(default_factory=list)
    image_id: int | None = None
    file_name: str | None = None

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def annotation(self, target_id: int) -> Annotation | None:
        for ann in self.annotations:
            if ann.target_id == target_id:
                return ann
        return None


@dataclass
class Sequence:
    frames: list[Frame]
    source: str = "natural"
    seq_id: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def target_ids(self) -> list[int]:
        ids: list[int] = []
        for frame in self.frames:
            for ann in frame.annotations:
                if ann.target_id not in ids:
                    ids.append(ann.target_id)
        return ids


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0  # radians
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)  # pixels
    shear: float = 0.0  # radians

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class AffineRanges:
    """Sampling ranges; translation is a fraction of the image side."""

    rotation_deg: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    translate_frac: tuple[float, float] = (-0.1, 0.1)
    shear_deg: tuple[float, float] = (-5.0, 5.0)

    @classmethod
    def identity(cls) -> AffineRanges:
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0))

    def sample(self, rng: np.random.Generator, side: float) -> AffineParams:
        return AffineParams(
            rotation=math.radians(rng.uniform(*self.rotation_deg)),
            scale=rng.uniform(*self.scale),
            translate=(rng.uniform(*self.translate_frac) * side, rng.uniform(*self.translate_frac) * side),
            shear=math.radians(rng.uniform(*self.shear_deg)),
        )


# ---------------------------------------------------------------- geometry
def affine_matrix(p: AffineParams, center: tuple[float, float]) -> np.ndarray:
    """3x3 matrix: rotate/shear/scale about ``center``, then translate."""
    cx, cy = center
    c, s = math.cos(p.rotation), math.sin(p.rotation)
    linear = np.array([[c, -s], [s, c]]) @ np.array([[1.0, math.tan(p.shear)], [0.0, 1.0]]) * p.scale
    m = np.eye(3)
    m[:2, :2] = linear
    m[:2, 2] = np.array([cx, cy]) - linear @ np.array([cx, cy]) + np.asarray(p.translate)
    return m


def apply_affine(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts @ m[:2, :2].T + m[:2, 2]


def warp_image(image: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Bilinear warp of a C×H×W image by the forward affine ``m``; zeros outside the source."""
    c, h, w = image.shape
    if np.array_equal(m, np.eye(3)):
        return image.copy()
    inv = np.linalg.inv(m)
    ys, xs = np.mgrid[0:h, 0:w]
    dst = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    src = apply_affine(inv, dst) - 0.5
    sx, sy = src[:, 0], src[:, 1]
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((c, h * w))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            weight = np.where(ok, wx * wy, 0.0)
            vals = image[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += vals * weight
    return out.reshape(c, h, w)


def transform_annotation(ann: Annotation, m: np.ndarray, width: int, height: int) -> Annotation | None:
    """Map an annotation through ``m``; returns None when the box leaves the image."""
    x1, y1, x2, y2 = ann.bbox
    corners = apply_affine(m, [[x1, y1], [x2, y1], [x1, y2], [x2, y2]])
    nx1, ny1 = np.clip(corners.min(axis=0), 0, [width, height])
    nx2, ny2 = np.clip(corners.max(axis=0), 0, [width, height])
    if not (nx1 < nx2 and ny1 < ny2):
        return None
    kps = ann.keypoints.copy()
    kps[:, :2] = apply_affine(m, kps[:, :2])
    vis = kps[:, 2] > 0
    inside = (kps[:, 0] >= 0) & (kps[:, 0] < width) & (kps[:, 1] >= 0) & (kps[:, 1] < height)
    lost = vis & ~inside
    kps[lost] = 0.0
    kps[~vis, :2] = 0.0
    return Annotation(ann.target_id, (nx1, ny1, nx2, ny2), kps, ann.ann_id)


def synth_sequence(
    frame: Frame,
    n_frames: int = 15,
    ranges: AffineRanges | None = None,
    seed: int = 0,
    max_attempts: int = 100,
) -> Sequence:
    """Turn one annotated frame into a smooth clip.

    Start and end affine parameters are drawn from ``ranges`` and linearly
    interpolated over the clip; the image is warped bilinearly while
    keypoints and box corners are mapped analytically.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    ranges = ranges or AffineRanges()
    rng = np.random.default_rng(seed)
    h, w = frame.height, frame.width
    center = (w / 2.0, h / 2.0)
    side = float(max(h, w))

    for _ in range(max_attempts):
        start, end = ranges.sample(rng, side), ranges.sample(rng, side)
        mats = _clip_matrices(start, end, n_frames, center)
        if all(abs(np.linalg.det(m[:2, :2])) >= 1e-6 for m in mats):
            break
    else:
        raise ValueError(f"no non-degenerate affine found in {max_attempts} attempts")
    return _render_clip(frame, mats)


def interpolate_clip(frame: Frame, start: AffineParams, end: AffineParams, n_frames: int = 15) -> Sequence:
    """Clip whose affine parameters move linearly from ``start`` to ``end``."""
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    mats = _clip_matrices(start, end, n_frames, (frame.width / 2.0, frame.height / 2.0))
    if any(abs(np.linalg.det(m[:2, :2])) < 1e-6 for m in mats):
        raise ValueError("degenerate affine in clip")
    return _render_clip(frame, mats)


def _clip_matrices(start: AffineParams, end: AffineParams, n_frames: int, center) -> list[np.ndarray]:
    return [affine_matrix(_lerp_params(start, end, t / (n_frames - 1)), center) for t in range(n_frames)]


def _render_clip(frame: Frame, mats: list[np.ndarray]) -> Sequence:
    h, w = frame.height, frame.width
    frames = []
    for m in mats:
        anns = [a for a in (transform_annotation(a, m, w, h) for a in frame.annotations) if a is not None]
        frames.append(Frame(warp_image(frame.image, m), anns))
    return Sequence(frames, source="synthetic")


def _lerp_params(a: AffineParams, b: AffineParams, t: float) -> AffineParams:
    def lerp(u, v):
        return u + (v - u) * t

    return AffineParams(
        rotation=lerp(a.rotation, b.rotation),
        scale=lerp(a.scale, b.scale),
        translate=(lerp(a.translate[0], b.translate[0]), lerp(a.translate[1], b.translate[1])),
        shear=lerp(a.shear, b.shear),
    )


# ---------------------------------------------------------------- sampling
@dataclass
class Triplet:
    train: list[Frame]
    test: Frame
    target_id: int
    indices: tuple[int, int, int]


def sample_triplet(seq: Sequence, seed: int | np.random.Generator, target_id: int | None = None) -> Triplet:
    """Pick three distinct frames showing one target: the two earliest train, the latest tests."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(seq) < 3:
        raise SamplingError(f"sequence has {len(seq)} frames; need at least 3")
    candidates = [target_id] if target_id is not None else seq.target_ids()
    eligible = {
        tid: [i for i, f in enumerate(seq.frames) if f.annotation(tid) is not None] for tid in candidates
    }
    eligible = {tid: idx for tid, idx in eligible.items() if len(idx) >= 3}
    if not eligible:
        raise SamplingError(f"no target visible in 3 frames (requested {target_id})")
    tids = sorted(eligible)
    tid = tids[int(rng.integers(len(tids)))]
    picks = np.sort(rng.choice(eligible[tid], size=3, replace=False))
    a, b, c = (int(i) for i in picks)
    return Triplet([seq.frames[a], seq.frames[b]], seq.frames[c], tid, (a, b, c))


# -------------------------------------------------------------- image I/O
def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _letterbox_extent(h: int, w: int, size: int) -> tuple[int, int]:
    factor = size / max(h, w)
    return max(1, round(w * factor)), max(1, round(h * factor))


def letterbox_scale(h: int, w: int, size: int = CANONICAL_SIZE) -> tuple[float, float]:
    """(sx, sy) that ``letterbox`` applies to coordinates of an h×w image."""
    if h == size and w == size:
        return 1.0, 1.0
    nw, nh = _letterbox_extent(h, w, size)
    return nw / w, nh / h


def letterbox(image: np.ndarray, size: int = CANONICAL_SIZE) -> tuple[np.ndarray, tuple[float, float]]:
    """Resize so the longer side is ``size`` and zero-pad right/bottom to size×size.

    Returns the padded image and the per-axis (sx, sy) coordinate scale.
    """
    _, h, w = image.shape
    if h == size and w == size:
        return image, (1.0, 1.0)
    nw, nh = _letterbox_extent(h, w, size)
    arr = np.clip(image.transpose(1, 2, 0), 0, 1)
    resized = np.stack(
        [
            np.asarray(Image.fromarray(arr[:, :, i].astype(np.float32), "F").resize((nw, nh), Image.BILINEAR))
            for i in range(arr.shape[2])
        ]
    ).astype(np.float64)
    out = np.zeros((image.shape[0], size, size))
    out[:, :nh, :nw] = resized
    return out, (nw / w, nh / h)


def _scale_annotation(ann: Annotation, sx: float, sy: float) -> Annotation:
    if sx == 1.0 and sy == 1.0:
        return ann
    x1, y1, x2, y2 = ann.bbox
    kps = ann.keypoints.copy()
    kps[:, 0] *= sx
    kps[:, 1] *= sy
    return Annotation(ann.target_id, (x1 * sx, y1 * sy, x2 * sx, y2 * sy), kps, ann.ann_id)


# ------------------------------------------------------------- dataset I/O
def load_dataset(
    path: str | Path,
    k: int | None = None,
    size: int | None = CANONICAL_SIZE,
    load_images: bool = True,
) -> list[Sequence]:
    """Read a COCO-keypoint-style JSON file with an extra ``sequences`` table.

    Boxes are stored as [x, y, w, h] and converted to xyxy; keypoints are flat
    [x, y, v] triplets. Frames are letterboxed to ``size``×``size`` (kept as
    stored when ``size`` is None).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    images = {int(im["id"]): im for im in doc.get("images", [])}
    by_image: dict[int, list[Annotation]] = {i: [] for i in images}

    for rec in doc.get("annotations", []):
        ann_id = rec.get("id")
        try:
            image_id = int(rec["image_id"])
            bx, by, bw, bh = (float(v) for v in rec["bbox"])
            flat = np.asarray(rec["keypoints"], dtype=np.float64)
            target_id = int(rec.get("track_id", rec.get("target_id", ann_id)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed annotation id={ann_id}: {exc}") from exc
        if flat.size % 3:
            raise DatasetError(f"malformed annotation id={ann_id}: keypoints length {flat.size} not a multiple of 3")
        if k is not None and flat.size != 3 * k:
            raise SchemaError(f"annotation id={ann_id}: {flat.size // 3} keypoints, expected {k}")
        if image_id not in by_image:
            raise DatasetError(f"malformed annotation id={ann_id}: unknown image_id {image_id}")
        try:
            ann = Annotation(target_id, (bx, by, bx + bw, by + bh), flat.reshape(-1, 3), ann_id)
        except DatasetError as exc:
            raise DatasetError(f"malformed annotation id={ann_id}: {exc}") from exc
        by_image[image_id].append(ann)

    seq_specs = doc.get("sequences")
    if seq_specs is None:
        seq_specs = [[i] for i in images]
    sequences = []
    for n, spec in enumerate(seq_specs):
        ids = spec["image_ids"] if isinstance(spec, dict) else spec
        seq_id = int(spec.get("id", n)) if isinstance(spec, dict) else n
        source = spec.get("source", "natural") if isinstance(spec, dict) else "natural"
        frames = []
        for image_id in ids:
            meta = images[int(image_id)]
            anns = by_image[int(image_id)]
            if load_images:
                img = read_image(path.parent / meta["file_name"])
            else:
                img = np.broadcast_to(np.zeros(1), (3, int(meta["height"]), int(meta["width"])))
            sx = sy = 1.0
            if size is not None:
                img, (sx, sy) = letterbox(img, size)
            frames.append(
                Frame(img, [_scale_annotation(a, sx, sy) for a in anns], int(image_id), meta["file_name"])
            )
        sequences.append(Sequence(frames, source=source, seq_id=seq_id))
    return sequences


def save_dataset(
    sequences: Iterable[Sequence],
    path: str | Path,
    write_images: bool = True,
    image_dir: str = "frames",
) -> Path:
    """Write sequences as dataset JSON plus PNG frames under ``image_dir``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if write_images:
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    images, annotations, seq_table = [], [], []
    next_image, next_ann = 0, 0
    for n, seq in enumerate(sequences):
        ids = []
        for t, frame in enumerate(seq.frames):
            image_id = next_image
            next_image += 1
            name = f"{image_dir}/s{seq.seq_id:04d}_f{t:03d}.png"
            if write_images:
                write_image(path.parent / name, frame.image)
            images.append({"id": image_id, "file_name": name, "width": frame.width, "height": frame.height})
            for ann in frame.annotations:
                x1, y1, x2, y2 = ann.bbox
                annotations.append(
                    {
                        "id": next_ann if ann.ann_id is None else ann.ann_id,
                        "image_id": image_id,
                        "track_id": ann.target_id,
                        "bbox": [x1, y1, x2 - x1, y2 - y1],
                        "keypoints": [float(v) for v in ann.keypoints.reshape(-1)],
                    }
                )
                next_ann += 1
            ids.append(image_id)
        seq_table.append({"id": seq.seq_id, "source": seq.source, "image_ids": ids})
    path.write_text(json.dumps({"images": images, "annotations": annotations, "sequences": seq_table}, indent=1))
    return path


def load_frame_dir(directory: str | Path, size: int = CANONICAL_SIZE) -> tuple[list[np.ndarray], list[tuple[float, float]]]:
    """Load every PNG/PPM/JPEG in ``directory`` (sorted by name), letterboxed."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in {".png", ".ppm", ".jpg", ".jpeg"})
    images, scales = [], []
    for f in files:
        img, sc = letterbox(read_image(f), size)
        images.append(img)
        scales.append(sc)
    return images, scales


# ----------------------------------------------------------- toy subjects
_PALETTE = np.array(
    [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.25, 0.45, 1.0],
        [1.0, 1.0, 0.15],
        [1.0, 0.2, 1.0],
        [0.1, 1.0, 1.0],
        [1.0, 0.6, 0.1],
        [0.6, 0.3, 1.0],
        [0.6, 1.0, 0.5],
        [1.0, 0.55, 0.7],
        [0.55, 0.8, 1.0],
        [0.85, 0.85, 0.85],
        [0.7, 0.5, 0.2],
        [0.3, 0.7, 0.5],
        [0.9, 0.35, 0.5],
        [0.45, 0.45, 0.9],
        [0.75, 0.9, 0.2],
    ]
)


def make_toy_frame(seed: int, k: int = 5, size: int = CANONICAL_SIZE, target_id: int = 0) -> Frame:
    """Render a stick-figure 'animal' whose k joints are colour-coded discs.

    Used for self-contained synthetic training and smoke tests.
    """
    if not 1 <= k <= len(_PALETTE):
        raise ValueError(f"k must be in [1, {len(_PALETTE)}]")
    rng = np.random.default_rng(seed)
    up = 2
    big = size * up
    bg = rng.uniform(0.05, 0.25, size=3)
    canvas = Image.new("RGB", (big, big), tuple(int(255 * v) for v in bg))
    draw = ImageDraw.Draw(canvas)

    cx, cy = size / 2 + rng.uniform(-12, 12), size / 2 + rng.uniform(-12, 12)
    radius = rng.uniform(62, 76)
    angles = np.linspace(0, 2 * np.pi, k, endpoint=False) + rng.uniform(0, 2 * np.pi) + rng.uniform(-0.25, 0.25, size=k)
    dists = radius * rng.uniform(0.75, 1.15, size=k)
    pts = np.stack([cx + dists * np.cos(angles), cy + dists * np.sin(angles)], axis=1)

    body_color = tuple(int(255 * v) for v in rng.uniform(0.45, 0.65, size=3))
    bw, bh = radius * rng.uniform(0.45, 0.6), radius * rng.uniform(0.35, 0.5)
    draw.ellipse([(cx - bw) * up, (cy - bh) * up, (cx + bw) * up, (cy + bh) * up], fill=body_color)
    for x, y in pts:
        draw.line([cx * up, cy * up, x * up, y * up], fill=body_color, width=5 * up)
    disc = 7.0
    for i, (x, y) in enumerate(pts):
        color = tuple(int(255 * v) for v in _PALETTE[i])
        draw.ellipse([(x - disc) * up, (y - disc) * up, (x + disc) * up, (y + disc) * up], fill=color)
    canvas = canvas.resize((size, size), Image.LANCZOS)
    image = np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0
    image = np.clip(image + rng.normal(0, 0.01, size=image.shape), 0, 1)

    margin = disc + 4
    x1, y1 = np.clip(pts.min(axis=0) - margin, 0, size - 1)
    x2, y2 = np.clip(pts.max(axis=0) + margin, 1, size)
    kps = np.concatenate([pts, np.full((k, 1), 2.0)], axis=1)
    return Frame(image, [Annotation(target_id, (x1, y1, x2, y2), kps, target_id)])
