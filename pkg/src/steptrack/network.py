"""Backbone, transformer weight predictor, GMSP / OMRA modules and task heads."""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encodings import EmbeddingSet, EncodingConfig, TargetStateMaps, compose_test_features, compose_train_features
from .nn import Conv2d, ConvNormReLU, FeedForward, LayerNorm, Module, MultiHeadAttention
from .tensor import DimensionError, Parameter, Tensor, is_grad_enabled


@dataclass(frozen=True)
class ModelConfig:
    k: int = 17
    n: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_mult: int = 4
    s: int = 16
    sigma: float = 1.0
    image_size: int = 288
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    head_width: int = 64
    use_gmsp: bool = True
    box_offset_scale: float = 64.0
    kp_offset_scale: float = 16.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if self.n % self.heads:
            raise ValueError(f"n={self.n} must be divisible by heads={self.heads}")
        blocks = math.log2(self.s)
        if self.s < 2 or blocks != int(blocks):
            raise ValueError(f"stride {self.s} must be a power of two >= 2")
        if len(self.backbone_widths) != int(blocks) - 1:
            raise ValueError(f"stride {self.s} needs {int(blocks) - 1} intermediate backbone widths")
        if self.image_size % self.s:
            raise ValueError("image_size must be a multiple of s")
        if self.grid % 4 != 2:
            raise ValueError(f"feature grid {self.grid} must be 2 mod 4 for the GMSP encoder/decoder")

    @property
    def grid(self) -> int:
        return self.image_size // self.s

    @property
    def ffn_width(self) -> int:
        return self.ffn_mult * self.n

    def encoding(self) -> EncodingConfig:
        return EncodingConfig(s=self.s, k=self.k, n=self.n, sigma=self.sigma, H_f=self.grid, W_f=self.grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelWeights:
    w_loc: Tensor  # 1 x n
    w_kloc: Tensor  # k x n
    w_br: Tensor  # 1 x n
    w_kp: Tensor  # k x n


@dataclass
class NetworkOutputs:
    B_gm_hat: Tensor
    B_om_hat: Tensor
    K_gm_hat: Tensor
    K_om_hat: Tensor
    K_gmsp_hat_train: Tensor | None  # m x k x H_f x W_f
    weights: ModelWeights
    z_test: Tensor


@contextmanager
def frozen(module: Module):
    """Run ``module`` without recording gradients to its own parameters."""
    if not is_grad_enabled():
        yield
        return
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def position_encoding(h: int, w: int, n: int) -> np.ndarray:
    """2-D sinusoidal encodings, (h*w) x n: first half encodes rows, second half columns."""
    half = n // 2
    quarter = half // 2
    freq = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((h * w, n))
    for offset, coord in ((0, ys.ravel()), (half, xs.ravel())):
        ang = coord[:, None] * freq[None, :]
        out[:, offset : offset + quarter] = np.sin(ang)
        out[:, offset + quarter : offset + 2 * quarter] = np.cos(ang)
    return out


# ----------------------------------------------------------------- blocks
class Backbone(Module):
    """Stride-2 Conv-Norm-ReLU blocks (4x4 kernels) down to the s-times smaller grid."""

    def __init__(self, rng, cfg: ModelConfig):
        widths = (3,) + cfg.backbone_widths + (cfg.n,)
        self.blocks = [ConvNormReLU(rng, a, b, k=4, stride=2, pad=1) for a, b in zip(widths[:-1], widths[1:])]
        self.cfg = cfg

    def __call__(self, images: Tensor) -> Tensor:
        size = self.cfg.image_size
        if images.shape[-3:] != (3, size, size):
            raise DimensionError(f"backbone expects 3x{size}x{size} input, got {images.shape}")
        x = images
        for block in self.blocks:
            x = block(x)
        return x


class EncoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.norm1 = LayerNorm(cfg.n)
        self.attn = MultiHeadAttention(rng, cfg.n, cfg.heads)
        self.norm2 = LayerNorm(cfg.n)
        self.ffn = FeedForward(rng, cfg.n, cfg.ffn_width)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.norm1 = LayerNorm(cfg.n)
        self.self_attn = MultiHeadAttention(rng, cfg.n, cfg.heads)
        self.norm2 = LayerNorm(cfg.n)
        self.cross_attn = MultiHeadAttention(rng, cfg.n, cfg.heads)
        self.norm3 = LayerNorm(cfg.n)
        self.ffn = FeedForward(rng, cfg.n, cfg.ffn_width)

    def __call__(self, q: Tensor, memory: Tensor) -> Tensor:
        h = self.norm1(q)
        q = q + self.self_attn(h, h)
        q = q + self.cross_attn(self.norm2(q), memory)
        return q + self.ffn(self.norm3(q))


class WeightPredictor(Module):
    """Joint encoder over train+test tokens; 2+2k decoder queries become the task filters.

    Query order: box localisation, box regression, k keypoint localisation,
    k keypoint regression.
    """

    def __init__(self, rng, cfg: ModelConfig):
        self.encoder = [EncoderLayer(rng, cfg) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(cfg.n)
        self.queries = Parameter(rng.normal(0, 1.0, size=(2 + 2 * cfg.k, cfg.n)))
        self.decoder = [DecoderLayer(rng, cfg) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(cfg.n)
        self.cfg = cfg
        self._pos = Tensor(position_encoding(cfg.grid, cfg.grid, cfg.n))

    def __call__(self, f_train: Sequence[Tensor], f_test: Tensor) -> tuple[Tensor, ModelWeights]:
        cfg = self.cfg
        if not f_train:
            raise ValueError("need at least one training frame")
        hw = cfg.grid * cfg.grid
        for f in list(f_train) + [f_test]:
            if f.shape != (cfg.n, cfg.grid, cfg.grid):
                raise DimensionError(f"frame features {f.shape} != {(cfg.n, cfg.grid, cfg.grid)}")
        tokens = T.concat([f.reshape(cfg.n, hw).T + self._pos for f in list(f_train) + [f_test]], axis=0)
        x = tokens
        for layer in self.encoder:
            x = layer(x)
        memory = self.enc_norm(x)
        q = self.queries
        for layer in self.decoder:
            q = layer(q, memory)
        q = self.dec_norm(q)
        k = cfg.k
        weights = ModelWeights(
            w_loc=q[0:1],
            w_br=q[1:2],
            w_kloc=q[2 : 2 + k],
            w_kp=q[2 + k : 2 + 2 * k],
        )
        z_test = memory[len(f_train) * hw :].T.reshape(cfg.n, cfg.grid, cfg.grid)
        return z_test, weights


def attention_map(w: Tensor, z: Tensor) -> Tensor:
    """Per-cell inner product of each filter row with the feature vector."""
    n, h, wd = z.shape
    return (w @ z.reshape(n, h * wd)).reshape(-1, h, wd)


class FilterHead(Module):
    """Attention map -> three Conv-Norm-ReLU -> 1x1 conv."""

    def __init__(self, rng, c_in: int, width: int, c_out: int, out_bias=0.0, out_scale: float = 1.0, squash: bool = False):
        self.layers = [
            ConvNormReLU(rng, c_in, width),
            ConvNormReLU(rng, width, width),
            ConvNormReLU(rng, width, width),
        ]
        self.out = Conv2d(rng, width, c_out, k=1, gain=1.0)
        self.out.bias.data[:] = out_bias
        self.out_scale = out_scale
        self.squash = squash

    def __call__(self, w: Tensor, z: Tensor) -> Tensor:
        x = attention_map(w, z)
        for layer in self.layers:
            x = layer(x)
        y = self.out(x)
        if self.squash:
            return T.sigmoid(y)
        return y * self.out_scale if self.out_scale != 1.0 else y


class GMSP(Module):
    """Encoder-decoder predicting soft keypoint maps of every object from features alone."""

    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.head_width
        self.enc1 = ConvNormReLU(rng, cfg.n, c, k=4, stride=2, pad=1)
        self.enc2 = ConvNormReLU(rng, c, c, k=3, stride=2, pad=1)
        self.dec1 = ConvNormReLU(rng, c, c, k=3, stride=2, pad=1, transpose=True)
        self.dec2 = ConvNormReLU(rng, c, c, k=4, stride=2, pad=1, transpose=True)
        self.out = Conv2d(rng, c, cfg.k, k=1, gain=1.0)
        self.out.bias.data[:] = -2.0

    def __call__(self, X: Tensor) -> Tensor:
        return T.sigmoid(self.out(self.dec2(self.dec1(self.enc2(self.enc1(X))))))


class OMRA(Module):
    """Two-tower keypoint offset regressor.

    Tower 1: filter attention of w_kp on z_test, three Conv-Norm-ReLU.
    Tower 2: GMSP soft map, four Conv-Norm-ReLU (absent in the no-GMSP ablation).
    Fusion: four Conv-Norm-ReLU then a linear 1x1 conv to 2k pixel offsets.
    """

    def __init__(self, rng, cfg: ModelConfig):
        c, k = cfg.head_width, cfg.k
        self.tower1 = [ConvNormReLU(rng, k, c), ConvNormReLU(rng, c, c), ConvNormReLU(rng, c, c)]
        self.two_tower = cfg.use_gmsp
        if self.two_tower:
            self.tower2 = [ConvNormReLU(rng, k, c)] + [ConvNormReLU(rng, c, c) for _ in range(3)]
        fused = 2 * c if self.two_tower else c
        self.fuse = [ConvNormReLU(rng, fused, c)] + [ConvNormReLU(rng, c, c) for _ in range(3)]
        self.out = Conv2d(rng, c, 2 * k, k=1, gain=1.0)
        self.scale = cfg.kp_offset_scale

    def tower1_attention(self, z_test: Tensor, w_kp: Tensor) -> Tensor:
        return attention_map(w_kp, z_test)

    def __call__(self, z_test: Tensor, w_kp: Tensor, gmsp_test: Tensor | None) -> Tensor:
        a = self.tower1_attention(z_test, w_kp)
        for layer in self.tower1:
            a = layer(a)
        if self.two_tower:
            if gmsp_test is None:
                raise ValueError("two-tower OMRA needs the GMSP test map")
            b = gmsp_test
            for layer in self.tower2:
                b = layer(b)
            a = T.concat([a, b], axis=0)
        for layer in self.fuse:
            a = layer(a)
        return self.out(a) * self.scale


# --------------------------------------------------------------- network
class STEPNet(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        enc = cfg.encoding()
        c = cfg.head_width
        self.cfg = cfg
        self.enc_cfg = enc
        self.backbone = Backbone(rng, cfg)
        self.embeddings = EmbeddingSet(rng, enc)
        if cfg.use_gmsp:
            # the offset MLP for keypoints only serves the ground-truth keypoint path
            self.embeddings.psi_kp = None
        self.predictor = WeightPredictor(rng, cfg)
        self.gmsp = GMSP(rng, cfg) if cfg.use_gmsp else None
        self.localizer = FilterHead(rng, 1, c, 1, out_bias=-2.0, squash=True)
        self.kp_localizer = FilterHead(rng, cfg.k, c, cfg.k, out_bias=-2.0, squash=True)
        # start from a box of side box_offset_scale around each cell so GIoU has a gradient
        self.bbox_regressor = FilterHead(rng, 1, c, 4, out_bias=np.array([0.5, 0.5, -0.5, -0.5]), out_scale=cfg.box_offset_scale)
        self.omra = OMRA(rng, cfg)
        self.assign_names()

    # individual stages --------------------------------------------------
    def features(self, images) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        return self.backbone(images)

    def soft_maps(self, X: Tensor, freeze: bool = False) -> Tensor:
        if self.gmsp is None:
            raise RuntimeError("model was built without GMSP")
        if freeze:
            with frozen(self.gmsp):
                return self.gmsp(X)
        return self.gmsp(X)

    def compose(self, X: Tensor, maps: TargetStateMaps, gmsp_map=None) -> Tensor:
        return compose_train_features(X, maps, self.embeddings, self.cfg.use_gmsp, gmsp_map)

    def heads(self, z_test: Tensor, weights: ModelWeights, gmsp_test: Tensor | None):
        return (
            self.localizer(weights.w_loc, z_test),
            self.bbox_regressor(weights.w_br, z_test),
            self.kp_localizer(weights.w_kloc, z_test),
            self.omra(z_test, weights.w_kp, gmsp_test),
        )

    def predict(self, f_train: Sequence[Tensor], X_test: Tensor, gmsp_test: Tensor | None) -> NetworkOutputs:
        """Transformer + heads given composed train features and raw test features."""
        f_test = compose_test_features(X_test, self.embeddings)
        z_test, weights = self.predictor(f_train, f_test)
        B_gm, B_om, K_gm, K_om = self.heads(z_test, weights, gmsp_test)
        return NetworkOutputs(B_gm, B_om, K_gm, K_om, None, weights, z_test)

    def gmsp_condition(self, gmsp_train: Tensor) -> np.ndarray:
        """Soft maps used for composition: a stop-gradient copy, so GMSP learns only from its own term."""
        return gmsp_train.data

    # end to end ------------------------------------------------------------
    def full_forward(self, train_images: Sequence[np.ndarray], train_maps: Sequence[TargetStateMaps], test_image: np.ndarray) -> NetworkOutputs:
        """Backbone on every frame, target-state composition, transformer, heads.

        In GMSP mode the train-frame soft maps are returned for supervision and
        (detached) feed the composition; the test-frame soft map is produced
        with GMSP weights frozen.
        """
        m = len(train_images)
        if m != len(train_maps):
            raise ValueError("one TargetStateMaps per training frame required")
        X = self.features(np.stack(list(train_images) + [test_image]))
        X_train = [X[i] for i in range(m)]
        X_test = X[m]
        gmsp_train = None
        gmsp_test = None
        if self.cfg.use_gmsp:
            gmsp_train = self.soft_maps(X[0:m])
            condition = self.gmsp_condition(gmsp_train)
            f_train = [self.compose(X_train[i], train_maps[i], condition[i]) for i in range(m)]
            gmsp_test = self.soft_maps(X[m : m + 1], freeze=True)[0]
        else:
            f_train = [self.compose(X_train[i], train_maps[i]) for i in range(m)]
        out = self.predict(f_train, X_test, gmsp_test)
        out.K_gmsp_hat_train = gmsp_train
        return out



# ------------------------------------------------------------ checkpoints
MAGIC = b"STEP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], header: dict | None = None) -> Path:
    """Write the STEP1 container: magic, JSON header, then one record per array.

    Record layout: u32 name length, UTF-8 name, u32 rank, u64 extents, LE float64 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps(header or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(buf: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a STEP1 checkpoint")
    pos = 5

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<I")
    header = json.loads(buf[pos : pos + hlen].decode())
    pos += hlen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, arrays


def save_model(path: str | Path, model: STEPNet, extra: dict[str, np.ndarray] | None = None, header: dict | None = None) -> Path:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        arrays[k] = v
    head = {"format": 1, "model": model.cfg.to_dict()}
    head.update(header or {})
    return save_checkpoint(path, arrays, head)


def load_model(path: str | Path) -> tuple[STEPNet, dict, dict[str, np.ndarray]]:
    header, arrays = load_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model"])
        model = STEPNet(cfg)
        params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
        model.load_state_dict(params)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: checkpoint does not describe a model ({exc})") from exc
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return model, header, extra
