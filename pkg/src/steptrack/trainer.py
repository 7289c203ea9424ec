"""Triplet sampling, Adam with gradient clipping, step-decay schedule and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Frame, Sequence as FrameSequence, Triplet, sample_triplet
from .encodings import TargetStateMaps, target_state_maps
from .losses import LossReport, LossWeights, total_loss
from .network import CheckpointError, STEPNet, load_checkpoint, save_model

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.step"
LOG_NAME = "train_log.jsonl"


class NonFiniteLossError(FloatingPointError):
    """The loss (or its gradient) was NaN/inf; the step was not applied."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    decay_factor: float = 0.1
    decay_epoch: int = 50
    epochs: int = 60
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.decay_epoch <= self.epochs:
            raise ValueError(f"decay_epoch {self.decay_epoch} must lie in [0, epochs={self.epochs}]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive (or None to disable)")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate during (1-based) ``epoch``."""
        return self.lr * (self.decay_factor if epoch > self.decay_epoch else 1.0)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_model(cls, model: STEPNet) -> OptimizerState:
        named = model.named_parameters()
        zeros = {name: np.zeros_like(p.data) for name, p in named}
        return cls(m=zeros, v={k: np.zeros_like(a) for k, a in zeros.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": a for k, a in self.m.items()}
        out.update({f"adam_v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int) -> OptimizerState:
        m = {k[len("adam_m/") :]: a.copy() for k, a in arrays.items() if k.startswith("adam_m/")}
        v = {k[len("adam_v/") :]: a.copy() for k, a in arrays.items() if k.startswith("adam_v/")}
        return cls(m=m, v=v, step=step)


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update; ``step`` is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ------------------------------------------------------------------- steps
def frame_maps(frame: Frame, target_id: int, model: STEPNet) -> TargetStateMaps:
    ann = frame.annotation(target_id)
    if ann is None:
        raise ValueError(f"target {target_id} not annotated in frame {frame.image_id}")
    return target_state_maps(ann, model.enc_cfg, others=frame.annotations)


def forward_loss(model: STEPNet, triplet: Triplet, lw: LossWeights) -> LossReport:
    train_maps = [frame_maps(f, triplet.target_id, model) for f in triplet.train]
    test_maps = frame_maps(triplet.test, triplet.target_id, model)
    outputs = model.full_forward([f.image for f in triplet.train], train_maps, triplet.test.image)
    return total_loss(outputs, test_maps, train_maps, model.enc_cfg, lw)


def train_step(model: STEPNet, triplet: Triplet, lw: LossWeights, opt: OptimizerState, cfg: TrainConfig, lr: float) -> LossReport:
    """One forward/backward/Adam step on a single triplet."""
    report = forward_loss(model, triplet, lw)
    if not math.isfinite(report.total):
        raise NonFiniteLossError(f"non-finite loss at step {opt.step + 1}: {report.as_dict()}")
    model.zero_grad()
    report.graph.backward()
    named = model.named_parameters()
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLossError(f"non-finite gradient at step {opt.step + 1}")
    clip_gradients(grads, cfg.grad_clip)
    opt.step += 1
    for name, p in model.named_parameters():
        adam_update(p.data, grads[name], opt.m[name], opt.v[name], opt.step, lr, cfg.beta1, cfg.beta2, cfg.eps)
    model.zero_grad()
    report.graph = None  # release the graph
    return report


def step_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-step generator so a resumed run draws the same triplets."""
    return np.random.default_rng([seed, epoch, index])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


# -------------------------------------------------------------------- loop
def save_training_state(path: Path, model: STEPNet, opt: OptimizerState, cfg: TrainConfig, lw: LossWeights, epoch: int) -> Path:
    header = {"epoch": epoch, "step": opt.step, "train": asdict(cfg), "loss_weights": asdict(lw)}
    return save_model(path, model, extra=opt.to_arrays(), header=header)


def _truncate_log(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines():
        if line.strip() and json.loads(line)["step"] <= last_step:
            keep.append(line)
    path.write_text("".join(l + "\n" for l in keep))


def train_loop(
    model: STEPNet,
    sequences: Sequence[FrameSequence],
    cfg: TrainConfig,
    out_dir: str | Path,
    lw: LossWeights = LossWeights(),
    resume: bool = True,
    on_step: Callable[[dict], None] | None = None,
    stop_after_epoch: int | None = None,
) -> Path:
    """Train for ``cfg.epochs`` passes (one triplet per sequence per pass).

    A checkpoint is written after every epoch; with ``resume`` an existing
    checkpoint in ``out_dir`` is picked up and training continues from it.
    ``stop_after_epoch`` ends the run early (used to simulate interruption).
    """
    if not sequences:
        raise ValueError("no training sequences")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / CHECKPOINT_NAME
    log_path = out_dir / LOG_NAME
    opt = OptimizerState.for_model(model)
    start_epoch = 1
    if resume and ckpt.exists():
        header, arrays = load_checkpoint(ckpt)
        if header.get("model") != model.cfg.to_dict():
            raise CheckpointError("checkpoint model config differs from the requested model")
        params = {k[len("param/") :]: a for k, a in arrays.items() if k.startswith("param/")}
        model.load_state_dict(params)
        opt = OptimizerState.from_arrays(arrays, int(header["step"]))
        start_epoch = int(header["epoch"]) + 1
        _truncate_log(log_path, opt.step)
        log.info("resuming at epoch %d (step %d)", start_epoch, opt.step)
    elif log_path.exists():
        log_path.unlink()

    with log_path.open("a") as fh:
        for epoch in range(start_epoch, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            for index in epoch_order(cfg.seed, epoch, len(sequences)):
                if cfg.max_steps is not None and opt.step >= cfg.max_steps:
                    break
                triplet = sample_triplet(sequences[index], step_rng(cfg.seed, epoch, int(index)))
                report = train_step(model, triplet, lw, opt, cfg, lr)
                record = {"step": opt.step, "epoch": epoch, "lr": lr, **report.as_dict()}
                fh.write(json.dumps(record) + "\n")
                if on_step is not None:
                    on_step(record)
            fh.flush()
            save_training_state(ckpt, model, opt, cfg, lw, epoch)
            if cfg.max_steps is not None and opt.step >= cfg.max_steps:
                break
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break
    return ckpt
