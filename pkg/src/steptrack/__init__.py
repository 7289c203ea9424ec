"""Simultaneous tracking and keypoint estimation with transformer-predicted target models."""

from .losses import LossReport, LossWeights, total_loss
from .metrics import EvalConfig, EvalReport, evaluate_run, iou, mse_keypoints, oks, op_curve, pdj
from .network import ModelConfig, STEPNet, load_model, save_model
from .tracker import Tracker, TrackOutput, UpdatePolicy, run_sequence
from .trainer import TrainConfig, train_loop

__version__ = "0.1.0"
