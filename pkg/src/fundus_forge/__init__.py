"""Numpy deep-learning engine and experiment pipeline for retinal vessel segmentation
with multimodal reconstruction pretraining."""

from .architectures import build, build_enet, build_fc_densenet, build_unet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, transfer
from .data import SamplePair, nested_splits, synth_dataset, synth_generate
from .evaluation import EvalReport, auc, evaluate, pr_roc_curves
from .graph import ModelGraph, init_he_uniform, param_count
from .losses import SSIMParams, bce_loss, ssim_loss, ssim_map
from .optim import AdamState, StopMonitor, adam_step
from .pipeline import TrainConfig, finetune_seg, pretrain_mr
from .tensor import Tensor

__version__ = "0.1.0"
