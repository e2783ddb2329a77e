"""Lightweight multi-scale FCNs for instrument/background segmentation."""
from .arch import (
    ArchConfig,
    Network,
    ScalePredictions,
    build_baseline_fcn8s,
    build_network,
    build_toolnet_h,
    build_toolnet_ms,
    count_parameters,
)
from .losses import MSDLConfig, alpha_weight, dice_loss, fuse_scales, msdl
from .optim import CLRPolicy, SGDState, TrainConfig, clr_lr, sgd_step, train_loop
from .tensor import Tensor, backward, finite_diff_check

__version__ = "0.1.0"
