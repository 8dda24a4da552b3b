"""Laplace-corrected predictive coding for hierarchical Gaussian models."""

from .hessian import FullHessian, HessianBlocks, block_hessian, full_hessian, sharpness
from .inference import Amortizer, InferenceConfig, amortizer_init, amortizer_update, map_inference
from .model import Activation, GenerativeModel, LayerSpec, log_joint
from .objectives import (
    OptimizerState,
    TrainConfig,
    almc_objective,
    combined_objective,
    lmc_objective,
    pc_objective,
    sgd_momentum_step,
    train,
)

__version__ = "0.1.0"
