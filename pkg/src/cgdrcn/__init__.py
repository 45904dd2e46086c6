"""Confidence-guided deep residual crowd counting on a small numpy autodiff engine."""
from .annotations import Category, ImageRecord, categorize, parse_dataset
from .density import DensityMap, GaussianSpec, count, rasterize, sum_pool, target_pyramid
from .loss import LossConfig, loss_c, loss_d, loss_f
from .model import ModelConfig, ModelState, forward, infer_count, init_model

__version__ = "0.1.0"

__all__ = [
    "Category", "DensityMap", "GaussianSpec", "ImageRecord", "LossConfig", "ModelConfig", "ModelState",
    "categorize", "count", "forward", "infer_count", "init_model", "loss_c", "loss_d", "loss_f",
    "parse_dataset", "rasterize", "sum_pool", "target_pyramid",
]
