"""End-to-end gradient check of the full objective on a small input."""
from __future__ import annotations

import numpy as np

from .autodiff.gradcheck import GradcheckReport, gradcheck
from .density import GaussianSpec, rasterize, target_pyramid
from .loss import LossConfig, model_loss
from .model import ModelConfig, ModelState, forward, init_model


def make_probe_problem(config: ModelConfig, seed: int = 0, size: int = 32, n_heads: int = 5):
    """A random image and target pyramid of side ``size`` for checking gradients."""
    rng = np.random.default_rng([seed, 7])
    image = rng.random((3, size, size)).astype(config.dtype)
    heads = rng.uniform(0, size, size=(n_heads, 2))
    full = rasterize(heads, (size, size), GaussianSpec(1.0))
    targets = {i: m.values[None] for i, m in target_pyramid(full).items()}
    return image, targets


def model_gradcheck(
    preset: str = "tiny",
    seed: int = 0,
    bits: int = 64,
    probe_count: int = 256,
    h: float | None = None,
    lambda_c: float = 1.0,
    size: int = 32,
    **model_overrides,
) -> GradcheckReport:
    config = ModelConfig.preset(preset, precision=bits, **model_overrides)
    state = init_model(config, seed)
    image, targets = make_probe_problem(config, seed, size)
    loss_cfg = LossConfig(lambda_c=lambda_c)

    def build_loss(leaves):
        out = forward(state, image, params=leaves)
        return model_loss(out, targets, loss_cfg).l_f

    if h is None:
        # differences run in the oracle precision, so a small step is safe and avoids crossing relu kinks
        h = 1e-6
    oracle = np.longdouble if bits == 64 else np.float64
    return gradcheck(build_loss, state.params, probe_count=probe_count, h=h, seed=seed, oracle_dtype=oracle)


def threshold_for(bits: int) -> float:
    return 1e-5 if bits == 64 else 1e-3


__all__ = ["make_probe_problem", "model_gradcheck", "threshold_for", "ModelState"]
