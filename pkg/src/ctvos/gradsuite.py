"""Finite-difference checks over every differentiable primitive and the full training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import GradCheckResult, Tensor

Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


PRIMITIVE_CASES: dict[str, Case] = {
    "conv2d": lambda r: (lambda x, w: nc.sum(nc.tanh(nc.conv2d(x, w, 2, 1))),
                         [_rand(r, 2, 3, 6, 6), _rand(r, 4, 3, 3, 3)]),
    "upsample_nearest": lambda r: (lambda x: nc.sum(nc.tanh(nc.upsample_nearest(x, 3))), [_rand(r, 1, 2, 3, 3)]),
    "relu": lambda r: (lambda x: nc.sum(nc.mul(nc.relu(x), x)), [_rand(r, 5, 4)]),
    "matmul": lambda r: (lambda a, b: nc.sum(nc.tanh(nc.matmul(a, b))), [_rand(r, 3, 4), _rand(r, 4, 5)]),
    "softmax": lambda r: (lambda x, y: nc.sum(nc.mul(nc.softmax(x, 1), y)), [_rand(r, 3, 6), _rand(r, 3, 6)]),
    "add_sub_mul": lambda r: (lambda a, b: nc.sum(nc.mul(nc.sub(a, b), nc.add(a, b))),
                              [_rand(r, 3, 4), _rand(r, 1, 4)]),
    "sum_mean": lambda r: (lambda x: nc.mean(nc.mul(nc.sum(x, axis=1), nc.sum(x, axis=1))), [_rand(r, 4, 5)]),
    "resize_bilinear": lambda r: (lambda x: nc.sum(nc.tanh(nc.resize_bilinear(x, 7, 5))), [_rand(r, 1, 2, 4, 6)]),
    "concat": lambda r: (lambda a, b: nc.sum(nc.tanh(nc.concat([a, b], axis=1))), [_rand(r, 2, 3), _rand(r, 2, 4)]),
    "tanh_sigmoid": lambda r: (lambda x: nc.sum(nc.mul(nc.tanh(x), nc.sigmoid(x))), [_rand(r, 6)]),
    "huber": lambda r: (lambda x: nc.mean(nc.huber(nc.mul(x, 1.7))), [_rand(r, 20)]),
    "reshape_transpose_narrow": lambda r: (
        lambda x: nc.sum(nc.tanh(nc.narrow(nc.transpose(nc.reshape(x, (3, 2, 4)), (2, 0, 1)), 0, 1, 2))),
        [_rand(r, 6, 4)]),
    "take": lambda r: (lambda x: nc.sum(nc.tanh(nc.take(x, np.array([0, 3, 3, 7])))), [_rand(r, 2, 4)]),
    "abs_log_clip": lambda r: (lambda x: nc.sum(nc.log(nc.add(nc.absolute(nc.clip(x, -0.8, 0.8)), 1.0))),
                               [_rand(r, 10)]),
}


def check_primitive(name: str, seed: int = 7) -> GradCheckResult:
    fn, inputs = PRIMITIVE_CASES[name](np.random.default_rng(seed))
    return nc.check_gradients(lambda: fn(*inputs), inputs, name=name)


def pipeline_check(seed: int = 0, size: int = 8) -> GradCheckResult:
    """Reconstruction + tagging loss of a small model on a ``size``x``size``, 2-frame clip.

    Checks gradients with respect to every model parameter. Biases are drawn
    at random rather than zero so no ReLU input sits exactly on its kink.
    """
    from .augment import CutoutSpec, apply_cutout
    from .losses import huber_reconstruction, overall_loss, tagging_loss
    from .model import CTVOSModel, ModelConfig, frames_to_nchw

    rng = np.random.default_rng(seed)
    config = ModelConfig((4, 4, 8, 8), (2, 2, 2, 1), (8, 4, 4), (2, 4))
    model = CTVOSModel(config, seed=seed)
    for name, p in model.params.items():
        p.data = rng.normal(0, 0.1, p.shape) if name.endswith(".b") else p.data.astype(np.float64)
    frames = rng.uniform(-1, 1, (2, size, size, 3))
    spec = CutoutSpec("square", (1, 2), (size // 2, size // 2))
    past_cut, cutout = apply_cutout(frames[:1], spec)
    target = frames_to_nchw(apply_cutout(frames[1:], spec)[0])

    def loss() -> Tensor:
        out = model.forward(frames[1], frames[:1], past_cut)
        recon = huber_reconstruction(out.recon, target)
        _, _, tag = tagging_loss(out.tags, cutout, 4, 0.5, np.random.default_rng(seed))
        return overall_loss(recon, tag, 1.0)

    return nc.check_gradients(loss, list(model.params.values()), name="full loss (8x8, 2 frames)")


def run_suite(include_pipeline: bool = True) -> list[GradCheckResult]:
    with nc.precision(64):
        results = [check_primitive(name) for name in PRIMITIVE_CASES]
        if include_pipeline:
            results.append(pipeline_check())
    return results
