"""Cutout reconstruction, pull/push tagging and BCE objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

DEFAULT_MARGIN = 0.5
DEFAULT_SAMPLES = 128
BCE_CLAMP = 1e-7


class LossError(ValueError):
    pass


@dataclass
class LossReport:
    reconstruction: float = 0.0
    pull: float = 0.0
    push: float = 0.0
    tagging: float = 0.0
    bce: float = 0.0
    overall: float = 0.0
    lam: float = 1.0

    FIELDS = ("reconstruction", "pull", "push", "tagging", "bce", "overall")

    def values(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def huber_reconstruction(pred: Tensor, target) -> Tensor:
    """Mean Huber penalty (threshold 1) over every element of the two images."""
    target = nc.as_tensor(target)
    if pred.shape != target.shape:
        raise nc.DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    return nc.mean(nc.huber(nc.sub(pred, target), 1.0))


def pull_loss(tags: Tensor) -> Tensor:
    """Biased variance of a vector of sampled cutout tags."""
    tags = nc.as_tensor(tags)
    if tags.size < 2:
        raise LossError(f"pull loss needs at least 2 tags, got {tags.size}")
    centered = nc.sub(tags, nc.mean(tags))
    return nc.mean(nc.mul(centered, centered))


def push_loss(mean_b, mean_c, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Hinge ``max(0, margin - |mean_b - mean_c|)``."""
    if margin <= 0:
        raise LossError(f"margin must be positive, got {margin}")
    gap = nc.absolute(nc.sub(mean_b, mean_c))
    return nc.relu(nc.sub(margin, gap))


def sample_indices(mask: np.ndarray, m: int | None, rng: np.random.Generator | None) -> np.ndarray:
    """Flat indices of ``m`` distinct True pixels, or all of them when ``m`` is None or too large."""
    idx = np.flatnonzero(mask)
    if m is None or m >= idx.size:
        return idx
    if rng is None:
        raise LossError("sampling a pixel subset needs an rng")
    return np.sort(rng.choice(idx, size=m, replace=False))


def tagging_loss(tags: Tensor, cutout: np.ndarray, samples: int | None = DEFAULT_SAMPLES,
                 margin: float = DEFAULT_MARGIN, rng: np.random.Generator | None = None,
                 full_set_means: bool = False, use_pull: bool = True,
                 use_push: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(pull, push, pull + push)`` for a tag map and its cutout mask.

    ``samples`` pixels are drawn without replacement from the cutout set and
    from its complement (``None`` takes every pixel). The push term compares
    the sample means, or the full-set means with ``full_set_means``.
    """
    cutout = np.asarray(cutout, dtype=bool)
    if tags.size != cutout.size:
        raise nc.DimensionError(f"tag map {tags.shape} does not match cutout mask {cutout.shape}")
    n_c, n_b = int(cutout.sum()), int((~cutout).sum())
    if n_c < 2 or n_b < 2:
        raise LossError(f"cutout set has {n_c} pixels and the rest {n_b}; need at least 2 in each")
    idx_c = sample_indices(cutout, samples, rng)
    idx_b = sample_indices(~cutout, samples, rng)
    h_c = nc.take(tags, idx_c)
    h_b = nc.take(tags, idx_b)
    zero = Tensor(0.0)
    pull = pull_loss(h_c) if use_pull else zero
    if use_push:
        if full_set_means:
            mean_c = nc.mean(nc.take(tags, np.flatnonzero(cutout)))
            mean_b = nc.mean(nc.take(tags, np.flatnonzero(~cutout)))
        else:
            mean_c, mean_b = nc.mean(h_c), nc.mean(h_b)
        push = push_loss(mean_b, mean_c, margin)
    else:
        push = zero
    return pull, push, nc.add(pull, push)


def overall_loss(reconstruction, tagging, lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise LossError(f"lambda must be non-negative, got {lam}")
    return nc.add(reconstruction, nc.mul(tagging, lam))


def bce_alternative(tags: Tensor, cutout: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with target 0 on cutout pixels and 1 elsewhere."""
    cutout = np.asarray(cutout, dtype=bool)
    if tags.size != cutout.size:
        raise nc.DimensionError(f"tag map {tags.shape} does not match cutout mask {cutout.shape}")
    p = nc.clip(nc.reshape(tags, (tags.size,)), BCE_CLAMP, 1 - BCE_CLAMP)
    target = (~cutout).reshape(-1).astype(p.data.dtype)
    # -[y log p + (1-y) log(1-p)]
    pos = nc.mul(nc.log(p), target)
    neg = nc.mul(nc.log(nc.sub(1.0, p)), 1.0 - target)
    return nc.mul(nc.mean(nc.add(pos, neg)), -1.0)
