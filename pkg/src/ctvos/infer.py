"""First-frame mask propagation through a clip.

Values are built from previous masks (each mask stacked into three channels
and mapped to [-1, 1]); the decoder's three reconstruction channels are
averaged and thresholded at 0. The tag head is not used here.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .augment import to_model_range

WINDOW = 7


class PropagationError(ValueError):
    pass


@dataclass
class ObjectMaskSet:
    """Binary masks ``[K,H,W]`` for one frame; at most one object per pixel."""

    masks: np.ndarray
    object_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise PropagationError(f"expected masks [K,H,W], got {self.masks.shape}")
        if not self.object_ids:
            self.object_ids = list(range(1, self.masks.shape[0] + 1))
        if len(self.object_ids) != self.masks.shape[0]:
            raise PropagationError("one object id per mask")

    def to_index(self) -> np.ndarray:
        index = np.zeros(self.masks.shape[1:], dtype=np.uint8)
        for k, oid in enumerate(self.object_ids):
            index[self.masks[k]] = oid
        return index

    @classmethod
    def from_index(cls, index: np.ndarray, object_ids: Sequence[int] | None = None) -> "ObjectMaskSet":
        ids = list(object_ids) if object_ids is not None else [int(i) for i in np.unique(index) if i != 0]
        masks = np.stack([index == i for i in ids]) if ids else np.zeros((0,) + index.shape, bool)
        return cls(masks, ids)


class PropagationState:
    """Rolling window of (model-range frame, object masks) pairs.

    Holds at most ``capacity`` entries and evicts oldest first. With
    ``anchor_first`` the seeding entry is exempt from eviction, so it stays in
    the window for the whole sequence.
    """

    def __init__(self, first_frame: np.ndarray, first_masks: np.ndarray, capacity: int = WINDOW,
                 anchor_first: bool = True):
        if capacity < 1:
            raise PropagationError("window capacity must be at least 1")
        self.capacity = capacity
        self.anchor_first = anchor_first
        self.anchor = (first_frame, np.asarray(first_masks, dtype=bool))
        self.recent: deque = deque()
        self.t = 1

    @property
    def entries(self) -> list[tuple[np.ndarray, np.ndarray]]:
        head = [self.anchor] if self.anchor is not None else []
        return head + list(self.recent)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, frame: np.ndarray, masks: np.ndarray) -> None:
        self.recent.append((frame, np.asarray(masks, dtype=bool)))
        while len(self) > self.capacity:
            if self.anchor is not None and not self.anchor_first:
                self.anchor = None
            else:
                self.recent.popleft()
        self.t += 1

    def frames(self) -> np.ndarray:
        return np.stack([f for f, _ in self.entries])

    def masks(self) -> np.ndarray:
        """``[K, P, H, W]`` masks of every object across the window."""
        return np.stack([m for _, m in self.entries], axis=1)


def masks_to_values(masks: np.ndarray) -> np.ndarray:
    """Binary masks ``[..., H, W]`` to 3-channel model-range inputs ``[..., H, W, 3]``."""
    masks = np.asarray(masks)
    if masks.dtype != bool and not np.isin(masks, (0, 1)).all():
        raise PropagationError("masks must be binary")
    stacked = np.repeat(masks.astype(np.float32)[..., None], 3, axis=-1)
    return to_model_range(stacked).astype(np.float32)


def channel_average(recon: np.ndarray) -> np.ndarray:
    """Mean of the three output channels of ``recon[1,3,H,W]``, clamped to [-1, 1]."""
    return np.clip(np.asarray(recon).reshape(3, *recon.shape[-2:]).mean(axis=0), -1.0, 1.0)


def averages_to_masks(avgs: np.ndarray) -> np.ndarray:
    """Pick, per pixel, the object with the highest positive average (ties at 0 are background)."""
    avgs = np.asarray(avgs)
    k, h, w = avgs.shape
    out = np.zeros((k, h, w), dtype=bool)
    if k == 0:
        return out
    best = np.argmax(avgs, axis=0)
    fg = np.take_along_axis(avgs, best[None], axis=0)[0] > 0
    for i in range(k):
        out[i] = fg & (best == i)
    return out


def object_averages(model, state: PropagationState, frame: np.ndarray) -> np.ndarray:
    """Raw channel averages ``[K,H,W]`` for each object, sharing query and keys."""
    from .model import attention_read

    past = state.frames()
    if past.shape[1:] != frame.shape:
        raise PropagationError(f"frame {frame.shape} differs from window frames {past.shape[1:]}")
    q = model.encode_current(frame)
    k = model.encode_keys(past)
    masks = state.masks()
    avgs = []
    for obj_masks in masks:
        v = model.encode_values(masks_to_values(obj_masks), keys=k)
        out = model.decode(attention_read(q, k, v), q)
        avgs.append(channel_average(out.recon.data))
    return np.stack(avgs) if avgs else np.zeros((0,) + frame.shape[:2], np.float32)


def propagate_step(state: PropagationState, frame: np.ndarray, model) -> np.ndarray:
    """Predict ``[K,H,W]`` masks for ``frame`` (model range) from the window."""
    if len(state) == 0:
        raise PropagationError("propagation window is empty")
    return averages_to_masks(object_averages(model, state, frame))


def upscale(images: np.ndarray, scale: int) -> np.ndarray:
    """Nearest-neighbour enlargement of the two axes after the leading one."""
    return images.repeat(scale, axis=1).repeat(scale, axis=2) if scale > 1 else images


def downscale_masks(masks: np.ndarray, scale: int) -> np.ndarray:
    """Block-majority reduction of ``[K,H*s,W*s]`` masks; half-covered blocks are background."""
    if scale == 1:
        return masks
    k, h, w = masks.shape
    return masks.reshape(k, h // scale, scale, w // scale, scale).mean(axis=(2, 4)) > 0.5


def propagate_sequence(frames: np.ndarray, first: ObjectMaskSet, model, window: int = WINDOW,
                       anchor_first: bool = True, scale: int = 1) -> list[ObjectMaskSet]:
    """Propagate the first-frame masks through ``frames[T,H,W,3]`` (values in [0,1]).

    With ``scale`` > 1 frames and masks are enlarged by that integer factor
    before propagation, so the feature grid is finer relative to the objects.
    The window keeps the enlarged masks; returned masks are reduced back to
    ``H x W``. Returns one mask set per frame; entry 0 is the given first-frame set.
    """
    frames = np.asarray(frames)
    if frames.shape[0] < 2:
        raise PropagationError("need at least 2 frames")
    if first.masks.shape[0] == 0:
        raise PropagationError("first-frame mask set is empty")
    if first.masks.shape[1:] != frames.shape[1:3]:
        raise PropagationError(f"first mask {first.masks.shape[1:]} does not match frames {frames.shape[1:3]}")
    if scale < 1:
        raise PropagationError(f"scale must be a positive integer, got {scale}")
    mr = upscale(to_model_range(frames).astype(np.float32), scale)
    state = PropagationState(mr[0], upscale(first.masks, scale), window, anchor_first)
    out = [first]
    for t in range(1, frames.shape[0]):
        masks = propagate_step(state, mr[t], model)
        out.append(ObjectMaskSet(downscale_masks(masks, scale), list(first.object_ids)))
        state.push(mr[t], masks)
    return out


def evaluate_model(model, clips, window: int = WINDOW, anchor_first: bool = True, scale: int = 1):
    """Propagate each clip's first-frame ground truth and score the result."""
    from .metrics import EvalReport, evaluate_sequence

    report = EvalReport()
    for clip in clips:
        first = ObjectMaskSet(clip.gt_masks[:, 0], list(clip.object_ids))
        preds = propagate_sequence(clip.frames, first, model, window, anchor_first, scale)
        pred = np.stack([p.masks for p in preds], axis=1)
        report.extend(evaluate_sequence(pred, clip.gt_masks, clip.id, clip.object_ids))
    return report
