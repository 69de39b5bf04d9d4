"""Training-time transforms: cutout, zoom-in views, flips/crops, value range."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numcore.ops import bilinear_matrix
from .videogen import Clip

CUTOUT_SHAPES = ("square", "rectangle", "circle", "triangle")
MAX_CUTOUT_FRACTION = 0.5
DEFAULT_ZOOM_STEP = 0.5


class CutoutError(ValueError):
    pass


class ZoomError(ValueError):
    pass


@dataclass(frozen=True)
class CutoutSpec:
    """Geometry of one cutout.

    ``anchor`` is the (row, col) of the bounding box's top-left corner.
    ``size`` is (height, width) of the bounding box; for a circle both equal
    the diameter. Triangles carry explicit vertices relative to the anchor.
    """

    shape: str
    anchor: tuple[int, int]
    size: tuple[int, int]
    vertices: tuple[tuple[float, float], ...] = ()
    fill: float = 0.0

    def footprint(self, height: int, width: int) -> np.ndarray:
        r0, c0 = self.anchor
        bh, bw = self.size
        if r0 < 0 or c0 < 0 or r0 + bh > height or c0 + bw > width or bh < 1 or bw < 1:
            raise CutoutError(f"cutout box {self.anchor}+{self.size} outside {height}x{width} frame")
        mask = np.zeros((height, width), dtype=bool)
        yy, xx = np.mgrid[0:bh, 0:bw].astype(np.float64)
        if self.shape in ("square", "rectangle"):
            if self.shape == "square" and bh != bw:
                raise CutoutError(f"square cutout needs equal sides, got {self.size}")
            local = np.ones((bh, bw), dtype=bool)
        elif self.shape == "circle":
            r = bh / 2.0
            local = (yy + 0.5 - r) ** 2 + (xx + 0.5 - bw / 2.0) ** 2 <= r * r
        elif self.shape == "triangle":
            if len(self.vertices) != 3:
                raise CutoutError("triangle cutout needs three vertices")
            local = _triangle_raster(np.asarray(self.vertices, dtype=np.float64), yy + 0.5, xx + 0.5)
        else:
            raise CutoutError(f"unknown cutout shape {self.shape!r}")
        mask[r0:r0 + bh, c0:c0 + bw] = local
        return mask


def _triangle_raster(v: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    def edge(a, b):
        return (xx - a[1]) * (b[0] - a[0]) - (yy - a[0]) * (b[1] - a[1])

    e0, e1, e2 = edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _is_scalene(v: np.ndarray, tol: float = 1.0) -> bool:
    sides = sorted(np.linalg.norm(v[i] - v[(i + 1) % 3]) for i in range(3))
    return sides[1] - sides[0] > tol and sides[2] - sides[1] > tol


def _twice_area(v: np.ndarray) -> float:
    a, b = v[1] - v[0], v[2] - v[0]
    return abs(a[0] * b[1] - a[1] * b[0])


def random_cutout_spec(height: int, width: int, rng: np.random.Generator, shape: str = "square",
                       min_frac: float = 0.25, max_frac: float = 0.5, fill: float = 0.0) -> CutoutSpec:
    """Sample a cutout whose characteristic side is uniform in
    ``[min_frac, max_frac] * min(height, width)``, placed uniformly in frame.
    """
    if shape == "random":
        shape = CUTOUT_SHAPES[int(rng.integers(len(CUTOUT_SHAPES)))]
    if shape not in CUTOUT_SHAPES:
        raise CutoutError(f"unknown cutout shape {shape!r}")
    short = min(height, width)
    cap = MAX_CUTOUT_FRACTION * height * width
    for _ in range(100):
        side = int(round(rng.uniform(min_frac, max_frac) * short))
        side = max(side, 2)
        if shape in ("square", "circle"):
            bh = bw = side
        else:
            other = int(round(side * rng.uniform(0.5, 1.5)))
            other = int(np.clip(other, 2, width if shape == "rectangle" else short))
            bh, bw = (side, other) if rng.uniform() < 0.5 else (other, side)
            bh, bw = min(bh, height), min(bw, width)
        verts: tuple = ()
        if shape == "triangle":
            v = None
            for _ in range(100):
                cand = np.column_stack([rng.uniform(0, bh, 3), rng.uniform(0, bw, 3)])
                if _is_scalene(cand) and _twice_area(cand) > 0.2 * bh * bw:
                    v = cand
                    break
            if v is None:
                continue
            verts = tuple(tuple(float(c) for c in p) for p in v)
        r0 = int(rng.integers(0, height - bh + 1))
        c0 = int(rng.integers(0, width - bw + 1))
        spec = CutoutSpec(shape, (r0, c0), (bh, bw), verts, fill)
        if spec.footprint(height, width).sum() <= cap:
            return spec
    raise CutoutError(f"could not sample a {shape} cutout within the area cap for {height}x{width}")


def cutout_mask(spec: CutoutSpec, height: int, width: int) -> np.ndarray:
    mask = spec.footprint(height, width)
    if mask.sum() > MAX_CUTOUT_FRACTION * height * width:
        raise CutoutError(f"cutout covers {mask.mean():.1%} of the frame; at most 50% allowed")
    return mask


def apply_cutout(frames, spec: CutoutSpec | None = None,
                 rng: np.random.Generator | None = None, **random_kwargs):
    """Fill one footprint with ``spec.fill`` in every frame of ``frames[T,H,W,C]``.

    ``frames`` may also be a :class:`Clip`, in which case a Clip comes back.
    With ``spec=None`` a spec is drawn from ``rng``. Returns the modified copy
    and the boolean cutout mask ``[H,W]`` shared by all frames.
    """
    if isinstance(frames, Clip):
        out, mask = apply_cutout(frames.frames, spec, rng, **random_kwargs)
        return replace(frames, frames=out), mask
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] == 0:
        raise CutoutError(f"expected non-empty frames [T,H,W,C], got {frames.shape}")
    h, w = frames.shape[1:3]
    if spec is None:
        if rng is None:
            raise CutoutError("a random cutout needs an rng")
        spec = random_cutout_spec(h, w, rng, **random_kwargs)
    mask = cutout_mask(spec, h, w)
    out = frames.copy()
    out[:, mask] = spec.fill
    return out, mask


# -- zoom views -----------------------------------------------------------------

def zoom_factors(levels: int, step: float = DEFAULT_ZOOM_STEP) -> list[float]:
    if levels < 1:
        raise ZoomError(f"zoom levels must be >= 1, got {levels}")
    return [1.0 + step * k for k in range(levels)]


def zoom_view(frame: np.ndarray, factor: float, offset: tuple[float, float] | None = None) -> np.ndarray:
    """Crop a ``1/factor`` window (centered unless ``offset`` is given) and resize it back.

    ``offset`` is the fractional position of the crop within the free range,
    (0, 0) top-left to (1, 1) bottom-right.
    """
    h, w = frame.shape[:2]
    if factor == 1.0:
        return frame.copy()
    if factor < 1.0:
        raise ZoomError(f"zoom factor must be >= 1, got {factor}")
    ch, cw = h / factor, w / factor
    if ch < 8 or cw < 8:
        raise ZoomError(f"zoom crop {ch:.1f}x{cw:.1f} is smaller than 8x8")
    oy, ox = (0.5, 0.5) if offset is None else offset
    y0, x0 = oy * (h - ch), ox * (w - cw)
    # sample corners of the crop window exactly
    ry = bilinear_matrix(h, y0 + np.linspace(0, ch - 1, h), np.float64)
    rx = bilinear_matrix(w, x0 + np.linspace(0, cw - 1, w), np.float64)
    src = np.moveaxis(frame.astype(np.float64), -1, 0)
    out = np.matmul(np.matmul(ry, src), rx.T)
    return np.moveaxis(out, 0, -1).astype(frame.dtype)


def make_zoom_views(frame: np.ndarray, levels: int = 3, random_offset: bool = False,
                    rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Views at factors ``1, 1.5, 2, ...``; the first is the unmodified frame."""
    h, w = frame.shape[:2]
    if h < 32 or w < 32:
        raise ZoomError(f"frame must be at least 32x32, got {h}x{w}")
    views = []
    for f in zoom_factors(levels):
        offset = None
        if random_offset and f != 1.0:
            if rng is None:
                raise ZoomError("random zoom placement needs an rng")
            offset = tuple(rng.uniform(0, 1, 2))
        views.append(zoom_view(frame, f, offset))
    return views


# -- clip-level augmentation ---------------------------------------------------------

@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = False
    temporal_reverse: bool = False
    crop: tuple[int, int] | None = None


def hflip_clip(clip: Clip) -> Clip:
    masks = None if clip.gt_masks is None else clip.gt_masks[..., ::-1].copy()
    return replace(clip, frames=clip.frames[:, :, ::-1].copy(), gt_masks=masks)


def reverse_clip(clip: Clip) -> Clip:
    masks = None if clip.gt_masks is None else clip.gt_masks[:, ::-1].copy()
    return replace(clip, frames=clip.frames[::-1].copy(), gt_masks=masks)


def crop_clip(clip: Clip, top: int, left: int, height: int, width: int) -> Clip:
    h, w = clip.size
    if height > h or width > w or top < 0 or left < 0 or top + height > h or left + width > w:
        raise ValueError(f"crop {height}x{width} at ({top},{left}) exceeds {h}x{w} frame")
    frames = clip.frames[:, top:top + height, left:left + width].copy()
    masks = None
    if clip.gt_masks is not None:
        masks = clip.gt_masks[:, :, top:top + height, left:left + width].copy()
    return replace(clip, frames=frames, gt_masks=masks)


def augment_clip(clip: Clip, rng: np.random.Generator, flags: AugmentFlags) -> Clip:
    """Apply the selected transforms; flips are applied with probability 1/2 each.

    Every frame (and mask) receives the same spatial transform.
    """
    if flags.crop is not None:
        ch, cw = flags.crop
        h, w = clip.size
        if ch > h or cw > w:
            raise ValueError(f"crop {ch}x{cw} larger than frame {h}x{w}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        clip = crop_clip(clip, top, left, ch, cw)
    if flags.hflip and rng.uniform() < 0.5:
        clip = hflip_clip(clip)
    if flags.temporal_reverse and rng.uniform() < 0.5:
        clip = reverse_clip(clip)
    return clip


# -- value range ------------------------------------------------------------------

def to_model_range(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("input must lie in [0, 1]")
    return 2 * x - 1


def from_model_range(y: np.ndarray) -> np.ndarray:
    return (np.asarray(y) + 1) / 2


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1] to CIE L*a*b* (D65)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array([[0.4124564, 0.3575761, 0.1804375],
                  [0.2126729, 0.7151522, 0.0721750],
                  [0.0193339, 0.1191920, 0.9503041]])
    xyz = lin @ m.T / np.array([0.95047, 1.0, 1.08883])
    eps = 216 / 24389
    kappa = 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)
