"""Synthetic moving-shapes clips and DAVIS-style directory ingestion.

Objects are rasterized at integer-rounded centers without anti-aliasing, so a
rigidly translating object keeps its exact pixel footprint and every mask
pixel carries the object's color.
"""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

SHAPE_KINDS = ("disk", "square", "triangle")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ConfigError(ValueError):
    pass


class ClipError(ValueError):
    pass


@dataclass
class SceneObject:
    kind: str
    color: np.ndarray
    size: int
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class Background:
    """Solid color, or a linear gradient between two colors along ``direction``."""

    color_a: np.ndarray
    color_b: np.ndarray | None = None
    direction: float = 0.0

    def render(self, height: int, width: int) -> np.ndarray:
        if self.color_b is None:
            return np.broadcast_to(self.color_a, (height, width, 3)).astype(np.float32).copy()
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        proj = np.cos(self.direction) * xx / max(width - 1, 1) + np.sin(self.direction) * yy / max(height - 1, 1)
        proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
        img = (1 - proj)[..., None] * self.color_a + proj[..., None] * self.color_b
        return img.astype(np.float32)

    def colors(self) -> list[np.ndarray]:
        return [self.color_a] if self.color_b is None else [self.color_a, self.color_b]


@dataclass
class Scene:
    objects: list[SceneObject]
    background: Background
    height: int
    width: int


@dataclass
class SceneConfig:
    num_objects: tuple[int, int] = (1, 3)
    size_range: tuple[int, int] = (14, 24)
    max_speed: float = 2.5
    gradient_prob: float = 0.5
    min_color_distance: float = 0.3


@dataclass
class Clip:
    """Frames ``[T,H,W,3]`` in [0,1] and optional per-object masks ``[K,T,H,W]``."""

    frames: np.ndarray
    gt_masks: np.ndarray | None = None
    id: str = ""
    object_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ClipError(f"frames must be [T,H,W,3], got {self.frames.shape}")
        if self.gt_masks is not None:
            t, h, w = self.frames.shape[:3]
            if self.gt_masks.ndim != 4 or self.gt_masks.shape[1:] != (t, h, w):
                raise ClipError(f"masks {self.gt_masks.shape} do not match frames {self.frames.shape}")
            if not self.object_ids:
                self.object_ids = list(range(1, self.gt_masks.shape[0] + 1))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


def _footprint(kind: str, center: np.ndarray, size: int, height: int, width: int) -> np.ndarray:
    cy, cx = int(round(center[1])), int(round(center[0]))
    yy, xx = np.mgrid[0:height, 0:width]
    dy, dx = yy - cy, xx - cx
    half = size / 2.0
    if kind == "disk":
        return dx * dx + dy * dy <= half * half
    if kind == "square":
        return (np.abs(dx) <= half - 0.5) & (np.abs(dy) <= half - 0.5)
    if kind == "triangle":
        # apex up, base at the bottom of the bounding box
        top, bottom = -half, half - 1
        rel = (dy - top) / (bottom - top)
        return (dy >= top) & (dy <= bottom) & (np.abs(dx) <= rel * half)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _sample_color(rng: np.random.Generator, taken: list[np.ndarray], min_dist: float) -> np.ndarray:
    for _ in range(1000):
        c = rng.uniform(0, 1, 3)
        if all(np.linalg.norm(c - t) >= min_dist for t in taken):
            return c
    raise ConfigError("could not find a color distinct from the existing palette")


def generate_scene(seed: int, height: int = 64, width: int = 64, num_objects: int | None = None,
                   config: SceneConfig | None = None) -> Scene:
    config = config or SceneConfig()
    if height < 32 or width < 32:
        raise ConfigError(f"image size must be at least 32x32, got {height}x{width}")
    rng = np.random.default_rng(seed)
    if num_objects is None:
        lo, hi = config.num_objects
        num_objects = int(rng.integers(lo, hi + 1))
    if not 1 <= num_objects <= 4:
        raise ConfigError(f"scene needs 1 to 4 objects, got {num_objects}")
    smin, smax = config.size_range
    if smin < 4 or smax < smin:
        raise ConfigError(f"invalid size range {config.size_range}")
    if smax > min(height, width) - 2:
        raise ConfigError(f"objects of size {smax} cannot fit in {height}x{width}")

    if rng.uniform() < config.gradient_prob:
        ca = rng.uniform(0, 1, 3)
        cb = _sample_color(rng, [ca], config.min_color_distance)
        background = Background(ca, cb, float(rng.uniform(0, 2 * np.pi)))
    else:
        background = Background(rng.uniform(0, 1, 3))

    # gradient backgrounds span everything between their endpoints, so object
    # colors are kept away from both endpoints and the midpoint
    palette = list(background.colors())
    if background.color_b is not None:
        palette.append(0.5 * (background.color_a + background.color_b))
    objects = []
    for _ in range(num_objects):
        color = _sample_color(rng, palette, config.min_color_distance)
        palette.append(color)
        size = int(rng.integers(smin, smax + 1))
        half = size / 2.0
        pos = np.array([rng.uniform(half, width - 1 - half), rng.uniform(half, height - 1 - half)])
        vel = rng.uniform(-config.max_speed, config.max_speed, 2)
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        objects.append(SceneObject(kind, color.astype(np.float32), size, pos, vel))
    return Scene(objects, background, height, width)


def _reflect(value: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    if np.any(span <= 0):
        return np.clip(value, lo, hi)
    u = np.mod(value - lo, 2 * span)
    return lo + np.where(u > span, 2 * span - u, u)


def object_center(obj: SceneObject, t: int, height: int, width: int) -> np.ndarray:
    """Center at frame ``t``: ``position + t * velocity`` folded back into the frame."""
    half = obj.size / 2.0
    lo = np.array([half, half])
    hi = np.array([width - 1 - half, height - 1 - half])
    return _reflect(obj.position + t * obj.velocity, lo, hi)


def render_clip(scene: Scene, num_frames: int, clip_id: str = "") -> Clip:
    if num_frames < 2:
        raise ClipError(f"a clip needs at least 2 frames, got {num_frames}")
    h, w = scene.height, scene.width
    bg = scene.background.render(h, w)
    frames = np.empty((num_frames, h, w, 3), dtype=np.float32)
    masks = np.zeros((len(scene.objects), num_frames, h, w), dtype=bool)
    for t in range(num_frames):
        img = bg.copy()
        owner = np.full((h, w), -1, dtype=np.int64)
        for k, obj in enumerate(scene.objects):
            fp = _footprint(obj.kind, object_center(obj, t, h, w), obj.size, h, w)
            img[fp] = obj.color
            owner[fp] = k
        frames[t] = img
        for k in range(len(scene.objects)):
            masks[k, t] = owner == k
    return Clip(frames, masks, clip_id)


def split_clip(clip: Clip, past: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(frames[0:past], frames[past])``; later frames are ignored."""
    if clip.num_frames < past + 1:
        raise ClipError(f"need at least {past + 1} frames, got {clip.num_frames}")
    return clip.frames[:past], clip.frames[past]


# -- on-disk layout ---------------------------------------------------------------

def _palette() -> list[int]:
    # DAVIS-style bit-interleaved palette
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal.extend((r, g, b))
    return pal


DAVIS_PALETTE = _palette()


def masks_to_index(masks: np.ndarray, object_ids: Sequence[int] | None = None) -> np.ndarray:
    """Collapse per-object binary masks ``[K,H,W]`` into an index map."""
    ids = list(object_ids) if object_ids else list(range(1, masks.shape[0] + 1))
    index = np.zeros(masks.shape[1:], dtype=np.uint8)
    for k, oid in enumerate(ids):
        index[masks[k].astype(bool)] = oid
    return index


def write_index_png(path: str | os.PathLike, index: np.ndarray) -> None:
    index = np.ascontiguousarray(index, dtype=np.uint8)
    img = Image.frombytes("P", (index.shape[1], index.shape[0]), index.tobytes())
    img.putpalette(DAVIS_PALETTE)
    img.save(path)


def read_index_png(path: str | os.PathLike) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise ClipError(f"{path}: expected an indexed or grayscale mask, got mode {img.mode}")
    return np.array(img, dtype=np.uint8)


def write_frame_png(path: str | os.PathLike, frame: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)).save(path)


def read_frame(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise ClipError(f"unreadable image {path}: {exc}") from exc


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_frame_directory(path: str | os.PathLike, mask_dir: str | os.PathLike | None = None,
                         clip_id: str | None = None) -> Clip:
    """Load sorted frames and, optionally, a parallel directory of indexed masks.

    Mask index 0 is background; every other index present anywhere in the
    sequence becomes one object mask, ordered by index.
    """
    path = Path(path)
    files = _list_images(path)
    if not files:
        raise ClipError(f"no images found in {path}")
    frames = [read_frame(f) for f in files]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ClipError(f"non-uniform frame dimensions in {path}: {sorted(shapes)}")
    stacked = np.stack(frames)
    masks = None
    ids: list[int] = []
    if mask_dir is not None:
        mfiles = _list_images(Path(mask_dir))
        if len(mfiles) != len(files):
            raise ClipError(f"{len(files)} frames but {len(mfiles)} masks")
        index = np.stack([read_index_png(f) for f in mfiles])
        if index.shape[1:] != stacked.shape[1:3]:
            raise ClipError(f"mask dimensions {index.shape[1:]} differ from frames {stacked.shape[1:3]}")
        ids = [int(i) for i in np.unique(index) if i != 0]
        masks = np.stack([index == i for i in ids]) if ids else np.zeros((0,) + index.shape, bool)
    return Clip(stacked, masks, clip_id or path.name, ids)


def write_clip(root: str | os.PathLike, clip: Clip) -> None:
    """Write ``clip`` under ``root`` in the JPEGImages/Annotations layout (PNG files)."""
    root = Path(root)
    fdir = root / "JPEGImages" / clip.id
    fdir.mkdir(parents=True, exist_ok=True)
    for t in range(clip.num_frames):
        write_frame_png(fdir / f"{t:05d}.png", clip.frames[t])
    if clip.gt_masks is not None:
        adir = root / "Annotations" / clip.id
        adir.mkdir(parents=True, exist_ok=True)
        for t in range(clip.num_frames):
            write_index_png(adir / f"{t:05d}.png", masks_to_index(clip.gt_masks[:, t], clip.object_ids))


def load_sequence(root: str | os.PathLike, seq: str) -> Clip:
    root = Path(root)
    adir = root / "Annotations" / seq
    return load_frame_directory(root / "JPEGImages" / seq, adir if adir.is_dir() else None, seq)


# -- synthetic corpus ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    seed: int
    num_frames: int
    width: int
    height: int
    num_objects: int

    def line(self) -> str:
        return f"{self.id} {self.seed} {self.num_frames} {self.width} {self.height} {self.num_objects}"


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ConfigError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        sid, *nums = parts
        seed, t, w, h, k = (int(v) for v in nums)
        entries.append(ManifestEntry(sid, seed, t, w, h, k))
    return entries


def make_entries(num_sequences: int, seed: int, num_frames: int = 8, width: int = 64,
                 height: int = 64, config: SceneConfig | None = None) -> list[ManifestEntry]:
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    lo, hi = config.num_objects
    entries = []
    for i in range(num_sequences):
        seq_seed = int(rng.integers(0, 2**31 - 1))
        k = int(rng.integers(lo, hi + 1))
        entries.append(ManifestEntry(f"seq{i:04d}", seq_seed, num_frames, width, height, k))
    return entries


def clip_from_entry(entry: ManifestEntry, config: SceneConfig | None = None) -> Clip:
    scene = generate_scene(entry.seed, entry.height, entry.width, entry.num_objects, config)
    return render_clip(scene, entry.num_frames, entry.id)


def synthesize_corpus(out: str | os.PathLike, entries: Iterable[ManifestEntry],
                      config: SceneConfig | None = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    entries = list(entries)
    for e in entries:
        write_clip(out, clip_from_entry(e, config))
    manifest = out / "manifest.txt"
    manifest.write_text("".join(e.line() + "\n" for e in entries))
    return manifest


def prefetch(items: Iterable, maxsize: int = 4) -> Iterator:
    """Yield from ``items`` while a worker thread produces ahead into a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # surfaced to the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
