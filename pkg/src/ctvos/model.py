"""Query/key/value encoders, dot-product attention read and the two-head decoder.

Frames enter as ``[H,W,3]`` (or ``[T,H,W,3]``) arrays already mapped to
[-1, 1]. Feature maps are channel-first.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CHECKPOINT_MAGIC = b"CTVS"
CHECKPOINT_VERSION = 1
ENCODERS = ("enc_cur", "enc_key", "enc_val")


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    enc_widths: tuple[int, ...] = (16, 32, 64, 64)
    enc_strides: tuple[int, ...] = (2, 2, 2, 1)
    dec_widths: tuple[int, ...] = (64, 32, 16)
    up_factors: tuple[int, ...] = (2, 4)
    # feed the query map to the decoder next to the attention context
    query_skip: bool = False
    # one set of weights computes both queries and keys
    shared_qk: bool = True
    # append -|k|^2/2 to keys and a constant 1 to queries, so the dot product
    # ranks keys by squared distance to the query
    distance_channel: bool = False

    def __post_init__(self):
        if len(self.enc_widths) != len(self.enc_strides):
            raise ValueError("one stride per encoder stage")
        if len(self.dec_widths) != len(self.up_factors) + 1:
            raise ValueError("decoder needs one width per upsampling stage plus one")
        if int(np.prod(self.up_factors)) != self.stride:
            raise ValueError(f"decoder upsampling {self.up_factors} must undo stride {self.stride}")

    @property
    def stride(self) -> int:
        return int(np.prod(self.enc_strides))

    @property
    def feature_dim(self) -> int:
        return self.enc_widths[-1]

    @property
    def query_dim(self) -> int:
        return self.feature_dim + int(self.distance_channel)


@dataclass
class DecoderOutput:
    recon: Tensor  # [1,3,H,W], tanh-bounded
    tags: Tensor  # [1,1,H,W], sigmoid-bounded


def frames_to_nchw(frames) -> np.ndarray:
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected [H,W,3] or [T,H,W,3] frames, got {arr.shape}")
    return np.ascontiguousarray(np.transpose(arr, (0, 3, 1, 2)))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout, k=3):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.w"] = Tensor(rng.normal(0, std, (cout, cin, k, k)), requires_grad=True, name=f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True, name=f"{name}.b")

    for enc in ENCODERS:
        if enc == "enc_cur" and config.shared_qk:
            continue
        cin = 3
        for i, cout in enumerate(config.enc_widths):
            conv(f"{enc}.conv{i}", cin, cout)
            cin = cout
    cin = config.feature_dim + (config.query_dim if config.query_skip else 0)
    for i, cout in enumerate(config.dec_widths):
        conv(f"dec.conv{i}", cin, cout)
        cin = cout
    conv("dec.head", cin, 4)
    return params


def attention_read(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Read ``v`` at the key columns each query location attends to.

    ``q`` is ``[d,h,w]``, ``k`` is ``[d,L]`` and ``v`` is ``[dv,L]``. Weights are
    ``softmax_L(q^T k / sqrt(d))``; the result is ``[dv,h,w]``.
    """
    if q.ndim != 3 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects q[d,h,w], k[d,L], v[dv,L]; got {q.shape}, {k.shape}, {v.shape}")
    d, h, w = q.shape
    if k.shape[0] != d:
        raise ShapeError(f"query dim {d} does not match key dim {k.shape[0]}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"key columns {k.shape[1]} do not match value columns {v.shape[1]}")
    weights = attention_weights(q, k)
    ctx = nc.matmul(v, nc.transpose(weights, (1, 0)))
    return nc.reshape(ctx, (v.shape[0], h, w))


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic ``[h*w, L]`` matrix of query-to-key weights."""
    d, h, w = q.shape
    qf = nc.reshape(q, (d, h * w))
    logits = nc.mul(nc.matmul(nc.transpose(qf, (1, 0)), k), 1.0 / np.sqrt(d))
    return nc.softmax(logits, axis=1)


def _columns(feats: Tensor) -> Tensor:
    """``[P,d,h,w]`` feature maps to ``[d, P*h*w]`` columns, frame-major."""
    p, d, h, w = feats.shape
    return nc.reshape(nc.transpose(feats, (1, 0, 2, 3)), (d, p * h * w))


class CTVOSModel:
    """Three encoders, global attention read and a two-head decoder."""

    def __init__(self, config: ModelConfig | None = None, params: Mapping[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config or ModelConfig()
        self.params = dict(params) if params is not None else init_params(self.config, seed)

    @property
    def stride(self) -> int:
        return self.config.stride

    def _check_size(self, h: int, w: int) -> None:
        s = self.stride
        if h % s or w % s:
            raise ShapeError(f"frame {h}x{w} not divisible by feature stride {s}")

    def _encode(self, enc: str, x: np.ndarray) -> Tensor:
        self._check_size(*x.shape[2:])
        if enc == "enc_cur" and self.config.shared_qk:
            enc = "enc_key"
        t = Tensor(x)
        last = len(self.config.enc_widths) - 1
        for i, s in enumerate(self.config.enc_strides):
            t = nc.add(nc.conv2d(t, self.params[f"{enc}.conv{i}.w"], stride=s, pad=1),
                       self.params[f"{enc}.conv{i}.b"])
            if i < last:
                t = nc.relu(t)
        return t

    def encode_current(self, frame) -> Tensor:
        x = frames_to_nchw(frame)
        if x.shape[0] != 1:
            raise ShapeError("encode_current takes a single frame")
        q = self._encode("enc_cur", x)
        q = nc.reshape(q, q.shape[1:])
        if self.config.distance_channel:
            q = nc.concat([q, Tensor(np.ones((1,) + q.shape[1:], dtype=q.data.dtype))], axis=0)
        return q

    def encode_keys(self, frames: Sequence[np.ndarray] | np.ndarray) -> Tensor:
        x = self._stack(frames)
        k = _columns(self._encode("enc_key", x))
        if self.config.distance_channel:
            k = nc.concat([k, nc.mul(nc.sum(nc.mul(k, k), axis=0, keepdims=True), -0.5)], axis=0)
        return k

    def encode_values(self, frames: Sequence[np.ndarray] | np.ndarray,
                      keys: Tensor | None = None) -> Tensor:
        x = self._stack(frames)
        v = _columns(self._encode("enc_val", x))
        if keys is not None and keys.shape[1] != v.shape[1]:
            raise ShapeError(f"{v.shape[1]} value columns vs {keys.shape[1]} key columns")
        return v

    def _stack(self, frames) -> np.ndarray:
        if isinstance(frames, np.ndarray) and frames.ndim == 4:
            return frames_to_nchw(frames)
        frames = list(frames)
        if not frames:
            raise ShapeError("need at least one frame")
        shapes = {np.shape(f) for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"frames differ in size: {sorted(shapes)}")
        return frames_to_nchw(np.stack(frames))

    def decode(self, context: Tensor, q: Tensor) -> DecoderOutput:
        if context.shape[1:] != q.shape[1:]:
            raise ShapeError(f"context {context.shape} and query {q.shape} are not spatially aligned")
        x = nc.concat([context, q], axis=0) if self.config.query_skip else context
        x = nc.reshape(x, (1,) + x.shape)
        for i, width in enumerate(self.config.dec_widths):
            if i > 0:
                x = nc.upsample_nearest(x, self.config.up_factors[i - 1])
            x = nc.relu(nc.add(nc.conv2d(x, self.params[f"dec.conv{i}.w"], 1, 1),
                               self.params[f"dec.conv{i}.b"]))
        head = nc.add(nc.conv2d(x, self.params["dec.head.w"], 1, 1), self.params["dec.head.b"])
        recon = nc.tanh(nc.narrow(head, 1, 0, 3))
        tags = nc.sigmoid(nc.narrow(head, 1, 3, 1))
        return DecoderOutput(recon, tags)

    def forward(self, current, key_frames, value_frames) -> DecoderOutput:
        q = self.encode_current(current)
        k = self.encode_keys(key_frames)
        v = self.encode_values(value_frames, keys=k)
        return self.decode(attention_read(q, k, v), q)

    # -- persistence -------------------------------------------------------------

    def state_records(self) -> dict[str, np.ndarray]:
        rec = {f"param/{n}": p.data for n, p in self.params.items()}
        rec["meta/enc_strides"] = np.asarray(self.config.enc_strides, dtype=np.float32)
        rec["meta/up_factors"] = np.asarray(self.config.up_factors, dtype=np.float32)
        if self.config.distance_channel:
            rec["meta/distance_channel"] = np.ones(1, dtype=np.float32)
        return rec

    @classmethod
    def from_records(cls, records: Mapping[str, np.ndarray]) -> "CTVOSModel":
        strides = tuple(int(s) for s in records["meta/enc_strides"])
        ups = tuple(int(s) for s in records["meta/up_factors"])
        enc = tuple(records[f"param/enc_key.conv{i}.w"].shape[0] for i in range(len(strides)))
        shared = "param/enc_cur.conv0.w" not in records
        dec = tuple(records[f"param/dec.conv{i}.w"].shape[0] for i in range(len(ups) + 1))
        skip = records["param/dec.conv0.w"].shape[1] > enc[-1]
        dist = "meta/distance_channel" in records
        config = ModelConfig(enc, strides, dec, ups, skip, shared, dist)
        params = {name[len("param/"):]: Tensor(arr, requires_grad=True, name=name[len("param/"):])
                  for name, arr in records.items() if name.startswith("param/")}
        return cls(config, params)


class CoordinateStubModel:
    """Content-blind stand-in with exact identity correspondence.

    Queries and keys are scaled one-hot codes of the feature-grid location, so
    each query attends only to the same location in every key frame. Values
    are the value frames rearranged space-to-depth and the decoder inverts
    that rearrangement, so reading a value map at the identity correspondence
    returns it unchanged at full resolution.
    """

    def __init__(self, stride: int = 8, scale: float = 30.0):
        self._stride = stride
        self.scale = scale
        self.params: dict[str, Tensor] = {}

    @property
    def stride(self) -> int:
        return self._stride

    def _codes(self, n: int, h: int, w: int) -> np.ndarray:
        s = self._stride
        if h % s or w % s:
            raise ShapeError(f"frame {h}x{w} not divisible by feature stride {s}")
        hw = (h // s) * (w // s)
        eye = self.scale * np.eye(hw)
        return np.tile(eye, (1, n))

    def encode_current(self, frame) -> Tensor:
        x = frames_to_nchw(frame)
        h, w = x.shape[2:]
        s = self._stride
        return Tensor(self._codes(1, h, w).reshape(-1, h // s, w // s))

    def encode_keys(self, frames) -> Tensor:
        x = np.stack(list(frames)) if not isinstance(frames, np.ndarray) else frames
        x = frames_to_nchw(x)
        return Tensor(self._codes(x.shape[0], *x.shape[2:]))

    def encode_values(self, frames, keys: Tensor | None = None) -> Tensor:
        x = np.stack(list(frames)) if not isinstance(frames, np.ndarray) else frames
        x = frames_to_nchw(x)
        p, c, h, w = x.shape
        s = self._stride
        blocks = x.reshape(p, c, h // s, s, w // s, s).transpose(1, 3, 5, 0, 2, 4)
        v = blocks.reshape(c * s * s, p * (h // s) * (w // s))
        if keys is not None and keys.shape[1] != v.shape[1]:
            raise ShapeError(f"{v.shape[1]} value columns vs {keys.shape[1]} key columns")
        return Tensor(v)

    def decode(self, context: Tensor, q: Tensor) -> DecoderOutput:
        s = self._stride
        dv, h, w = context.shape
        c = dv // (s * s)
        img = context.data.reshape(c, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(1, c, h * s, w * s)
        recon = Tensor(np.clip(img, -1, 1))
        return DecoderOutput(recon, Tensor(np.full((1, 1, h * s, w * s), 0.5)))

    def forward(self, current, key_frames, value_frames) -> DecoderOutput:
        q = self.encode_current(current)
        k = self.encode_keys(key_frames)
        v = self.encode_values(value_frames, keys=k)
        return self.decode(attention_read(q, k, v), q)


# -- checkpoint file format ---------------------------------------------------------
#
#   magic "CTVS" | u32 version | u32 record count | records...
#   record: u32 name length | UTF-8 name | u32 rank | rank x u32 extents | float32 data
# all integers and floats little-endian.

def save_checkpoint(path: str | os.PathLike, records: Mapping[str, np.ndarray]) -> Path:
    """Write ``records`` atomically (temp file + rename), in insertion order."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    records: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            records[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return records


def save_model(path: str | os.PathLike, model: CTVOSModel) -> Path:
    return save_checkpoint(path, model.state_records())


def load_model(path: str | os.PathLike) -> CTVOSModel:
    return CTVOSModel.from_records(load_checkpoint(path))
