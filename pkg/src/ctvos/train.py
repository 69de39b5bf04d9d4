"""Batch assembly, the optimization step and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .augment import (
    AugmentFlags,
    apply_cutout,
    augment_clip,
    make_zoom_views,
    random_cutout_spec,
    to_model_range,
)
from .losses import (
    LossReport,
    bce_alternative,
    huber_reconstruction,
    overall_loss,
    tagging_loss,
)
from .model import CTVOSModel, ModelConfig, frames_to_nchw, load_checkpoint, save_checkpoint
from .numcore import AdamState, NonFiniteError, Tape
from .videogen import Clip, split_clip

log = logging.getLogger(__name__)

LOG_NAME = "loss_log.tsv"
TIMING_NAME = "timing.tsv"
CHECKPOINT_NAME = "model.ctvs"


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    clip_length: int = 8
    zoom_views: int = 2
    zoom_frames: int = 1
    lr: float = 1e-4
    epochs: int = 1
    lam: float = 1.0
    margin: float = 0.5
    samples: int = 128
    cutout_shape: str = "square"
    cutout_min: float = 0.25
    cutout_max: float = 0.5
    use_cutout: bool = True
    use_tagging: bool = True
    use_bce: bool = False
    use_zoom: bool = True
    use_pull: bool = True
    use_push: bool = True
    random_zoom_offset: bool = False
    hflip: bool = True
    temporal_flip: bool = True
    crop: int = 0
    feature_dim: int = 64
    stride: int = 8
    query_skip: bool = False
    shared_qk: bool = True
    distance_channel: bool = False
    accumulate: int = 1
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.clip_length < 2:
            raise ConfigError(f"clip_length must be >= 2, got {self.clip_length}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.margin <= 0 or self.samples < 2 or self.lam < 0:
            raise ConfigError("margin must be positive, samples >= 2 and lam >= 0")
        if self.zoom_views < 0 or self.zoom_frames < 1 or self.zoom_frames > self.clip_length - 1:
            raise ConfigError("zoom_views must be >= 0 and zoom_frames within the past frames")
        if self.epochs < 0 or self.accumulate < 1 or self.checkpoint_every < 0:
            raise ConfigError("epochs >= 0, accumulate >= 1 and checkpoint_every >= 0 required")
        if self.feature_dim < 4 or self.feature_dim % 4:
            raise ConfigError("feature_dim must be a positive multiple of 4")
        if self.stride not in (4, 8):
            raise ConfigError(f"stride must be 4 or 8, got {self.stride}")
        if not 0 < self.cutout_min <= self.cutout_max:
            raise ConfigError("need 0 < cutout_min <= cutout_max")
        if (self.use_tagging or self.use_bce) and not self.use_cutout:
            raise ConfigError("tagging and BCE objectives need the cutout")
        if self.use_tagging and self.use_bce:
            raise ConfigError("use_bce replaces the tagging loss; enable only one")

    def model_config(self) -> ModelConfig:
        d = self.feature_dim
        if self.stride == 8:
            return ModelConfig((d // 4, d // 2, d, d), (2, 2, 2, 1), (d, d // 2, d // 4), (2, 4),
                               self.query_skip, self.shared_qk, self.distance_channel)
        return ModelConfig((d // 4, d // 2, d, d), (2, 2, 1, 1), (d, d // 2, d // 4), (2, 2),
                           self.query_skip, self.shared_qk, self.distance_channel)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str) -> Any:
    kind = type(getattr(TrainConfig(), key))
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | os.PathLike | None = None,
                overrides: Mapping[str, Any] | None = None) -> TrainConfig:
    """Defaults, then file values, then ``overrides`` (strings are parsed)."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, val) if isinstance(val, str) else val
    return TrainConfig(**values)


def config_to_text(config: TrainConfig) -> str:
    return "".join(f"{k}={getattr(config, k)}\n" for k in _FIELDS)


# -- batches ----------------------------------------------------------------------

@dataclass
class TrainBatch:
    """One clip prepared for a step; all frames in model range ``[.., H, W, 3]``."""

    current: np.ndarray
    target: np.ndarray
    past: np.ndarray
    key_frames: np.ndarray
    value_frames: np.ndarray
    cutout: np.ndarray | None
    zoom_sources: list[int] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.key_frames.shape[0] + 1


def build_batch(clip: Clip, config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Augment, split into past/current, cut out and attach zoom views."""
    if clip.num_frames < config.clip_length:
        raise ConfigError(f"clip {clip.id!r} has {clip.num_frames} frames, need {config.clip_length}")
    flags = AugmentFlags(config.hflip, config.temporal_flip,
                         (config.crop, config.crop) if config.crop else None)
    clip = augment_clip(clip, rng, flags)
    frames = to_model_range(clip.frames[:config.clip_length]).astype(np.float32)
    n_past = config.clip_length - 1
    past, current = split_clip(Clip(frames), past=n_past)
    h, w = current.shape[:2]

    cutout = None
    past_cut, target = past, current
    if config.use_cutout:
        spec = random_cutout_spec(h, w, rng, config.cutout_shape, config.cutout_min, config.cutout_max)
        past_cut, cutout = apply_cutout(past, spec)
        target = apply_cutout(current[None], spec)[0][0]

    keys, values = [past], [past_cut]
    sources: list[int] = []
    if config.use_zoom and config.zoom_views > 0:
        sources = sorted(int(i) for i in rng.choice(n_past, size=config.zoom_frames, replace=False))
        for r in sources:
            views = make_zoom_views(past[r], config.zoom_views + 1, config.random_zoom_offset, rng)[1:]
            zk = np.stack(views)
            keys.append(zk)
            values.append(apply_cutout(zk, spec)[0] if cutout is not None else zk)
    return TrainBatch(current, target, past, np.concatenate(keys), np.concatenate(values), cutout, sources)


# -- one step ----------------------------------------------------------------------

def _term(name: str, fn):
    try:
        value = fn()
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite {name} loss: {exc}") from exc
    for v in value if isinstance(value, tuple) else (value,):
        if not np.isfinite(v.item()):
            raise TrainingDiverged(f"non-finite {name} loss")
    return value


def compute_loss(model: CTVOSModel, batch: TrainBatch, config: TrainConfig,
                 rng: np.random.Generator) -> tuple[nc.Tensor, LossReport]:
    """Forward pass and the configured objective; call under an active tape."""
    try:
        out = model.forward(batch.current, batch.key_frames, batch.value_frames)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite activations in the forward pass: {exc}") from exc
    target = frames_to_nchw(batch.target)
    recon = _term("reconstruction", lambda: huber_reconstruction(out.recon, target))
    report = LossReport(lam=config.lam)
    report.reconstruction = recon.item()
    aux = None
    if config.use_tagging:
        pull, push, tag = _term("tagging", lambda: tagging_loss(
            out.tags, batch.cutout, config.samples, config.margin, rng,
            use_pull=config.use_pull, use_push=config.use_push))
        report.pull, report.push, report.tagging = pull.item(), push.item(), tag.item()
        aux = tag
    elif config.use_bce:
        aux = _term("bce", lambda: bce_alternative(out.tags, batch.cutout))
        report.bce = aux.item()
    total = overall_loss(recon, aux, config.lam) if aux is not None else recon
    total = _term("overall", lambda: total)
    report.overall = total.item()
    return total, report


def gradients(model: CTVOSModel, batch: TrainBatch, config: TrainConfig,
              rng: np.random.Generator) -> tuple[dict[str, np.ndarray], LossReport]:
    with Tape() as tape:
        total, report = compute_loss(model, batch, config, rng)
    by_tensor = tape.backward(total)
    grads = {name: by_tensor[p] for name, p in model.params.items() if p in by_tensor}
    return grads, report


def train_step(batch: TrainBatch, model: CTVOSModel, state: AdamState, config: TrainConfig,
               rng: np.random.Generator) -> LossReport:
    """Forward, backward and one Adam update of ``model.params`` in place."""
    grads, report = gradients(model, batch, config, rng)
    nc.adam_step(model.params, grads, state, lr=config.lr)
    return report


# -- checkpoints -------------------------------------------------------------------

def training_records(model: CTVOSModel, state: AdamState) -> dict[str, np.ndarray]:
    rec = model.state_records()
    rec["adam/step"] = np.asarray(state.step, dtype=np.float32)
    for name in model.params:
        if name in state.m:
            rec[f"adam/m/{name}"] = state.m[name]
            rec[f"adam/v/{name}"] = state.v[name]
    return rec


def restore_training(path: str | os.PathLike) -> tuple[CTVOSModel, AdamState]:
    rec = load_checkpoint(path)
    model = CTVOSModel.from_records(rec)
    state = AdamState(step=int(rec.get("adam/step", np.zeros(()))))
    for name in model.params:
        if f"adam/m/{name}" in rec:
            state.m[name] = rec[f"adam/m/{name}"]
            state.v[name] = rec[f"adam/v/{name}"]
    return model, state


# -- loop --------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    steps: int
    reports: list[LossReport]
    model: CTVOSModel


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1_000_003, epoch]).permutation(n)


def _format_row(step: int, epoch: int, report: LossReport) -> str:
    vals = "\t".join(f"{v:.9g}" for v in report.values())
    return f"{step}\t{epoch}\t{vals}\n"


def run_training(dataset: Sequence[Clip], config: TrainConfig, out_dir: str | os.PathLike,
                 resume: str | os.PathLike | None = None, max_steps: int | None = None,
                 model: CTVOSModel | None = None) -> TrainResult:
    """Train over ``dataset`` for ``config.epochs`` epochs (one clip per step).

    Writes ``model.ctvs`` (periodically and at the end), a tab-separated loss
    log and a separate wall-clock timing file. With ``resume`` the model, the
    Adam moments and the step counter are restored and training continues
    from the next step of the same deterministic schedule.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path, timing_path, ckpt = out / LOG_NAME, out / TIMING_NAME, out / CHECKPOINT_NAME

    if resume is not None:
        model, state = restore_training(resume)
    else:
        model = model or CTVOSModel(config.model_config(), seed=config.seed)
        state = AdamState()
    start = state.step * config.accumulate if resume is not None else 0

    header = "step\tepoch\t" + "\t".join(LossReport.FIELDS) + "\n"
    mode = "a" if resume is not None and log_path.exists() else "w"
    logf = open(log_path, mode)
    timef = open(timing_path, mode)
    if mode == "w":
        logf.write(header)
        timef.write("step\twall_seconds\n")
    n = len(dataset)
    total_steps = config.epochs * n
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    reports: list[LossReport] = []
    pending: list[dict[str, np.ndarray]] = []
    t0 = time.perf_counter()
    try:
        for step in range(start, total_steps):
            epoch, pos = divmod(step, n)
            clip = dataset[int(_epoch_order(config.seed, epoch, n)[pos])]
            rng = _step_rng(config.seed, step)
            batch = build_batch(clip, config, rng)
            grads, report = gradients(model, batch, config, rng)
            pending.append(grads)
            if len(pending) == config.accumulate:
                merged = {k: sum(g[k] for g in pending if k in g) / len(pending)
                          for k in model.params if any(k in g for g in pending)}
                nc.adam_step(model.params, merged, state, lr=config.lr)
                pending.clear()
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    save_checkpoint(ckpt, training_records(model, state))
            reports.append(report)
            logf.write(_format_row(step + 1, epoch, report))
            timef.write(f"{step + 1}\t{time.perf_counter() - t0:.3f}\n")
    finally:
        logf.close()
        timef.close()
    save_checkpoint(ckpt, training_records(model, state))
    return TrainResult(ckpt, log_path, len(reports), reports, model)


def read_loss_log(path: str | os.PathLike) -> list[dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    return [dict(zip(cols, (float(v) for v in line.split("\t")))) for line in lines[1:] if line]
