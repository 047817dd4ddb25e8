"""Optimization loop: Adam with warmup/decay schedule plus checkpointing.

Checkpoint layout: 8-byte magic "AMBRCKPT", little-endian u32 format
version, u64 header length, a JSON header (configs, parameter manifest,
step, seed), then raw little-endian parameter blobs in declaration order
followed by the Adam first/second moment blobs in the same order.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .corpus import Batch, sample_batch
from .encoder import Encoder, ModelConfig
from .objectives import (LossBreakdown, ObjectiveFlags, ObjectiveWeights,
                         combined_loss)

__all__ = ["TrainConfig", "ConfigError", "DivergenceError",
           "CheckpointFormatError", "lr_schedule", "Adam", "train_step",
           "run_training", "save_checkpoint", "load_checkpoint",
           "TrainState"]

MAGIC = b"AMBRCKPT"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid training configuration."""


class DivergenceError(RuntimeError):
    """Non-finite loss; carries the offending step and loss breakdown."""

    def __init__(self, step: int, breakdown: LossBreakdown):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown.to_dict()}")


class CheckpointFormatError(ValueError):
    """Malformed checkpoint file; message names the bad offset."""


@dataclass
class TrainConfig:
    steps: int = 600
    warmup_steps: int = 60
    peak_lr: float = 1e-3
    batch_size: int = 12
    objectives: ObjectiveFlags = field(default_factory=ObjectiveFlags)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: Optional[float] = None
    mask_rate: float = 0.15
    smoothing: float = 0.7
    parallel_fraction: float = 0.5
    checkpoint_every: int = 0  # 0 = only final

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps > 0 and self.warmup_steps >= self.steps:
            raise ConfigError(f"warmup_steps ({self.warmup_steps}) must be "
                              f"smaller than steps ({self.steps})")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.objectives.sa and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when sa is enabled")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "warmup_steps": self.warmup_steps,
                "peak_lr": self.peak_lr, "batch_size": self.batch_size,
                "objectives": self.objectives.names(),
                "weights": {"mlm": self.weights.mlm, "sa": self.weights.sa,
                            "wa": self.weights.wa},
                "seed": self.seed, "adam_beta1": self.adam_beta1,
                "adam_beta2": self.adam_beta2, "adam_eps": self.adam_eps,
                "clip_norm": self.clip_norm, "mask_rate": self.mask_rate,
                "smoothing": self.smoothing,
                "parallel_fraction": self.parallel_fraction,
                "checkpoint_every": self.checkpoint_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "objectives" in d:
            d["objectives"] = ObjectiveFlags.from_names(d["objectives"])
        if "weights" in d:
            d["weights"] = ObjectiveWeights(**d["weights"])
        return cls(**d)


def lr_schedule(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear ramp 0 -> peak over [0, warmup], then linear decay to 0 at total."""
    if warmup >= total:
        raise ConfigError(f"warmup ({warmup}) must be smaller than total ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step <= warmup:
        return peak * (step / warmup) if warmup > 0 else peak
    return peak * (total - step) / (total - warmup)


class Adam:
    """Plain Adam (no weight decay) with optional global-norm clipping."""

    def __init__(self, model: Encoder, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: Optional[float] = None):
        self.model = model
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        dt = model.config.dtype
        self.m = {k: np.zeros(v.shape, dtype=dt) for k, v in model.params.items()}
        self.v = {k: np.zeros(v.shape, dtype=dt) for k, v in model.params.items()}

    def step(self, lr: float) -> None:
        params = self.model.params
        grads = {}
        for name, p in params.items():
            g = p.grad
            grads[name] = np.zeros(p.shape, dtype=p.dtype) if g is None else g
        if self.clip_norm is not None and np.isfinite(self.clip_norm):
            sq = sum(float((g.astype(np.float64) ** 2).sum())
                     for g in grads.values())
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                factor = np.asarray(self.clip_norm / norm,
                                    dtype=self.model.config.dtype)
                grads = {k: g * factor for k, g in grads.items()}
        self.t += 1
        dt = np.dtype(self.model.config.dtype)
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(dt, copy=False)
            self.m[name] = (self.beta1 * self.m[name] + (1.0 - self.beta1) * g) \
                .astype(dt, copy=False)
            self.v[name] = (self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g) \
                .astype(dt, copy=False)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.model.set_param(name, (p.data - update).astype(dt, copy=False))


def train_step(model: Encoder, optimizer: Adam, batch: Batch, cfg: TrainConfig,
               step: int, mask_rng: np.random.Generator) -> LossBreakdown:
    """One optimization step; deterministic given the seeded rngs."""
    total, breakdown = combined_loss(model, batch, cfg.objectives, mask_rng,
                                     mask_rate=cfg.mask_rate,
                                     weights=cfg.weights)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(step, breakdown)
    model.zero_grad()
    total.backward()
    lr = lr_schedule(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr)
    optimizer.step(lr)
    return breakdown


@dataclass
class TrainState:
    model_config: ModelConfig
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    step: int
    seed: int
    train_config: Optional[dict] = None

    def build_model(self) -> Encoder:
        model = Encoder(self.model_config, seed=0)
        for name, arr in self.params.items():
            model.set_param(name, arr)
        return model

    def build_optimizer(self, model: Encoder, cfg: TrainConfig) -> Adam:
        opt = Adam(model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                   cfg.clip_norm)
        opt.t = self.adam_t
        opt.m = {k: np.array(v, copy=True) for k, v in self.adam_m.items()}
        opt.v = {k: np.array(v, copy=True) for k, v in self.adam_v.items()}
        return opt


def run_training(model: Encoder, optimizer: Adam, cfg: TrainConfig,
                 mono_corpora: dict, parallel_corpora: dict,
                 start_step: int = 0,
                 metrics_path: Optional[Path] = None,
                 checkpoint_dir: Optional[Path] = None,
                 on_step: Optional[Callable] = None) -> list:
    """Run steps [start_step, cfg.steps); returns the per-step breakdowns.

    Sampling and masking draw from per-step generators derived from
    (seed, step), so a resumed run replays the identical stream.
    """
    flags = cfg.objectives
    use_parallel = flags.any_parallel and bool(parallel_corpora)
    parallel = parallel_corpora if use_parallel else {}
    frac = cfg.parallel_fraction if use_parallel else 0.0
    history = []
    metrics_fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for step in range(start_step, cfg.steps):
            sample_rng = np.random.default_rng([cfg.seed, step, 0])
            mask_rng = np.random.default_rng([cfg.seed, step, 1])
            batch = sample_batch(mono_corpora, parallel, cfg.batch_size,
                                 cfg.smoothing, sample_rng,
                                 parallel_fraction=frac)
            t0 = time.monotonic()
            breakdown = train_step(model, optimizer, batch, cfg, step, mask_rng)
            wall_ms = (time.monotonic() - t0) * 1000.0
            history.append(breakdown)
            if metrics_fh is not None:
                lr = lr_schedule(step, cfg.warmup_steps, cfg.steps, cfg.peak_lr)
                rec = {"step": step, "lr": lr, "mlm": breakdown.mlm,
                       "sa": breakdown.sa, "wa": breakdown.wa,
                       "total": breakdown.total, "wall_ms": round(wall_ms, 3)}
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            done = step + 1
            if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                    and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                save_checkpoint(checkpoint_dir / f"checkpoint_{done:06d}.bin",
                                model, optimizer, done, cfg)
            if on_step is not None:
                on_step(step, breakdown)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return history


# -- checkpoint io ------------------------------------------------------------

def save_checkpoint(path: Path, model: Encoder, optimizer: Adam, step: int,
                    cfg: TrainConfig) -> None:
    path = Path(path)
    names = list(model.params)
    header = {
        "model_config": model.config.to_dict(),
        "train_config": cfg.to_dict(),
        "step": step,
        "seed": cfg.seed,
        "adam_t": optimizer.t,
        "dtype": np.dtype(model.config.dtype).name,
        "params": [{"name": n, "shape": list(model.params[n].shape)}
                   for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n].data).tobytes())
        for n in names:
            fh.write(np.ascontiguousarray(optimizer.m[n]).tobytes())
        for n in names:
            fh.write(np.ascontiguousarray(optimizer.v[n]).tobytes())


def load_checkpoint(path: Path) -> TrainState:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic at offset 0")
    if len(blob) < 12:
        raise CheckpointFormatError(f"{path}: truncated before version at offset 8")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version "
                                    f"{version} at offset 8")
    if len(blob) < 20:
        raise CheckpointFormatError(f"{path}: truncated header length at offset 12")
    (hlen,) = struct.unpack_from("<Q", blob, 12)
    off = 20
    if len(blob) < off + hlen:
        raise CheckpointFormatError(f"{path}: truncated header at offset {off}")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad header at offset {off}: {exc}")
    off += hlen
    dtype = np.dtype(header["dtype"])
    model_config = ModelConfig.from_dict(header["model_config"])

    def read_block(section: str) -> dict:
        nonlocal off
        out = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if len(blob) < off + nbytes:
                raise CheckpointFormatError(
                    f"{path}: truncated {section} blob for {entry['name']} "
                    f"at offset {off}")
            out[entry["name"]] = np.frombuffer(
                blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)),
                offset=off).reshape(shape).copy()
            off += nbytes
        return out

    params = read_block("parameter")
    adam_m = read_block("first-moment")
    adam_v = read_block("second-moment")
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - off} trailing bytes "
                                    f"at offset {off}")
    return TrainState(model_config=model_config, params=params, adam_m=adam_m,
                      adam_v=adam_v, adam_t=int(header["adam_t"]),
                      step=int(header["step"]), seed=int(header["seed"]),
                      train_config=header.get("train_config"))
