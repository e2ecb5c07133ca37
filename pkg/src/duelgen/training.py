"""Two-stage finetuning: freeze policies, mixture batches, and checkpoints.

Stage 1 trains every non-temporal parameter (temporal attention stays at its
identity initialization, so the net behaves frame-by-frame); stage 2 freezes
everything except the temporal layers. Batches are drawn from a mixture of
the combat source and the spliced-walker source with a per-batch Bernoulli
choice.

Each optimization step re-seeds its random stream from ``(seed, step)``, so
resuming from a checkpoint (which stores optimizer state) continues the loss
trace bit-exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from pathlib import Path

import numpy as np

from . import forge
from .denoiser import DenoiserNet, load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, make_schedule, training_loss
from .errors import (DataError, ParameterError, PolicyError, TrainingDiverged)

# The production finetuning rate for large pretrained weights; far too small
# for from-scratch toy runs, which default to TrainConfig.learning_rate.
PRODUCTION_LEARNING_RATE = 2e-6

COMBAT_SOURCE = "combat"
FASHION_SOURCE = "fashion"
INCREMENTAL_SOURCE = "incremental"

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100

TRACE_NAME = "loss_trace.csv"
CHECKPOINT_NAME = "checkpoint.zip"
_OPT_PREFIX = "optimizer/"


# ---------------------------------------------------------------------------
# freeze policies


def is_temporal_parameter(name: str) -> bool:
    """True when a dotted parameter path belongs to a temporal layer."""
    return "temporal" in name.split(".")


@dataclasses.dataclass(frozen=True)
class StagePolicy:
    """Which parameters train and which stay frozen for a stage."""

    stage: int
    trainable: tuple
    frozen: tuple

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ParameterError(f"stage must be 1 or 2, got {self.stage}")
        object.__setattr__(self, "trainable", tuple(self.trainable))
        object.__setattr__(self, "frozen", tuple(self.frozen))
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise PolicyError(
                f"parameters both trainable and frozen: {sorted(overlap)[:3]}")


def stage_policy(param_names, stage: int) -> StagePolicy:
    """Partition parameter names: stage 1 trains non-temporal layers only,
    stage 2 trains temporal layers only."""
    if stage not in (1, 2):
        raise ParameterError(f"stage must be 1 or 2, got {stage}")
    trainable, frozen = [], []
    for name in param_names:
        temporal = is_temporal_parameter(name)
        target = trainable if (stage == 2) == temporal else frozen
        target.append(name)
    return StagePolicy(stage=stage, trainable=tuple(trainable),
                       frozen=tuple(frozen))


def apply_freeze_policy(net: DenoiserNet, stage) -> StagePolicy:
    """Set ``requires_grad`` on every parameter according to the stage.

    ``stage`` is 1, 2 or an explicit StagePolicy; a policy naming parameters
    the net does not have (or missing some it does) is rejected.
    """
    params = net.param_dict()
    policy = stage if isinstance(stage, StagePolicy) else stage_policy(params, stage)
    named = set(policy.trainable) | set(policy.frozen)
    unknown = named - set(params)
    missing = set(params) - named
    if unknown or missing:
        raise PolicyError(
            f"policy does not match the network: unknown {sorted(unknown)[:3]}, "
            f"uncovered {sorted(missing)[:3]}")
    for name in policy.trainable:
        params[name].requires_grad = True
    for name in policy.frozen:
        params[name].requires_grad = False
    return policy


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    steps: int
    learning_rate: float = 1e-3
    batch_size: int = 2
    mixture_ratio: float = 0.5
    seed: int = 0
    frame_interval: int = 2
    clip_len: int = 20
    checkpoint_every: int = 0      # 0 = checkpoint only at the end
    incremental_after: int = 0     # 0 = incremental source unused

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0.0 <= self.mixture_ratio <= 1.0:
            raise ParameterError(
                f"mixture_ratio must be in [0, 1], got {self.mixture_ratio}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# batches


@dataclasses.dataclass(frozen=True)
class Batch:
    samples: tuple
    source_tag: str


def next_batch(sources: dict, mixture_ratio: float, stage: int, rng,
               batch_size: int = 2, frame_interval: int = 2,
               clip_len: int = 20) -> Batch:
    """Draw one batch: a Bernoulli(mixture_ratio) coin picks the source for
    the whole batch (heads = fashion), then videos and frame windows are
    sampled uniformly from it."""
    if not 0.0 <= mixture_ratio <= 1.0:
        raise ParameterError(f"mixture_ratio must be in [0, 1], got {mixture_ratio}")
    tag = FASHION_SOURCE if rng.random() < mixture_ratio else COMBAT_SOURCE
    entries = sources.get(tag) or ()
    if not entries:
        raise DataError(f"the {tag} source has no videos")
    samples = []
    for _ in range(batch_size):
        entry = entries[int(rng.integers(len(entries)))]
        samples.append(forge.load_sample(entry, stage,
                                         frame_interval=frame_interval,
                                         clip_len=clip_len, rng=rng))
    return Batch(samples=tuple(samples), source_tag=tag)


# ---------------------------------------------------------------------------
# optimizer


class RMSprop:
    """Momentum-free adaptive optimizer (running mean of squared gradients)."""

    def __init__(self, params: dict, lr: float, alpha: float = 0.99,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ParameterError("learning rate must be positive")
        self.params = dict(params)
        self.lr = float(lr)
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.square_avg = {name: np.zeros_like(p.data)
                           for name, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            grad = p.grad
            sq = self.square_avg[name]
            sq *= self.alpha
            sq += (1.0 - self.alpha) * grad * grad
            p.data -= self.lr * grad / (np.sqrt(sq) + self.eps)

    def state_blobs(self) -> dict:
        """Optimizer state as named byte blobs for checkpoint embedding."""
        return {_OPT_PREFIX + name: np.ascontiguousarray(sq).tobytes()
                for name, sq in sorted(self.square_avg.items())}

    def load_state_blobs(self, blobs: dict):
        for name, sq in self.square_avg.items():
            key = _OPT_PREFIX + name
            if key not in blobs:
                continue
            flat = np.frombuffer(blobs[key], dtype=sq.dtype)
            if flat.size != sq.size:
                raise DataError(
                    f"optimizer state size mismatch for {name}: "
                    f"{flat.size} vs {sq.size}")
            self.square_avg[name] = flat.reshape(sq.shape).copy()


# ---------------------------------------------------------------------------
# the training loop


@dataclasses.dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    trace: tuple          # (step, loss, source_tag) rows
    policy: StagePolicy
    final_step: int

    @property
    def losses(self):
        return np.array([row[1] for row in self.trace])


def _effective_sources(datasets: dict, config: TrainConfig, step: int) -> dict:
    sources = {COMBAT_SOURCE: tuple(datasets.get(COMBAT_SOURCE) or ()),
               FASHION_SOURCE: tuple(datasets.get(FASHION_SOURCE) or ())}
    extra = datasets.get(INCREMENTAL_SOURCE)
    if extra and config.incremental_after and step >= config.incremental_after:
        sources[COMBAT_SOURCE] = sources[COMBAT_SOURCE] + tuple(extra)
    return sources


def _atomic_checkpoint(path: Path, net, schedule, header_extra, extra_blobs):
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(tmp, net, schedule.constants(), header_extra=header_extra,
                    extra_blobs=extra_blobs)
    os.replace(tmp, path)


def _write_trace(path: Path, rows, append: bool):
    mode = "a" if append and path.exists() else "w"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "source_tag"])
        writer.writerows(rows)


def train(net: DenoiserNet, stage: int, config: TrainConfig, datasets: dict,
          schedule: NoiseSchedule = None, out_dir=None, start_step: int = 0,
          optimizer_state: dict = None, log=None) -> TrainResult:
    """Run one finetuning stage; returns the checkpoint path and loss trace.

    ``datasets`` maps source tags ("combat", "fashion", optionally
    "incremental") to manifest entries. The loss trace is appended to
    ``out_dir/loss_trace.csv``; checkpoints are written atomically. Aborts
    with TrainingDiverged when the loss exceeds 10x the initial level for
    100 consecutive steps.
    """
    schedule = make_schedule() if schedule is None else schedule
    out_dir = Path.cwd() if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / CHECKPOINT_NAME

    policy = apply_freeze_policy(net, stage)
    params = net.param_dict()
    trainable = {name: params[name] for name in policy.trainable}
    optimizer = RMSprop(trainable, lr=config.learning_rate)
    if optimizer_state:
        optimizer.load_state_blobs(optimizer_state)

    if config.mixture_ratio > 0.0 and not datasets.get(FASHION_SOURCE):
        raise DataError("mixture_ratio > 0 but the fashion source is empty")
    if config.mixture_ratio < 1.0 and not datasets.get(COMBAT_SOURCE):
        raise DataError("mixture_ratio < 1 but the combat source is empty")

    trace = []
    initial_loss = None
    high_streak = 0

    def checkpoint(step_count):
        header_extra = {
            "stage": policy.stage,
            "train_step": step_count,
            "train_config": config.to_dict(),
        }
        _atomic_checkpoint(checkpoint_path, net, schedule, header_extra,
                           optimizer.state_blobs())

    for step in range(start_step, config.steps):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, step)))
        sources = _effective_sources(datasets, config, step)
        batch = next_batch(sources, config.mixture_ratio, stage, rng,
                           batch_size=config.batch_size,
                           frame_interval=config.frame_interval,
                           clip_len=config.clip_len)
        net.zero_grad()
        loss = training_loss(batch.samples, net, schedule, rng)
        loss.backward()
        optimizer.step()

        value = float(loss.data)
        trace.append((step, value, batch.source_tag))
        if log is not None:
            log(step, value, batch.source_tag)

        if initial_loss is None:
            initial_loss = value
        # A NaN/inf loss counts as exceeding the threshold: comparisons with
        # NaN are false and would otherwise reset the streak.
        if not math.isfinite(value) or value > DIVERGENCE_FACTOR * initial_loss:
            high_streak += 1
            if high_streak >= DIVERGENCE_PATIENCE:
                _write_trace(out_dir / TRACE_NAME, trace, append=start_step > 0)
                raise TrainingDiverged(
                    f"loss {value:.4g} exceeded {DIVERGENCE_FACTOR:g}x the "
                    f"initial {initial_loss:.4g} for {high_streak} consecutive "
                    f"steps (step {step}, stage {policy.stage})")
        else:
            high_streak = 0

        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            checkpoint(step + 1)

    checkpoint(config.steps)
    _write_trace(out_dir / TRACE_NAME, trace, append=start_step > 0)
    return TrainResult(checkpoint_path=checkpoint_path, trace=tuple(trace),
                       policy=policy, final_step=config.steps)


def resume(checkpoint_path, datasets: dict, out_dir=None, steps: int = None,
           log=None) -> TrainResult:
    """Continue a training run from its checkpoint, bit-exactly.

    The checkpoint supplies the network, stage, train config and optimizer
    state; ``steps`` may raise the total step target.
    """
    net, header, extra = load_checkpoint(checkpoint_path)
    if "train_config" not in header or "train_step" not in header:
        raise DataError(f"{checkpoint_path} was not written by a training run")
    config = TrainConfig.from_dict(header["train_config"])
    if steps is not None:
        config = dataclasses.replace(config, steps=steps)
    constants = header.get("schedule") or {}
    schedule = make_schedule(
        T=constants.get("T", 1000),
        beta_start=constants.get("beta_start", 1e-4),
        beta_end=constants.get("beta_end", 2e-2),
        kind=constants.get("kind", "linear"))
    out_dir = Path(checkpoint_path).parent if out_dir is None else out_dir
    return train(net, header["stage"], config, datasets, schedule=schedule,
                 out_dir=out_dir, start_step=int(header["train_step"]),
                 optimizer_state=extra, log=log)


def load_train_config(path) -> TrainConfig:
    """Read a TrainConfig from a JSON file (unknown keys rejected)."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise DataError(f"{path}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(payload) - known
    if unknown:
        raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
    return TrainConfig.from_dict(payload)
