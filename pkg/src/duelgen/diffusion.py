"""Noise schedule, forward noising, loss, and clip-chained DDIM sampling.

Long videos are produced clip by clip: each 24-frame clip shares its first 4
frames with the previous clip's last 4, at every denoising step — the sampler
records the trailing 4 frames' ``x_t`` at each step and re-imposes them on
the next clip's leading 4 frames before every denoiser call, so the overlap
region follows exactly the trajectory already committed to. Per-frame noise
streams are seeded by global frame index, which makes the chained sampler
agree bit-for-bit with the single-clip sampler on the first clip.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from . import codec
from . import pose as pose_kit
from .autodiff import no_grad
from .denoiser import level_resolutions
from .errors import ParameterError, SamplingError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
CLIP_LEN = 24       # frames per sampled clip
OVERLAP_LEN = 4     # frames shared between consecutive clips
CLIP_STRIDE = CLIP_LEN - OVERLAP_LEN
FADE_WEIGHTS = (1.0, 0.75, 0.5, 0.25)
FUSION_MODES = ("replace", "fade")


# ---------------------------------------------------------------------------
# schedule


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; arrays are indexed by timestep-1 (t runs 1..T)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at timestep ``t``; t=0 is defined as 1."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside 0..{self.T}")
        return float(self.alpha_bars[t - 1])

    def constants(self) -> dict:
        """Scalar constants for embedding in checkpoint headers."""
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "kind": self.kind}


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END,
                  kind: str = "linear") -> NoiseSchedule:
    """Build the diffusion schedule; betas increase linearly from start to end."""
    if kind != "linear":
        raise ParameterError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ParameterError(f"schedule needs T >= 1, got {T}")
    if not 0.0 < beta_start < 1.0 or not 0.0 < beta_end < 1.0:
        raise ParameterError("betas must lie strictly inside (0, 1)")
    if T > 1 and beta_start >= beta_end:
        raise ParameterError(f"beta_start {beta_start} must be < beta_end {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if np.any(alpha_bars <= 0) or np.any(np.diff(alpha_bars) >= 0):
        raise ParameterError("schedule lost monotonicity; check beta range")
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars,
                         kind=kind, beta_start=beta_start, beta_end=beta_end)


def step_times(T: int, steps: int):
    """Uniformly spaced sampling times [T, ..., 0], ``steps`` intervals."""
    if not 1 <= steps <= T:
        raise ParameterError(f"steps must lie in 1..{T}, got {steps}")
    return [T - (k * T) // steps for k in range(steps + 1)]


# ---------------------------------------------------------------------------
# closed-form pieces


def add_noise(x0, t: int, eps, schedule: NoiseSchedule):
    """Forward noising: x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} != signal shape {x0.shape}")
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"timestep {t} outside 1..{schedule.T}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule,
              eta: float = 0.0, noise=None):
    """One deterministic DDIM update from timestep ``t`` to ``t_prev``.

    Estimates x0 from the predicted noise and re-noises it to ``t_prev``;
    with ``eta > 0`` a stochastic term is mixed in (``noise`` then required).
    """
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat.data if hasattr(eps_hat, "data") else eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ShapeError(f"eps_hat shape {eps_hat.shape} != x_t shape {x_t.shape}")
    if not 0 <= t_prev < t <= schedule.T:
        raise ParameterError(
            f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}, T={schedule.T}")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if eta == 0.0:
        return math.sqrt(ab_p) * x0_hat + math.sqrt(1.0 - ab_p) * eps_hat
    if noise is None:
        raise ParameterError("eta > 0 requires a noise array")
    sigma = (eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t))
             * math.sqrt(1.0 - ab_t / ab_p))
    direction = math.sqrt(max(1.0 - ab_p - sigma ** 2, 0.0)) * eps_hat
    return math.sqrt(ab_p) * x0_hat + direction + sigma * np.asarray(noise)


# ---------------------------------------------------------------------------
# training loss


def training_loss(batch, net, schedule: NoiseSchedule, rng):
    """Noise-prediction MSE over a batch of training samples.

    ``batch`` is one sample or a sequence of samples; each sample carries
    pixel frames ``x0`` (F, 3, H, W) in [-1, 1], ``pose_maps`` (F, H, W, 3),
    per-frame ``masks`` (RegionMaskSet), two ``ref_images``, a ``background``
    (3, H, W) and a ``prompt`` string. A fresh timestep and noise draw is
    made per sample; the result is a scalar Tensor ready for ``backward()``.
    """
    samples = batch if isinstance(batch, (list, tuple)) else [batch]
    if not samples:
        raise ParameterError("empty training batch")
    total = None
    for sample in samples:
        term = _sample_loss(sample, net, schedule, rng)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(samples))


def _sample_loss(sample, net, schedule, rng):
    dtype = net.config.np_dtype
    x0 = np.asarray(sample.x0)
    if x0.ndim != 4 or x0.shape[1] != 3:
        raise ShapeError(f"expected (F, 3, H, W) pixel frames, got {x0.shape}")
    lat = np.stack([codec.encode(f).data for f in x0]).astype(dtype)
    f, _, h, w = lat.shape
    bg_lat = codec.encode(np.asarray(sample.background)).data.astype(dtype)
    pyramids = build_pyramids(sample.masks, net.config, h, w)
    bank = net.encode_references(sample.ref_images)
    residuals = net.pose_residuals(sample.pose_maps)
    prompt = net.embed_prompt(sample.prompt)

    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(lat.shape).astype(dtype)
    x_t = add_noise(lat, t, eps, schedule)
    eps_hat = net.predict_noise(x_t, t, bg_lat, bank, pyramids, residuals, prompt)
    err = ad.sub(eps_hat, eps)
    return ad.reduce_mean(ad.mul(err, err))


def build_pyramids(mask_sets, config, h, w):
    """Per-frame mask pyramids at the network's attention resolutions."""
    grids = level_resolutions(config, h, w)
    resolutions = [grids[lv] for lv in config.attention_levels]
    return [pose_kit.build_mask_pyramid(ms, resolutions) for ms in mask_sets]


# ---------------------------------------------------------------------------
# sampling


@dataclasses.dataclass(frozen=True)
class SamplerCarry:
    """Trailing-4-frame ``x_t`` snapshots, one per denoising step."""

    entries: dict  # step index -> (overlap, c, h, w) array at that step's t

    def __post_init__(self):
        shapes = {v.shape for v in self.entries.values()}
        if len(shapes) > 1:
            raise ShapeError(f"carry entries disagree in shape: {shapes}")

    @property
    def n_steps(self):
        return len(self.entries)

    @property
    def overlap(self):
        for v in self.entries.values():
            return v.shape[0]
        return 0


@dataclasses.dataclass(frozen=True)
class Conditions:
    """Everything the sampler needs, for N consecutive frames.

    ``bg``: (c, h, w) background latent; ``bank``: encoded reference
    features; ``pyramids``: per-frame MaskPyramid sequence; ``pose_maps``:
    (N, H, W, 3) rasterized pose frames; ``prompt``: string or embedding.
    """

    bg: np.ndarray
    bank: object
    pyramids: tuple
    pose_maps: np.ndarray
    prompt: object

    def __post_init__(self):
        bg = np.asarray(self.bg.data if hasattr(self.bg, "data") else self.bg)
        object.__setattr__(self, "bg", bg)
        maps = np.asarray(self.pose_maps)
        object.__setattr__(self, "pose_maps", maps)
        object.__setattr__(self, "pyramids", tuple(self.pyramids))
        if maps.ndim != 4 or maps.shape[3] != 3:
            raise ShapeError(f"pose maps must be (N, H, W, 3), got {maps.shape}")
        if len(self.pyramids) != maps.shape[0]:
            raise ShapeError(
                f"{len(self.pyramids)} mask pyramids for {maps.shape[0]} pose frames")

    @property
    def n_frames(self):
        return self.pose_maps.shape[0]

    def window(self, start, stop):
        return Conditions(bg=self.bg, bank=self.bank,
                          pyramids=self.pyramids[start:stop],
                          pose_maps=self.pose_maps[start:stop],
                          prompt=self.prompt)


def frame_noise(seed: int, frame_index: int, shape, dtype=np.float32):
    """The initial-noise stream of one frame; independent per frame index."""
    gen = np.random.default_rng(np.random.SeedSequence((int(seed), int(frame_index))))
    return gen.standard_normal(shape, dtype=np.dtype(dtype))


def sample_clip(net, schedule: NoiseSchedule, conditions: Conditions,
                F: int = CLIP_LEN, steps: int = 25, seed: int = 0):
    """Denoise one clip of F frames; returns (LatentClip at t=0, SamplerCarry)."""
    return _sample_window(net, schedule, conditions, F=F, steps=steps,
                          seed=seed, frame_offset=0, carry_in=None)


def _fuse(x, carried, mode):
    n = carried.shape[0]
    if mode == "replace":
        x[:n] = carried
    else:
        w = np.asarray(FADE_WEIGHTS[:n], dtype=x.dtype)[:, None, None, None]
        x[:n] = w * carried + (1.0 - w) * x[:n]
    return x


def _sample_window(net, schedule, conditions, F, steps, seed, frame_offset,
                   carry_in, fusion="replace"):
    if fusion not in FUSION_MODES:
        raise ParameterError(f"fusion must be one of {FUSION_MODES}, got {fusion!r}")
    if F < 1:
        raise SamplingError(f"cannot sample {F} frames")
    if conditions.n_frames != F:
        raise ShapeError(f"conditions cover {conditions.n_frames} frames, need {F}")
    c = net.config.latent_channels
    ch, lh, lw = conditions.bg.shape
    if ch != c:
        raise ShapeError(f"background latent has {ch} channels, net wants {c}")
    dtype = net.config.np_dtype
    n_keep = min(OVERLAP_LEN, F)
    ts = step_times(schedule.T, steps)
    x = np.stack([frame_noise(seed, frame_offset + i, (c, lh, lw), dtype)
                  for i in range(F)])
    carry_out = {}
    with no_grad():
        prompt = (net.embed_prompt(conditions.prompt)
                  if isinstance(conditions.prompt, str) else conditions.prompt)
        residuals = net.pose_residuals(conditions.pose_maps)
        pyramids = list(conditions.pyramids)
        for k in range(steps):
            if carry_in is not None:
                x = _fuse(x, carry_in.entries[k], fusion)
            carry_out[k] = x[-n_keep:].copy()
            eps_hat = net.predict_noise(x, ts[k], conditions.bg, conditions.bank,
                                        pyramids, residuals, prompt)
            x = ddim_step(x, eps_hat.data, ts[k], ts[k + 1], schedule)
    return codec.LatentClip(data=x, t=0), SamplerCarry(entries=carry_out)


def sample_long(net, schedule: NoiseSchedule, conditions: Conditions,
                seed: int = 0, steps: int = 25, fusion: str = "replace"):
    """Sample N frames as chained clips sharing a 4-frame overlap.

    N below one clip length delegates to a single short clip. Longer N must
    tile as 24 + k*20; every subsequent clip inherits the previous clip's
    trailing-4-frame trajectory at each denoising step, and the stitched
    output keeps overlap frames from their first occurrence.
    """
    n = conditions.n_frames
    if n < CLIP_LEN:
        clip, _ = sample_clip(net, schedule, conditions, F=n, steps=steps, seed=seed)
        return clip
    if (n - CLIP_LEN) % CLIP_STRIDE:
        raise ParameterError(
            f"frame count {n} does not tile into {CLIP_LEN}-frame clips with "
            f"stride {CLIP_STRIDE}; use N = {CLIP_LEN} + k*{CLIP_STRIDE}")
    out = None
    carry = None
    for start in range(0, n - CLIP_LEN + 1, CLIP_STRIDE):
        window = conditions.window(start, start + CLIP_LEN)
        clip, carry = _sample_window(net, schedule, window, F=CLIP_LEN,
                                     steps=steps, seed=seed,
                                     frame_offset=start, carry_in=carry,
                                     fusion=fusion)
        if out is None:
            out = np.empty((n,) + clip.data.shape[1:], dtype=clip.data.dtype)
            out[:CLIP_LEN] = clip.data
        else:
            out[start + OVERLAP_LEN:start + CLIP_LEN] = clip.data[OVERLAP_LEN:]
    return codec.LatentClip(data=out, t=0)
