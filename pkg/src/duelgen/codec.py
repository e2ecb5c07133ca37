"""Exactly-invertible pseudo-latent codec and 8-bit PNG I/O.

A space-to-depth rearrangement (factor 2) stands in for a learned
autoencoder: RGB ``(3, H, W)`` maps losslessly to a latent ``(12, H/2, W/2)``.
Pixel values live in [-1, 1]; pure white is +1 on all channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ShapeError

LATENT_CHANNELS = 12
WHITE = "white"  # sentinel accepted by background_latent


@dataclass(frozen=True, eq=False)
class Latent:
    """One frame in latent space: (12, H/2, W/2) reals."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or data.shape[0] != LATENT_CHANNELS:
            raise ShapeError(
                f"latent must be ({LATENT_CHANNELS}, h, w), got {data.shape}"
            )

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LatentClip:
    """F latent frames sharing a diffusion timestep."""

    data: np.ndarray  # (F, 12, h, w)
    t: int

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 4 or data.shape[1] != LATENT_CHANNELS:
            raise ShapeError(
                f"clip must be (F, {LATENT_CHANNELS}, h, w), got {data.shape}"
            )
        if self.t < 0:
            raise ShapeError(f"timestep must be >= 0, got {self.t}")

    @property
    def n_frames(self):
        return self.data.shape[0]


def encode(image: np.ndarray) -> Latent:
    """Space-to-depth encode an RGB (3, H, W) array; lossless by construction."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {image.shape}")
    _, h_full, w_full = image.shape
    if h_full % 2 or w_full % 2:
        raise ShapeError(f"image dimensions must be even, got {h_full}x{w_full}")
    h, w = h_full // 2, w_full // 2
    data = (
        image.reshape(3, h, 2, w, 2)
        .transpose(0, 2, 4, 1, 3)
        .reshape(LATENT_CHANNELS, h, w)
    )
    return Latent(data=np.ascontiguousarray(data))


def decode(latent: Latent) -> np.ndarray:
    """Exact inverse of :func:`encode`."""
    data = latent.data if isinstance(latent, Latent) else np.asarray(latent)
    if data.ndim != 3 or data.shape[0] != LATENT_CHANNELS:
        raise ShapeError(
            f"latent must be ({LATENT_CHANNELS}, h, w), got {data.shape}"
        )
    _, h, w = data.shape
    image = (
        data.reshape(3, 2, 2, h, w)
        .transpose(0, 3, 1, 4, 2)
        .reshape(3, 2 * h, 2 * w)
    )
    return np.ascontiguousarray(image)


def encode_clip(frames: np.ndarray, t: int = 0) -> LatentClip:
    """Encode (F, 3, H, W) pixel frames into a LatentClip."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected (F, 3, H, W) frames, got {frames.shape}")
    data = np.stack([encode(f).data for f in frames])
    return LatentClip(data=data, t=t)


def decode_clip(clip: LatentClip) -> np.ndarray:
    """Decode a LatentClip back to (F, 3, H, W) pixel frames."""
    data = clip.data if isinstance(clip, LatentClip) else np.asarray(clip)
    return np.stack([decode(Latent(data=f)) for f in data])


def background_latent(bg, height: int, width: int, dtype=np.float32) -> Latent:
    """Latent of the conditioning background.

    ``bg`` is either the WHITE sentinel (an all-ones, pure-white canvas) or an
    RGB (3, height, width) array in [-1, 1].
    """
    if isinstance(bg, str):
        if bg != WHITE:
            raise ShapeError(f"unknown background sentinel {bg!r}")
        image = np.ones((3, height, width), dtype=dtype)
    else:
        image = np.asarray(bg)
        if image.shape != (3, height, width):
            raise ShapeError(
                f"background must be (3, {height}, {width}), got {image.shape}"
            )
    return encode(image)


# ---------------------------------------------------------------------------
# PNG I/O ([-1, 1] floats <-> 8-bit RGB)
# ---------------------------------------------------------------------------

def to_unit(image: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float (3, H, W) array to (H, W, 3) uint8."""
    arr = np.asarray(image, dtype=np.float64)
    px = np.rint((arr + 1.0) * 0.5 * 255.0)
    return np.clip(px, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_unit(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map (H, W, 3) uint8 pixels to a [-1, 1] float (3, H, W) array."""
    arr = np.asarray(pixels).astype(dtype)
    return (arr / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)


def save_image(image: np.ndarray, path):
    """Write a [-1, 1] float (3, H, W) array as an 8-bit RGB PNG."""
    Image.fromarray(to_unit(image), mode="RGB").save(path, format="PNG")


def load_image(path, dtype=np.float32) -> np.ndarray:
    """Read an 8-bit RGB PNG as a [-1, 1] float (3, H, W) array."""
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"))
    return from_unit(pixels, dtype=dtype)
