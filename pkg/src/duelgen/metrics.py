"""Reference quality metrics: PSNR, windowed SSIM, clip-boundary continuity,
and two-fighter identity attribution.

All metrics are pure functions over arrays in the [-1, 1] pixel convention
used throughout the package; PSNR/SSIM map values onto the 8-bit scale first
so the numbers are comparable to standard image-quality tooling.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .errors import ParameterError, ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
_LEVELS = 255.0


def _to_255(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return (np.clip(a, -1.0, 1.0) + 1.0) * 0.5 * _LEVELS


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on the 8-bit scale, capped at 99."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} vs {b.shape}")
    mse = float(np.mean((_to_255(a) - _to_255(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(_LEVELS * _LEVELS / mse), PSNR_CAP)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_SSIM_KERNEL = _gaussian_kernel()


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    win = SSIM_WINDOW
    wx = np.lib.stride_tricks.sliding_window_view(x, (win, win))
    wy = np.lib.stride_tricks.sliding_window_view(y, (win, win))
    axes = ([2, 3], [0, 1])
    mu_x = np.tensordot(wx, _SSIM_KERNEL, axes=axes)
    mu_y = np.tensordot(wy, _SSIM_KERNEL, axes=axes)
    xx = np.tensordot(wx * wx, _SSIM_KERNEL, axes=axes) - mu_x * mu_x
    yy = np.tensordot(wy * wy, _SSIM_KERNEL, axes=axes) - mu_y * mu_y
    xy = np.tensordot(wx * wy, _SSIM_KERNEL, axes=axes) - mu_x * mu_y
    c1 = (SSIM_K1 * _LEVELS) ** 2
    c2 = (SSIM_K2 * _LEVELS) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local SSIM over valid 11x11 Gaussian-weighted windows.

    Inputs are (H, W) or channels-first (C, H, W) in [-1, 1]; channels are
    scored independently and averaged.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim needs equal shapes, got {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (C, H, W), got {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(
            f"image sides must be >= {SSIM_WINDOW} for windowed ssim, "
            f"got {a.shape[-2:]}")
    x = _to_255(a)
    y = _to_255(b)
    return float(np.mean([_ssim_channel(x[c], y[c]) for c in range(x.shape[0])]))


def boundary_continuity(frames, boundaries) -> float:
    """How visible clip joins are, relative to ordinary frame-to-frame motion.

    For adjacent-frame pairs, the statistic is mean absolute difference. The
    result is (mean over join pairs) / (mean over all other pairs); 1.0 means
    joins move exactly as much as within-clip frames. A constant video is
    0/0 and defined as 1.0.
    """
    frames = np.asarray(frames)
    n = frames.shape[0]
    boundaries = sorted(set(int(b) for b in boundaries))
    if not boundaries:
        raise ParameterError("boundary list is empty")
    for b in boundaries:
        if not 1 <= b <= n - 1:
            raise ParameterError(
                f"boundary {b} outside the valid range [1, {n - 1}]")
    diffs = np.array([float(np.mean(np.abs(
        frames[i].astype(np.float64) - frames[i - 1].astype(np.float64))))
        for i in range(1, n)])
    join = np.array([diffs[b - 1] for b in boundaries])
    inner = np.delete(diffs, [b - 1 for b in boundaries])
    if inner.size == 0:
        raise ParameterError("no within-clip frame pairs to compare against")
    num, den = float(join.mean()), float(inner.mean())
    if den == 0.0:
        return 1.0 if num == 0.0 else float("inf")
    return num / den


@dataclasses.dataclass(frozen=True)
class AttributionCounts:
    """Tally behind an id_attribution score."""

    passed: int
    evaluated: int
    skipped: int

    @property
    def accuracy(self) -> float:
        return self.passed / self.evaluated if self.evaluated else 0.0


def id_attribution_counts(frames, masks, ref_colors) -> AttributionCounts:
    """Count (frame, identity) region checks for identity attribution.

    For each frame and identity i, the mean color over the exclusive region
    (pixels with m_i = 1 and the other mask = 0) must be strictly nearer in
    RGB to identity i's anchor than to the other anchor; ties fail. Empty
    exclusive regions are skipped and tallied separately.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeError(f"expected (F, 3, H, W) frames, got {frames.shape}")
    if len(masks) != frames.shape[0]:
        raise ShapeError(
            f"{frames.shape[0]} frames but {len(masks)} mask sets")
    anchors = np.asarray(ref_colors, dtype=np.float64)
    if anchors.shape != (2, 3):
        raise ShapeError(f"ref_colors must be two RGB anchors, got {anchors.shape}")
    passed = evaluated = skipped = 0
    for frame, mask_set in zip(frames, masks):
        pixels = frame.transpose(1, 2, 0).astype(np.float64)
        pair = ((mask_set.m1, mask_set.m2, 0), (mask_set.m2, mask_set.m1, 1))
        for mine, other, idx in pair:
            exclusive = (mine == 1.0) & (other == 0.0)
            if not exclusive.any():
                skipped += 1
                continue
            mean = pixels[exclusive].mean(axis=0)
            d_own = float(np.linalg.norm(mean - anchors[idx]))
            d_other = float(np.linalg.norm(mean - anchors[1 - idx]))
            evaluated += 1
            if d_own < d_other:
                passed += 1
    return AttributionCounts(passed=passed, evaluated=evaluated, skipped=skipped)


def id_attribution(frames, masks, ref_colors) -> float:
    """Fraction of (frame, identity) checks attributing the region correctly."""
    return id_attribution_counts(frames, masks, ref_colors).accuracy


# ---------------------------------------------------------------------------
# reports


_METRIC_COLUMNS = ("ssim", "psnr", "boundary_continuity", "id_attribution")


def _validate_metrics(video_id, values):
    checks = {
        "ssim": lambda v: -1.0 <= v <= 1.0,
        "psnr": lambda v: v >= 0.0,
        "id_attribution": lambda v: 0.0 <= v <= 1.0,
        "boundary_continuity": lambda v: v >= 0.0,
    }
    for key, ok in checks.items():
        v = values.get(key)
        if v is not None and not ok(v):
            raise ParameterError(f"{video_id}: {key}={v} out of range")


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """Per-video metric values plus their aggregate means."""

    videos: dict  # video_id -> {metric: value or None, ...}

    def __post_init__(self):
        object.__setattr__(self, "videos",
                           {k: dict(v) for k, v in self.videos.items()})
        for video_id, values in self.videos.items():
            _validate_metrics(video_id, values)

    @property
    def aggregate(self) -> dict:
        out = {}
        for key in _METRIC_COLUMNS:
            vals = [v[key] for v in self.videos.values()
                    if v.get(key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_json(self) -> str:
        return json.dumps({"videos": self.videos, "aggregate": self.aggregate},
                          indent=1, sort_keys=True)

    def table(self) -> str:
        header = ("video", *_METRIC_COLUMNS)
        rows = [header]
        for video_id in sorted(self.videos):
            values = self.videos[video_id]
            rows.append((video_id, *(_fmt(values.get(k)) for k in _METRIC_COLUMNS)))
        agg = self.aggregate
        rows.append(("mean", *(_fmt(agg[k]) for k in _METRIC_COLUMNS)))
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    return f"{value:.4f}"
