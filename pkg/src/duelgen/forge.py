"""Procedural two-fighter dataset synthesis.

Each video shows two articulated stick fighters sparring on a flat or
gradient background. Figures are built by forward kinematics over the
18-joint body topology, driven by parameterized action curves (sinusoid
phase profiles for punches, kicks, blocks, ...). The renderer emits the
exact joint trajectories it drew as the ground-truth pose sequence, so pose
supervision is perfect by construction.

Identity appearance (body color, head shape, limb thickness) comes from a
deterministic identity table; reference images show each fighter alone on
white. A separate path produces single-walker clips that `splice_fashion`
joins side by side into two-person walking videos, mirroring the structure
of fashion-video training mixtures.

Everything is seeded: the same config always produces a byte-identical
dataset tree.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from . import codec
from . import pose as pose_kit
from .errors import (DataError, ParameterError, SamplingError, SchemaError,
                     ShapeError)

ACTIONS = ("punch", "kick", "block", "dodge",
           "uppercut", "sweep", "advance", "crouch")
WALK_ACTION = "walk"
FASHION_SCENE = "studio"
HEAD_SHAPES = ("circle", "square", "diamond", "triangle")
LIMB_WIDTHS = (3.0, 3.5, 4.0)
MANIFEST_NAME = "manifest.json"
FRAME_NAME = "{:05d}.png"

# Scene colors are pure grays: mixing any identity color with a neutral
# background moves a region mean parallel to the gray axis plus a shrink
# toward it, which keeps the mean nearest its own identity anchor.
DEFAULT_BACKGROUNDS = (
    {"scene": "dojo", "kind": "flat", "rgb": (130, 130, 130)},
    {"scene": "arena", "kind": "flat", "rgb": (104, 104, 104)},
)

# limb lengths as fractions of the figure scale
_P = {
    "torso": 0.30, "head": 0.155, "shoulder": 0.10, "hip": 0.065,
    "upper_arm": 0.15, "forearm": 0.14, "thigh": 0.20, "shin": 0.20,
    "eye_dx": 0.035, "eye_dy": 0.030, "ear_dx": 0.065, "ear_dy": 0.010,
    "head_radius": 0.095, "crouch_drop": 0.12,
}


# ---------------------------------------------------------------------------
# identities


@dataclasses.dataclass(frozen=True)
class IdentityStyle:
    """Appearance of one fighter: tag, body color, head shape, limb width."""

    index: int
    tag: str
    color: tuple       # uint8 RGB, used for rendering
    head_shape: str
    limb_width: float
    color_exact: tuple = None  # unquantized [0, 1] RGB behind ``color``

    def __post_init__(self):
        if self.color_exact is None:
            object.__setattr__(self, "color_exact",
                               tuple(c / 255.0 for c in self.color))

    @property
    def paint(self):
        """Body color as [-1, 1] floats (the canvas color space)."""
        return np.asarray(self.color, dtype=np.float64) / 255.0 * 2.0 - 1.0

    @property
    def anchor(self):
        """RGB anchor for identity-attribution metrics, in [-1, 1]."""
        return np.asarray(self.color_exact, dtype=np.float64) * 2.0 - 1.0


def identity_table(n_identities: int):
    """Deterministic identity styles with well-separated hues.

    Colors form an exact circle around the gray axis in RGB space (equal
    distance from neutral for every identity). Blending any anchor with a
    neutral background therefore shrinks the hue component uniformly, and a
    region mean stays strictly nearest its own identity's anchor at any
    nonzero blend weight.
    """
    if n_identities < 2:
        raise ParameterError(f"need at least 2 identities, got {n_identities}")
    e1 = np.array([2.0, -1.0, -1.0]) / math.sqrt(6.0)
    e2 = np.array([0.0, 1.0, -1.0]) / math.sqrt(2.0)
    center, radius = 0.46, 0.45
    styles = []
    for i in range(n_identities):
        ang = 2.0 * math.pi * i / n_identities
        vec = center + radius * (math.cos(ang) * e1 + math.sin(ang) * e2)
        rgb = tuple(int(round(c * 255)) for c in vec)
        styles.append(IdentityStyle(
            index=i,
            tag=f"fighter_{i:02d}",
            color=rgb,
            head_shape=HEAD_SHAPES[i % len(HEAD_SHAPES)],
            limb_width=LIMB_WIDTHS[i % len(LIMB_WIDTHS)],
            color_exact=tuple(vec),
        ))
    return tuple(styles)


def identity_for_tag(tag: str, n_identities: int) -> IdentityStyle:
    table = identity_table(n_identities)
    for style in table:
        if style.tag == tag:
            return style
    raise DataError(f"unknown identity tag {tag!r} in a {n_identities}-entry table")


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class ForgeConfig:
    n_videos: int
    frames_per_video: int = 48
    width: int = 128
    height: int = 96
    n_identities: int = 16
    n_actions: int = 8
    backgrounds: tuple = DEFAULT_BACKGROUNDS
    fps: float = 12.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "backgrounds", tuple(self.backgrounds))
        for name in ("n_videos", "frames_per_video", "width", "height",
                     "n_identities", "n_actions"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.width % 2 or self.height % 2:
            raise ParameterError(
                f"canvas must have even dimensions, got {self.width}x{self.height}")
        if self.n_actions > len(ACTIONS):
            raise ParameterError(
                f"at most {len(ACTIONS)} actions available, asked for {self.n_actions}")
        if not self.backgrounds:
            raise ParameterError("at least one background spec required")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["backgrounds"] = [dict(b) for b in self.backgrounds]
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        if "backgrounds" in kwargs:
            kwargs["backgrounds"] = tuple(dict(b) for b in kwargs["backgrounds"])
        return cls(**kwargs)


def background_image(spec, width: int, height: int) -> np.ndarray:
    """(H, W, 3) float canvas in [-1, 1] from a flat or gradient spec."""
    kind = spec.get("kind", "flat")
    if kind == "flat":
        color = np.asarray(spec["rgb"], dtype=np.float64) / 255.0 * 2.0 - 1.0
        return np.broadcast_to(color, (height, width, 3)).copy()
    if kind == "gradient":
        top = np.asarray(spec["top"], dtype=np.float64) / 255.0 * 2.0 - 1.0
        bottom = np.asarray(spec["bottom"], dtype=np.float64) / 255.0 * 2.0 - 1.0
        ramp = np.linspace(0.0, 1.0, height)[:, None, None]
        return np.broadcast_to((1 - ramp) * top + ramp * bottom,
                               (height, width, 3)).copy()
    raise ParameterError(f"unknown background kind {kind!r}")


# ---------------------------------------------------------------------------
# skeleton kinematics


def _limb_dir(theta: float, facing: int) -> np.ndarray:
    """Unit vector at angle ``theta`` from straight-down, toward ``facing``."""
    return np.array([facing * math.sin(theta), math.cos(theta)])


def build_skeleton(root_x: float, root_y: float, scale: float, facing: int,
                   p: dict) -> np.ndarray:
    """Joint positions (18, 2) for one articulated figure.

    ``p`` holds joint angles in radians (0 = limb hanging straight down,
    positive = swung toward the facing direction), a torso ``lean`` and a
    ``crouch`` fraction lowering the pelvis.
    """
    s = scale
    root = np.array([root_x + facing * p.get("shift", 0.0) * s,
                     root_y + p.get("crouch", 0.0) * _P["crouch_drop"] * s])
    lean = p.get("lean", 0.0)
    up = np.array([facing * math.sin(lean), -math.cos(lean)])
    neck = root + _P["torso"] * s * up
    nose = neck + _P["head"] * s * up
    joints = np.zeros((18, 2))
    joints[0] = nose
    joints[1] = neck
    joints[14] = nose + (_P["eye_dx"] * s, -_P["eye_dy"] * s)
    joints[15] = nose + (-_P["eye_dx"] * s, -_P["eye_dy"] * s)
    joints[16] = nose + (_P["ear_dx"] * s, _P["ear_dy"] * s)
    joints[17] = nose + (-_P["ear_dx"] * s, _P["ear_dy"] * s)
    r_sh = neck + (_P["shoulder"] * s, 0.02 * s)
    l_sh = neck + (-_P["shoulder"] * s, 0.02 * s)
    joints[2], joints[5] = r_sh, l_sh
    joints[3] = r_sh + _P["upper_arm"] * s * _limb_dir(p["sh_r"], facing)
    joints[4] = joints[3] + _P["forearm"] * s * _limb_dir(p["sh_r"] + p["el_r"], facing)
    joints[6] = l_sh + _P["upper_arm"] * s * _limb_dir(p["sh_l"], facing)
    joints[7] = joints[6] + _P["forearm"] * s * _limb_dir(p["sh_l"] + p["el_l"], facing)
    r_hip = root + (_P["hip"] * s, 0.0)
    l_hip = root + (-_P["hip"] * s, 0.0)
    joints[8], joints[11] = r_hip, l_hip
    joints[9] = r_hip + _P["thigh"] * s * _limb_dir(p["hip_r"], facing)
    joints[10] = joints[9] + _P["shin"] * s * _limb_dir(p["hip_r"] + p["knee_r"], facing)
    joints[12] = l_hip + _P["thigh"] * s * _limb_dir(p["hip_l"], facing)
    joints[13] = joints[12] + _P["shin"] * s * _limb_dir(p["hip_l"] + p["knee_l"], facing)
    return joints


def _guard() -> dict:
    """Neutral sparring stance."""
    return dict(lean=0.10, crouch=0.08,
                sh_r=0.55, el_r=1.90, sh_l=0.50, el_l=1.85,
                hip_r=0.10, knee_r=0.12, hip_l=-0.10, knee_l=0.12,
                shift=0.0)


def _pulse(phase: float) -> float:
    """Smooth 0 -> 1 -> 0 profile over one action period."""
    return 0.5 - 0.5 * math.cos(2.0 * math.pi * phase)


def _punch(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["sh_r"] = 0.55 + 1.00 * e
    p["el_r"] = 1.90 - 1.70 * e
    p["lean"] = 0.10 + 0.14 * e
    p["shift"] = 0.04 * e
    return p


def _kick(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["hip_r"] = 0.10 + 1.20 * e
    p["knee_r"] = 0.12 + 2.2 * e * (1.0 - min(e, 1.0))
    p["lean"] = 0.10 - 0.22 * e
    p["hip_l"] = -0.10 - 0.10 * e
    return p


def _block(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["el_r"] = 1.90 + 0.60 * e
    p["el_l"] = 1.85 + 0.60 * e
    p["sh_r"] = 0.55 + 0.25 * e
    p["sh_l"] = 0.50 + 0.25 * e
    p["crouch"] = 0.08 + 0.10 * e
    return p


def _dodge(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["lean"] = 0.10 - 0.45 * e
    p["crouch"] = 0.08 + 0.40 * e
    p["sh_r"] = 0.55 - 0.20 * e
    p["sh_l"] = 0.50 - 0.20 * e
    p["shift"] = -0.05 * e
    return p


def _uppercut(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["sh_r"] = 0.45 + 0.95 * e
    p["el_r"] = 2.10 - 1.45 * e
    p["lean"] = 0.04 + 0.16 * e
    p["crouch"] = 0.08 + 0.5 * e * (1.0 - min(e, 1.0))
    return p


def _sweep(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["crouch"] = 0.08 + 0.50 * e
    p["hip_r"] = 0.10 + 1.10 * e
    p["knee_r"] = 0.12
    p["hip_l"] = -0.10 - 0.25 * e
    p["knee_l"] = 0.12 + 0.70 * e
    p["lean"] = 0.10 + 0.14 * e
    return p


def _advance(phase, amp):
    p = _guard()
    s = math.sin(2.0 * math.pi * phase) * amp
    p["hip_r"] = 0.04 + 0.26 * s
    p["hip_l"] = 0.04 - 0.26 * s
    p["knee_r"] = 0.14 + 0.10 * abs(s)
    p["knee_l"] = 0.14 + 0.10 * abs(s)
    p["el_r"] = 1.90 + 0.15 * s
    p["el_l"] = 1.85 - 0.15 * s
    p["shift"] = 0.05 * s
    return p


def _crouch(phase, amp):
    p = _guard()
    e = _pulse(phase) * amp
    p["crouch"] = 0.08 + 0.55 * e
    p["hip_r"] = 0.10 + 0.30 * e
    p["hip_l"] = -0.10 - 0.30 * e
    p["knee_r"] = 0.12 + 0.70 * e
    p["knee_l"] = 0.12 + 0.70 * e
    p["sh_r"] = 0.55 - 0.20 * e
    p["sh_l"] = 0.50 - 0.20 * e
    return p


def _walk(phase, amp):
    p = _guard()
    s = math.sin(2.0 * math.pi * phase) * amp
    c = math.cos(2.0 * math.pi * phase)
    p["lean"] = 0.05
    p["crouch"] = 0.02
    p["hip_r"] = 0.30 * s
    p["hip_l"] = -0.30 * s
    p["knee_r"] = 0.16 + 0.14 * (0.5 - 0.5 * c)
    p["knee_l"] = 0.16 + 0.14 * (0.5 + 0.5 * c)
    p["sh_r"] = 0.10 - 0.25 * s
    p["el_r"] = 0.40
    p["sh_l"] = 0.10 + 0.25 * s
    p["el_l"] = 0.40
    return p


ACTION_CURVES = {
    "punch": _punch, "kick": _kick, "block": _block, "dodge": _dodge,
    "uppercut": _uppercut, "sweep": _sweep, "advance": _advance,
    "crouch": _crouch, WALK_ACTION: _walk,
}


# ---------------------------------------------------------------------------
# rendering


def _fill_head(image, center, radius, shape, color):
    h, w = image.shape[:2]
    cx, cy = float(center[0]), float(center[1])
    lo_x = max(int(math.floor(cx - radius)), 0)
    hi_x = min(int(math.ceil(cx + radius)), w - 1)
    lo_y = max(int(math.floor(cy - radius)), 0)
    hi_y = min(int(math.ceil(cy + radius)), h - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return
    xs = np.arange(lo_x, hi_x + 1, dtype=np.float64) - cx
    ys = np.arange(lo_y, hi_y + 1, dtype=np.float64) - cy
    dx, dy = np.meshgrid(xs, ys)
    if shape == "circle":
        hit = dx * dx + dy * dy <= radius * radius
    elif shape == "square":
        hit = np.maximum(np.abs(dx), np.abs(dy)) <= radius * 0.88
    elif shape == "diamond":
        hit = np.abs(dx) + np.abs(dy) <= radius * 1.25
    elif shape == "triangle":
        hit = (np.abs(dy) <= radius) & (np.abs(dx) <= (dy + radius) * 0.55)
    else:
        raise ParameterError(f"unknown head shape {shape!r}")
    image[lo_y:hi_y + 1, lo_x:hi_x + 1][hit] = color


def render_figure(canvas: np.ndarray, joints: np.ndarray,
                  style: IdentityStyle) -> np.ndarray:
    """Draw one fighter onto ``canvas`` (H, W, 3 floats); returns its
    silhouette as a boolean (H, W) mask."""
    scratch = np.full_like(canvas, np.nan)
    color = style.paint
    radius = style.limb_width / 2.0
    for a, b in pose_kit.BODY18_LIMBS:
        pose_kit.draw_capsule(scratch, joints[a], joints[b], radius, color)
    # solid trunk between neck and pelvis center
    pelvis = 0.5 * (joints[8] + joints[11])
    pose_kit.draw_capsule(scratch, joints[1], pelvis, radius * 1.7, color)
    head_r = 0.62 * float(np.linalg.norm(joints[0] - joints[1]))
    _fill_head(scratch, joints[0], head_r, style.head_shape, color)
    mask = np.isfinite(scratch[..., 0])
    canvas[mask] = scratch[mask]
    return mask


def _person_from_joints(id_index: int, joints: np.ndarray) -> pose_kit.PersonPose:
    kp = np.concatenate([joints, np.ones((joints.shape[0], 1))], axis=1)
    return pose_kit.PersonPose(id_index=id_index, keypoints=kp)


@dataclasses.dataclass(frozen=True)
class _FighterTrack:
    """One fighter's per-frame joints plus its style."""

    style: IdentityStyle
    joints: np.ndarray  # (F, 18, 2)


def _fighter_track(style, action, n_frames, base_x, base_y, scale, facing, rng):
    amp = float(rng.uniform(0.85, 1.15))
    period = float(rng.integers(18, 30))
    phase0 = float(rng.uniform(0.0, 1.0))
    curve = ACTION_CURVES[action]
    frames = np.empty((n_frames, 18, 2))
    for f in range(n_frames):
        phase = (phase0 + f / period) % 1.0
        frames[f] = build_skeleton(base_x, base_y, scale, facing,
                                   curve(phase, amp))
    return _FighterTrack(style=style, joints=frames)


def _walker_track(style, n_frames, width, height, rng):
    scale = height * float(rng.uniform(0.48, 0.55))
    period = float(rng.integers(14, 22))
    phase0 = float(rng.uniform(0.0, 1.0))
    base_y = height - 0.46 * scale - 0.06 * height
    x_from = 0.28 * width
    x_to = 0.72 * width
    if rng.integers(2):
        x_from, x_to = x_to, x_from
    facing = 1 if x_to >= x_from else -1
    frames = np.empty((n_frames, 18, 2))
    for f in range(n_frames):
        frac = f / max(n_frames - 1, 1)
        x = x_from + (x_to - x_from) * frac
        phase = (phase0 + f / period) % 1.0
        frames[f] = build_skeleton(x, base_y, scale, facing,
                                   _walk(phase, 1.0))
    return _FighterTrack(style=style, joints=frames)


# ---------------------------------------------------------------------------
# manifest


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    """One dataset video: tags plus relative paths under the dataset root."""

    video_id: str
    scene: str
    action: str
    characters: tuple   # two identity tags
    paths: dict         # frames, poses, ref_1, ref_2, background
    root: Path = None

    _REQUIRED = ("frames", "poses", "ref_1", "ref_2", "background")

    def __post_init__(self):
        object.__setattr__(self, "characters", tuple(self.characters))
        object.__setattr__(self, "paths", dict(self.paths))
        if len(self.characters) != 2:
            raise SchemaError(
                f"{self.video_id}: exactly two character tags required, "
                f"got {list(self.characters)}")
        missing = [k for k in self._REQUIRED if k not in self.paths]
        if missing:
            raise SchemaError(f"{self.video_id}: manifest paths missing {missing}")

    def path(self, key: str) -> Path:
        if self.root is None:
            raise DataError(f"{self.video_id}: entry has no dataset root")
        return Path(self.root) / self.paths[key]

    def to_dict(self):
        return {"video_id": self.video_id, "scene": self.scene,
                "action": self.action, "characters": list(self.characters),
                "paths": {k: self.paths[k] for k in self._REQUIRED}}

    @classmethod
    def from_dict(cls, d, root=None):
        try:
            return cls(video_id=d["video_id"], scene=d["scene"],
                       action=d["action"], characters=tuple(d["characters"]),
                       paths=dict(d["paths"]), root=root)
        except KeyError as exc:
            raise SchemaError(f"manifest entry missing key {exc}") from None


def write_manifest(entries, root):
    payload = [e.to_dict() for e in entries]
    text = json.dumps(payload, indent=1, sort_keys=True)
    (Path(root) / MANIFEST_NAME).write_text(text + "\n")


def load_manifest(root) -> list:
    """Read and validate a dataset manifest; every referenced path must exist."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    try:
        payload = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest}: invalid JSON ({exc})") from None
    if not isinstance(payload, list):
        raise DataError(f"{manifest}: expected a JSON array of entries")
    entries = [ManifestEntry.from_dict(d, root=root) for d in payload]
    for entry in entries:
        for key in ManifestEntry._REQUIRED:
            if not entry.path(key).exists():
                raise DataError(
                    f"{entry.video_id}: missing {key} file {entry.path(key)}")
    return entries


# ---------------------------------------------------------------------------
# dataset synthesis


def _save_canvas(canvas: np.ndarray, path: Path):
    codec.save_image(np.ascontiguousarray(canvas.transpose(2, 0, 1)), path)


def _white(height, width):
    return np.ones((height, width, 3), dtype=np.float64)


def _pick_pair(rng, n_identities):
    """Two identity indices with hue separation of at least 2 table slots."""
    min_gap = max(2, n_identities // 8)
    i1 = int(rng.integers(n_identities))
    choices = [j for j in range(n_identities)
               if min(abs(j - i1), n_identities - abs(j - i1)) >= min_gap]
    i2 = int(choices[rng.integers(len(choices))])
    return i1, i2


def _write_video_dir(root, video_id, frames, seq, ref_images, bg_canvas):
    vdir = Path(root) / video_id
    frames_dir = vdir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, canvas in enumerate(frames):
        _save_canvas(canvas, frames_dir / FRAME_NAME.format(i))
    pose_kit.save_pose_file(seq, vdir / "poses.json")
    _save_canvas(ref_images[0], vdir / "ref_1.png")
    _save_canvas(ref_images[1], vdir / "ref_2.png")
    _save_canvas(bg_canvas, vdir / "bg.png")
    return {
        "frames": f"{video_id}/frames",
        "poses": f"{video_id}/poses.json",
        "ref_1": f"{video_id}/ref_1.png",
        "ref_2": f"{video_id}/ref_2.png",
        "background": f"{video_id}/bg.png",
    }


def forge_synthetic(config: ForgeConfig, root) -> list:
    """Generate the two-fighter dataset under ``root``; returns the entries."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    table = identity_table(config.n_identities)
    actions = ACTIONS[: config.n_actions]
    width, height = config.width, config.height
    entries = []
    for v in range(config.n_videos):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0, v)))
        video_id = f"video_{v:04d}"
        i1, i2 = _pick_pair(rng, config.n_identities)
        action = actions[int(rng.integers(len(actions)))]
        bg_spec = config.backgrounds[int(rng.integers(len(config.backgrounds)))]
        scale = height * float(rng.uniform(0.52, 0.60))
        base_y = height - 0.46 * scale - 0.06 * height
        jitter = 0.023 * width
        x1 = width * 0.32 + float(rng.uniform(-jitter, jitter))
        x2 = width * 0.68 + float(rng.uniform(-jitter, jitter))
        track1 = _fighter_track(table[i1], action, config.frames_per_video,
                                x1, base_y, scale, +1, rng)
        track2 = _fighter_track(table[i2], action, config.frames_per_video,
                                x2, base_y, scale, -1, rng)

        bg_canvas = background_image(bg_spec, width, height)
        frames, pose_frames = [], []
        for f in range(config.frames_per_video):
            canvas = bg_canvas.copy()
            render_figure(canvas, track1.joints[f], track1.style)
            render_figure(canvas, track2.joints[f], track2.style)
            frames.append(canvas)
            pose_frames.append(pose_kit.PoseFrame(people=(
                _person_from_joints(1, track1.joints[f]),
                _person_from_joints(2, track2.joints[f]),
            )))
        seq = pose_kit.PoseSequence(frames=pose_frames, fps=config.fps,
                                    width=width, height=height)
        ref_1 = _white(height, width)
        render_figure(ref_1, track1.joints[0], track1.style)
        ref_2 = _white(height, width)
        render_figure(ref_2, track2.joints[0], track2.style)

        paths = _write_video_dir(root, video_id, frames, seq,
                                 (ref_1, ref_2), bg_canvas)
        entries.append(ManifestEntry(
            video_id=video_id, scene=bg_spec["scene"], action=action,
            characters=(table[i1].tag, table[i2].tag), paths=paths, root=root))
    write_manifest(entries, root)
    return entries


# ---------------------------------------------------------------------------
# fashion clips and splicing


@dataclasses.dataclass(frozen=True)
class FashionClip:
    """A single walker on white: pixel frames plus the matching poses."""

    frames: np.ndarray           # (F, 3, H, W) floats in [-1, 1]
    poses: pose_kit.PoseSequence
    style: IdentityStyle

    def __post_init__(self):
        frames = np.asarray(self.frames)
        object.__setattr__(self, "frames", frames)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"fashion frames must be (F, 3, H, W), got {frames.shape}")
        if frames.shape[0] != len(self.poses):
            raise ShapeError(
                f"{frames.shape[0]} frames vs {len(self.poses)} pose frames")


def render_fashion_clip(style: IdentityStyle, n_frames: int, width: int,
                        height: int, rng, fps: float = 12.0) -> FashionClip:
    """One identity walking across a white canvas."""
    track = _walker_track(style, n_frames, width, height, rng)
    frames = np.empty((n_frames, 3, height, width))
    pose_frames = []
    for f in range(n_frames):
        canvas = _white(height, width)
        render_figure(canvas, track.joints[f], style)
        frames[f] = canvas.transpose(2, 0, 1)
        pose_frames.append(pose_kit.PoseFrame(
            people=(_person_from_joints(1, track.joints[f]),)))
    seq = pose_kit.PoseSequence(frames=pose_frames, fps=fps,
                                width=width, height=height)
    return FashionClip(frames=frames, poses=seq, style=style)


def splice_fashion(clip_a: FashionClip, clip_b: FashionClip):
    """Join two single-person clips left/right into a two-person video.

    Pixels are concatenated without resampling; clip B's keypoints shift by
    clip A's width; the person from A becomes id 1, from B id 2. The result
    is (frames (F, 3, H, W_a + W_b), merged PoseSequence) with
    F = min(F_a, F_b).
    """
    ha, wa = clip_a.poses.height, clip_a.poses.width
    hb, wb = clip_b.poses.height, clip_b.poses.width
    if ha != hb:
        raise ShapeError(f"cannot splice heights {ha} and {hb}")
    n = min(clip_a.frames.shape[0], clip_b.frames.shape[0])
    frames = np.concatenate([clip_a.frames[:n], clip_b.frames[:n]], axis=3)
    merged = []
    for f in range(n):
        people = []
        person_a = clip_a.poses.frames[f].people
        person_b = clip_b.poses.frames[f].people
        if person_a:
            people.append(pose_kit.PersonPose(
                id_index=1, keypoints=person_a[0].keypoints))
        if person_b:
            kp = person_b[0].keypoints.copy()
            kp[:, 0] += wa
            people.append(pose_kit.PersonPose(id_index=2, keypoints=kp))
        merged.append(pose_kit.PoseFrame(people=tuple(people)))
    seq = pose_kit.PoseSequence(frames=merged, fps=clip_a.poses.fps,
                                width=wa + wb, height=ha)
    return frames, seq


def forge_fashion(config: ForgeConfig, root) -> list:
    """Spliced two-walker dataset under ``root`` (the mixture's second source)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    table = identity_table(config.n_identities)
    width, height = config.width, config.height
    half = width // 2
    entries = []
    for v in range(config.n_videos):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1, v)))
        video_id = f"fashion_{v:04d}"
        i1, i2 = _pick_pair(rng, config.n_identities)
        clip_a = render_fashion_clip(table[i1], config.frames_per_video,
                                     half, height, rng, fps=config.fps)
        clip_b = render_fashion_clip(table[i2], config.frames_per_video,
                                     width - half, height, rng, fps=config.fps)
        frames, seq = splice_fashion(clip_a, clip_b)

        canvases = [fr.transpose(1, 2, 0) for fr in frames]
        ref_1 = _white(height, width)
        a0 = clip_a.poses.frames[0].people[0].keypoints[:, :2]
        render_figure(ref_1, a0, table[i1])
        ref_2 = _white(height, width)
        b0 = clip_b.poses.frames[0].people[0].keypoints[:, :2].copy()
        b0[:, 0] += half
        render_figure(ref_2, b0, table[i2])
        bg_canvas = _white(height, width)

        paths = _write_video_dir(root, video_id, canvases, seq,
                                 (ref_1, ref_2), bg_canvas)
        entries.append(ManifestEntry(
            video_id=video_id, scene=FASHION_SCENE, action=WALK_ACTION,
            characters=(table[i1].tag, table[i2].tag), paths=paths, root=root))
    write_manifest(entries, root)
    return entries


# ---------------------------------------------------------------------------
# training samples


@dataclasses.dataclass(frozen=True)
class TrainingSample:
    """Everything one optimization step needs for one video window."""

    x0: np.ndarray          # (F, 3, H, W) pixel frames in [-1, 1]
    pose_maps: np.ndarray   # (F, H, W, 3) uint8 rasterized poses
    masks: tuple            # F RegionMaskSets
    ref_images: tuple       # two (H, W, 3) uint8 images
    background: np.ndarray  # (3, H, W) in [-1, 1]
    prompt: str
    video_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0))
        object.__setattr__(self, "pose_maps", np.asarray(self.pose_maps))
        object.__setattr__(self, "masks", tuple(self.masks))
        object.__setattr__(self, "ref_images", tuple(self.ref_images))
        f = self.x0.shape[0]
        if not (self.pose_maps.shape[0] == f and len(self.masks) == f):
            raise ShapeError(
                f"{self.video_id}: frame counts disagree — {f} pixels, "
                f"{self.pose_maps.shape[0]} pose maps, {len(self.masks)} masks")
        if len(self.ref_images) != 2:
            raise ShapeError(f"{self.video_id}: exactly two reference images required")

    @property
    def n_frames(self):
        return self.x0.shape[0]


def _load_uint8(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_sample(entry: ManifestEntry, stage: int, frame_interval: int = 6,
                clip_len: int = 20, rng=None) -> TrainingSample:
    """Build a TrainingSample from one manifest entry.

    Stage 1 picks a single random frame on the interval grid; stage 2 picks
    ``clip_len`` consecutive frames spaced ``frame_interval`` apart.
    """
    if stage not in (1, 2):
        raise ParameterError(f"stage must be 1 or 2, got {stage}")
    if frame_interval < 1 or clip_len < 1:
        raise ParameterError("frame_interval and clip_len must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    seq = pose_kit.load_pose_file(entry.path("poses"))
    total = len(seq)
    if stage == 1:
        grid = range(0, total, frame_interval)
        indices = [int(grid[int(rng.integers(len(grid)))])]
    else:
        span = (clip_len - 1) * frame_interval
        if span + 1 > total:
            raise SamplingError(
                f"{entry.video_id}: stage 2 needs {span + 1} frames "
                f"(clip_len {clip_len} at interval {frame_interval}), "
                f"video has {total}")
        start = int(rng.integers(0, total - span))
        indices = [start + k * frame_interval for k in range(clip_len)]

    frames_dir = entry.path("frames")
    x0 = np.stack([codec.load_image(frames_dir / FRAME_NAME.format(i),
                                    dtype=np.float64) for i in indices])
    pose_frames = [seq.frames[i] for i in indices]
    masks = [pose_kit.build_region_masks(fr, seq.width, seq.height)
             for fr in pose_frames]
    pose_maps = np.stack([pose_kit.rasterize_pose(fr, seq.width, seq.height)
                          for fr in pose_frames])
    refs = (_load_uint8(entry.path("ref_1")), _load_uint8(entry.path("ref_2")))
    background = codec.load_image(entry.path("background"), dtype=np.float64)
    return TrainingSample(
        x0=x0, pose_maps=pose_maps, masks=masks, ref_images=refs,
        background=background, prompt=f"{entry.action} in {entry.scene}",
        video_id=entry.video_id)


def sampling_conditions(entry: ManifestEntry, net, indices=None,
                        schedule_dtype=np.float64):
    """Sampler conditions (pose maps, masks, refs, background) for an entry.

    ``indices`` selects pose frames (default: all); the entry's reference
    images and background are encoded once.
    """
    from .diffusion import Conditions, build_pyramids

    seq = pose_kit.load_pose_file(entry.path("poses"))
    if indices is None:
        indices = range(len(seq))
    pose_frames = [seq.frames[i] for i in indices]
    pose_maps = np.stack([pose_kit.rasterize_pose(fr, seq.width, seq.height)
                          for fr in pose_frames])
    masks = [pose_kit.build_region_masks(fr, seq.width, seq.height)
             for fr in pose_frames]
    pyramids = build_pyramids(masks, net.config, seq.height // 2, seq.width // 2)
    refs = (_load_uint8(entry.path("ref_1")), _load_uint8(entry.path("ref_2")))
    from .autodiff import no_grad
    with no_grad():
        bank = net.encode_references(refs)
    background = codec.load_image(entry.path("background"), dtype=np.float64)
    bg_latent = codec.encode(background).data.astype(net.config.np_dtype)
    return Conditions(bg=bg_latent, bank=bank, pyramids=pyramids,
                      pose_maps=pose_maps,
                      prompt=f"{entry.action} in {entry.scene}")
