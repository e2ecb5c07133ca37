"""Two-person pose sequences: parsing, rasterization, region masks, retargeting.

Keypoints are float pixel coordinates with top-left origin and y pointing
down. A person is an (J, 3) array of [x, y, confidence] rows over a fixed
topology; the built-in topology is the 18-joint body skeleton. Everything in
this module is a pure function of its inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegeneratePoseError,
    EmptyPoseError,
    ParseError,
    ResolutionError,
    SchemaError,
)

# A joint counts as visible above this confidence; pose-estimator exports use
# near-zero confidence for missing joints.
CONFIDENCE_VISIBLE = 0.05

BODY18_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)

# Classic 18-joint limb table (pairs of joint indices).
BODY18_LIMBS = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

# One RGB color per limb, the usual rainbow wheel used for skeleton overlays.
BODY18_LIMB_COLORS = (
    (255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0),
    (170, 255, 0), (85, 255, 0), (0, 255, 0), (0, 255, 85),
    (0, 255, 170), (0, 255, 255), (0, 170, 255), (0, 85, 255),
    (0, 0, 255), (85, 0, 255), (170, 0, 255), (255, 0, 255),
    (255, 0, 170),
)

# topology name -> (joint count, limb table, limb colors). Hand/foot blocks
# can be registered as additional entries with extra limb segments.
TOPOLOGIES = {
    "body18": (18, BODY18_LIMBS, BODY18_LIMB_COLORS),
}


def topology_spec(name):
    if name not in TOPOLOGIES:
        raise SchemaError(f"unknown topology {name!r}")
    return TOPOLOGIES[name]


@dataclass(frozen=True)
class Keypoint:
    """One joint: pixel position plus detector confidence in [0, 1]."""

    x: float
    y: float
    confidence: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise SchemaError("keypoint coordinates must be finite")
        if not (0.0 <= self.confidence <= 1.0):
            raise SchemaError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class PersonPose:
    """One fighter in one frame: id slot (1 or 2) and (J, 3) keypoint rows."""

    id_index: int
    keypoints: np.ndarray  # (J, 3) float64 [x, y, confidence]

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        object.__setattr__(self, "keypoints", kp)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise SchemaError(f"keypoints must be (J, 3), got {kp.shape}")
        if self.id_index not in (1, 2):
            raise SchemaError(f"id_index must be 1 or 2, got {self.id_index}")
        if not np.all(np.isfinite(kp[:, :2])):
            raise SchemaError("keypoint coordinates must be finite")
        if np.any(kp[:, 2] < 0.0) or np.any(kp[:, 2] > 1.0):
            raise SchemaError("confidences must lie in [0, 1]")

    @property
    def n_joints(self):
        return self.keypoints.shape[0]

    def visible(self, threshold=CONFIDENCE_VISIBLE):
        """Boolean mask of joints whose confidence exceeds ``threshold``."""
        return self.keypoints[:, 2] > threshold


@dataclass(frozen=True, eq=False)
class PoseFrame:
    """Up to two PersonPoses with distinct id slots."""

    people: tuple

    def __post_init__(self):
        people = tuple(self.people)
        object.__setattr__(self, "people", people)
        if len(people) > 2:
            raise SchemaError(f"at most 2 people per frame, got {len(people)}")
        ids = [p.id_index for p in people]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate id_index in frame: {ids}")

    def person(self, id_index):
        for p in self.people:
            if p.id_index == id_index:
                return p
        return None


@dataclass(frozen=True, eq=False)
class PoseSequence:
    """A sequence of PoseFrames on a fixed canvas."""

    frames: tuple
    fps: float
    width: int
    height: int
    topology: str = "body18"

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.fps <= 0:
            raise SchemaError(f"fps must be positive, got {self.fps}")
        if self.width <= 0 or self.height <= 0:
            raise SchemaError("canvas dimensions must be positive")
        n_joints = topology_spec(self.topology)[0]
        for i, frame in enumerate(self.frames):
            for p in frame.people:
                if p.n_joints != n_joints:
                    raise SchemaError(
                        f"frame {i}: person id={p.id_index} has {p.n_joints} "
                        f"keypoints, topology {self.topology!r} needs {n_joints}"
                    )

    def __len__(self):
        return len(self.frames)


def poses_equal(a: PoseSequence, b: PoseSequence, tol=0.0) -> bool:
    """Structural equality of two sequences, with optional coordinate tolerance."""
    if (a.fps, a.width, a.height, a.topology) != (b.fps, b.width, b.height, b.topology):
        return False
    if len(a.frames) != len(b.frames):
        return False
    for fa, fb in zip(a.frames, b.frames):
        if len(fa.people) != len(fb.people):
            return False
        for pa, pb in zip(fa.people, fb.people):
            if pa.id_index != pb.id_index:
                return False
            if tol == 0.0:
                if not np.array_equal(pa.keypoints, pb.keypoints):
                    return False
            elif not np.allclose(pa.keypoints, pb.keypoints, rtol=0.0, atol=tol):
                return False
    return True


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def parse_pose_sequence(text: str) -> PoseSequence:
    """Parse a pose-JSON document into a validated PoseSequence.

    Schema: ``{"fps", "width", "height", "topology", "frames": [{"people":
    [{"id": 1|2, "keypoints": [[x, y, conf] * J]}]}]}``.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top-level value must be an object")
    missing = {"fps", "width", "height", "frames"} - doc.keys()
    if missing:
        raise SchemaError(f"missing keys: {sorted(missing)}")
    topology = doc.get("topology", "body18")
    n_joints = topology_spec(topology)[0]

    frames = []
    for fi, frame_doc in enumerate(doc["frames"]):
        people = []
        for person_doc in frame_doc.get("people", []):
            pid = person_doc.get("id")
            if pid not in (1, 2):
                raise SchemaError(f"frame {fi}: id must be 1 or 2, got {pid!r}")
            kps = person_doc.get("keypoints", [])
            if len(kps) != n_joints:
                raise SchemaError(
                    f"frame {fi}: person id={pid} has {len(kps)} keypoints, "
                    f"expected {n_joints}"
                )
            try:
                arr = np.asarray(kps, dtype=np.float64)
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"frame {fi}: malformed keypoint rows") from exc
            if arr.shape != (n_joints, 3):
                raise SchemaError(
                    f"frame {fi}: keypoints must be [x, y, conf] triples"
                )
            try:
                people.append(PersonPose(id_index=pid, keypoints=arr))
            except SchemaError as exc:
                raise SchemaError(f"frame {fi}: {exc}") from exc
        try:
            frames.append(PoseFrame(people=tuple(people)))
        except SchemaError as exc:
            raise SchemaError(f"frame {fi}: {exc}") from exc

    return PoseSequence(
        frames=tuple(frames),
        fps=doc["fps"],
        width=doc["width"],
        height=doc["height"],
        topology=topology,
    )


def serialize_pose_sequence(seq: PoseSequence) -> str:
    """Inverse of :func:`parse_pose_sequence`; round-trips structurally."""
    doc = {
        "fps": seq.fps,
        "width": seq.width,
        "height": seq.height,
        "topology": seq.topology,
        "frames": [
            {
                "people": [
                    {"id": p.id_index, "keypoints": p.keypoints.tolist()}
                    for p in frame.people
                ]
            }
            for frame in seq.frames
        ],
    }
    return json.dumps(doc, indent=1)


def load_pose_file(path) -> PoseSequence:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_pose_sequence(fh.read())


def save_pose_file(seq: PoseSequence, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_pose_sequence(seq))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RasterStyle:
    """Limb drawing parameters for pose maps."""

    limb_width: float = 3.0
    colors: tuple = BODY18_LIMB_COLORS

    def color_for(self, limb_index):
        return self.colors[limb_index % len(self.colors)]


def draw_capsule(image, p0, p1, radius, color):
    """Paint all pixels whose center lies within ``radius`` of segment p0-p1.

    Mutates ``image`` (H, W, 3). Off-canvas geometry is clipped silently.
    """
    h, w = image.shape[:2]
    x0, y0 = p0
    x1, y1 = p1
    lo_x = max(int(math.floor(min(x0, x1) - radius)), 0)
    hi_x = min(int(math.ceil(max(x0, x1) + radius)), w - 1)
    lo_y = max(int(math.floor(min(y0, y1) - radius)), 0)
    hi_y = min(int(math.ceil(max(y0, y1) + radius)), h - 1)
    if lo_x > hi_x or lo_y > hi_y:
        return
    xs = np.arange(lo_x, hi_x + 1, dtype=np.float64)
    ys = np.arange(lo_y, hi_y + 1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = x1 - x0, y1 - y0
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0.0:
        t = np.zeros_like(gx)
    else:
        t = np.clip(((gx - x0) * dx + (gy - y0) * dy) / seg_sq, 0.0, 1.0)
    dist_sq = (gx - (x0 + t * dx)) ** 2 + (gy - (y0 + t * dy)) ** 2
    hit = dist_sq <= radius * radius
    image[lo_y : hi_y + 1, lo_x : hi_x + 1][hit] = color


def rasterize_pose(frame: PoseFrame, width: int, height: int,
                   style: RasterStyle | None = None,
                   topology: str = "body18") -> np.ndarray:
    """Render a frame's skeletons as an (H, W, 3) uint8 pose map.

    A limb is drawn only when both endpoint confidences exceed
    ``CONFIDENCE_VISIBLE``; degenerate frames yield a black image.
    """
    if width <= 0 or height <= 0:
        raise ResolutionError("canvas dimensions must be positive")
    style = style or RasterStyle()
    _, limbs, _ = topology_spec(topology)
    image = np.zeros((height, width, 3), dtype=np.uint8)
    radius = style.limb_width / 2.0
    for person in frame.people:
        kp = person.keypoints
        vis = person.visible()
        for li, (a, b) in enumerate(limbs):
            if a >= kp.shape[0] or b >= kp.shape[0]:
                continue
            if vis[a] and vis[b]:
                draw_capsule(image, kp[a, :2], kp[b, :2], radius,
                             np.asarray(style.color_for(li), dtype=np.uint8))
    return image


# ---------------------------------------------------------------------------
# Region masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegionMaskSet:
    """Per-frame spatial weights for the two identity regions.

    ``m1 + m2 <= 1`` everywhere; the leftover ``1 - m1 - m2`` weights the
    background. Overlapping boxes are split 0.5/0.5 to keep the sum bounded.
    """

    m1: np.ndarray  # (H, W) float64 in [0, 1]
    m2: np.ndarray

    def __post_init__(self):
        m1 = np.asarray(self.m1, dtype=np.float64)
        m2 = np.asarray(self.m2, dtype=np.float64)
        object.__setattr__(self, "m1", m1)
        object.__setattr__(self, "m2", m2)
        if m1.shape != m2.shape or m1.ndim != 2:
            raise ResolutionError(
                f"mask pair must share an (H, W) shape, got {m1.shape} / {m2.shape}"
            )

    @property
    def shape(self):
        return self.m1.shape

    def background(self):
        return 1.0 - self.m1 - self.m2


def bbox_mask(person: PersonPose, width: int, height: int,
              pad_frac: float = 0.05) -> np.ndarray:
    """Binary (H, W) mask of the padded bounding box of visible keypoints.

    Padding is ``pad_frac * max(width, height)`` pixels on every side; the
    box is clamped to the canvas.
    """
    if pad_frac < 0:
        raise ValueError(f"pad_frac must be >= 0, got {pad_frac}")
    vis = person.visible()
    if not np.any(vis):
        raise EmptyPoseError(
            f"person id={person.id_index} has no keypoint above confidence "
            f"{CONFIDENCE_VISIBLE}"
        )
    pts = person.keypoints[vis, :2]
    pad = pad_frac * max(width, height)
    x_lo, y_lo = pts.min(axis=0) - pad
    x_hi, y_hi = pts.max(axis=0) + pad
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    in_x = (xs >= x_lo) & (xs <= x_hi)
    in_y = (ys >= y_lo) & (ys <= y_hi)
    return (in_y[:, None] & in_x[None, :]).astype(np.float64)


def build_region_masks(frame: PoseFrame, width: int, height: int,
                       pad_frac: float = 0.05) -> RegionMaskSet:
    """Per-identity box masks with overlap split evenly between the two.

    An absent person yields an all-zero mask for its slot.
    """
    if not frame.people:
        raise EmptyPoseError("frame has no people")
    masks = {}
    for idx in (1, 2):
        person = frame.person(idx)
        if person is None:
            masks[idx] = np.zeros((height, width), dtype=np.float64)
        else:
            masks[idx] = bbox_mask(person, width, height, pad_frac)
    m1, m2 = masks[1], masks[2]
    overlap = (m1 > 0) & (m2 > 0)
    m1 = np.where(overlap, 0.5, m1)
    m2 = np.where(overlap, 0.5, m2)
    return RegionMaskSet(m1=m1, m2=m2)


@dataclass(frozen=True, eq=False)
class MaskPyramid:
    """Region masks area-averaged to each attention-layer resolution."""

    base: RegionMaskSet
    resolutions: tuple  # ((h, w), ...) coarse copies, any order
    levels: tuple       # matching tuple of RegionMaskSet

    def level_for(self, h, w):
        for res, level in zip(self.resolutions, self.levels):
            if res == (h, w):
                return level
        raise ResolutionError(f"pyramid has no level at {(h, w)}")


def _pool_mean(mask, h_out, w_out):
    h, w = mask.shape
    fy, fx = h // h_out, w // w_out
    return mask.reshape(h_out, fy, w_out, fx).mean(axis=(1, 3))


def build_mask_pyramid(masks: RegionMaskSet, resolutions) -> MaskPyramid:
    """Downsample a RegionMaskSet by area averaging to each resolution.

    Every requested (h, w) must divide the base resolution. Averaging
    preserves the per-mask mean and the ``m1 + m2 <= 1`` bound.
    """
    base_h, base_w = masks.shape
    levels = []
    for (h, w) in resolutions:
        if h <= 0 or w <= 0 or base_h % h != 0 or base_w % w != 0:
            raise ResolutionError(
                f"level {(h, w)} does not divide base {(base_h, base_w)}"
            )
        m1 = _pool_mean(masks.m1, h, w)
        m2 = _pool_mean(masks.m2, h, w)
        # Non-power-of-two block counts can round the two means up by an ulp
        # each; rescale so m1 + m2 <= 1 stays exact.
        total = m1 + m2
        over = total > 1.0
        if np.any(over):
            scale = np.where(over, 1.0 / total, 1.0)
            m1 = m1 * scale
            m2 = m2 * scale
        levels.append(RegionMaskSet(m1=m1, m2=m2))
    return MaskPyramid(base=masks, resolutions=tuple(tuple(r) for r in resolutions),
                       levels=tuple(levels))


# ---------------------------------------------------------------------------
# Body-shape adaptive retargeting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetargetTransform:
    """Per-axis scale about a frame anchor (the conditioned-pose centroid)."""

    s_x: float
    s_y: float
    anchor: tuple  # (x, y) pixels

    def __post_init__(self):
        for name, s in (("s_x", self.s_x), ("s_y", self.s_y)):
            if not (math.isfinite(s) and s > 0):
                raise DegeneratePoseError(f"{name} must be finite and positive, got {s}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points through ``anchor + s * (p - anchor)``."""
        anchor = np.asarray(self.anchor, dtype=np.float64)
        scale = np.asarray([self.s_x, self.s_y], dtype=np.float64)
        return anchor + scale * (np.asarray(points, dtype=np.float64) - anchor)


def _pose_spread(points):
    """Centroid and per-axis RMS deviation of an (N, 2) point cloud."""
    centroid = points.mean(axis=0)
    rms = np.sqrt(((points - centroid) ** 2).mean(axis=0))
    return centroid, rms


def _visible_points(person, context):
    vis = person.visible()
    if vis.sum() < 2:
        raise DegeneratePoseError(f"{context}: fewer than 2 visible keypoints")
    return person.keypoints[vis, :2]


def compute_retarget_transforms(ref_pose: PersonPose, cond_seq: PoseSequence,
                                id_index: int):
    """Scale factors matching the reference body extent, one anchor per frame.

    The body extent measure is the per-axis RMS deviation of visible
    keypoints about their centroid; the scale divides the reference extent by
    the conditioned extent averaged over the sequence, so one (s_x, s_y) pair
    serves the whole sequence and only the anchor moves frame to frame.

    Returns a list of RetargetTransform, one per frame (None where the person
    is absent).
    """
    _, ref_rms = _pose_spread(_visible_points(ref_pose, "reference pose"))
    if np.any(ref_rms == 0.0):
        raise DegeneratePoseError("reference pose has zero spread on an axis")

    anchors = []
    spreads = []
    for fi, frame in enumerate(cond_seq.frames):
        person = frame.person(id_index)
        if person is None:
            anchors.append(None)
            continue
        pts = _visible_points(person, f"frame {fi}")
        centroid, rms = _pose_spread(pts)
        if np.any(rms == 0.0):
            raise DegeneratePoseError(f"frame {fi}: zero spread on an axis")
        anchors.append(centroid)
        spreads.append(rms)
    if not spreads:
        raise EmptyPoseError(f"id_index {id_index} appears in no frame")

    mean_rms = np.mean(spreads, axis=0)
    s_x, s_y = ref_rms / mean_rms
    return [
        None if a is None else RetargetTransform(s_x=s_x, s_y=s_y, anchor=(a[0], a[1]))
        for a in anchors
    ]


def retarget(ref_pose: PersonPose, cond_seq: PoseSequence,
             id_index: int) -> PoseSequence:
    """Rescale one fighter's keypoints to the reference body shape.

    Each frame's keypoints map through ``anchor + s * (p - anchor)`` with the
    anchor at that frame's conditioned centroid, so the fighter keeps its
    position on the canvas. Confidences and the other fighter are untouched.
    """
    transforms = compute_retarget_transforms(ref_pose, cond_seq, id_index)
    new_frames = []
    for frame, tf in zip(cond_seq.frames, transforms):
        people = []
        for person in frame.people:
            if person.id_index != id_index or tf is None:
                people.append(person)
                continue
            kp = person.keypoints.copy()
            kp[:, :2] = tf.apply(kp[:, :2])
            people.append(PersonPose(id_index=person.id_index, keypoints=kp))
        new_frames.append(PoseFrame(people=tuple(people)))
    return replace(cond_seq, frames=tuple(new_frames))
