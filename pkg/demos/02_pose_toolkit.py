"""Tour of the pose toolkit: rasterizing, masking, retargeting, splicing.

The generator never sees raw keypoints. Poses reach it two ways: as
rasterized skeleton maps (colored limb capsules, the conditioning signal)
and as soft region masks (who owns which pixels, the routing signal for
identity attention). This demo also shows the two editing operations the
pipeline relies on: retargeting a move onto a different body shape, and
splicing two solo walker clips into one two-person video.

Run:  python3 demos/02_pose_toolkit.py   (after 01_forge_dataset.py, or it
      forges its own copy)
"""

import numpy as np
from pathlib import Path
from PIL import Image

from duelgen import codec, forge
from duelgen import pose as pose_kit

OUT = Path(__file__).resolve().parent / "out" / "02_pose"


def ensure_dataset():
    data = Path(__file__).resolve().parent / "out" / "01_forge" / "data"
    if (data / forge.MANIFEST_NAME).exists():
        return forge.load_manifest(data)
    config = forge.ForgeConfig(n_videos=6, frames_per_video=24, width=96,
                               height=72, n_identities=16, n_actions=8, seed=7)
    return forge.forge_synthetic(config, data)


def save(arr_uint8, name):
    OUT.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr_uint8).save(OUT / name)
    print(f"  wrote {OUT / name}")


def main():
    entries = ensure_dataset()
    entry = entries[0]
    seq = pose_kit.load_pose_file(entry.path("poses"))
    frame = seq.frames[0]
    print(f"== {entry.video_id}: {len(seq)} frames, "
          f"{seq.width}x{seq.height}, {len(frame.people)} people ==")

    print("\n1. skeleton map (what conditions the denoiser)")
    raster = pose_kit.rasterize_pose(frame, seq.width, seq.height)
    save(raster, "skeleton_map.png")

    print("\n2. region masks (what routes each identity's attention)")
    masks = pose_kit.build_region_masks(frame, seq.width, seq.height)
    overlap = ((masks.m1 == 0.5) & (masks.m2 == 0.5)).sum()
    print(f"  fighter 1 owns {(masks.m1 == 1.0).sum()} px exclusively, "
          f"fighter 2 owns {(masks.m2 == 1.0).sum()} px, "
          f"{overlap} px are shared 50/50")
    rgb = np.stack([masks.m1, np.zeros_like(masks.m1), masks.m2], axis=2)
    save((rgb * 255).astype(np.uint8), "region_masks.png")

    print("\n3. retargeting: same move, stockier body")
    ref_kp = seq.frames[0].person(1).keypoints.copy()
    center = ref_kp[:, :2].mean(axis=0)
    ref_kp[:, 0] = center[0] + 1.4 * (ref_kp[:, 0] - center[0])   # wider
    ref_kp[:, 1] = center[1] + 0.8 * (ref_kp[:, 1] - center[1])   # shorter
    stocky = pose_kit.PersonPose(id_index=1, keypoints=ref_kp)
    adapted = pose_kit.retarget(stocky, seq, id_index=1)
    tf = pose_kit.compute_retarget_transforms(stocky, seq, 1)[0]
    print(f"  fitted scale: s_x={tf.s_x:.3f}, s_y={tf.s_y:.3f} "
          "(anchored at each frame's centroid, so the fighter stays put)")
    before = pose_kit.rasterize_pose(seq.frames[6], seq.width, seq.height)
    after = pose_kit.rasterize_pose(adapted.frames[6], seq.width, seq.height)
    save(np.concatenate([before, after], axis=1), "retarget_before_after.png")

    print("\n4. splicing two solo walkers into one two-person clip")
    table = forge.identity_table(16)
    rng = np.random.default_rng(5)
    left = forge.render_fashion_clip(table[2], 12, 48, 72, rng)
    right = forge.render_fashion_clip(table[9], 12, 48, 72, rng)
    frames, joined = forge.splice_fashion(left, right)
    print(f"  spliced clip: {frames.shape[0]} frames at "
          f"{joined.width}x{joined.height}, ids "
          f"{sorted(p.id_index for p in joined.frames[0].people)}")
    save(codec.to_unit(frames[0]), "spliced_frame.png")


if __name__ == "__main__":
    main()
