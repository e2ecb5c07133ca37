"""Synthetic dataset generator: identity palette geometry, deterministic
rendering, manifest IO, mask/pose consistency, splicing, and sample loading.

The palette checks verify the quantitative guarantees the attribution metric
relies on: identity colors lie on an exact circle around the gray axis, so a
region mean diluted by any neutral background stays nearest its own anchor.
"""

import json
import math
import os

import numpy as np
import pytest

from duelgen import codec, forge, metrics
from duelgen import pose as pose_kit
from duelgen.errors import (
    DataError,
    ParameterError,
    SamplingError,
    SchemaError,
    ShapeError,
)


# ---------------------------------------------------------------------------
# identity palette
# ---------------------------------------------------------------------------

def test_identity_table_circle_geometry():
    for n in (4, 16, 24):
        table = forge.identity_table(n)
        assert len(table) == n
        assert len({s.color for s in table}) == n
        assert len({s.tag for s in table}) == n
        center = np.full(3, 0.46)
        for i, style in enumerate(table):
            assert style.tag == f"fighter_{i:02d}"
            vec = np.asarray(style.color_exact)
            # Exact circle: equal distance from the gray axis point ...
            assert np.isclose(np.linalg.norm(vec - center), 0.45, atol=1e-12)
            # ... in the plane orthogonal to (1, 1, 1).
            assert np.isclose((vec - center).sum(), 0.0, atol=1e-12)
            assert style.color == tuple(int(round(c * 255)) for c in vec)
            assert 0 <= min(style.color) and max(style.color) <= 255
            assert style.head_shape in forge.HEAD_SHAPES
            assert style.limb_width in forge.LIMB_WIDTHS

    with pytest.raises(ParameterError):
        forge.identity_table(1)


def test_identity_anchor_survives_neutral_dilution():
    """Mixing any identity color with any neutral keeps the mix strictly
    nearest its own anchor — the property the attribution metric needs."""
    table = forge.identity_table(16)
    anchors = np.stack([s.anchor for s in table])
    neutrals = [np.full(3, v) for v in (-1.0, -0.2, 0.0, 0.18, 1.0)]
    for s in table:
        own = np.asarray(s.paint)
        for neutral in neutrals:
            for lam in (0.02, 0.1, 0.5, 0.9, 1.0):
                mix = lam * own + (1 - lam) * neutral
                d = np.linalg.norm(anchors - mix, axis=1)
                assert np.argmin(d) == s.index
                others = np.delete(d, s.index)
                assert d[s.index] < others.min()


def test_identity_for_tag_roundtrip():
    style = forge.identity_for_tag("fighter_07", 16)
    assert style.index == 7
    with pytest.raises(DataError):
        forge.identity_for_tag("fighter_99", 16)


# ---------------------------------------------------------------------------
# configuration and backgrounds
# ---------------------------------------------------------------------------

def test_forge_config_validation_and_roundtrip():
    config = forge.ForgeConfig(n_videos=2, frames_per_video=6,
                               width=48, height=32, seed=7)
    assert forge.ForgeConfig.from_dict(config.to_dict()) == config

    with pytest.raises(ParameterError):
        forge.ForgeConfig(n_videos=0)
    with pytest.raises(ParameterError):
        forge.ForgeConfig(n_videos=1, width=47)
    with pytest.raises(ParameterError):
        forge.ForgeConfig(n_videos=1, n_actions=99)
    with pytest.raises(ParameterError):
        forge.ForgeConfig(n_videos=1, backgrounds=())


def test_background_image_kinds():
    flat = forge.background_image({"kind": "flat", "rgb": (130, 130, 130)},
                                  width=8, height=6)
    assert flat.shape == (6, 8, 3)
    assert np.allclose(flat, 130 / 255 * 2 - 1)

    grad = forge.background_image(
        {"kind": "gradient", "top": (0, 0, 0), "bottom": (255, 255, 255)},
        width=4, height=5)
    assert np.allclose(grad[0], -1.0) and np.allclose(grad[-1], 1.0)
    assert np.all(np.diff(grad[:, 0, 0]) > 0)

    with pytest.raises(ParameterError):
        forge.background_image({"kind": "noise"}, 4, 4)

    # The stock scenes are pure grays (neutral for the anchor geometry).
    for spec in forge.DEFAULT_BACKGROUNDS:
        assert spec["kind"] == "flat"
        assert len(set(spec["rgb"])) == 1


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


def test_forge_synthetic_is_byte_deterministic(tmp_path):
    config = forge.ForgeConfig(n_videos=2, frames_per_video=5,
                               width=48, height=32, seed=9)
    forge.forge_synthetic(config, tmp_path / "a")
    forge.forge_synthetic(config, tmp_path / "b")
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name

    other = forge.ForgeConfig(n_videos=2, frames_per_video=5,
                              width=48, height=32, seed=10)
    forge.forge_synthetic(other, tmp_path / "c")
    c = _tree_bytes(tmp_path / "c")
    assert any(a[n] != c[n] for n in a if n.endswith(".png"))


def test_forge_synthetic_structure(tiny_combat):
    root, entries = tiny_combat
    assert len(entries) == 3
    scenes = {spec["scene"] for spec in forge.DEFAULT_BACKGROUNDS}
    for entry in entries:
        assert entry.scene in scenes
        assert entry.action in forge.ACTIONS
        assert len(entry.characters) == 2
        c1, c2 = entry.characters
        assert c1 != c2
        # Paired identities keep a hue-index separation of at least 2.
        i1, i2 = (int(tag.split("_")[1]) for tag in entry.characters)
        assert min(abs(i1 - i2), 16 - abs(i1 - i2)) >= 2

        frame_files = sorted(os.listdir(entry.path("frames")))
        assert frame_files == [forge.FRAME_NAME.format(i) for i in range(12)]
        seq = pose_kit.load_pose_file(entry.path("poses"))
        assert len(seq) == 12
        assert (seq.width, seq.height) == (64, 48)
        for frame in seq.frames:
            assert len(frame.people) == 2


def test_forge_masks_cover_rendered_fighters(tiny_combat):
    """Non-background pixels sit inside the region-mask union, and the
    rasterized skeleton overlaps the rendered silhouette."""
    root, entries = tiny_combat
    for entry in entries:
        seq = pose_kit.load_pose_file(entry.path("poses"))
        bg = codec.to_unit(codec.load_image(entry.path("background"),
                                            dtype=np.float64))
        for i in (0, len(seq) - 1):
            frame_png = entry.path("frames") / forge.FRAME_NAME.format(i)
            pixels = codec.to_unit(codec.load_image(frame_png, dtype=np.float64))
            non_bg = (pixels != bg).any(axis=2)
            assert non_bg.any()

            masks = pose_kit.build_region_masks(seq.frames[i], 64, 48)
            union = (masks.m1 + masks.m2) > 0
            coverage = (non_bg & union).sum() / non_bg.sum()
            assert coverage >= 0.95

            skeleton = pose_kit.rasterize_pose(seq.frames[i], 64, 48)
            sk = skeleton.any(axis=2)
            iou = (sk & non_bg).sum() / (sk | non_bg).sum()
            assert iou >= 0.5


def test_forge_ground_truth_attribution_is_perfect(tiny_combat):
    root, entries = tiny_combat
    for entry in entries:
        seq = pose_kit.load_pose_file(entry.path("poses"))
        frames = np.stack([
            codec.load_image(entry.path("frames") / forge.FRAME_NAME.format(i),
                             dtype=np.float64)
            for i in range(len(seq))])
        masks = [pose_kit.build_region_masks(fr, 64, 48) for fr in seq.frames]
        anchors = np.stack([forge.identity_for_tag(tag, 16).anchor
                            for tag in entry.characters])
        counts = metrics.id_attribution_counts(frames, masks, anchors)
        assert counts.evaluated > 0
        assert counts.accuracy == 1.0


def test_reference_images_show_one_fighter_on_white(tiny_combat):
    root, entries = tiny_combat
    entry = entries[0]
    for key, tag in zip(("ref_1", "ref_2"), entry.characters):
        ref = np.asarray(codec.to_unit(codec.load_image(entry.path(key),
                                                        dtype=np.float64)))
        assert ref.shape == (48, 64, 3)
        white = (ref == 255).all(axis=2)
        assert white.mean() > 0.5           # mostly empty canvas
        style = forge.identity_for_tag(tag, 16)
        body = (ref == style.color).all(axis=2)
        assert body.any()                   # the right fighter is present


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_manifest_roundtrip(tiny_combat):
    root, entries = tiny_combat
    loaded = forge.load_manifest(root)
    assert [e.video_id for e in loaded] == [e.video_id for e in entries]
    for a, b in zip(loaded, entries):
        assert a.to_dict() == b.to_dict()
        for key in ("frames", "poses", "ref_1", "ref_2", "background"):
            assert a.path(key).exists()


def test_manifest_error_cases(tmp_path):
    with pytest.raises(DataError):
        forge.load_manifest(tmp_path)  # no manifest at all

    (tmp_path / forge.MANIFEST_NAME).write_text("{broken")
    with pytest.raises(DataError):
        forge.load_manifest(tmp_path)

    (tmp_path / forge.MANIFEST_NAME).write_text('{"not": "a list"}')
    with pytest.raises(DataError):
        forge.load_manifest(tmp_path)

    entry = {"video_id": "v", "scene": "dojo", "action": "punch",
             "characters": ["fighter_00", "fighter_04"],
             "paths": {"frames": "v/frames", "poses": "v/poses.json",
                       "ref_1": "v/ref_1.png", "ref_2": "v/ref_2.png",
                       "background": "v/bg.png"}}
    (tmp_path / forge.MANIFEST_NAME).write_text(json.dumps([entry]))
    with pytest.raises(DataError):
        forge.load_manifest(tmp_path)  # referenced files absent

    with pytest.raises(SchemaError):
        forge.ManifestEntry.from_dict({"video_id": "v"})
    with pytest.raises(SchemaError):
        forge.ManifestEntry(video_id="v", scene="s", action="a",
                            characters=("one",), paths=entry["paths"])
    with pytest.raises(SchemaError):
        forge.ManifestEntry(video_id="v", scene="s", action="a",
                            characters=("one", "two"), paths={"frames": "x"})
    bare = forge.ManifestEntry.from_dict(entry)  # no root
    with pytest.raises(DataError):
        bare.path("frames")


# ---------------------------------------------------------------------------
# fashion clips and splicing
# ---------------------------------------------------------------------------

def test_render_fashion_clip_properties():
    style = forge.identity_table(16)[3]
    clip = forge.render_fashion_clip(style, 6, 32, 48,
                                     np.random.default_rng(5))
    assert clip.frames.shape == (6, 3, 48, 32)
    assert clip.frames.min() >= -1.0 and clip.frames.max() <= 1.0
    assert len(clip.poses) == 6
    for frame in clip.poses.frames:
        assert len(frame.people) == 1
        assert frame.people[0].id_index == 1

    again = forge.render_fashion_clip(style, 6, 32, 48,
                                      np.random.default_rng(5))
    assert np.array_equal(clip.frames, again.frames)


def test_splice_fashion_geometry():
    table = forge.identity_table(16)
    rng = np.random.default_rng(6)
    a = forge.render_fashion_clip(table[0], 6, 32, 48, rng)
    b = forge.render_fashion_clip(table[8], 5, 40, 48, rng)
    frames, seq = forge.splice_fashion(a, b)

    assert frames.shape == (5, 3, 48, 72)     # min frames, widths added
    assert np.array_equal(frames[:, :, :, :32], a.frames[:5])
    assert np.array_equal(frames[:, :, :, 32:], b.frames[:5])
    assert (seq.width, seq.height) == (72, 48)
    for f in range(5):
        p1 = seq.frames[f].person(1)
        p2 = seq.frames[f].person(2)
        assert np.array_equal(p1.keypoints,
                              a.poses.frames[f].people[0].keypoints)
        shifted = b.poses.frames[f].people[0].keypoints.copy()
        shifted[:, 0] += 32
        assert np.array_equal(p2.keypoints, shifted)

    short = forge.render_fashion_clip(table[4], 5, 40, 32,
                                      np.random.default_rng(7))
    with pytest.raises(ShapeError):
        forge.splice_fashion(a, short)


def test_forge_fashion_dataset(tiny_fashion):
    root, entries = tiny_fashion
    assert len(entries) == 2
    for entry in entries:
        assert entry.scene == forge.FASHION_SCENE
        assert entry.action == forge.WALK_ACTION
        seq = pose_kit.load_pose_file(entry.path("poses"))
        assert (seq.width, seq.height) == (64, 48)
        for frame in seq.frames:
            assert {p.id_index for p in frame.people} == {1, 2}
        bg = codec.load_image(entry.path("background"), dtype=np.float64)
        assert np.allclose(bg, 1.0)  # white studio


# ---------------------------------------------------------------------------
# training samples
# ---------------------------------------------------------------------------

def _all_frames(entry, n):
    return np.stack([
        codec.load_image(entry.path("frames") / forge.FRAME_NAME.format(i),
                         dtype=np.float64)
        for i in range(n)])


def test_load_sample_stage1_picks_one_grid_frame(tiny_combat):
    root, entries = tiny_combat
    entry = entries[0]
    reference = _all_frames(entry, 12)
    seen = set()
    for seed in range(8):
        sample = forge.load_sample(entry, stage=1, frame_interval=6,
                                   rng=np.random.default_rng(seed))
        assert sample.n_frames == 1
        assert sample.prompt == f"{entry.action} in {entry.scene}"
        assert sample.x0.shape == (1, 3, 48, 64)
        assert sample.pose_maps.shape == (1, 48, 64, 3)
        assert len(sample.masks) == 1
        matches = [i for i in range(12)
                   if np.array_equal(sample.x0[0], reference[i])]
        assert len(matches) == 1
        seen.add(matches[0])
    assert seen <= {0, 6}        # the interval-6 grid of a 12-frame video
    assert len(seen) == 2        # both grid points get sampled


def test_load_sample_stage2_consecutive_spaced_window(tiny_combat):
    root, entries = tiny_combat
    entry = entries[0]
    reference = _all_frames(entry, 12)
    sample = forge.load_sample(entry, stage=2, frame_interval=2, clip_len=4,
                               rng=np.random.default_rng(3))
    assert sample.n_frames == 4
    picked = []
    for k in range(4):
        matches = [i for i in range(12)
                   if np.array_equal(sample.x0[k], reference[i])]
        assert len(matches) == 1
        picked.append(matches[0])
    assert picked == [picked[0] + 2 * k for k in range(4)]

    with pytest.raises(SamplingError) as err:
        forge.load_sample(entry, stage=2, frame_interval=6, clip_len=20)
    assert "115" in str(err.value)

    with pytest.raises(ParameterError):
        forge.load_sample(entry, stage=3)
    with pytest.raises(ParameterError):
        forge.load_sample(entry, stage=1, frame_interval=0)


def test_training_sample_validation(rng):
    good = dict(
        x0=rng.uniform(-1, 1, (2, 3, 8, 8)),
        pose_maps=rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8),
        masks=[pose_kit.RegionMaskSet(m1=np.zeros((8, 8)),
                                      m2=np.zeros((8, 8)))] * 2,
        ref_images=[rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)] * 2,
        background=rng.uniform(-1, 1, (3, 8, 8)),
        prompt="punch in dojo",
    )
    forge.TrainingSample(**good)
    with pytest.raises(ShapeError):
        forge.TrainingSample(**{**good, "masks": good["masks"][:1]})
    with pytest.raises(ShapeError):
        forge.TrainingSample(**{**good, "ref_images": good["ref_images"][:1]})


def test_sampling_conditions_from_entry(tiny_combat):
    from duelgen.denoiser import DenoiserNet
    from conftest import small_net_config

    root, entries = tiny_combat
    entry = entries[0]
    net = DenoiserNet(small_net_config(), rng=np.random.default_rng(0))
    conds = forge.sampling_conditions(entry, net, indices=range(4))
    assert conds.n_frames == 4
    assert conds.pose_maps.shape == (4, 48, 64, 3)
    assert conds.bg.shape == (net.config.latent_channels, 24, 32)
    assert len(conds.pyramids) == 4
    assert conds.prompt == f"{entry.action} in {entry.scene}"
    # The pyramids resolve at the network's attention grid.
    for lv in net.config.attention_levels:
        h, w = 24 >> lv, 32 >> lv
        conds.pyramids[0].level_for(h, w)
