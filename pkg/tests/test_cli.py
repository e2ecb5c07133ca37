"""Command-line surface: subcommand wiring, exit codes, and the
machine-parseable error line.

Most tests call ``cli.main(argv)`` in-process so coverage and monkeypatching
work; one subprocess test checks the installed console script.
"""

import json
import re
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from duelgen import cli, codec, forge, metrics, training
from duelgen import pose as pose_kit
from duelgen.denoiser import DenoiserNet, load_checkpoint, perturb_parameters, save_checkpoint
from duelgen.diffusion import make_schedule

from conftest import small_net_config

ERROR_LINE = re.compile(r"^error: code=(\d) kind=(\w+) msg=")


def _last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    match = ERROR_LINE.match(err)
    assert match, f"unparseable error line: {err!r}"
    return int(match.group(1)), match.group(2), err


@pytest.fixture(scope="module")
def small_ckpt(tmp_path_factory):
    """A reduced network checkpoint with a short 20-step schedule."""
    path = tmp_path_factory.mktemp("ckpt") / "net.zip"
    net = DenoiserNet(small_net_config(), rng=np.random.default_rng(11))
    perturb_parameters(net, np.random.default_rng(12), scale=0.01)
    save_checkpoint(path, net, schedule=make_schedule(T=20).constants())
    return path


@pytest.fixture(scope="module")
def long_combat(tmp_path_factory):
    """One 44-frame combat video, enough for two fused sampling windows."""
    root = tmp_path_factory.mktemp("combat44")
    config = forge.ForgeConfig(n_videos=1, frames_per_video=44,
                               width=64, height=48, seed=7)
    entries = forge.forge_synthetic(config, root)
    return root, entries


# ---------------------------------------------------------------------------
# forge
# ---------------------------------------------------------------------------

def test_forge_cli_writes_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code = cli.main(["forge", "--out", str(out), "--videos", "2",
                     "--frames", "4", "--width", "64", "--height", "48",
                     "--seed", "5"])
    assert code == 0
    assert "forged 2 videos" in capsys.readouterr().out
    entries = forge.load_manifest(out)
    assert [e.video_id for e in entries] == ["video_0000", "video_0001"]
    seq = pose_kit.load_pose_file(entries[0].path("poses"))
    assert (seq.width, seq.height, len(seq)) == (64, 48, 4)


def test_forge_cli_is_deterministic(tmp_path):
    argv = ["forge", "--videos", "1", "--frames", "3", "--width", "64",
            "--height", "48", "--seed", "21", "--out"]
    assert cli.main(argv + [str(tmp_path / "a")]) == 0
    assert cli.main(argv + [str(tmp_path / "b")]) == 0
    rels = sorted(p.relative_to(tmp_path / "a")
                  for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert rels
    for rel in rels:
        assert (tmp_path / "a" / rel).read_bytes() == \
               (tmp_path / "b" / rel).read_bytes()


def test_forge_cli_fashion_flag(tmp_path):
    out = tmp_path / "walkers"
    assert cli.main(["forge", "--out", str(out), "--videos", "1",
                     "--frames", "4", "--width", "64", "--height", "48",
                     "--fashion"]) == 0
    entry, = forge.load_manifest(out)
    assert entry.video_id == "fashion_0000"
    assert entry.action == forge.WALK_ACTION


def test_forge_cli_config_file_and_flag_precedence(tmp_path):
    config = tmp_path / "forge.json"
    config.write_text(json.dumps({"n_videos": 1, "frames_per_video": 3,
                                  "width": 64, "height": 48, "seed": 9}))
    out = tmp_path / "data"
    assert cli.main(["forge", "--config", str(config), "--videos", "2",
                     "--out", str(out)]) == 0
    assert len(forge.load_manifest(out)) == 2  # flag beats config file


def test_forge_cli_rejects_bad_configs(tmp_path, capsys):
    assert cli.main(["forge", "--out", str(tmp_path / "x")]) == 2
    code, kind, msg = _last_error(capsys)
    assert (code, kind) == (2, "DataError") and "n_videos" in msg

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_videos": 1, "bogus": True}))
    assert cli.main(["forge", "--config", str(bad),
                     "--out", str(tmp_path / "y")]) == 2
    assert "bogus" in _last_error(capsys)[2]

    notjson = tmp_path / "broken.json"
    notjson.write_text("{nope")
    assert cli.main(["forge", "--config", str(notjson),
                     "--out", str(tmp_path / "z")]) == 2


def test_missing_required_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["forge"])  # --out is required
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# splice / retarget / rasterize
# ---------------------------------------------------------------------------

def _write_clip_dir(clip, path):
    frames_dir = path / "frames"
    frames_dir.mkdir(parents=True)
    for i, frame in enumerate(clip.frames):
        codec.save_image(frame, frames_dir / forge.FRAME_NAME.format(i))
    pose_kit.save_pose_file(clip.poses, path / "poses.json")


def test_splice_cli_joins_two_walkers(tmp_path, capsys):
    table = forge.identity_table(8)
    rng = np.random.default_rng(3)
    left = forge.render_fashion_clip(table[0], 6, 32, 48, rng)
    right = forge.render_fashion_clip(table[4], 6, 32, 48, rng)
    _write_clip_dir(left, tmp_path / "left")
    _write_clip_dir(right, tmp_path / "right")

    out = tmp_path / "joined"
    assert cli.main(["splice", "--left", str(tmp_path / "left"),
                     "--right", str(tmp_path / "right"),
                     "--out", str(out)]) == 0
    assert "spliced 6 frames at 64x48" in capsys.readouterr().out

    seq = pose_kit.load_pose_file(out / "poses.json")
    assert (seq.width, seq.height) == (64, 48)
    assert {p.id_index for p in seq.frames[0].people} == {1, 2}
    joined = codec.load_image(out / "frames" / forge.FRAME_NAME.format(0))
    source = codec.load_image(tmp_path / "left" / "frames"
                              / forge.FRAME_NAME.format(0))
    assert np.array_equal(joined[:, :, :32], source)


def test_splice_cli_rejects_empty_input(tmp_path, capsys):
    (tmp_path / "left" / "frames").mkdir(parents=True)
    assert cli.main(["splice", "--left", str(tmp_path / "left"),
                     "--right", str(tmp_path / "left"),
                     "--out", str(tmp_path / "out")]) == 2
    assert _last_error(capsys)[0] == 2


def test_retarget_cli_roundtrip(tiny_combat, tmp_path, capsys):
    root, entries = tiny_combat
    poses = entries[0].path("poses")
    out = tmp_path / "retargeted.json"
    assert cli.main(["retarget", "--ref", str(poses), "--cond", str(poses),
                     "--id", "1", "--out", str(out)]) == 0
    original = pose_kit.load_pose_file(poses)
    result = pose_kit.load_pose_file(out)
    assert len(result) == len(original)
    # The body shape is estimated across the whole condition sequence, so
    # retargeting a sequence onto its own frame-0 body is sub-pixel close to
    # identity (not exact) and leaves the other person untouched.
    ref = original.frames[0].person(1).keypoints
    got = result.frames[0].person(1).keypoints
    assert np.allclose(got[:, :2], ref[:, :2], atol=0.5)
    assert np.array_equal(result.frames[3].person(2).keypoints,
                          original.frames[3].person(2).keypoints)


def test_retarget_cli_bad_frame_or_person(tiny_combat, tmp_path, capsys):
    _, entries = tiny_combat
    poses = str(entries[0].path("poses"))
    out = str(tmp_path / "o.json")
    assert cli.main(["retarget", "--ref", poses, "--cond", poses,
                     "--ref-frame", "99", "--out", out]) == 2
    assert _last_error(capsys)[1] == "ParameterError"
    assert cli.main(["retarget", "--ref", poses, "--cond", poses,
                     "--ref-person", "3", "--out", out]) == 2
    assert _last_error(capsys)[1] == "DataError"


def test_rasterize_cli_renders_every_frame(tiny_combat, tmp_path):
    _, entries = tiny_combat
    out = tmp_path / "maps"
    assert cli.main(["rasterize", "--poses", str(entries[0].path("poses")),
                     "--out", str(out)]) == 0
    files = sorted(out.glob("*.png"))
    assert len(files) == 12
    with Image.open(files[0]) as img:
        arr = np.asarray(img)
    assert arr.shape == (48, 64, 3)
    assert arr.any()  # limbs actually painted


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_cli_smoke_and_resume(tiny_combat, small_ckpt, tmp_path, capsys):
    root, _ = tiny_combat
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(root), "--out", str(out),
                     "--stage", "1", "--steps", "2", "--batch-size", "1",
                     "--mixture-ratio", "0", "--timesteps", "20",
                     "--init", str(small_ckpt), "--verbose"]) == 0
    text = capsys.readouterr().out
    assert "stage 1 trained to step 2" in text
    assert "step      0" in text  # --verbose prints per-step lines
    ckpt = out / training.CHECKPOINT_NAME
    assert ckpt.is_file()
    _, header, _ = load_checkpoint(ckpt)
    assert header["train_step"] == 2

    assert cli.main(["train", "--resume", str(ckpt), "--out", str(out),
                     "--steps", "4", "--stage", "1", "--data", str(root)]) == 0
    assert "trained to step 4" in capsys.readouterr().out
    trace = (out / training.TRACE_NAME).read_text().strip().splitlines()
    assert len(trace) == 1 + 4  # header plus one row per step


def test_train_cli_reads_data_root_from_env(tiny_combat, small_ckpt, tmp_path,
                                            capsys, monkeypatch):
    root, _ = tiny_combat
    monkeypatch.delenv(cli.DATA_ROOT_ENV, raising=False)
    assert cli.main(["train", "--out", str(tmp_path / "a"), "--stage", "1",
                     "--steps", "1", "--init", str(small_ckpt)]) == 2
    assert cli.DATA_ROOT_ENV in _last_error(capsys)[2]

    monkeypatch.setenv(cli.DATA_ROOT_ENV, str(root))
    assert cli.main(["train", "--out", str(tmp_path / "b"), "--stage", "1",
                     "--steps", "1", "--batch-size", "1", "--timesteps", "20",
                     "--mixture-ratio", "0", "--init", str(small_ckpt)]) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # loss blows up on purpose
def test_train_cli_divergence_exits_three(tiny_combat, small_ckpt, tmp_path,
                                          capsys, monkeypatch):
    root, _ = tiny_combat
    monkeypatch.setattr(training, "DIVERGENCE_PATIENCE", 2)
    code = cli.main(["train", "--data", str(root), "--out", str(tmp_path / "r"),
                     "--stage", "1", "--steps", "50", "--batch-size", "1",
                     "--mixture-ratio", "0", "--timesteps", "20", "--lr", "1e6",
                     "--init", str(small_ckpt)])
    assert code == 3
    assert _last_error(capsys)[:2] == (3, "TrainingDiverged")


# ---------------------------------------------------------------------------
# generate / extend
# ---------------------------------------------------------------------------

def test_generate_cli_writes_deterministic_frames(tiny_combat, small_ckpt,
                                                  tmp_path):
    _, entries = tiny_combat
    entry = entries[0]
    argv = ["generate", "--checkpoint", str(small_ckpt),
            "--poses", str(entry.path("poses")),
            "--ref1", str(entry.path("ref_1")),
            "--ref2", str(entry.path("ref_2")),
            "--bg", str(entry.path("background")),
            "--prompt", "punch in dojo", "--frames", "4", "--steps", "2",
            "--seed", "3", "--out"]
    assert cli.main(argv + [str(tmp_path / "a")]) == 0
    assert cli.main(argv + [str(tmp_path / "b")]) == 0
    a_files = sorted((tmp_path / "a").glob("*.png"))
    assert [f.name for f in a_files] == [forge.FRAME_NAME.format(i)
                                         for i in range(4)]
    for f in a_files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    with Image.open(a_files[0]) as img:
        assert img.size == (64, 48)


def test_generate_cli_rejects_resolution_mismatch(tiny_combat, small_ckpt,
                                                  tmp_path, capsys):
    _, entries = tiny_combat
    entry = entries[0]
    small_ref = tmp_path / "small.png"
    Image.new("RGB", (32, 32), (255, 255, 255)).save(small_ref)
    code = cli.main(["generate", "--checkpoint", str(small_ckpt),
                     "--poses", str(entry.path("poses")),
                     "--ref1", str(small_ref),
                     "--ref2", str(entry.path("ref_2")),
                     "--frames", "4", "--steps", "2",
                     "--out", str(tmp_path / "out")])
    assert code == 2
    code, kind, msg = _last_error(capsys)
    assert (code, kind) == (2, "DataError")
    assert "32x32" in msg and "resolutions must match" in msg


def test_generate_cli_rejects_window_outside_pose_file(tiny_combat, small_ckpt,
                                                       tmp_path, capsys):
    _, entries = tiny_combat
    entry = entries[0]
    assert cli.main(["generate", "--checkpoint", str(small_ckpt),
                     "--poses", str(entry.path("poses")),
                     "--ref1", str(entry.path("ref_1")),
                     "--ref2", str(entry.path("ref_2")),
                     "--frames", "10", "--start", "6", "--steps", "2",
                     "--out", str(tmp_path / "out")]) == 2
    assert _last_error(capsys)[1] == "ParameterError"


def test_extend_cli_matches_single_window_prefix(long_combat, small_ckpt,
                                                 tmp_path, capsys):
    _, entries = long_combat
    entry = entries[0]
    common = ["--checkpoint", str(small_ckpt),
              "--poses", str(entry.path("poses")),
              "--ref1", str(entry.path("ref_1")),
              "--ref2", str(entry.path("ref_2")),
              "--bg", str(entry.path("background")),
              "--prompt", "punch in dojo", "--steps", "2", "--seed", "5"]
    long_out = tmp_path / "long"
    assert cli.main(["extend", *common, "--frames", "44",
                     "--out", str(long_out)]) == 0
    assert "extended to 44 frames (1 clip joins)" in capsys.readouterr().out

    meta = json.loads((long_out / cli.EXTEND_META).read_text())
    assert meta == {"frames": 44, "boundaries": [24], "fusion": "replace",
                    "seed": 5, "steps": 2}
    assert len(sorted(long_out.glob("*.png"))) == 44

    short_out = tmp_path / "short"
    assert cli.main(["generate", *common, "--frames", "24",
                     "--out", str(short_out)]) == 0
    # The first sampling window of the long render is bit-identical to a
    # standalone single-clip render with the same seed.
    for i in range(24):
        name = forge.FRAME_NAME.format(i)
        assert (long_out / name).read_bytes() == (short_out / name).read_bytes()


def test_extend_cli_rejects_untileable_length(long_combat, small_ckpt,
                                              tmp_path, capsys):
    _, entries = long_combat
    entry = entries[0]
    assert cli.main(["extend", "--checkpoint", str(small_ckpt),
                     "--poses", str(entry.path("poses")),
                     "--ref1", str(entry.path("ref_1")),
                     "--ref2", str(entry.path("ref_2")),
                     "--frames", "30", "--steps", "2",
                     "--out", str(tmp_path / "out")]) == 2
    assert _last_error(capsys)[1] == "ParameterError"


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_cli_scores_ground_truth_perfectly(tiny_combat, tmp_path, capsys):
    root, entries = tiny_combat
    entry = entries[0]
    gen = tmp_path / "gen"
    shutil.copytree(entry.path("frames"), gen)
    report_path = tmp_path / "report.json"
    assert cli.main(["eval", "--data", str(root),
                     "--pair", f"{entry.video_id}={gen}",
                     "--out", str(report_path)]) == 0
    out = capsys.readouterr().out
    assert entry.video_id in out and "mean" in out

    payload = json.loads(report_path.read_text())
    row = payload["videos"][entry.video_id]
    assert row["ssim"] == 1.0
    assert row["psnr"] == 99.0
    assert row["id_attribution"] == 1.0
    assert row["boundary_continuity"] is None  # no clip joins declared
    assert row["id_regions_evaluated"] > 0


def test_eval_cli_scores_extend_output_with_boundaries(long_combat, tmp_path,
                                                       capsys):
    root, entries = long_combat
    entry = entries[0]
    gen = tmp_path / "gen"
    shutil.copytree(entry.path("frames"), gen)
    (gen / cli.EXTEND_META).write_text(json.dumps(
        {"frames": 44, "boundaries": [24], "fusion": "replace"}))
    out_path = tmp_path / "r.json"
    assert cli.main(["eval", "--data", str(root),
                     "--pair", f"{entry.video_id}={gen}",
                     "--out", str(out_path)]) == 0
    row = json.loads(out_path.read_text())["videos"][entry.video_id]
    assert row["boundary_continuity"] is not None
    assert row["boundary_continuity"] >= 0.0


def test_eval_cli_input_validation(tiny_combat, tmp_path, capsys, monkeypatch):
    root, entries = tiny_combat
    entry = entries[0]
    gen = tmp_path / "gen"
    shutil.copytree(entry.path("frames"), gen)

    assert cli.main(["eval", "--data", str(root), "--pair", "malformed"]) == 2
    assert _last_error(capsys)[1] == "ParameterError"

    assert cli.main(["eval", "--data", str(root),
                     "--pair", f"nope={gen}"]) == 2
    assert "manifest" in _last_error(capsys)[2]

    monkeypatch.delenv(cli.DATA_ROOT_ENV, raising=False)
    assert cli.main(["eval", "--pair", f"{entry.video_id}={gen}"]) == 2
    assert cli.DATA_ROOT_ENV in _last_error(capsys)[2]

    # More generated frames than conditioning poses is a hard error.
    extra = gen / forge.FRAME_NAME.format(12)
    shutil.copyfile(gen / forge.FRAME_NAME.format(0), extra)
    assert cli.main(["eval", "--data", str(root),
                     "--pair", f"{entry.video_id}={gen}"]) == 2
    assert "13 generated frames" in _last_error(capsys)[2]


# ---------------------------------------------------------------------------
# preview
# ---------------------------------------------------------------------------

@pytest.fixture()
def frame_dir(tmp_path):
    path = tmp_path / "frames"
    path.mkdir()
    rng = np.random.default_rng(1)
    for i in range(44):
        arr = rng.integers(0, 256, (48, 64, 3), dtype=np.uint8)
        Image.fromarray(arr, "RGB").save(path / forge.FRAME_NAME.format(i))
    return path


def test_preview_cli_tile_layout(frame_dir, tmp_path, capsys):
    out = tmp_path / "sheet.png"
    assert cli.main(["preview", "--frames", str(frame_dir),
                     "--out", str(out), "--every", "4", "--columns", "6"]) == 0
    assert "11 tiles in 2x6" in capsys.readouterr().out
    with Image.open(out) as sheet:
        # 44 frames sampled every 4th -> 11 tiles -> 2 rows of 6 columns,
        # each tile 64x48 plus a 14px caption strip.
        assert sheet.size == (6 * 64, 2 * (48 + 14))

    again = tmp_path / "sheet2.png"
    assert cli.main(["preview", "--frames", str(frame_dir),
                     "--out", str(again)]) == 0
    assert cli.main(["preview", "--frames", str(frame_dir),
                     "--out", str(tmp_path / "sheet3.png")]) == 0
    assert again.read_bytes() == (tmp_path / "sheet3.png").read_bytes()


def test_preview_cli_single_tile(frame_dir, tmp_path):
    out = tmp_path / "one.png"
    assert cli.main(["preview", "--frames", str(frame_dir),
                     "--out", str(out), "--every", "100"]) == 0
    with Image.open(out) as sheet:
        assert sheet.size == (64, 48 + 14)


def test_preview_cli_validation(frame_dir, tmp_path, capsys):
    assert cli.main(["preview", "--frames", str(frame_dir),
                     "--out", str(tmp_path / "x.png"), "--every", "0"]) == 2
    assert _last_error(capsys)[1] == "ParameterError"
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["preview", "--frames", str(empty),
                     "--out", str(tmp_path / "y.png")]) == 2
    assert _last_error(capsys)[1] == "DataError"


# ---------------------------------------------------------------------------
# packaging
# ---------------------------------------------------------------------------

def test_console_script_is_installed():
    result = subprocess.run(["duelgen", "--help"], capture_output=True,
                            text=True)
    assert result.returncode == 0
    for name in ("forge", "train", "generate", "extend", "eval", "preview"):
        assert name in result.stdout
