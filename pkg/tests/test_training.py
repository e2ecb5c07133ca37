"""Two-stage finetuning: freeze policies, source mixing, the RMSprop
optimizer, bit-exact checkpoint/resume, and the divergence guard.

The resume test is the strongest contract here: splitting a run at any
checkpoint and resuming must reproduce the unbroken run's trace, parameters,
and final checkpoint byte for byte.
"""

import csv
import math
import types

import numpy as np
import pytest

from duelgen import autodiff as ad
from duelgen import diffusion, forge, training
from duelgen.denoiser import DenoiserNet, load_checkpoint
from duelgen.errors import (
    DataError,
    ParameterError,
    PolicyError,
    TrainingDiverged,
)
from duelgen.nn import Parameter

from conftest import small_net_config


# ---------------------------------------------------------------------------
# freeze policies
# ---------------------------------------------------------------------------

def test_is_temporal_parameter_matches_path_segments():
    assert training.is_temporal_parameter("enc.0.temporal.wq")
    assert training.is_temporal_parameter("temporal")
    assert training.is_temporal_parameter("dec.1.temporal.out.weight")
    assert not training.is_temporal_parameter("enc.0.temporally.wq")
    assert not training.is_temporal_parameter("enc.0.res.conv1.weight")
    assert not training.is_temporal_parameter("pose_guider.stem.weight")


def test_stage_policy_partitions_parameters():
    net = DenoiserNet(small_net_config(), rng=np.random.default_rng(0))
    names = list(net.param_dict())
    temporal = {n for n in names if training.is_temporal_parameter(n)}
    assert temporal and temporal != set(names)

    p1 = training.stage_policy(names, 1)
    assert set(p1.trainable) == set(names) - temporal
    assert set(p1.frozen) == temporal

    p2 = training.stage_policy(names, 2)
    assert set(p2.trainable) == temporal
    assert set(p2.frozen) == set(names) - temporal

    with pytest.raises(ParameterError):
        training.stage_policy(names, 3)
    with pytest.raises(PolicyError):
        training.StagePolicy(stage=1, trainable=("a", "b"), frozen=("b",))


def test_apply_freeze_policy_sets_flags_and_validates():
    net = DenoiserNet(small_net_config(), rng=np.random.default_rng(1))
    policy = training.apply_freeze_policy(net, 2)
    params = net.param_dict()
    for name in policy.trainable:
        assert params[name].requires_grad
    for name in policy.frozen:
        assert not params[name].requires_grad

    bogus = training.StagePolicy(stage=1, trainable=("no.such.param",),
                                 frozen=tuple(params))
    with pytest.raises(PolicyError):
        training.apply_freeze_policy(net, bogus)
    partial = training.StagePolicy(stage=1, trainable=tuple(params)[:3],
                                   frozen=())
    with pytest.raises(PolicyError):
        training.apply_freeze_policy(net, partial)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_rmsprop_matches_hand_computed_updates():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float64))
    opt = training.RMSprop({"p": p}, lr=0.1, alpha=0.99, eps=1e-8)

    g1 = np.array([0.5, 0.25])
    p.grad = g1.copy()
    opt.step()
    sq = 0.01 * g1 ** 2
    expect = np.array([1.0, -2.0]) - 0.1 * g1 / (np.sqrt(sq) + 1e-8)
    assert np.allclose(p.data, expect, rtol=1e-14)

    g2 = np.array([-1.0, 0.0])
    p.grad = g2.copy()
    opt.step()
    sq = 0.99 * sq + 0.01 * g2 ** 2
    expect = expect - 0.1 * g2 / (np.sqrt(sq) + 1e-8)
    assert np.allclose(p.data, expect, rtol=1e-14)

    # A parameter with no gradient is left alone.
    frozen = Parameter(np.array([7.0]))
    opt2 = training.RMSprop({"q": frozen}, lr=0.1)
    opt2.step()
    assert frozen.data[0] == 7.0

    with pytest.raises(ParameterError):
        training.RMSprop({"p": p}, lr=0.0)


def test_rmsprop_state_blob_roundtrip():
    p = Parameter(np.arange(4, dtype=np.float32))
    opt = training.RMSprop({"layer.w": p}, lr=0.01)
    p.grad = np.full(4, 0.5, dtype=np.float32)
    opt.step()
    blobs = opt.state_blobs()
    assert set(blobs) == {"optimizer/layer.w"}

    fresh = training.RMSprop(
        {"layer.w": Parameter(np.arange(4, dtype=np.float32))}, lr=0.01)
    fresh.load_state_blobs(blobs)
    assert np.array_equal(fresh.square_avg["layer.w"], opt.square_avg["layer.w"])

    with pytest.raises(DataError):
        fresh.load_state_blobs({"optimizer/layer.w": b"\x00" * 4})
    # Blobs for unknown parameters are ignored (forward compatibility).
    fresh.load_state_blobs({"optimizer/other": b"\x00" * 16})


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _stub_sources(monkeypatch):
    """Replace file-backed sample loading with a tag echo."""
    def fake_load(entry, stage, frame_interval=2, clip_len=20, rng=None):
        return ("sample", entry.video_id, stage)
    monkeypatch.setattr(forge, "load_sample", fake_load)
    combat = tuple(types.SimpleNamespace(video_id=f"c{i}") for i in range(3))
    fashion = tuple(types.SimpleNamespace(video_id=f"f{i}") for i in range(2))
    return {"combat": combat, "fashion": fashion}


def test_next_batch_source_choice_endpoints(monkeypatch):
    sources = _stub_sources(monkeypatch)
    rng = np.random.default_rng(0)
    for _ in range(10):
        batch = training.next_batch(sources, 0.0, 1, rng, batch_size=2)
        assert batch.source_tag == "combat"
        assert len(batch.samples) == 2
        assert all(s[1].startswith("c") for s in batch.samples)
    for _ in range(10):
        batch = training.next_batch(sources, 1.0, 2, rng, batch_size=3)
        assert batch.source_tag == "fashion"
        assert all(s[1].startswith("f") and s[2] == 2 for s in batch.samples)


def test_next_batch_bernoulli_statistics(monkeypatch):
    sources = _stub_sources(monkeypatch)
    rng = np.random.default_rng(123)
    tags = [training.next_batch(sources, 0.5, 1, rng, batch_size=1).source_tag
            for _ in range(1000)]
    fashion_rate = tags.count("fashion") / len(tags)
    assert 0.45 <= fashion_rate <= 0.55

    rng = np.random.default_rng(7)
    skew = [training.next_batch(sources, 0.2, 1, rng, batch_size=1).source_tag
            for _ in range(1000)]
    assert 0.15 <= skew.count("fashion") / len(skew) <= 0.25


def test_next_batch_errors(monkeypatch):
    sources = _stub_sources(monkeypatch)
    rng = np.random.default_rng(0)
    with pytest.raises(ParameterError):
        training.next_batch(sources, 1.5, 1, rng)
    with pytest.raises(DataError):
        training.next_batch({"combat": (), "fashion": sources["fashion"]},
                            0.0, 1, rng)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_train_config_validation_and_file_io(tmp_path):
    config = training.TrainConfig(steps=5, learning_rate=2e-3, batch_size=1,
                                  mixture_ratio=0.25, seed=9)
    assert training.TrainConfig.from_dict(config.to_dict()) == config

    for bad in (dict(steps=0), dict(steps=1, learning_rate=0.0),
                dict(steps=1, batch_size=0), dict(steps=1, mixture_ratio=1.5)):
        with pytest.raises(ParameterError):
            training.TrainConfig(**bad)

    path = tmp_path / "train.json"
    path.write_text('{"steps": 3, "mixture_ratio": 0.5}')
    loaded = training.load_train_config(path)
    assert loaded.steps == 3 and loaded.mixture_ratio == 0.5

    path.write_text('{"steps": 3, "warp_factor": 9}')
    with pytest.raises(DataError):
        training.load_train_config(path)
    path.write_text("[1, 2]")
    with pytest.raises(DataError):
        training.load_train_config(path)
    path.write_text("{broken")
    with pytest.raises(DataError):
        training.load_train_config(path)


def test_guard_constants_are_pinned():
    assert training.DIVERGENCE_FACTOR == 10.0
    assert training.DIVERGENCE_PATIENCE == 100
    assert training.PRODUCTION_LEARNING_RATE == 2e-6


# ---------------------------------------------------------------------------
# the loop: freezing, determinism, resume
# ---------------------------------------------------------------------------

def _datasets(tiny_combat, tiny_fashion):
    return {"combat": tiny_combat[1], "fashion": tiny_fashion[1]}


def _net(seed=0):
    return DenoiserNet(small_net_config(), rng=np.random.default_rng(seed))


_SCHEDULE = diffusion.make_schedule(T=20)


def _config(steps, **overrides):
    kwargs = dict(steps=steps, learning_rate=1e-3, batch_size=1,
                  mixture_ratio=0.5, seed=0, frame_interval=2, clip_len=3)
    kwargs.update(overrides)
    return training.TrainConfig(**kwargs)


def test_stage1_trains_only_nontemporal(tiny_combat, tiny_fashion, tmp_path):
    net = _net(3)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    result = training.train(net, 1, _config(2), _datasets(tiny_combat, tiny_fashion),
                            schedule=_SCHEDULE, out_dir=tmp_path)
    assert result.final_step == 2
    assert len(result.trace) == 2
    changed = unchanged = 0
    for name, p in net.named_parameters():
        if training.is_temporal_parameter(name):
            assert np.array_equal(p.data, before[name]), name
        elif not np.array_equal(p.data, before[name]):
            changed += 1
        else:
            unchanged += 1
    assert changed > 0


def test_stage2_trains_only_temporal(tiny_combat, tiny_fashion, tmp_path):
    net = _net(4)
    # Move off the zero-initialized projections (as a finished stage 1 would):
    # with them at exactly zero no gradient reaches the temporal layers.
    from duelgen.denoiser import perturb_parameters
    perturb_parameters(net, np.random.default_rng(40), scale=0.05)
    before = {n: p.data.copy() for n, p in net.named_parameters()}
    training.train(net, 2, _config(2), _datasets(tiny_combat, tiny_fashion),
                   schedule=_SCHEDULE, out_dir=tmp_path)
    temporal_changed = 0
    for name, p in net.named_parameters():
        if training.is_temporal_parameter(name):
            if not np.array_equal(p.data, before[name]):
                temporal_changed += 1
        else:
            assert np.array_equal(p.data, before[name]), name
    assert temporal_changed > 0


def test_resume_reproduces_unbroken_run(tiny_combat, tiny_fashion, tmp_path):
    datasets = _datasets(tiny_combat, tiny_fashion)

    straight = training.train(_net(5), 1, _config(4), datasets,
                              schedule=_SCHEDULE, out_dir=tmp_path / "a")
    split_first = training.train(_net(5), 1, _config(2), datasets,
                                 schedule=_SCHEDULE, out_dir=tmp_path / "b")
    resumed = training.resume(split_first.checkpoint_path, datasets, steps=4)

    assert [r[:2] for r in straight.trace[:2]] == [r[:2] for r in split_first.trace]
    assert [r[:2] for r in straight.trace[2:]] == [r[:2] for r in resumed.trace]

    # The final checkpoints agree byte for byte (parameters, optimizer state,
    # header); the split run is indistinguishable from the unbroken one.
    a = (tmp_path / "a" / training.CHECKPOINT_NAME).read_bytes()
    b = (tmp_path / "b" / training.CHECKPOINT_NAME).read_bytes()
    assert a == b

    # The trace file accumulates across the resume.
    with open(tmp_path / "b" / training.TRACE_NAME) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "source_tag"]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    with open(tmp_path / "a" / training.TRACE_NAME) as fh:
        rows_a = list(csv.reader(fh))
    assert rows_a == rows


def test_resume_rejects_plain_checkpoints(tmp_path, tiny_combat, tiny_fashion):
    from duelgen.denoiser import save_checkpoint
    net = _net(6)
    path = tmp_path / "bare.zip"
    save_checkpoint(path, net, schedule=_SCHEDULE.constants())
    with pytest.raises(DataError):
        training.resume(path, _datasets(tiny_combat, tiny_fashion))


def test_train_requires_nonempty_sources(tiny_combat, tiny_fashion, tmp_path):
    with pytest.raises(DataError):
        training.train(_net(7), 1, _config(1),
                       {"combat": tiny_combat[1], "fashion": ()},
                       schedule=_SCHEDULE, out_dir=tmp_path)
    with pytest.raises(DataError):
        training.train(_net(7), 1, _config(1, mixture_ratio=0.0),
                       {"combat": (), "fashion": tiny_fashion[1]},
                       schedule=_SCHEDULE, out_dir=tmp_path)


# ---------------------------------------------------------------------------
# divergence guard and intermediate checkpoints
# ---------------------------------------------------------------------------

def _scripted_loss(values):
    seq = iter(values)
    def fake_training_loss(batch, net, schedule, rng):
        return ad.as_tensor(np.float64(next(seq)))
    return fake_training_loss


def _patch_loop(monkeypatch, values, patience):
    monkeypatch.setattr(training, "training_loss", _scripted_loss(values))
    monkeypatch.setattr(training, "DIVERGENCE_PATIENCE", patience)
    monkeypatch.setattr(forge, "load_sample",
                        lambda entry, stage, frame_interval=2, clip_len=20,
                               rng=None: None)
    return {"combat": (types.SimpleNamespace(video_id="c0"),),
            "fashion": (types.SimpleNamespace(video_id="f0"),)}


def test_divergence_guard_trips_after_streak(monkeypatch, tmp_path):
    datasets = _patch_loop(monkeypatch, [1.0, 20.0, 20.0, 20.0, 20.0], 3)
    with pytest.raises(TrainingDiverged) as err:
        training.train(_net(8), 1, _config(5), datasets,
                       schedule=_SCHEDULE, out_dir=tmp_path)
    assert "10x" in str(err.value) or "10" in str(err.value)
    with open(tmp_path / training.TRACE_NAME) as fh:
        rows = list(csv.reader(fh))
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]  # stopped at step 3


def test_divergence_guard_counts_nonfinite_losses(monkeypatch, tmp_path):
    nan = float("nan")
    datasets = _patch_loop(monkeypatch, [1.0, nan, float("inf"), nan], 3)
    with pytest.raises(TrainingDiverged):
        training.train(_net(9), 1, _config(4), datasets,
                       schedule=_SCHEDULE, out_dir=tmp_path)


def test_divergence_guard_streak_resets(monkeypatch, tmp_path):
    values = [1.0, 20.0, 20.0, 1.0, 20.0, 20.0, 1.0]
    datasets = _patch_loop(monkeypatch, values, 3)
    result = training.train(_net(10), 1, _config(7), datasets,
                            schedule=_SCHEDULE, out_dir=tmp_path)
    assert result.final_step == 7


def test_checkpoint_every_preserves_progress(monkeypatch, tmp_path):
    # Checkpoint lands after step 2 (1-based); the guard trips at step index 3,
    # before the next checkpoint, so the file keeps the step-2 state.
    datasets = _patch_loop(monkeypatch, [1.0, 20.0, 20.0, 20.0, 20.0], 3)
    with pytest.raises(TrainingDiverged):
        training.train(_net(11), 1, _config(5, checkpoint_every=2), datasets,
                       schedule=_SCHEDULE, out_dir=tmp_path)
    _, header, extra = load_checkpoint(tmp_path / training.CHECKPOINT_NAME)
    assert header["train_step"] == 2
    assert header["stage"] == 1
    assert header["train_config"]["steps"] == 5
    assert any(k.startswith("optimizer/") for k in extra)


# ---------------------------------------------------------------------------
# incremental source
# ---------------------------------------------------------------------------

def test_incremental_source_joins_after_threshold(monkeypatch, tmp_path):
    seen = []
    def fake_load(entry, stage, frame_interval=2, clip_len=20, rng=None):
        seen.append(entry.video_id)
        return None
    monkeypatch.setattr(forge, "load_sample", fake_load)
    monkeypatch.setattr(training, "training_loss", _scripted_loss([1.0] * 64))

    base = (types.SimpleNamespace(video_id="base"),)
    extra = (types.SimpleNamespace(video_id="extra"),) * 3
    datasets = {"combat": base, "fashion": base, "incremental": extra}

    steps_seen = []
    def log(step, value, tag):
        steps_seen.append((step, list(seen)))
        seen.clear()

    training.train(_net(12), 1,
                   _config(6, mixture_ratio=0.0, batch_size=4,
                           incremental_after=3),
                   datasets, schedule=_SCHEDULE, out_dir=tmp_path, log=log)

    for step, ids in steps_seen:
        if step < 3:
            assert set(ids) == {"base"}
        # With batch size 4 and 3 of 4 entries incremental, the later steps
        # are overwhelmingly likely to include one; assert it showed up.
    late = [ids for step, ids in steps_seen if step >= 3]
    assert any("extra" in ids for ids in late)
    assert all(set(ids) <= {"base", "extra"} for ids in late)
