"""Command-line surface for the whole pipeline.

Subcommands: forge, splice, retarget, rasterize, train, generate, extend,
eval, preview. Every run is deterministic given its inputs and seed. Exit
codes: 0 success, 2 rejected input (bad paths, configs, shapes), 3 internal
failure. Flag precedence: command-line flags override config-file values,
which override built-in defaults. The DUELGEN_DATA_ROOT environment variable
supplies a default dataset root for subcommands that read one.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import codec, forge, metrics, training
from . import pose as pose_kit
from .denoiser import DenoiserNet, NetConfig, load_checkpoint
from .diffusion import (CLIP_LEN, CLIP_STRIDE, Conditions, FUSION_MODES,
                        build_pyramids, make_schedule, sample_clip,
                        sample_long)
from .errors import DataError, DuelgenError, ParameterError, TrainingDiverged

DATA_ROOT_ENV = "DUELGEN_DATA_ROOT"
DEFAULT_SEED = 0
EXTEND_META = "extend_meta.json"


def _error_line(code: int, exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return f"error: code={code} kind={type(exc).__name__} msg={msg!r}"


def _data_root(value):
    if value:
        return Path(value)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    raise DataError(
        f"no dataset root given (pass --data or set {DATA_ROOT_ENV})")


def _load_json_config(path, cls):
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise DataError(f"{path}: expected a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
    return payload


def _merged_config(cls, config_path, flag_values: dict, required=()):
    """defaults < config file < explicit flags, with unknown keys rejected."""
    merged = dict(_load_json_config(config_path, cls)) if config_path else {}
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    missing = [k for k in required if k not in merged]
    if missing:
        raise DataError(f"missing required settings: {missing}")
    try:
        return cls(**merged)
    except TypeError as exc:
        raise DataError(f"bad configuration: {exc}") from None


# ---------------------------------------------------------------------------
# forge / splice / retarget / rasterize


def _cmd_forge(args):
    config = _merged_config(forge.ForgeConfig, args.config, {
        "n_videos": args.videos, "frames_per_video": args.frames,
        "width": args.width, "height": args.height,
        "n_identities": args.identities, "n_actions": args.actions,
        "seed": args.seed,
    }, required=("n_videos",))
    out = Path(args.out)
    if args.fashion:
        entries = forge.forge_fashion(config, out)
    else:
        entries = forge.forge_synthetic(config, out)
    print(f"forged {len(entries)} videos under {out}")
    return 0


def _load_clip_dir(path) -> forge.FashionClip:
    path = Path(path)
    seq = pose_kit.load_pose_file(path / "poses.json")
    frame_files = sorted((path / "frames").glob("*.png"))
    if not frame_files:
        raise DataError(f"no frames under {path / 'frames'}")
    frames = np.stack([codec.load_image(f, dtype=np.float64)
                       for f in frame_files])
    return forge.FashionClip(frames=frames, poses=seq, style=None)


def _cmd_splice(args):
    clip_a = _load_clip_dir(args.left)
    clip_b = _load_clip_dir(args.right)
    frames, seq = forge.splice_fashion(clip_a, clip_b)
    out = Path(args.out)
    frames_dir = out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        codec.save_image(frame, frames_dir / forge.FRAME_NAME.format(i))
    pose_kit.save_pose_file(seq, out / "poses.json")
    print(f"spliced {frames.shape[0]} frames at "
          f"{seq.width}x{seq.height} under {out}")
    return 0


def _cmd_retarget(args):
    ref_seq = pose_kit.load_pose_file(args.ref)
    cond_seq = pose_kit.load_pose_file(args.cond)
    if not 0 <= args.ref_frame < len(ref_seq):
        raise ParameterError(
            f"--ref-frame {args.ref_frame} outside 0..{len(ref_seq) - 1}")
    ref_pose = ref_seq.frames[args.ref_frame].person(args.ref_person)
    if ref_pose is None:
        raise DataError(
            f"person {args.ref_person} absent from reference frame {args.ref_frame}")
    result = pose_kit.retarget(ref_pose, cond_seq, id_index=args.id)
    pose_kit.save_pose_file(result, args.out)
    print(f"retargeted person {args.id} over {len(result)} frames -> {args.out}")
    return 0


def _cmd_rasterize(args):
    seq = pose_kit.load_pose_file(args.poses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        raster = pose_kit.rasterize_pose(frame, seq.width, seq.height)
        Image.fromarray(raster).save(out / forge.FRAME_NAME.format(i))
    print(f"rasterized {len(seq)} pose maps at {seq.width}x{seq.height} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _cmd_train(args):
    datasets = {
        training.COMBAT_SOURCE: forge.load_manifest(_data_root(args.data)),
    }
    if args.fashion_data:
        datasets[training.FASHION_SOURCE] = forge.load_manifest(args.fashion_data)
    if args.incremental_data:
        datasets[training.INCREMENTAL_SOURCE] = forge.load_manifest(
            args.incremental_data)
    out = Path(args.out)

    log = None
    if args.verbose:
        def log(step, loss, tag):
            print(f"step {step:6d}  loss {loss:.5f}  [{tag}]", flush=True)

    if args.resume:
        result = training.resume(args.resume, datasets, out_dir=out,
                                 steps=args.steps, log=log)
    else:
        config = _merged_config(training.TrainConfig, args.config, {
            "steps": args.steps, "learning_rate": args.lr,
            "batch_size": args.batch_size, "mixture_ratio": args.mixture_ratio,
            "seed": args.seed, "frame_interval": args.frame_interval,
            "clip_len": args.clip_len, "checkpoint_every": args.checkpoint_every,
            "incremental_after": args.incremental_after,
        }, required=("steps",))
        if args.init:
            net, _, _ = load_checkpoint(args.init)
        else:
            net = DenoiserNet(NetConfig(),
                              rng=np.random.default_rng(config.seed))
        schedule = make_schedule(T=args.timesteps)
        result = training.train(net, args.stage, config, datasets,
                                schedule=schedule, out_dir=out, log=log)
    losses = result.losses
    print(f"stage {args.stage} trained to step {result.final_step}; "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


# ---------------------------------------------------------------------------
# generate / extend


def _load_ref_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _conditions_from_files(net, poses_path, ref_paths, bg_path, prompt,
                           n_frames=None, start=0):
    seq = pose_kit.load_pose_file(poses_path)
    total = len(seq)
    n = total - start if n_frames is None else n_frames
    if start < 0 or start + n > total:
        raise ParameterError(
            f"frames [{start}, {start + n}) outside the {total}-frame pose file")
    h, w = seq.height, seq.width
    refs = tuple(_load_ref_image(p) for p in ref_paths)
    for path, ref in zip(ref_paths, refs):
        if ref.shape[:2] != (h, w):
            raise DataError(
                f"reference {path} is {ref.shape[1]}x{ref.shape[0]} but the "
                f"pose canvas is {w}x{h}; resolutions must match")
    if bg_path:
        background = codec.load_image(bg_path, dtype=np.float64)
        if background.shape[1:] != (h, w):
            raise DataError(
                f"background {bg_path} is {background.shape[2]}x"
                f"{background.shape[1]} but the pose canvas is {w}x{h}")
    else:
        background = np.ones((3, h, w))
    pose_frames = [seq.frames[i] for i in range(start, start + n)]
    pose_maps = np.stack([pose_kit.rasterize_pose(fr, w, h)
                          for fr in pose_frames])
    masks = [pose_kit.build_region_masks(fr, w, h) for fr in pose_frames]
    pyramids = build_pyramids(masks, net.config, h // 2, w // 2)
    from .autodiff import no_grad
    with no_grad():
        bank = net.encode_references(refs)
    bg_latent = codec.encode(background).data.astype(net.config.np_dtype)
    return Conditions(bg=bg_latent, bank=bank, pyramids=pyramids,
                      pose_maps=pose_maps, prompt=prompt)


def _load_net(path):
    net, header, _ = load_checkpoint(path)
    constants = header.get("schedule") or {}
    schedule = make_schedule(T=constants.get("T", 1000),
                             beta_start=constants.get("beta_start", 1e-4),
                             beta_end=constants.get("beta_end", 2e-2),
                             kind=constants.get("kind", "linear"))
    return net, schedule


def _write_frames(latent_frames, out_dir) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = codec.decode_clip(latent_frames)
    for i, frame in enumerate(pixels):
        codec.save_image(frame, out_dir / forge.FRAME_NAME.format(i))
    return pixels.shape[0]


def _cmd_generate(args):
    net, schedule = _load_net(args.checkpoint)
    n = args.frames if args.frames is not None else CLIP_LEN
    conditions = _conditions_from_files(
        net, args.poses, (args.ref1, args.ref2), args.bg, args.prompt,
        n_frames=n, start=args.start)
    clip, _ = sample_clip(net, schedule, conditions, F=n, steps=args.steps,
                          seed=args.seed)
    count = _write_frames(clip, args.out)
    print(f"generated {count} frames -> {args.out}")
    return 0


def _cmd_extend(args):
    net, schedule = _load_net(args.checkpoint)
    conditions = _conditions_from_files(
        net, args.poses, (args.ref1, args.ref2), args.bg, args.prompt,
        n_frames=args.frames, start=args.start)
    clip = sample_long(net, schedule, conditions, seed=args.seed,
                       steps=args.steps, fusion=args.fusion)
    count = _write_frames(clip, args.out)
    boundaries = list(range(CLIP_LEN, count, CLIP_STRIDE))
    meta = {"frames": count, "boundaries": boundaries, "fusion": args.fusion,
            "seed": args.seed, "steps": args.steps}
    (Path(args.out) / EXTEND_META).write_text(json.dumps(meta, indent=1) + "\n")
    print(f"extended to {count} frames ({len(boundaries)} clip joins) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _frames_in_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise DataError(f"no PNG frames under {path}")
    return np.stack([codec.load_image(f, dtype=np.float64) for f in files])


def _eval_one(entry, gen_dir, n_identities):
    generated = _frames_in_dir(gen_dir)
    n = generated.shape[0]
    seq = pose_kit.load_pose_file(entry.path("poses"))
    if n > len(seq):
        raise DataError(
            f"{entry.video_id}: {n} generated frames but only "
            f"{len(seq)} conditioning poses")
    truth = np.stack([
        codec.load_image(entry.path("frames") / forge.FRAME_NAME.format(i),
                         dtype=np.float64)
        for i in range(n)])
    masks = [pose_kit.build_region_masks(seq.frames[i], seq.width, seq.height)
             for i in range(n)]
    anchors = [forge.identity_for_tag(tag, n_identities).anchor
               for tag in entry.characters]
    counts = metrics.id_attribution_counts(generated, masks, anchors)
    values = {
        "ssim": float(np.mean([metrics.ssim(g, t)
                               for g, t in zip(generated, truth)])),
        "psnr": float(np.mean([metrics.psnr(g, t)
                               for g, t in zip(generated, truth)])),
        "id_attribution": counts.accuracy,
        "id_regions_evaluated": counts.evaluated,
        "id_regions_skipped": counts.skipped,
    }
    meta_path = Path(gen_dir) / EXTEND_META
    boundaries = None
    if meta_path.is_file():
        boundaries = json.loads(meta_path.read_text()).get("boundaries")
    if boundaries:
        values["boundary_continuity"] = metrics.boundary_continuity(
            generated, boundaries)
    else:
        values["boundary_continuity"] = None
    return values


def _cmd_eval(args):
    root = _data_root(args.data)
    entries = {e.video_id: e for e in forge.load_manifest(root)}
    pairs = []
    for spec in args.pair:
        video_id, sep, gen_dir = spec.partition("=")
        if not sep or not video_id or not gen_dir:
            raise ParameterError(
                f"--pair must look like VIDEO_ID=FRAMES_DIR, got {spec!r}")
        if video_id not in entries:
            raise DataError(f"video {video_id!r} not in the manifest at {root}")
        pairs.append((video_id, gen_dir))
    videos = {vid: _eval_one(entries[vid], gen_dir, args.identities)
              for vid, gen_dir in pairs}
    report = metrics.MetricReport(videos=videos)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        print(f"report written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# preview


def _cmd_preview(args):
    files = sorted(Path(args.frames).glob("*.png"))
    if not files:
        raise DataError(f"no PNG frames under {args.frames}")
    if args.every < 1 or args.columns < 1:
        raise ParameterError("--every and --columns must be >= 1")
    picks = files[:: args.every]
    tiles = []
    for f in picks:
        with Image.open(f) as img:
            tiles.append(img.convert("RGB").copy())
    w, h = tiles[0].size
    caption_h = 14
    cols = min(args.columns, len(tiles))
    rows = (len(tiles) + cols - 1) // cols
    sheet = Image.new("RGB", (cols * w, rows * (h + caption_h)), (24, 24, 24))
    draw = ImageDraw.Draw(sheet)
    for k, tile in enumerate(tiles):
        r, c = divmod(k, cols)
        x, y = c * w, r * (h + caption_h)
        sheet.paste(tile, (x, y))
        index = k * args.every
        draw.text((x + 3, y + h + 1), f"frame {index}", fill=(230, 230, 230))
    sheet.save(args.out)
    print(f"contact sheet: {len(tiles)} tiles in {rows}x{cols} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duelgen",
        description="Two-fighter pose-conditioned video generation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="synthesize a training dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--identities", type=int)
    p.add_argument("--actions", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with ForgeConfig fields")
    p.add_argument("--fashion", action="store_true",
                   help="produce spliced-walker videos instead of combat")
    p.set_defaults(func=_cmd_forge)

    p = sub.add_parser("splice", help="join two single-person clips side by side")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_splice)

    p = sub.add_parser("retarget", help="adapt a pose sequence to a reference body shape")
    p.add_argument("--ref", required=True, help="pose file with the reference body")
    p.add_argument("--cond", required=True, help="pose file to adapt")
    p.add_argument("--out", required=True)
    p.add_argument("--ref-frame", type=int, default=0)
    p.add_argument("--ref-person", type=int, default=1)
    p.add_argument("--id", type=int, default=1, help="person id to retarget")
    p.set_defaults(func=_cmd_retarget)

    p = sub.add_parser("rasterize", help="render pose maps from a pose file")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rasterize)

    p = sub.add_parser("train", help="run one finetuning stage")
    p.add_argument("--data", help=f"combat dataset root (or ${DATA_ROOT_ENV})")
    p.add_argument("--fashion-data")
    p.add_argument("--incremental-data")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mixture-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--frame-interval", type=int)
    p.add_argument("--clip-len", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--incremental-after", type=int)
    p.add_argument("--timesteps", type=int, default=1000,
                   help="diffusion schedule length")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--resume", help="checkpoint to continue bit-exactly")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    for name, helptext in (("generate", "sample one clip"),
                           ("extend", "sample a long video as fused clips")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--poses", required=True)
        p.add_argument("--ref1", required=True)
        p.add_argument("--ref2", required=True)
        p.add_argument("--bg", help="background image (default: white)")
        p.add_argument("--prompt", default="")
        p.add_argument("--out", required=True)
        p.add_argument("--frames", type=int, default=None)
        p.add_argument("--start", type=int, default=0)
        p.add_argument("--steps", type=int, default=25)
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        if name == "extend":
            p.add_argument("--fusion", choices=sorted(FUSION_MODES),
                           default="replace")
            p.set_defaults(func=_cmd_extend)
        else:
            p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval", help="score generated frames against a dataset")
    p.add_argument("--data", help=f"dataset root (or ${DATA_ROOT_ENV})")
    p.add_argument("--pair", action="append", required=True,
                   metavar="VIDEO_ID=FRAMES_DIR")
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("preview", help="contact sheet from a frames directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--every", type=int, default=4)
    p.add_argument("--columns", type=int, default=6)
    p.set_defaults(func=_cmd_preview)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(_error_line(3, exc), file=sys.stderr)
        return 3
    except (DuelgenError, OSError) as exc:
        print(_error_line(2, exc), file=sys.stderr)
        return 2
    except Exception as exc:  # invariant violations and bugs
        print(_error_line(3, exc), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
