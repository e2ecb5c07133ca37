"""Noise-prediction network for two-fighter video latents.

The network is a small UNet over space-to-depth latents with four
conditioning pathways:

* two reference-identity images, encoded once into multi-scale feature maps
  and attended to through a masked identity-attention layer that blends
  per-region cross-attention with ordinary self-attention,
* a rasterized pose video, injected as zero-initialized convolutional
  residuals at every encoder level,
* a text prompt, embedded through a hashed token table and consumed by
  cross-attention at the coarsest level,
* a background latent, concatenated channelwise with the noisy input.

Temporal attention layers (attention across the frame axis at each spatial
location) carry all cross-frame information; everything else acts per frame.

The identity-attention combination is, per spatial token::

    O = m1 * attn(Q, K(r1), V(r1)) + m2 * attn(Q, K(r2), V(r2))
        + (1 - (m1 + m2)) * attn(Q, K(x), V(x))

with ``m1``, ``m2`` the two region masks at the layer's resolution. The
reference key/value projections are shared between the two identity slots, so
relabeling (swapping ``(r1, m1)`` with ``(r2, m2)``) leaves the output
bit-identical; the background weight is written ``1 - (m1 + m2)`` on purpose,
because IEEE addition is commutative but not associative.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile

import numpy as np

from . import autodiff as ad
from . import codec
from .autodiff import Tensor, no_grad
from .errors import (ArityError, CheckpointError, ParameterError, ShapeError)
from .nn import (Conv2d, GroupNorm, Linear, Module, ModuleList, Parameter,
                 attention, merge_heads, sinusoidal_embedding, split_heads)

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters; embedded verbatim in checkpoints."""

    latent_channels: int = codec.LATENT_CHANNELS
    base_channels: int = 16
    channel_mults: tuple = (1, 2, 3)
    attention_levels: tuple = (2,)     # levels with identity attention
    temporal_levels: tuple = (1, 2)    # levels with temporal attention
    heads: int = 2
    norm_groups: int = 8
    prompt_vocab: int = 512
    prompt_dim: int = 64
    prompt_len: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if self.latent_channels <= 0 or self.base_channels <= 0:
            raise ParameterError("channel counts must be positive")
        n = self.n_levels
        for lv in tuple(self.attention_levels) + tuple(self.temporal_levels):
            if not 0 <= lv < n:
                raise ParameterError(f"level {lv} outside 0..{n - 1}")
        for ch in self.level_channels:
            if ch % self.heads:
                raise ParameterError(f"{self.heads} heads do not divide {ch} channels")
            if ch % self.norm_groups:
                raise ParameterError(f"{self.norm_groups} groups do not divide {ch} channels")
        if self.prompt_vocab < 2 or self.prompt_len < 1:
            raise ParameterError("prompt table needs >= 2 rows and length >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError(f"unsupported dtype {self.dtype!r}")

    @property
    def n_levels(self):
        return len(self.channel_mults)

    @property
    def level_channels(self):
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def in_channels(self):
        """Noisy latent and background latent, concatenated channelwise."""
        return 2 * self.latent_channels

    @property
    def time_dim(self):
        return 4 * self.base_channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        d["temporal_levels"] = list(self.temporal_levels)
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = dict(d)
        for key in ("channel_mults", "attention_levels", "temporal_levels"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise CheckpointError(f"bad network config: {exc}") from None


def level_resolutions(config: NetConfig, h: int, w: int):
    """Latent grid (h, w) at each level; h and w must halve cleanly."""
    factor = 1 << (config.n_levels - 1)
    if h % factor or w % factor:
        raise ShapeError(
            f"latent {h}x{w} not divisible by {factor} across {config.n_levels} levels"
        )
    return [(h >> i, w >> i) for i in range(config.n_levels)]


# ---------------------------------------------------------------------------
# identity attention (the personalized layer)


class IdAttnLayerState(Module):
    """Projections for one identity-attention layer.

    Self path: wq/wk/wv over the layer's own tokens. Reference path: wkr/wvr,
    shared between both identity slots so the layer is symmetric under
    relabeling.
    """

    def __init__(self, channels, heads, resolution, rng, dtype=np.float32):
        if channels % heads:
            raise ParameterError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        # (h, w) this layer expects, or None to accept any grid
        self.resolution = tuple(resolution) if resolution is not None else None
        std = 1.0 / np.sqrt(channels)
        def mat():
            return Parameter((rng.standard_normal((channels, channels)) * std).astype(dtype))
        self.wq, self.wk, self.wv = mat(), mat(), mat()
        self.wkr, self.wvr = mat(), mat()


def _as_mask_pair(masks):
    if hasattr(masks, "m1") and hasattr(masks, "m2"):
        return np.asarray(masks.m1), np.asarray(masks.m2)
    m1, m2 = masks
    return np.asarray(m1), np.asarray(m2)


def id_attn_forward(x_l, refs, masks, state: IdAttnLayerState):
    """Masked identity attention over one layer's tokens.

    Parameters
    ----------
    x_l : (F, h, w, c) array or Tensor, channels last.
    refs : pair of reference feature maps, each (hr, wr, c).
    masks : RegionMaskSet at (h, w), or a plain (m1, m2) pair; each mask may
        also be (F, h, w) to vary per frame.
    state : IdAttnLayerState with matching resolution.

    Returns the blended output, same shape as ``x_l``: cross-attention to each
    reference weighted by its region mask, self-attention weighted by the
    leftover background mass.
    """
    x_l = ad.as_tensor(x_l)
    if x_l.ndim != 4:
        raise ShapeError(f"expected (F, h, w, c) tokens, got {x_l.shape}")
    f, h, w, c = x_l.shape
    if state.resolution is not None and (h, w) != state.resolution:
        raise ShapeError(f"layer expects {state.resolution}, got {(h, w)}")
    if c != state.wq.shape[0]:
        raise ShapeError(f"layer width {state.wq.shape[0]}, got {c} channels")
    try:
        r1, r2 = refs
    except (TypeError, ValueError):
        raise ArityError("refs must hold exactly two feature maps") from None
    r1, r2 = ad.as_tensor(r1), ad.as_tensor(r2)
    for r in (r1, r2):
        if r.ndim != 3 or r.shape[2] != c:
            raise ShapeError(f"reference map {r.shape} incompatible with {c} channels")
    m1, m2 = _as_mask_pair(masks)
    for m in (m1, m2):
        if m.shape not in ((h, w), (f, h, w)):
            raise ShapeError(f"mask {m.shape} does not cover a {(h, w)} layer")
    if m1.shape != m2.shape:
        raise ShapeError(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    if np.min(m1) < 0 or np.min(m2) < 0 or np.max(m1 + m2) > 1 + 1e-9:
        raise ParameterError("region masks must be >= 0 with m1 + m2 <= 1")

    dtype = x_l.data.dtype
    heads = state.heads
    tokens = ad.reshape(x_l, (f, h * w, c))
    q = split_heads(ad.matmul(tokens, state.wq), heads)        # (F, H, n, d)
    k_self = split_heads(ad.matmul(tokens, state.wk), heads)
    v_self = split_heads(ad.matmul(tokens, state.wv), heads)
    out_self = merge_heads(attention(q, k_self, v_self))       # (F, n, c)

    def ref_path(r):
        rtok = ad.reshape(r, (r.shape[0] * r.shape[1], c))
        kr = split_heads(ad.matmul(rtok, state.wkr), heads)     # (H, nr, d)
        vr = split_heads(ad.matmul(rtok, state.wvr), heads)
        return merge_heads(attention(q, kr, vr))                # (F, n, c)

    out_1, out_2 = ref_path(r1), ref_path(r2)

    lead = 1 if m1.ndim == 2 else f
    w1 = m1.reshape(lead, h * w, 1).astype(dtype)
    w2 = m2.reshape(lead, h * w, 1).astype(dtype)
    # background weight written as 1 - (m1 + m2): the parenthesized sum makes
    # the combination bit-exact under identity relabeling
    wb = 1.0 - (w1 + w2)
    mixed = ad.add(ad.add(ad.mul(out_1, w1), ad.mul(out_2, w2)),
                   ad.mul(out_self, wb))
    return ad.reshape(mixed, (f, h, w, c))


class IdAttnBlock(Module):
    """Pre-norm identity attention with a damped output projection."""

    def __init__(self, channels, heads, resolution, norm_groups, rng, dtype):
        # resolution=None lets the same projections serve any latent grid

        self.norm = GroupNorm(norm_groups, channels, dtype=dtype)
        self.state = IdAttnLayerState(channels, heads, resolution, rng, dtype)
        # A zero init here would stall the reference pathway: q/k/v and the
        # reference projections get no gradient until the output projection
        # moves. Start small-but-alive instead.
        self.out = Linear(channels, channels, rng, dtype=dtype)
        self.out.weight.data *= 0.3

    def __call__(self, x, refs, masks):
        f, c, h, w = x.shape
        normed = ad.transpose(self.norm(x), (0, 2, 3, 1))
        blended = id_attn_forward(normed, refs, masks, self.state)
        return ad.add(x, ad.transpose(self.out(blended), (0, 3, 1, 2)))


# ---------------------------------------------------------------------------
# temporal attention


class TemporalBlock(Module):
    """Attention across frame positions, independently per spatial location.

    Sinusoidal frame-position codes are added to the query/key inputs only;
    values carry no position term, so a frame-constant input stays
    frame-constant. The output projection starts at zero, making the block an
    identity map at initialization.
    """

    def __init__(self, channels, heads, norm_groups, rng, dtype):
        if channels % heads:
            raise ParameterError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        self.norm = GroupNorm(norm_groups, channels, dtype=dtype)
        std = 1.0 / np.sqrt(channels)
        def mat():
            return Parameter((rng.standard_normal((channels, channels)) * std).astype(dtype))
        self.wq, self.wk, self.wv = mat(), mat(), mat()
        self.out = Linear(channels, channels, rng, dtype=dtype, zero_init=True)

    def core(self, x_cl):
        """Residual-free attention over frames; input (F, h, w, c)."""
        f, h, w, c = x_cl.shape
        tokens = ad.reshape(ad.transpose(x_cl, (1, 2, 0, 3)), (h * w, f, c))
        pe = sinusoidal_embedding(np.arange(f), c, dtype=x_cl.data.dtype)
        qk_in = ad.add(tokens, pe)
        q = split_heads(ad.matmul(qk_in, self.wq), self.heads)   # (n, H, F, d)
        k = split_heads(ad.matmul(qk_in, self.wk), self.heads)
        v = split_heads(ad.matmul(tokens, self.wv), self.heads)
        mixed = merge_heads(attention(q, k, v))                  # (n, F, c)
        mixed = self.out(mixed)
        return ad.transpose(ad.reshape(mixed, (h, w, f, c)), (2, 0, 1, 3))

    def __call__(self, x):
        f, c, h, w = x.shape
        normed = ad.transpose(self.norm(x), (0, 2, 3, 1))
        return ad.add(x, ad.transpose(self.core(normed), (0, 3, 1, 2)))


def temporal_attn_forward(x, params: TemporalBlock):
    """Frame-axis attention with residual; ``x`` is (F, h, w, c)."""
    x = ad.as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected (F, h, w, c), got {x.shape}")
    x_cf = ad.transpose(x, (0, 3, 1, 2))
    return ad.transpose(params(x_cf), (0, 2, 3, 1))


# ---------------------------------------------------------------------------
# prompt embedding


@dataclasses.dataclass(frozen=True)
class PromptEmbedding:
    """A tokenized prompt: per-token vectors plus a mean-pooled summary."""

    token_ids: np.ndarray   # (L,) int64, 0 = padding
    tokens: Tensor          # (L, prompt_dim)
    summary: Tensor         # (prompt_dim,)


def _token_index(token: str, vocab: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (vocab - 1) + 1


class PromptEmbedder(Module):
    """Hash-bucketed embedding table; row 0 is the padding vector."""

    def __init__(self, vocab, dim, max_len, rng, dtype):
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        table = (rng.standard_normal((vocab, dim)) / np.sqrt(dim)).astype(dtype)
        table[0] = 0.0
        self.table = Parameter(table)

    def token_ids(self, text: str) -> np.ndarray:
        words = text.split()[: self.max_len]
        ids = [_token_index(word, self.vocab) for word in words]
        ids += [0] * (self.max_len - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def __call__(self, text: str) -> PromptEmbedding:
        ids = self.token_ids(text)
        tokens = ad.embedding(self.table, ids)
        summary = ad.reduce_mean(tokens, axis=0)
        return PromptEmbedding(token_ids=ids, tokens=tokens, summary=summary)


def embed_prompt(text: str, params: PromptEmbedder) -> PromptEmbedding:
    """Whitespace-tokenize ``text`` and look up learned token vectors."""
    return params(text)


class PromptCrossBlock(Module):
    """Cross-attention from latent tokens to prompt token vectors."""

    def __init__(self, channels, prompt_dim, heads, norm_groups, rng, dtype):
        self.heads = heads
        self.norm = GroupNorm(norm_groups, channels, dtype=dtype)
        std = 1.0 / np.sqrt(channels)
        self.wq = Parameter((rng.standard_normal((channels, channels)) * std).astype(dtype))
        self.to_k = Linear(prompt_dim, channels, rng, dtype=dtype, bias=False)
        self.to_v = Linear(prompt_dim, channels, rng, dtype=dtype, bias=False)
        self.out = Linear(channels, channels, rng, dtype=dtype, zero_init=True)

    def __call__(self, x, prompt: PromptEmbedding):
        f, c, h, w = x.shape
        tokens = ad.reshape(ad.transpose(self.norm(x), (0, 2, 3, 1)), (f, h * w, c))
        q = split_heads(ad.matmul(tokens, self.wq), self.heads)
        k = split_heads(self.to_k(prompt.tokens), self.heads)   # (H, L, d)
        v = split_heads(self.to_v(prompt.tokens), self.heads)
        mixed = self.out(merge_heads(attention(q, k, v)))       # (F, n, c)
        mixed = ad.transpose(ad.reshape(mixed, (f, h, w, c)), (0, 3, 1, 2))
        return ad.add(x, mixed)


# ---------------------------------------------------------------------------
# reference encoder


@dataclasses.dataclass(frozen=True)
class ReferenceFeatureBank:
    """Per-level feature maps for the two identities.

    ``features[level] = (r1, r2)``, each a (h_l, w_l, c_l) channels-last map.
    """

    features: dict

    def level(self, lv):
        return self.features[lv]

    def resolution(self, lv):
        r1, _ = self.features[lv]
        return tuple(r1.shape[:2])


class ReferenceEncoder(Module):
    """Shared conv pyramid producing per-level appearance features.

    Both reference images run through the same weights independently; there
    is no mixing between the two identity slots.
    """

    def __init__(self, config: NetConfig, rng):
        dtype = config.np_dtype
        chans = config.level_channels
        self.config = config
        self.conv_in = Conv2d(config.latent_channels, chans[0], 3, rng, dtype=dtype)
        self.blocks = ModuleList()
        self.downs = ModuleList()
        self.heads = ModuleList()
        for i, ch in enumerate(chans):
            self.blocks.append(_Seq(Conv2d(ch, ch, 3, rng, dtype=dtype)))
            if i + 1 < len(chans):
                self.downs.append(_Seq(Conv2d(ch, chans[i + 1], 3, rng,
                                              stride=2, dtype=dtype)))
            if i in config.attention_levels:
                self.heads.append(_Seq(Conv2d(ch, ch, 1, rng, dtype=dtype)))

    def encode_one(self, image):
        """One RGB image (H, W, 3, uint8 or [-1, 1] float) -> level map dict."""
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected an (H, W, 3) image, got {arr.shape}")
        planes = _image_planes(arr)
        latent = codec.encode(planes).data.astype(self.config.np_dtype)
        h = ad.silu(self.conv_in(ad.as_tensor(latent[None])))
        maps, head_idx = {}, 0
        for i in range(self.config.n_levels):
            h = ad.silu(self.blocks[i].op(h))
            if i in self.config.attention_levels:
                proj = self.heads[head_idx].op(h)
                head_idx += 1
                maps[i] = ad.reshape(ad.transpose(proj, (0, 2, 3, 1)),
                                     tuple(proj.shape[2:]) + (proj.shape[1],))
            if i + 1 < self.config.n_levels:
                h = self.downs[i].op(h)
        return maps


class _Seq(Module):
    """Wrapper giving a single layer a stable attribute path."""

    def __init__(self, op):
        self.op = op


def _image_planes(arr):
    """(H, W, 3) image, uint8 or [-1, 1] float -> (3, H, W) float64."""
    if arr.dtype == np.uint8:
        return codec.from_unit(arr, dtype=np.float64)
    return np.ascontiguousarray(arr.astype(np.float64).transpose(2, 0, 1))


def encode_references(ref_images, params: ReferenceEncoder) -> ReferenceFeatureBank:
    """Encode exactly two identity images into per-level feature maps."""
    images = list(ref_images)
    if len(images) != 2:
        raise ArityError(f"expected exactly 2 reference images, got {len(images)}")
    a, b = (np.asarray(im) for im in images)
    if a.shape != b.shape:
        raise ShapeError(f"reference images differ in shape: {a.shape} vs {b.shape}")
    maps_1 = params.encode_one(a)
    maps_2 = params.encode_one(b)
    return ReferenceFeatureBank(
        features={lv: (maps_1[lv], maps_2[lv]) for lv in maps_1}
    )


# ---------------------------------------------------------------------------
# pose guider


class PoseGuider(Module):
    """Conv branch turning rasterized pose frames into per-level residuals.

    A strided stem brings the pixel-resolution pose maps down to the latent
    grid; one further strided stage per level follows. Each level ends in a
    zero-initialized 1x1 projection, so an untrained guider adds nothing.
    """

    def __init__(self, config: NetConfig, rng):
        dtype = config.np_dtype
        chans = config.level_channels
        self.config = config
        self.stem = Conv2d(3, chans[0], 3, rng, stride=2, dtype=dtype)
        self.stem2 = Conv2d(chans[0], chans[0], 3, rng, dtype=dtype)
        self.blocks = ModuleList()
        self.downs = ModuleList()
        self.projections = ModuleList()
        for i, ch in enumerate(chans):
            self.blocks.append(_Seq(Conv2d(ch, ch, 3, rng, dtype=dtype)))
            self.projections.append(_Seq(Conv2d(ch, ch, 1, rng, dtype=dtype,
                                                zero_init=True)))
            if i + 1 < len(chans):
                self.downs.append(_Seq(Conv2d(ch, chans[i + 1], 3, rng,
                                              stride=2, dtype=dtype)))

    def __call__(self, pose_maps):
        arr = np.asarray(pose_maps)
        if arr.ndim != 4 or arr.shape[3] != 3:
            raise ShapeError(f"expected (F, H, W, 3) pose maps, got {arr.shape}")
        if arr.shape[1] % 2 or arr.shape[2] % 2:
            raise ShapeError(f"pose maps need even pixel dims, got {arr.shape[1:3]}")
        dtype = self.config.np_dtype
        if arr.dtype == np.uint8:
            planes = np.stack([codec.from_unit(fr, dtype=dtype) for fr in arr])
        else:
            planes = arr.astype(dtype).transpose(0, 3, 1, 2)
        x = ad.as_tensor(np.ascontiguousarray(planes))
        h = ad.silu(self.stem2(ad.silu(self.stem(x))))
        residuals = []
        for i in range(self.config.n_levels):
            h = ad.silu(self.blocks[i].op(h))
            residuals.append(self.projections[i].op(h))
            if i + 1 < self.config.n_levels:
                h = self.downs[i].op(h)
        return residuals


def pose_guider_forward(pose_maps, params: PoseGuider):
    """Per-level conditioning residuals for F rasterized pose frames."""
    return params(pose_maps)


# ---------------------------------------------------------------------------
# UNet body


class ResBlock(Module):
    def __init__(self, c_in, c_out, time_dim, norm_groups, rng, dtype):
        self.norm1 = GroupNorm(norm_groups, c_in, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.time_proj = Linear(time_dim, c_out, rng, dtype=dtype)
        self.norm2 = GroupNorm(norm_groups, c_out, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype=dtype, zero_init=True)
        self.skip = (Conv2d(c_in, c_out, 1, rng, dtype=dtype)
                     if c_in != c_out else None)

    def __call__(self, x, temb):
        h = self.conv1(ad.silu(self.norm1(x)))
        shift = ad.reshape(self.time_proj(ad.silu(temb)), (1, h.shape[1], 1, 1))
        h = self.conv2(ad.silu(self.norm2(ad.add(h, shift))))
        base = x if self.skip is None else self.skip(x)
        return ad.add(base, h)


class EncoderLevel(Module):
    """Channel growth happens in the strided down convolutions, so the
    residual block maps the level width onto itself."""

    def __init__(self, level, channels, config, rng):
        dtype = config.np_dtype
        self.res = ResBlock(channels, channels, config.time_dim,
                            config.norm_groups, rng, dtype)
        self.id_attn = None
        self.temporal = None
        if level in config.temporal_levels:
            self.temporal = TemporalBlock(channels, config.heads,
                                          config.norm_groups, rng, dtype)
        self.down = None


class DecoderLevel(Module):
    def __init__(self, level, channels, config, rng):
        dtype = config.np_dtype
        self.res = ResBlock(2 * channels, channels, config.time_dim,
                            config.norm_groups, rng, dtype)
        self.id_attn = None
        self.temporal = None
        if level in config.temporal_levels:
            self.temporal = TemporalBlock(channels, config.heads,
                                          config.norm_groups, rng, dtype)
        self.up = None


class TimeEmbedding(Module):
    def __init__(self, config: NetConfig, rng):
        dtype = config.np_dtype
        self.base = config.base_channels
        self.lin1 = Linear(config.base_channels, config.time_dim, rng, dtype=dtype)
        self.lin2 = Linear(config.time_dim, config.time_dim, rng, dtype=dtype)

    def __call__(self, t):
        enc = sinusoidal_embedding([float(t)], self.base,
                                   dtype=self.lin1.weight.data.dtype)
        return ad.reshape(self.lin2(ad.silu(self.lin1(ad.as_tensor(enc)))),
                          (self.lin1.weight.shape[1],))


class DenoiserNet(Module):
    """The full noise predictor; see the module docstring for the layout."""

    def __init__(self, config: NetConfig, rng=None):
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(0 if rng is None else int(rng))
        dtype = config.np_dtype
        chans = config.level_channels
        self.config = config
        self.time_mlp = TimeEmbedding(config, rng)
        self.prompt_embedder = PromptEmbedder(config.prompt_vocab,
                                              config.prompt_dim,
                                              config.prompt_len, rng, dtype)
        self.prompt_proj = Linear(config.prompt_dim, config.time_dim, rng,
                                  dtype=dtype, zero_init=True)
        self.ref_encoder = ReferenceEncoder(config, rng)
        self.pose_guider = PoseGuider(config, rng)
        self.conv_in = Conv2d(config.in_channels, chans[0], 3, rng, dtype=dtype)

        self.enc = ModuleList()
        self.dec = ModuleList()
        for i, ch in enumerate(chans):
            lvl = EncoderLevel(i, ch, config, rng)
            if i in config.attention_levels:
                lvl.id_attn = IdAttnBlock(ch, config.heads, None,
                                          config.norm_groups, rng, dtype)
            if i + 1 < len(chans):
                lvl.down = Conv2d(ch, chans[i + 1], 3, rng, stride=2, dtype=dtype)
            self.enc.append(lvl)

            dlv = DecoderLevel(i, ch, config, rng)
            if i in config.attention_levels:
                dlv.id_attn = IdAttnBlock(ch, config.heads, None,
                                          config.norm_groups, rng, dtype)
            if i > 0:
                dlv.up = Conv2d(ch, chans[i - 1], 3, rng, dtype=dtype)
            self.dec.append(dlv)

        mid = chans[-1]
        self.mid_res1 = ResBlock(mid, mid, config.time_dim, config.norm_groups,
                                 rng, dtype)
        self.mid_prompt = PromptCrossBlock(mid, config.prompt_dim, config.heads,
                                           config.norm_groups, rng, dtype)
        self.mid_res2 = ResBlock(mid, mid, config.time_dim, config.norm_groups,
                                 rng, dtype)
        self.norm_out = GroupNorm(config.norm_groups, chans[0], dtype=dtype)
        self.conv_out = Conv2d(chans[0], config.latent_channels, 3, rng,
                               dtype=dtype, zero_init=True)

    # -- conditioning helpers -------------------------------------------

    def embed_prompt(self, text: str) -> PromptEmbedding:
        return embed_prompt(text, self.prompt_embedder)

    def encode_references(self, ref_images) -> ReferenceFeatureBank:
        return encode_references(ref_images, self.ref_encoder)

    def pose_residuals(self, pose_maps):
        return pose_guider_forward(pose_maps, self.pose_guider)

    # -- forward ----------------------------------------------------------

    def predict_noise(self, z_t, t, bg, bank, pyramid, pose_residuals, prompt):
        """Predict the noise in ``z_t`` under all conditioning signals.

        ``z_t``: (F, c, h, w) latent clip (or LatentClip); ``bg``: (c, h, w)
        background latent (or Latent); ``bank``: ReferenceFeatureBank;
        ``pyramid``: one MaskPyramid, or a length-F sequence for per-frame
        masks; ``pose_residuals``: per-level residuals from the pose guider
        (or None); ``prompt``: PromptEmbedding or raw string.
        """
        config = self.config
        dtype = config.np_dtype
        z = np.asarray(z_t.data if hasattr(z_t, "data") else z_t, dtype=dtype)
        bg_arr = np.asarray(bg.data if hasattr(bg, "data") else bg, dtype=dtype)
        if z.ndim != 4 or z.shape[1] != config.latent_channels:
            raise ShapeError(
                f"expected (F, {config.latent_channels}, h, w) latents, got {z.shape}")
        f, c, h, w = z.shape
        if bg_arr.shape != (c, h, w):
            raise ShapeError(f"background latent {bg_arr.shape} does not match "
                             f"frame latents {(c, h, w)}")
        grids = level_resolutions(config, h, w)
        masks = self._gather_masks(pyramid, grids, f)
        if isinstance(prompt, str):
            prompt = self.embed_prompt(prompt)
        if pose_residuals is not None:
            if len(pose_residuals) != config.n_levels:
                raise ShapeError(f"expected {config.n_levels} pose residual levels, "
                                 f"got {len(pose_residuals)}")
            for i, r in enumerate(pose_residuals):
                expected = (f, config.level_channels[i]) + grids[i]
                if tuple(r.shape) != expected:
                    raise ShapeError(f"pose residual level {i} is {tuple(r.shape)}, "
                                     f"expected {expected}")

        temb = ad.add(self.time_mlp(t), self.prompt_proj(prompt.summary))
        x = np.concatenate([z, np.broadcast_to(bg_arr, z.shape)], axis=1)
        hidden = self.conv_in(ad.as_tensor(x))
        if pose_residuals is not None:
            hidden = ad.add(hidden, pose_residuals[0])

        skips = []
        for i, lvl in enumerate(self.enc):
            hidden = lvl.res(hidden, temb)
            if lvl.id_attn is not None:
                hidden = lvl.id_attn(hidden, bank.level(i), masks[i])
            if lvl.temporal is not None:
                hidden = lvl.temporal(hidden)
            skips.append(hidden)
            if lvl.down is not None:
                hidden = lvl.down(hidden)
                if pose_residuals is not None:
                    hidden = ad.add(hidden, pose_residuals[i + 1])

        hidden = self.mid_res1(hidden, temb)
        hidden = self.mid_prompt(hidden, prompt)
        hidden = self.mid_res2(hidden, temb)

        for i in reversed(range(config.n_levels)):
            dlv = self.dec[i]
            hidden = dlv.res(ad.concat([hidden, skips[i]], axis=1), temb)
            if dlv.id_attn is not None:
                hidden = dlv.id_attn(hidden, bank.level(i), masks[i])
            if dlv.temporal is not None:
                hidden = dlv.temporal(hidden)
            if dlv.up is not None:
                hidden = dlv.up(ad.upsample_nearest2x(hidden))

        return self.conv_out(ad.silu(self.norm_out(hidden)))

    __call__ = predict_noise

    def _gather_masks(self, pyramid, grids, f):
        """Per-attention-level (m1, m2) arrays; (h, w) static or (F, h, w)."""
        out = {}
        for lv in self.config.attention_levels:
            h, w = grids[lv]
            if isinstance(pyramid, (list, tuple)):
                if len(pyramid) != f:
                    raise ShapeError(f"{len(pyramid)} mask pyramids for {f} frames")
                sets = [p.level_for(h, w) for p in pyramid]
                m1 = np.stack([s.m1 for s in sets])
                m2 = np.stack([s.m2 for s in sets])
            else:
                level = pyramid.level_for(h, w)
                m1, m2 = level.m1, level.m2
            out[lv] = (m1, m2)
        return out


def perturb_parameters(net: Module, rng, scale=0.05):
    """Add small Gaussian noise to every parameter (diagnostics/initialization
    experiments; gradient checks need the zero-initialized projections moved
    off exactly zero)."""
    for _, p in net.named_parameters():
        p.data = p.data + (rng.standard_normal(p.data.shape) * scale).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint archive


def _zip_entry(name):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, net: DenoiserNet, schedule=None, header_extra=None,
                    extra_blobs=None):
    """Write a deterministic checkpoint archive.

    Layout: ``header.json`` (format version, network config, pose topology,
    schedule constants, any extra metadata) plus one raw little-endian
    float32 blob per parameter under ``params/<dotted.name>``. Optional
    ``extra_blobs`` (e.g. optimizer state) are stored verbatim under their
    own names. Identical inputs produce byte-identical archives.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "topology": "body18",
        "schedule": dict(schedule) if schedule else None,
    }
    if header_extra:
        header.update(header_extra)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(_zip_entry("header.json"),
                    json.dumps(header, sort_keys=True, indent=1))
        for name, param in sorted(net.named_parameters()):
            blob = np.ascontiguousarray(param.data, dtype="<f4").tobytes()
            zf.writestr(_zip_entry(f"params/{name}"), blob)
        for name in sorted(extra_blobs or {}):
            zf.writestr(_zip_entry(name), extra_blobs[name])
    data = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path):
    """Read a checkpoint archive.

    Returns ``(net, header, extra_blobs)`` where ``extra_blobs`` maps any
    non-parameter entry name to its raw bytes.
    """
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with zf:
        names = set(zf.namelist())
        if "header.json" not in names:
            raise CheckpointError(f"{path} has no header.json")
        try:
            header = json.loads(zf.read("header.json"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from None
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header.get('format_version')}")
        if "config" not in header:
            raise CheckpointError(f"{path} header lacks a network config")
        config = NetConfig.from_dict(header["config"])
        net = DenoiserNet(config, rng=np.random.default_rng(0))
        params = dict(net.named_parameters())
        stored = {n for n in names if n.startswith("params/")}
        expected = {f"params/{n}" for n in params}
        if stored != expected:
            missing = sorted(expected - stored)[:3]
            surplus = sorted(stored - expected)[:3]
            raise CheckpointError(
                f"parameter names do not match the config: missing {missing}, "
                f"unexpected {surplus}")
        with no_grad():
            for name, param in params.items():
                raw = zf.read(f"params/{name}")
                arr = np.frombuffer(raw, dtype="<f4")
                if arr.size != param.data.size:
                    raise CheckpointError(
                        f"blob {name} holds {arr.size} values, expected {param.data.size}")
                param.data = arr.reshape(param.data.shape).astype(config.np_dtype)
        extra = {n: zf.read(n) for n in names - stored - {"header.json"}}
    return net, header, extra
