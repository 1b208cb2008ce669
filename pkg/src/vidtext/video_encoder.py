"""Space-time transformer visual encoder.

A clip of M frames is cut into N square patches per frame, linearly
embedded, tagged with learned spatial and temporal positional embeddings,
prefixed with a CLS token, and passed through a stack of divided
space-time attention blocks. The clip embedding is the CLS row after the
final norm. Images are one-frame videos and share the whole code path.

Two block wirings are supported:

* ``original_divided``: spatial attention reads from and adds back onto
  the temporally-updated tokens.
* ``frozen_modified``: the residual at the spatial output is re-rooted at
  the block input, so with the temporal output projection at zero the
  block reduces exactly to a per-frame spatial block.

CLS convention (divided attention leaves it underdetermined): CLS skips
temporal attention; spatial attention runs per frame over that frame's
patches plus a copy of CLS, and the per-frame CLS outputs are averaged
back into the single CLS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .counters import COUNTERS
from .errors import ConfigError, ContractError, ShapeError, TemporalCapacityError
from .nn import (AttentionParams, MlpParams, NormParams, init_attention,
                 init_mlp, init_norm, mlp_forward, multi_head_attention)
from .tensor import SeededRng, Tensor

ATTENTION_STYLES = ("original_divided", "frozen_modified")


@dataclass
class VideoEncoderConfig:
    frames_max: int = 8
    height: int = 32
    width: int = 32
    patch: int = 8
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    mlp_ratio: float = 4.0
    attention_style: str = "frozen_modified"

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"resolution {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.attention_style not in ATTENTION_STYLES:
            raise ConfigError(f"unknown attention style {self.attention_style!r}")
        if self.frames_max < 1 or self.blocks < 1:
            raise ConfigError("frames_max and blocks must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


@dataclass
class BlockParams:
    time_attn: AttentionParams
    space_attn: AttentionParams
    mlp: MlpParams
    norm_time: NormParams
    norm_space: NormParams
    norm_mlp: NormParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.time_attn.named(f"{prefix}.time"))
        out.update(self.space_attn.named(f"{prefix}.space"))
        out.update(self.mlp.named(f"{prefix}.mlp"))
        out.update(self.norm_time.named(f"{prefix}.norm_time"))
        out.update(self.norm_space.named(f"{prefix}.norm_space"))
        out.update(self.norm_mlp.named(f"{prefix}.norm_mlp"))
        return out


@dataclass
class VideoEncoderParams:
    patch_weight: Tensor  # [3*P*P, D]
    patch_bias: Tensor    # [D]
    space_pos: Tensor     # [N, D]
    time_pos: Tensor      # [capacity, D], capacity <= frames_max
    cls_token: Tensor     # [1, D]
    blocks: list[BlockParams] = field(default_factory=list)
    norm_out: NormParams = None

    @property
    def capacity(self) -> int:
        """Number of frame positions currently trainable."""
        return self.time_pos.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {
            "video.patch.weight": self.patch_weight,
            "video.patch.bias": self.patch_bias,
            "video.space_pos": self.space_pos,
            "video.time_pos": self.time_pos,
            "video.cls": self.cls_token,
        }
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"video.block{i}"))
        out.update(self.norm_out.named("video.norm_out"))
        return out


def init_video_params(config: VideoEncoderConfig, rng: SeededRng,
                      init_frames: int | None = None) -> VideoEncoderParams:
    """Fresh parameters. Temporal attention output projections start at
    zero so the encoder begins as a per-frame spatial transformer;
    ``init_frames`` sets the initial temporal capacity (curriculum stage 1).
    """
    d = config.dim
    m0 = config.frames_max if init_frames is None else int(init_frames)
    if not 1 <= m0 <= config.frames_max:
        raise ConfigError(f"init_frames {m0} outside [1, {config.frames_max}]")
    in_dim = 3 * config.patch * config.patch

    def blk():
        return BlockParams(
            time_attn=init_attention(d, rng, zero_output=True),
            space_attn=init_attention(d, rng),
            mlp=init_mlp(d, config.mlp_hidden, rng),
            norm_time=init_norm(d),
            norm_space=init_norm(d),
            norm_mlp=init_norm(d),
        )

    return VideoEncoderParams(
        patch_weight=Tensor(rng.trunc_normal((in_dim, d)), requires_grad=True),
        patch_bias=Tensor(np.zeros(d), requires_grad=True),
        space_pos=Tensor(rng.trunc_normal((config.n_patches, d)), requires_grad=True),
        time_pos=Tensor(rng.trunc_normal((m0, d)), requires_grad=True),
        cls_token=Tensor(rng.trunc_normal((1, d)), requires_grad=True),
        blocks=[blk() for _ in range(config.blocks)],
        norm_out=init_norm(d),
    )


# ---------------------------------------------------------------------------
# Forward pieces (batched over clips; single-clip spec surface wraps B=1)


def patch_embed_batch(clips: Tensor, params: VideoEncoderParams,
                      config: VideoEncoderConfig) -> Tensor:
    """[B, M, 3, H, W] -> [B, M, N, D]; each P x P x 3 patch is flattened
    channel-major and affinely mapped (equivalent to a stride-P conv)."""
    if clips.array.ndim != 5:
        raise ShapeError(f"expected [B, M, 3, H, W], got {clips.shape}")
    b, m, c, h, w = clips.shape
    p = config.patch
    if c != 3 or h != config.height or w != config.width:
        raise ShapeError(
            f"clip geometry {clips.shape[2:]} does not match config "
            f"(3, {config.height}, {config.width})"
        )
    hp, wp = h // p, w // p
    x = T.reshape(clips, (b, m, 3, hp, p, wp, p))
    x = T.transpose(x, (0, 1, 3, 5, 2, 4, 6))        # [B, M, hp, wp, 3, P, P]
    x = T.reshape(x, (b * m * hp * wp, 3 * p * p))
    x = T.linear(x, params.patch_weight, params.patch_bias)
    return T.reshape(x, (b, m, hp * wp, config.dim))


def add_positional_and_cls_batch(tokens: Tensor, params: VideoEncoderParams) -> Tensor:
    """[B, M, N, D] -> [B, M*N + 1, D]: token (p, m) gains space_pos[p] +
    time_pos[m]; CLS is prepended with no positional addition."""
    b, m, n, d = tokens.shape
    if m > params.capacity:
        raise TemporalCapacityError(
            f"clip has {m} frames but temporal capacity is {params.capacity}; "
            "expand the temporal embeddings first"
        )
    spos = T.expand(T.expand(T.reshape(params.space_pos, (1, 1, n, d)), 0, b), 1, m)
    tpos = T.narrow(params.time_pos, 0, 0, m)
    tpos = T.expand(T.expand(T.reshape(tpos, (1, m, 1, d)), 0, b), 2, n)
    z = T.add(T.add(tokens, spos), tpos)
    z = T.reshape(z, (b, m * n, d))
    cls = T.expand(T.reshape(params.cls_token, (1, 1, d)), 0, b)
    return T.concat([cls, z], axis=1)


def spacetime_block_batch(x: Tensor, block: BlockParams, config: VideoEncoderConfig,
                          m: int, style: str | None = None) -> Tensor:
    """One divided space-time block over [B, M*N + 1, D]."""
    style = config.attention_style if style is None else style
    if style not in ATTENTION_STYLES:
        raise ConfigError(f"unknown attention style {style!r}")
    b, s, d = x.shape
    n = config.n_patches
    if s != m * n + 1:
        raise ShapeError(f"sequence length {s} != M*N+1 for M={m}, N={n}")
    heads = config.heads

    cls = T.narrow(x, 1, 0, 1)                        # [B, 1, D]
    patches = T.reshape(T.narrow(x, 1, 1, m * n), (b, m, n, d))

    # temporal pass: tokens at the same spatial index attend across frames
    t_in = T.layer_norm(patches, block.norm_time.gamma, block.norm_time.beta)
    t_in = T.reshape(T.transpose(t_in, (0, 2, 1, 3)), (b * n, m, d))
    t_out = multi_head_attention(t_in, block.time_attn, heads)
    t_out = T.transpose(T.reshape(t_out, (b, n, m, d)), (0, 2, 1, 3))
    COUNTERS.temporal_scores += b * n * heads * m * m
    z_t = T.add(patches, t_out)                       # CLS passes through unchanged

    # spatial pass: per frame, N patches + a copy of CLS attend together
    cls_per_frame = T.expand(T.reshape(cls, (b, 1, 1, d)), 1, m)
    sp_tokens = T.concat([cls_per_frame, z_t], axis=2)  # [B, M, N+1, D]
    s_in = T.layer_norm(sp_tokens, block.norm_space.gamma, block.norm_space.beta)
    s_in = T.reshape(s_in, (b * m, n + 1, d))
    s_out = T.reshape(multi_head_attention(s_in, block.space_attn, heads),
                      (b, m, n + 1, d))
    COUNTERS.spatial_scores += b * m * heads * (n + 1) * (n + 1)

    cls_out = T.mean_axis(T.narrow(s_out, 2, 0, 1), 1)  # [B, 1, D]
    patch_out = T.narrow(s_out, 2, 1, n)

    new_cls = T.add(cls, cls_out)
    if style == "original_divided":
        new_patches = T.add(z_t, patch_out)
    else:  # frozen_modified: residual re-rooted at the block input
        new_patches = T.add(patches, patch_out)

    z_s = T.concat([new_cls, T.reshape(new_patches, (b, m * n, d))], axis=1)
    h = T.layer_norm(z_s, block.norm_mlp.gamma, block.norm_mlp.beta)
    return T.add(z_s, mlp_forward(h, block.mlp))


def forward_video_tokens(clips: Tensor, params: VideoEncoderParams,
                         config: VideoEncoderConfig,
                         style: str | None = None) -> Tensor:
    """Full token pipeline: [B, M, 3, H, W] -> [B, M*N + 1, D] after the
    final norm. Row 0 is the clip embedding."""
    m = clips.shape[1]
    x = patch_embed_batch(clips, params, config)
    x = add_positional_and_cls_batch(x, params)
    for blk in params.blocks:
        x = spacetime_block_batch(x, blk, config, m, style=style)
    return T.layer_norm(x, params.norm_out.gamma, params.norm_out.beta)


def encode_videos(clips: Tensor, params: VideoEncoderParams,
                  config: VideoEncoderConfig, style: str | None = None) -> Tensor:
    """[B, M, 3, H, W] -> [B, D] CLS embeddings."""
    tokens = forward_video_tokens(clips, params, config, style=style)
    COUNTERS.video_encodes += clips.shape[0]
    return T.reshape(T.narrow(tokens, 1, 0, 1), (clips.shape[0], config.dim))


# ---------------------------------------------------------------------------
# Single-clip spec surface


def patch_embed(clip: Tensor, params: VideoEncoderParams,
                config: VideoEncoderConfig) -> Tensor:
    """[M, 3, H, W] -> [M, N, D]."""
    m = clip.shape[0]
    out = patch_embed_batch(T.reshape(clip, (1,) + clip.shape), params, config)
    return T.reshape(out, (m, config.n_patches, config.dim))


def add_positional_and_cls(tokens: Tensor, params: VideoEncoderParams) -> Tensor:
    """[M, N, D] -> [M*N + 1, D]."""
    m, n, d = tokens.shape
    out = add_positional_and_cls_batch(T.reshape(tokens, (1, m, n, d)), params)
    return T.reshape(out, (m * n + 1, d))


def spacetime_block(x: Tensor, block: BlockParams, config: VideoEncoderConfig,
                    m: int, style: str | None = None) -> Tensor:
    """[M*N + 1, D] -> [M*N + 1, D]."""
    out = spacetime_block_batch(T.reshape(x, (1,) + x.shape), block, config, m,
                                style=style)
    return T.reshape(out, x.shape)


def encode_video(clip: Tensor, params: VideoEncoderParams,
                 config: VideoEncoderConfig, style: str | None = None) -> Tensor:
    """[M, 3, H, W] -> [D]. M = 1 is the image pathway (same code path)."""
    out = encode_videos(T.reshape(clip, (1,) + clip.shape), params, config, style=style)
    return T.reshape(out, (config.dim,))


# ---------------------------------------------------------------------------
# Temporal expansion


def expand_temporal_embeddings(time_pos: Tensor, target: int, method: str) -> Tensor:
    """Grow a [m, D] temporal table to [target, D].

    zero_pad copies the old rows and zero-fills the rest; nearest and
    bilinear use an align-corners mapping: target row i reads source
    coordinate i*(m-1)/(target-1) (0 when either side is a single row).
    """
    m, d = time_pos.shape
    if target < m:
        raise ContractError(f"cannot shrink temporal table from {m} to {target} rows")
    src = time_pos.array
    if target == m:
        out = src.copy()
    elif method == "zero_pad":
        out = np.zeros((target, d))
        out[:m] = src
    elif method in ("nearest", "bilinear"):
        out = np.empty((target, d))
        for i in range(target):
            s = 0.0 if (target == 1 or m == 1) else i * (m - 1) / (target - 1)
            if method == "nearest":
                out[i] = src[int(np.floor(s + 0.5))]
            else:
                lo = int(np.floor(s))
                hi = min(lo + 1, m - 1)
                frac = s - lo
                out[i] = (1.0 - frac) * src[lo] + frac * src[hi]
    else:
        raise ConfigError(f"unknown expansion method {method!r}")
    return Tensor(out, requires_grad=time_pos.requires_grad)
