import numpy as np
import pytest

from vidtext import tensor as T
from vidtext import video_encoder as V
from vidtext.counters import COUNTERS
from vidtext.errors import (ConfigError, ContractError, ShapeError,
                            TemporalCapacityError)
from vidtext.tensor import SeededRng, Tensor

from oracles import per_frame_encoder_oracle

TINY = dict(frames_max=4, height=16, width=16, patch=8, dim=8, heads=2,
            blocks=2, mlp_ratio=2.0)


def tiny_setup(seed=0, **overrides):
    cfg = V.VideoEncoderConfig(**{**TINY, **overrides})
    params = V.init_video_params(cfg, SeededRng(seed))
    return cfg, params


def random_clip(rng, m, cfg):
    return Tensor(rng.uniform((m, 3, cfg.height, cfg.width)))


# ---------------------------------------------------------------------------
# config / patch embedding


def test_patch_count_at_paper_resolution():
    cfg = V.VideoEncoderConfig(frames_max=1, height=224, width=224, patch=16,
                               dim=8, heads=2, blocks=1)
    assert cfg.n_patches == 196


def test_patch_count_small():
    cfg = V.VideoEncoderConfig(frames_max=1, height=32, width=32, patch=16,
                               dim=8, heads=2, blocks=1)
    assert cfg.n_patches == 4


def test_indivisible_resolution_rejected():
    with pytest.raises(ConfigError):
        V.VideoEncoderConfig(height=30, width=32, patch=8, dim=8, heads=2)


def test_patch_embed_picks_pixel_with_indicator_kernel():
    cfg, params = tiny_setup()
    params.patch_weight.array[:] = 0.0
    params.patch_bias.array[:] = 0.0
    # channel-major flattening: weight row 0 is pixel (channel 0, y 0, x 0)
    params.patch_weight.array[0, 3] = 1.0
    rng = SeededRng(5)
    clip = random_clip(rng, 2, cfg)
    out = V.patch_embed(clip, params, cfg)
    p = cfg.patch
    for m in range(2):
        for iy in range(cfg.height // p):
            for ix in range(cfg.width // p):
                n = iy * (cfg.width // p) + ix
                assert out.array[m, n, 3] == clip.array[m, 0, iy * p, ix * p]
                assert np.all(out.array[m, n, :3] == 0)


def test_patch_embed_geometry_mismatch():
    cfg, params = tiny_setup()
    with pytest.raises(ShapeError):
        V.patch_embed(Tensor(np.zeros((2, 3, 8, 8))), params, cfg)


# ---------------------------------------------------------------------------
# positional embeddings and CLS


def test_zero_positional_is_identity_plus_cls():
    cfg, params = tiny_setup()
    params.space_pos.array[:] = 0.0
    params.time_pos.array[:] = 0.0
    m, n, d = 2, cfg.n_patches, cfg.dim
    tokens = Tensor(SeededRng(1).normal((m, n, d)))
    out = V.add_positional_and_cls(tokens, params)
    assert out.shape == (m * n + 1, d)
    np.testing.assert_array_equal(out.array[0], params.cls_token.array[0])
    np.testing.assert_array_equal(out.array[1:], tokens.array.reshape(m * n, d))


def test_positional_hand_case():
    # M=2, N=1, D=1: z=[[5],[7]], space=[[10]], time=[[1],[2]] -> 16, 19
    cfg = V.VideoEncoderConfig(frames_max=2, height=8, width=8, patch=8,
                               dim=1, heads=1, blocks=1)
    params = V.init_video_params(cfg, SeededRng(0))
    params.space_pos.array[:] = [[10.0]]
    params.time_pos.array[:] = [[1.0], [2.0]]
    tokens = Tensor(np.array([[[5.0]], [[7.0]]]))
    out = V.add_positional_and_cls(tokens, params)
    assert out.array[1, 0] == 16.0
    assert out.array[2, 0] == 19.0


def test_positional_rows_shared_per_frame_and_position():
    cfg, params = tiny_setup()
    m, n, d = 3, cfg.n_patches, cfg.dim
    out = V.add_positional_and_cls(Tensor(np.zeros((m, n, d))), params)
    grid = out.array[1:].reshape(m, n, d)
    for mm in range(m):
        for p in range(n):
            np.testing.assert_array_equal(
                grid[mm, p],
                params.space_pos.array[p] + params.time_pos.array[mm])


def test_capacity_exceeded_raises():
    cfg, params = tiny_setup()
    params.time_pos = Tensor(params.time_pos.array[:2], requires_grad=True)
    with pytest.raises(TemporalCapacityError, match="expand"):
        V.add_positional_and_cls(Tensor(np.zeros((3, cfg.n_patches, cfg.dim))), params)


# ---------------------------------------------------------------------------
# block semantics


def seq_for(cfg, params, clip):
    tokens = V.patch_embed(clip, params, cfg)
    return V.add_positional_and_cls(tokens, params)


def test_single_frame_styles_coincide():
    cfg, params = tiny_setup(seed=3)
    clip = random_clip(SeededRng(7), 1, cfg)
    x = seq_for(cfg, params, clip)
    a = V.spacetime_block(x, params.blocks[0], cfg, 1, style="original_divided")
    b = V.spacetime_block(x, params.blocks[0], cfg, 1, style="frozen_modified")
    np.testing.assert_allclose(a.array, b.array, atol=1e-12)


def test_zero_temporal_block_matches_per_frame_oracle():
    # temporal output projection is zero by init, so the frozen block must
    # equal an independent per-frame spatial-only block on patch tokens
    cfg, params = tiny_setup(seed=4)
    params.time_pos.array[:] = 0.0
    m = 3
    clip = random_clip(SeededRng(8), m, cfg)
    x = seq_for(cfg, params, clip)
    out = V.spacetime_block(x, params.blocks[0], cfg, m, style="frozen_modified")

    from oracles import register_heads, spatial_only_block
    register_heads(params, cfg.heads)
    seq = x.array
    n = cfg.n_patches
    for mm in range(m):
        frame_seq = np.concatenate(
            [seq[:1], seq[1 + mm * n:1 + (mm + 1) * n]], axis=0)
        ref = spatial_only_block(frame_seq, params.blocks[0])
        np.testing.assert_allclose(
            out.array[1 + mm * n:1 + (mm + 1) * n], ref[1:], atol=1e-10)


def test_styles_differ_once_temporal_projection_nonzero():
    cfg, params = tiny_setup(seed=5)
    blk = params.blocks[0]
    blk.time_attn.wo.array[:] = SeededRng(6).normal((cfg.dim, cfg.dim))
    m = 2
    x = seq_for(cfg, params, random_clip(SeededRng(9), m, cfg))
    a = V.spacetime_block(x, blk, cfg, m, style="original_divided")
    b = V.spacetime_block(x, blk, cfg, m, style="frozen_modified")
    assert np.abs(a.array - b.array).max() > 1e-6


def test_unknown_style_rejected():
    cfg, params = tiny_setup()
    x = seq_for(cfg, params, random_clip(SeededRng(2), 1, cfg))
    with pytest.raises(ConfigError):
        V.spacetime_block(x, params.blocks[0], cfg, 1, style="full")


def test_block_gradients():
    cfg, params = tiny_setup(seed=10)
    clip = random_clip(SeededRng(11), 2, cfg)
    blk = params.blocks[0]
    # full-scale temporal weights: the zero-init path would carry vanishing
    # gradients and drown the check in finite-difference noise
    noise = SeededRng(12)
    for wname in ("wq", "wk", "wv", "wo"):
        getattr(blk.time_attn, wname).array[:] = noise.normal((cfg.dim, cfg.dim)) * 0.5
    w = T.tensor(SeededRng(13).normal((2 * cfg.n_patches + 1, cfg.dim)))

    def f():
        x = seq_for(cfg, params, clip)
        out = V.spacetime_block(x, blk, cfg, 2)
        return T.sum_all(T.mul(out, w))

    subset = {
        "time.wq": blk.time_attn.wq,
        "time.wo": blk.time_attn.wo,
        "space.wv": blk.space_attn.wv,
        "space.bo": blk.space_attn.bo,
        "mlp.w1": blk.mlp.w1,
        "norm_time.gamma": blk.norm_time.gamma,
        "norm_space.beta": blk.norm_space.beta,
        "patch.weight": params.patch_weight,
        "space_pos": params.space_pos,
        "time_pos": params.time_pos,
        "cls": params.cls_token,
    }
    # h=1e-5 keeps central-difference rounding noise below the composite
    # tolerance; each op is separately checked at 1e-6 in test_tensor
    report = T.grad_check(f, subset, h=1e-5, tol=1e-4)
    assert report.passed, report


# ---------------------------------------------------------------------------
# full encoder


def test_encode_video_shape_and_batch_consistency():
    cfg, params = tiny_setup(seed=20)
    clip = random_clip(SeededRng(21), 2, cfg)
    single = V.encode_video(clip, params, cfg)
    assert single.shape == (cfg.dim,)
    batched = V.encode_videos(T.reshape(clip, (1,) + clip.shape), params, cfg)
    np.testing.assert_array_equal(single.array, batched.array[0])


def test_frame_permutation_changes_embedding():
    cfg, params = tiny_setup(seed=22)
    rng = SeededRng(23)
    clip = random_clip(rng, 2, cfg)
    swapped = Tensor(clip.array[::-1].copy())
    a = V.encode_video(clip, params, cfg)
    b = V.encode_video(swapped, params, cfg)
    assert np.abs(a.array - b.array).max() > 1e-8


def test_identical_frames_equal_single_frame_embedding():
    # zero temporal init + zero time_pos: an M-frame clip of one repeated
    # frame must embed exactly like the frame alone
    cfg, params = tiny_setup(seed=24)
    params.time_pos.array[:] = 0.0
    frame = SeededRng(25).uniform((1, 3, cfg.height, cfg.width))
    clip = Tensor(np.repeat(frame, 4, axis=0))
    multi = V.encode_video(clip, params, cfg)
    one = V.encode_video(Tensor(frame), params, cfg)
    np.testing.assert_allclose(multi.array, one.array, atol=1e-10)


def test_full_encoder_matches_per_frame_oracle_at_zero_init():
    cfg, params = tiny_setup(seed=26)
    params.time_pos.array[:] = 0.0
    m = 3
    clip = random_clip(SeededRng(27), m, cfg)
    tokens = V.forward_video_tokens(T.reshape(clip, (1,) + clip.shape), params, cfg)
    cls_rows, patch_rows = per_frame_encoder_oracle(clip.array, params, cfg,
                                                    share_cls=True)
    got = tokens.array[0, 1:].reshape(m, cfg.n_patches, cfg.dim)
    np.testing.assert_allclose(got, patch_rows, atol=1e-10)
    np.testing.assert_allclose(tokens.array[0, 0], cls_rows[0], atol=1e-10)


def test_temporal_score_count_scales_quadratically():
    cfg, params = tiny_setup(seed=28)
    rng = SeededRng(29)

    def scores_for(m):
        COUNTERS.reset()
        V.encode_video(random_clip(rng, m, cfg), params, cfg)
        return COUNTERS.temporal_scores

    s2, s4 = scores_for(2), scores_for(4)
    assert s4 == 4 * s2


# ---------------------------------------------------------------------------
# temporal expansion


@pytest.mark.parametrize("method", ["zero_pad", "nearest", "bilinear"])
def test_expansion_identity_when_sizes_match(method):
    e = Tensor(SeededRng(30).normal((3, 4)), requires_grad=True)
    out = V.expand_temporal_embeddings(e, 3, method)
    np.testing.assert_array_equal(out.array, e.array)
    assert out.requires_grad


def test_zero_pad_hand_case():
    e = Tensor(np.array([[1.0, 1.0], [2.0, 2.0]]))
    out = V.expand_temporal_embeddings(e, 4, "zero_pad")
    np.testing.assert_array_equal(
        out.array, [[1, 1], [2, 2], [0, 0], [0, 0]])


def test_bilinear_hand_case():
    e = Tensor(np.array([[1.0], [3.0]]))
    out = V.expand_temporal_embeddings(e, 3, "bilinear")
    np.testing.assert_allclose(out.array, [[1.0], [2.0], [3.0]], atol=1e-15)


def test_nearest_hand_case():
    e = Tensor(np.array([[1.0], [2.0]]))
    out = V.expand_temporal_embeddings(e, 4, "nearest")
    np.testing.assert_array_equal(out.array, [[1.0], [1.0], [2.0], [2.0]])


@pytest.mark.parametrize("method", ["nearest", "bilinear"])
def test_interpolation_preserves_integer_coordinates(method):
    # m-1 divides M-1, so source rows reappear exactly at their mapped slots
    e = Tensor(SeededRng(31).normal((3, 5)))
    out = V.expand_temporal_embeddings(e, 5, method)
    np.testing.assert_array_equal(out.array[0], e.array[0])
    np.testing.assert_array_equal(out.array[2], e.array[1])
    np.testing.assert_array_equal(out.array[4], e.array[2])


def test_expansion_refuses_to_shrink():
    e = Tensor(np.zeros((4, 2)))
    with pytest.raises(ContractError):
        V.expand_temporal_embeddings(e, 2, "zero_pad")


def test_expansion_unknown_method():
    with pytest.raises(ConfigError):
        V.expand_temporal_embeddings(Tensor(np.zeros((2, 2))), 4, "cubic")


def test_single_source_row_maps_to_that_row():
    e = Tensor(np.array([[7.0, 7.0]]))
    for method in ("nearest", "bilinear"):
        out = V.expand_temporal_embeddings(e, 3, method)
        np.testing.assert_array_equal(out.array, np.full((3, 2), 7.0))
