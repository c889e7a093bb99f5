import numpy as np
import pytest

from famseg import functional as F
from famseg.encoder import (
    AggregatedDepthConv,
    Encoder,
    EncoderConfig,
    Hamburger,
    ResidualBlock,
    ResidualBlockSpec,
    StripBlock,
    StripBlockSpec,
    aggregated_depth_conv,
    encoder_forward,
    hamburger_enhance,
    nmf_multiplicative,
    residual_block_forward,
    strip_block_forward,
    strip_param_count,
)
from famseg.tensor import ShapeError, Tensor, grad
from oracles import naive_conv2d


def test_strip_param_count_worked_values():
    assert strip_param_count(7, 1, 1) == (49, 14)
    assert strip_param_count(3, 1, 1) == (9, 6)
    assert 2 * 1 * 1 * 9 == 18
    assert strip_param_count(7, 8, 8) == (3136, 896)


@pytest.mark.parametrize("k", [3, 5, 7, 9, 11, 21, 31])
def test_strips_are_cheaper_than_square_kernels(k):
    for ho, wo in [(1, 1), (4, 7), (16, 16)]:
        standard, ours = strip_param_count(k, ho, wo)
        assert ours < standard
        assert ours * k == 2 * standard


def test_strip_spec_rejects_even_kernels():
    with pytest.raises(ValueError):
        StripBlockSpec(8, (7, 4))


def test_zero_weights_with_identity_mix_give_zero(rng):
    spec = StripBlockSpec(4)
    block = StripBlock(spec, rng)
    for p in block.parameters():
        p.data[:] = 0.0
    block.mix.data[:] = np.eye(4)[:, :, None, None]
    out = strip_block_forward(Tensor(rng.normal(size=(1, 4, 8, 8))), spec, block)
    assert np.all(out.data == 0)


def test_strip_block_preserves_shape(rng):
    spec = StripBlockSpec(32)
    out = StripBlock(spec, rng)(Tensor(rng.normal(size=(1, 32, 16, 16))))
    assert out.shape == (1, 32, 16, 16)


def test_strip_block_impulse_response_is_a_cross(rng):
    spec = StripBlockSpec(2)
    block = StripBlock(spec, rng)
    x = np.zeros((1, 2, 15, 15))
    x[0, :, 7, 7] = 1.0
    out = block(Tensor(x)).data

    # oracle: compose loop convolutions by hand
    stem = naive_conv2d(x, block.stem.data, padding=2, groups=2)
    wh = block.horizontal[0].data.reshape(2, 1, 1, 7)
    wv = block.vertical[0].data.reshape(2, 1, 7, 1)
    h = np.stack([naive_conv2d(np.pad(stem[:, c : c + 1], ((0, 0), (0, 0), (0, 0), (3, 3))), wh[c : c + 1])[:, 0]
                  for c in range(2)], 1)
    v = np.stack([naive_conv2d(np.pad(stem[:, c : c + 1], ((0, 0), (0, 0), (3, 3), (0, 0))), wv[c : c + 1])[:, 0]
                  for c in range(2)], 1)
    ref = naive_conv2d(stem + h + v, block.mix.data)
    assert np.max(np.abs(out - ref)) <= 1e-12
    # support: 5x5 stem widened by 3 along each axis separately, so the corners stay empty
    support = np.any(out[0] != 0, axis=0)
    assert support[7, 2] and support[2, 7] and not support[7, 1] and not support[1, 7]
    assert not support[2, 2] and not support[4, 4]


def test_strip_block_is_linear(rng):
    block = StripBlock(StripBlockSpec(4, (3, 7)), rng)
    x = rng.normal(size=(2, 4, 8, 8))
    a = -2.75
    np.testing.assert_allclose(block(Tensor(a * x)).data, a * block(Tensor(x)).data, atol=1e-10)


def test_strip_block_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        StripBlock(StripBlockSpec(4), rng)(Tensor(np.zeros((1, 3, 8, 8))))


# aggregation ---------------------------------------------------------------------


def test_aggregation_single_feature_is_depthwise_then_mix(rng):
    agg = AggregatedDepthConv((4,), 6, rng)
    x = rng.normal(size=(1, 4, 5, 5))
    out = aggregated_depth_conv([Tensor(x)], agg).data
    ref = naive_conv2d(naive_conv2d(x, agg.depthwise.data, padding=1, groups=4), agg.mix.weight.data,
                       agg.mix.bias.data)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_aggregation_two_identical_features_fold_into_one(rng):
    pair = AggregatedDepthConv((3, 3), 5, rng)
    pair.depthwise.data[3:] = pair.depthwise.data[:3]
    single = AggregatedDepthConv((3,), 5, rng)
    single.depthwise.data[:] = pair.depthwise.data[:3]
    single.mix.weight.data[:] = pair.mix.weight.data[:, :3] + pair.mix.weight.data[:, 3:]
    single.mix.bias.data[:] = pair.mix.bias.data
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    np.testing.assert_allclose(pair([x, x]).data, single([x]).data, atol=1e-12)


def test_aggregation_resamples_to_smallest_map(rng):
    agg = AggregatedDepthConv((160, 256), 256, rng)
    out = agg([Tensor(rng.normal(size=(1, 160, 8, 8))), Tensor(rng.normal(size=(1, 256, 4, 4)))])
    assert out.shape == (1, 256, 4, 4)


def test_aggregation_rejects_empty(rng):
    with pytest.raises(ValueError):
        AggregatedDepthConv((4,), 4, rng)([])


# hamburger -----------------------------------------------------------------------


def test_nmf_recovers_rank_one_input(rng):
    u = rng.uniform(0.5, 2.0, size=(6, 1))
    v = rng.uniform(0.5, 2.0, size=(1, 10))
    X = Tensor((u @ v)[None])
    recon = nmf_multiplicative(X, 1, 20).data
    assert np.linalg.norm(recon - X.data) <= 1e-3 * np.linalg.norm(X.data)


@pytest.mark.parametrize("seed", range(5))
def test_nmf_residual_never_increases(seed):
    rng = np.random.default_rng(seed)
    X = Tensor(np.abs(rng.normal(size=(2, 8, 12))))
    record = []
    nmf_multiplicative(X, 3, 15, record=record)
    assert len(record) == 15
    assert all(b <= a * (1 + 1e-12) for a, b in zip(record, record[1:]))


def test_nmf_rejects_bad_rank(rng):
    with pytest.raises(ValueError):
        nmf_multiplicative(Tensor(np.ones((1, 3, 3))), 0, 3)
    with pytest.raises(ValueError):
        hamburger_enhance(Tensor(np.ones((1, 3, 2, 2))), 0, 3, None)


def test_hamburger_off_is_identity(rng):
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    ham = Hamburger(4, rng, enabled=False)
    assert ham(x) is x
    assert ham.num_parameters() == 0


def test_hamburger_output_is_projection_of_x_plus_reconstruction(rng):
    ham = Hamburger(4, rng, rank=2, iters=5)
    x = rng.normal(size=(1, 4, 3, 3))
    X = np.maximum(x, 0).reshape(1, 4, 9)
    recon = nmf_multiplicative(Tensor(X), 2, 5).data.reshape(1, 4, 3, 3)
    ref = naive_conv2d(x + recon, ham.proj.weight.data, ham.proj.bias.data)
    np.testing.assert_allclose(ham(Tensor(x)).data, ref, atol=1e-12)


# residual blocks -------------------------------------------------------------------


def test_zero_main_path_bottle_block_is_identity(rng):
    spec = ResidualBlockSpec(8, 2, 8, "bottle_block", 1, "identity")
    block = ResidualBlock(spec, rng)
    block.expand.weight.data[:] = 0.0
    block.expand.bias.data[:] = 0.0
    x = rng.normal(size=(1, 8, 4, 4))
    np.testing.assert_array_equal(residual_block_forward(Tensor(x), spec, block).data, x)


def test_convolution_block_halves_resolution(rng):
    spec = ResidualBlockSpec(64, 32, 128, "convolution_block", 2)
    out = ResidualBlock(spec, rng)(Tensor(rng.normal(size=(1, 64, 16, 16))))
    assert out.shape == (1, 128, 8, 8)


@pytest.mark.parametrize("kind,stride,filt,cin,cout", [
    ("convolution_block", 1, "identity", 4, 8),
    ("convolution_block", 2, "mamba", 4, 8),
    ("bottle_block", 2, "identity", 8, 8),
    ("bottle_block", 1, "identity", 4, 8),
    ("bottle_block", 1, "bogus", 8, 8),
    ("other", 1, "identity", 8, 8),
])
def test_residual_spec_invariants(kind, stride, filt, cin, cout):
    with pytest.raises(ValueError):
        ResidualBlockSpec(cin, 2, cout, kind, stride, filt)


@pytest.mark.parametrize("filt", ["identity", "mamba"])
def test_gradient_flows_through_shortcut_with_dead_main_path(rng, filt):
    spec = ResidualBlockSpec(8, 2, 8, "bottle_block", 1, filt)
    block = ResidualBlock(spec, rng, {"state_dim": 4})
    for p in block.reduce.parameters():
        p.data[:] = 0.0
    for p in block.expand.parameters():
        p.data[:] = 0.0
    x = Tensor(rng.normal(size=(1, 8, 4, 4)), requires_grad=True)
    (gx,) = grad(block(x).sum(), [x])
    assert np.abs(gx).max() > 0
    if filt == "identity":
        np.testing.assert_array_equal(gx, np.ones_like(gx))


# encoder --------------------------------------------------------------------------


def test_encoder_stage_shapes_default(rng):
    cfg = EncoderConfig()
    enc = Encoder(cfg, rng)
    stages = encoder_forward(Tensor(rng.uniform(size=(1, 3, 64, 64))), cfg, enc)
    assert [s.shape for s in stages] == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 160, 4, 4), (1, 256, 2, 2)]


@pytest.mark.parametrize("hw", [(32, 32), (64, 96), (96, 32)])
def test_encoder_strides_are_4_8_16_32(hw, rng):
    cfg = EncoderConfig(stage_channels=(8, 8, 16, 16), stage_depths=(1, 1, 1, 2), mamba_state=4)
    stages = Encoder(cfg, rng)(Tensor(rng.uniform(size=(1, 3) + hw)))
    for s, stride in zip(stages, (4, 8, 16, 32)):
        assert s.shape[2:] == (hw[0] // stride, hw[1] // stride)


def test_encoder_rejects_indivisible_size(rng):
    enc = Encoder(EncoderConfig(stage_channels=(8, 8, 16, 16)), rng)
    with pytest.raises(ShapeError, match="32"):
        enc(Tensor(np.zeros((1, 3, 48, 40))))


def test_encoder_is_deterministic_per_seed():
    cfg = EncoderConfig(stage_channels=(8, 8, 16, 16), mamba_state=4)
    x = Tensor(np.random.default_rng(5).uniform(size=(1, 3, 32, 32)))
    a = Encoder(cfg, np.random.default_rng(3))(x)
    b = Encoder(cfg, np.random.default_rng(3))(x)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.data, sb.data)


def test_mamba_off_builds_plain_residual_encoder(rng):
    on = Encoder(EncoderConfig(stage_channels=(8, 8, 16, 16), mamba_state=4), np.random.default_rng(0))
    off = Encoder(EncoderConfig(stage_channels=(8, 8, 16, 16), mamba=False), np.random.default_rng(0))
    names_on = {n for n, _ in on.named_parameters()}
    names_off = {n for n, _ in off.named_parameters()}
    assert any(".filter." in n for n in names_on)
    assert not any(".filter." in n for n in names_off)
    assert names_off < names_on
    for block in off.stage3[1:] + off.stage4[1:]:
        assert block.spec.shortcut_filter == "identity"


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(stage_channels=(8, 8, 16))
    with pytest.raises(ValueError):
        EncoderConfig(fuse_last_n=5)
    with pytest.raises(ValueError):
        EncoderConfig(branch_kernels=(6,))


def test_multi_scale_branch_set(rng):
    cfg = EncoderConfig(stage_channels=(8, 8, 16, 16), branch_kernels=(7, 11, 21), mamba_state=4)
    enc = Encoder(cfg, rng)
    assert len(enc.stage1[0].block.horizontal) == 3
    stages = enc(Tensor(rng.uniform(size=(1, 3, 64, 64))))
    assert stages[0].shape == (1, 8, 16, 16)


def test_nearest_downsample_matches_slicing(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    np.testing.assert_array_equal(F.nearest_downsample(Tensor(x), 2).data, x[:, :, ::2, ::2])
