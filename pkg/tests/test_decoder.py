import numpy as np
import pytest
import torch

from sentseg.decoder import (
    DeconvBlock,
    Decoder,
    FilterHead,
    predict_mask,
    validate_resolutions,
)
from sentseg.errors import ConfigError
from sentseg.videoenc import coordinate_channels


def loop_transposed_conv(x, weight, bias):
    """Reference: scatter every input position into the stride-4 output, crop padding 2."""
    c_in, r, _ = x.shape
    c_out = weight.shape[1]
    full = np.zeros((c_out, 4 * r + 4, 4 * r + 4))
    for ci in range(c_in):
        for i in range(r):
            for j in range(r):
                for co in range(c_out):
                    for di in range(8):
                        for dj in range(8):
                            full[co, 4 * i + di, 4 * j + dj] += (
                                x[ci, i, j] * weight[ci, co, di, dj]
                            )
    out = full[:, 2:4 * r + 2, 2:4 * r + 2]
    return out + bias[:, None, None]


def loop_conv2d_pad1(x, weight, bias):
    c_out, c_in, _, _ = weight.shape
    r = x.shape[1]
    xp = np.pad(x, [(0, 0), (1, 1), (1, 1)])
    out = np.zeros((c_out, r, r))
    for co in range(c_out):
        for i in range(r):
            for j in range(r):
                acc = bias[co]
                for ci in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            acc += weight[co, ci, di, dj] * xp[ci, i + di, j + dj]
                out[co, i, j] = acc
    return out


def test_validate_resolutions():
    assert validate_resolutions([4, 16, 64]) == (4, 16, 64)
    assert validate_resolutions((2,)) == (2,)
    with pytest.raises(ConfigError):
        validate_resolutions([4, 8])
    with pytest.raises(ConfigError):
        validate_resolutions([])
    with pytest.raises(ConfigError):
        validate_resolutions([0, 0])


def test_deconv_upsample_matches_scatter_oracle():
    gen = torch.Generator().manual_seed(2)
    block = DeconvBlock(2, 3, gen).double()
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 3))
    got = block.upsample_pre(torch.from_numpy(x).unsqueeze(0)).squeeze(0).detach().numpy()
    want = loop_transposed_conv(x, block.up_weight.detach().numpy(),
                                block.up_bias.detach().numpy())
    assert got.shape == (3, 12, 12)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_deconv_refine_matches_loop_oracle():
    gen = torch.Generator().manual_seed(3)
    block = DeconvBlock(2, 3, gen).double()
    rng = np.random.default_rng(5)
    h = rng.standard_normal((3, 4, 4))
    got = block.refine_pre(torch.from_numpy(h).unsqueeze(0)).squeeze(0).detach().numpy()
    want = loop_conv2d_pad1(h, block.conv_weight.detach().numpy(),
                            block.conv_bias.detach().numpy())
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_deconv_forward_is_relu_of_both_stages():
    gen = torch.Generator().manual_seed(4)
    block = DeconvBlock(2, 2, gen).double()
    x = torch.randn(1, 2, 2, 2, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(0))
    h = torch.relu(block.upsample_pre(x))
    want = torch.relu(block.refine_pre(h))
    assert torch.equal(block(x), want)
    assert block(x).shape == (1, 2, 8, 8)


def test_filter_head_is_tanh_affine():
    gen = torch.Generator().manual_seed(5)
    head = FilterHead(4, 6, gen)
    t = torch.randn(2, 4, generator=torch.Generator().manual_seed(1))
    got = head(t).detach().numpy()
    want = np.tanh(t.numpy() @ head.weight.detach().numpy().T + head.bias.detach().numpy())
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)
    assert np.all(np.abs(got) < 1.0)
    with pytest.raises(ConfigError):
        head(torch.zeros(2, 5))


def make_decoder(resolutions=(4, 16), base=5, deconv=(4,), text_dim=3, seed=0):
    return Decoder(resolutions, base, deconv, text_dim,
                   torch.Generator().manual_seed(seed))


def test_build_pyramid_levels_norms_and_coords():
    dec = make_decoder()
    grid = torch.rand(2, 7, 4, 4, generator=torch.Generator().manual_seed(2))
    pyramid = dec.build_pyramid(grid)
    assert set(pyramid) == {4, 16}
    assert torch.equal(pyramid[4], grid)
    assert pyramid[16].shape == (2, 6, 16, 16)
    feats = pyramid[16][:, :4]
    norms = feats.square().sum(dim=1).sqrt()
    on = norms > 0
    np.testing.assert_allclose(norms[on].detach().numpy(), 1.0, atol=1e-6)
    coords = coordinate_channels(16).permute(2, 0, 1)
    assert torch.equal(pyramid[16][0, 4:], coords)


def test_build_pyramid_validates_grid():
    dec = make_decoder()
    with pytest.raises(ConfigError):
        dec.build_pyramid(torch.zeros(1, 6, 4, 4))  # wrong channel count
    with pytest.raises(ConfigError):
        dec.build_pyramid(torch.zeros(1, 7, 8, 8))  # wrong base resolution
    with pytest.raises(ConfigError):
        dec.build_pyramid(torch.zeros(7, 4, 4))  # missing batch dim


def test_decoder_config_validation():
    with pytest.raises(ConfigError):
        make_decoder(resolutions=(4, 16, 64), deconv=(4,))  # one block short
    with pytest.raises(ConfigError):
        make_decoder(deconv=(0,))


def test_respond_matches_dot_product_oracle():
    dec = make_decoder()
    gen = torch.Generator().manual_seed(3)
    pyramid = {4: torch.rand(2, 7, 4, 4, generator=gen),
               16: torch.rand(2, 6, 16, 16, generator=gen)}
    filters = {4: torch.rand(2, 7, generator=gen),
               16: torch.rand(2, 6, generator=gen)}
    out = dec.respond(pyramid, filters)
    for r in (4, 16):
        v = pyramid[r].numpy()
        f = filters[r].numpy()
        want = np.einsum("bchw,bc->bhw", v, f)
        loops = np.zeros_like(want)
        for b in range(2):
            for i in range(r):
                for j in range(r):
                    loops[b, i, j] = sum(f[b, c] * v[b, c, i, j] for c in range(v.shape[1]))
        np.testing.assert_allclose(want, loops, atol=1e-6)
        np.testing.assert_allclose(out[r].numpy(), loops, atol=1e-5)


def test_respond_rejects_channel_mismatch():
    dec = make_decoder()
    pyramid = {4: torch.zeros(1, 7, 4, 4), 16: torch.zeros(1, 6, 16, 16)}
    filters = {4: torch.zeros(1, 6), 16: torch.zeros(1, 6)}
    with pytest.raises(ConfigError):
        dec.respond(pyramid, filters)


def test_coordinate_selector_filter_reads_off_the_ramp():
    # A filter that is zero except on the x-coordinate channel must return
    # exactly the coordinate ramp, whatever the features are.
    dec = make_decoder()
    gen = torch.Generator().manual_seed(6)
    v = torch.cat([torch.rand(1, 4, 16, 16, generator=gen),
                   coordinate_channels(16).permute(2, 0, 1).unsqueeze(0)], dim=1)
    f = torch.zeros(1, 6)
    f[0, 4] = 1.0
    out = dec.respond({4: torch.zeros(1, 7, 4, 4), 16: v},
                      {4: torch.zeros(1, 7), 16: f})
    np.testing.assert_allclose(out[16][0].numpy(),
                               coordinate_channels(16)[:, :, 0].numpy(), atol=1e-7)


def test_response_respects_cauchy_schwarz_bound():
    dec = make_decoder(seed=9)
    grid_feats = torch.rand(1, 5, 4, 4, generator=torch.Generator().manual_seed(7))
    from sentseg.videoenc import l2_normalize_positions

    grid = torch.cat([l2_normalize_positions(grid_feats),
                      coordinate_channels(4).permute(2, 0, 1).unsqueeze(0)], dim=1)
    t = torch.randn(1, 3, generator=torch.Generator().manual_seed(8))
    with torch.no_grad():
        responses = dec(t, grid)
        filters = dec.generate_filters(t)
    for r, s in responses.items():
        bound = float(filters[r].norm()) * np.sqrt(3.0) + 1e-6
        assert float(s.abs().max()) <= bound


def test_generate_filters_accepts_single_vector():
    dec = make_decoder()
    single = dec.generate_filters(torch.zeros(3))
    assert single[4].shape == (1, 7)
    assert single[16].shape == (1, 6)


def test_forward_shapes():
    dec = make_decoder()
    t = torch.randn(2, 3, generator=torch.Generator().manual_seed(4))
    grid = torch.rand(2, 7, 4, 4, generator=torch.Generator().manual_seed(5))
    out = dec(t, grid)
    assert out[4].shape == (2, 4, 4)
    assert out[16].shape == (2, 16, 16)


def test_predict_mask_threshold_is_strict():
    s = np.array([[-1.0, 0.0], [1e-9, 2.0]])
    mask = predict_mask(s)
    assert mask.dtype == np.uint8
    assert mask.tolist() == [[0, 0], [1, 1]]
    assert predict_mask(torch.from_numpy(s)).tolist() == [[0, 0], [1, 1]]


def test_decoder_init_reproducible():
    a = make_decoder(seed=3)
    b = make_decoder(seed=3)
    assert torch.equal(a.blocks[0].up_weight, b.blocks[0].up_weight)
    assert torch.equal(a.heads[1].weight, b.heads[1].weight)
