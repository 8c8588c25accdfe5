import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from avatarkit.checkpoint import CheckpointError
from avatarkit.neural_renderer import (AudioEncoder, FrameInputs, NeuralRenderer, RandomFeatureExtractor,
                                       RendererClip, RendererConfig, RendererError, RendererNetwork,
                                       TextureNetwork, assemble_renderer_input, blend, channel_layout,
                                       combine_renderer_loss, disc_footprint, expand_mask, load_renderer,
                                       neighbor_offsets, perceptual_loss, renderer_loss, save_renderer,
                                       texture_forward, texture_raster, train_renderer)

TINY = dict(W=2, N_a=8, audio_hidden=8, texture_hidden=16, texture_layers=2, unet_base=4, unet_depth=2,
            disc_base=4)


def disc_mask(res, radius):
    c = np.arange(res) + 0.5 - res / 2
    return (c[:, None] ** 2 + c[None, :] ** 2 <= radius ** 2).astype(np.float64)


def make_frame(res=32, cfg=None, seed=0):
    cfg = cfg or RendererConfig(**TINY)
    rng = np.random.default_rng(seed)
    alpha = disc_mask(res, res / 4)
    uv = rng.uniform(0, 1, (res, res, 2)) * alpha[..., None]
    return FrameInputs(torch.as_tensor(uv), torch.as_tensor(alpha),
                       [torch.as_tensor(uv) for _ in range(cfg.W_R)], torch.as_tensor(rng.uniform(0, 1, (res, res, 3))),
                       torch.as_tensor(rng.dirichlet(np.ones(cfg.n_phonemes), 2 * cfg.W)))


def make_clip(n=4, res=32, cfg=None, seed=0):
    cfg = cfg or RendererConfig(**TINY)
    rng = np.random.default_rng(seed)
    alpha = np.stack([disc_mask(res, res / 4 + i % 2) for i in range(n)])
    uv = rng.uniform(0, 1, (n, res, res, 2)) * alpha[..., None]
    frames = rng.uniform(0, 1, (n, res, res, 3))
    return RendererClip(uv, alpha, frames, rng.dirichlet(np.ones(cfg.n_phonemes), 2 * n))


# --------------------------------------------------------------------------- audio encoder


def test_zero_window_through_zeroed_output_layer():
    enc = AudioEncoder(W=4, n_out=8)
    with torch.no_grad():
        enc.out.weight.zero_()
        enc.out.bias.zero_()
    assert torch.equal(enc(torch.zeros(8, 50)), torch.zeros(8))


def test_encoder_separates_single_entry_change():
    torch.manual_seed(0)
    enc = AudioEncoder(W=4, n_out=8).double()
    w = torch.rand(8, 50, dtype=torch.float64)
    w2 = w.clone()
    w2[3, 17] += 0.1
    assert not torch.equal(enc(w), enc(w2))


def test_encoder_window_shape_checked():
    with pytest.raises(RendererError, match="2W"):
        AudioEncoder(W=4)(torch.zeros(7, 50))


def test_boundary_window_matches_interior_on_constant_stream():
    cfg = RendererConfig(**TINY)
    torch.manual_seed(0)
    model = NeuralRenderer(cfg)
    clip = make_clip(6)
    clip.phonemes[:] = clip.phonemes[0]
    first = model.encode(clip.frame_inputs(0, cfg).window[None])
    middle = model.encode(clip.frame_inputs(3, cfg).window[None])
    assert torch.equal(first, middle)


# --------------------------------------------------------------------------- texture


def test_texture_resolution_independence_is_exact():
    torch.manual_seed(0)
    net = TextureNetwork(8, 16, 2)
    a_enc = torch.randn(8)
    outs = []
    for res in (64, 256):
        uv = torch.rand(res, res, 2)
        uv[res // 3, res // 5] = torch.tensor([0.3, 0.7])
        alpha = torch.ones(res, res)
        outs.append(texture_raster(net, uv, alpha, a_enc)[res // 3, res // 5])
    assert outs[0].shape == (16,)
    assert torch.equal(outs[0], outs[1])


@given(st.integers(1, 1500), st.integers(0, 1499))
def test_query_result_independent_of_batch(n, k):
    k = k % n
    torch.manual_seed(1)
    net = TextureNetwork(4, 8, 2)
    uv = torch.rand(n, 2, generator=torch.Generator().manual_seed(n))
    a = torch.ones(4)
    assert torch.equal(texture_forward(net, uv, a)[k], texture_forward(net, uv[k:k + 1], a)[0])


def test_texture_depends_on_audio_code():
    torch.manual_seed(0)
    net = TextureNetwork(8, 16, 2)
    uv = torch.rand(100, 2)
    delta = (texture_forward(net, uv, torch.zeros(8)) - texture_forward(net, uv, torch.ones(8))).abs().mean()
    assert delta > 0


def test_texture_raster_zero_outside_alpha():
    net = TextureNetwork(4, 8, 2)
    alpha = torch.as_tensor(disc_mask(16, 4))
    tex = texture_raster(net, torch.rand(16, 16, 2), alpha, torch.zeros(4))
    assert tex.shape == (16, 16, 16) and torch.all(tex[alpha == 0] == 0)


# --------------------------------------------------------------------------- masks and blending


def test_expand_mask_examples():
    a = np.zeros((5, 5))
    a[2, 2] = 1
    assert np.array_equal(expand_mask(a, 0), a)
    # d=1 uses the 4-neighbourhood
    plus = np.array([[0, 0, 0, 0, 0], [0, 0, 1, 0, 0], [0, 1, 1, 1, 0], [0, 0, 1, 0, 0], [0, 0, 0, 0, 0]])
    assert np.array_equal(expand_mask(a, 1), plus)
    assert np.array_equal(expand_mask(np.ones((6, 6)), 3), np.ones((6, 6)))
    assert disc_footprint(2).sum() == 13
    with pytest.raises(RendererError):
        expand_mask(a, -1)


@given(st.integers(0, 4), st.integers(0, 2 ** 31))
def test_expand_mask_contains_alpha(d, seed):
    a = (np.random.default_rng(seed).uniform(size=(12, 12)) > 0.8).astype(float)
    grown = expand_mask(torch.as_tensor(a), d)
    assert torch.all(grown >= torch.as_tensor(a))


def test_blend_trivial_cases():
    r, v = torch.rand(4, 4, 3), torch.rand(4, 4, 3)
    one, zero = torch.ones(4, 4), torch.zeros(4, 4)
    assert torch.equal(blend(r, v, one, one), r)
    assert torch.equal(blend(r, v, zero, zero), v)
    with pytest.raises(RendererError):
        blend(r, v[:3], one, one)


def test_blend_three_region_partition():
    res = 12
    alpha = disc_mask(res, 3)
    alpha_exp = expand_mask(alpha, 2)
    r = torch.rand(res, res, 3, dtype=torch.float64)
    v = torch.rand(res, res, 3, dtype=torch.float64)
    out = blend(r, v, torch.as_tensor(alpha), torch.as_tensor(alpha_exp))
    for i in range(res):
        for j in range(res):
            expected = r[i, j] if alpha[i, j] else (torch.zeros(3) if alpha_exp[i, j] else v[i, j])
            assert torch.equal(out[i, j], expected.double())
    assert 0 < (alpha_exp - alpha).sum()


# --------------------------------------------------------------------------- input assembly


@pytest.mark.parametrize("W_R,channels", [(0, 19), (1, 21), (2, 23), (4, 27)])
def test_channel_arithmetic(W_R, channels):
    cfg = RendererConfig(**dict(TINY, W_R=W_R))
    x = assemble_renderer_input(torch.zeros(8, 8, 16), [torch.zeros(8, 8, 2)] * W_R, torch.zeros(8, 8, 3), W_R)
    assert x.shape[-1] == channels == cfg.in_channels == len(channel_layout(W_R))


def test_neighbor_order():
    assert neighbor_offsets(4) == [-1, 1, -2, 2]
    assert neighbor_offsets(3) == [-1, 1, -2]


def test_assembly_errors():
    with pytest.raises(RendererError):
        assemble_renderer_input(torch.zeros(8, 8, 16), [torch.zeros(8, 8, 2)], torch.zeros(8, 8, 3), 2)
    with pytest.raises(RendererError):
        assemble_renderer_input(torch.zeros(8, 8, 15), [], torch.zeros(8, 8, 3))
    with pytest.raises(RendererError):
        assemble_renderer_input(torch.zeros(8, 8, 16), [torch.zeros(4, 4, 2)], torch.zeros(8, 8, 3))


def test_checkpoint_rejects_other_channel_layout(tmp_path):
    cfg = RendererConfig(**TINY)
    path = save_renderer(tmp_path / "r.ckpt", NeuralRenderer(cfg))
    load_renderer(path, channel_layout(cfg.W_R))
    shuffled = channel_layout(cfg.W_R)
    shuffled[16], shuffled[18] = shuffled[18], shuffled[16]
    with pytest.raises(CheckpointError):
        load_renderer(path, shuffled)


# --------------------------------------------------------------------------- renderer network


def test_zero_weight_network_outputs_half_inside_and_background_outside():
    cfg = RendererConfig(**TINY)
    model = NeuralRenderer(cfg).double()
    with torch.no_grad():
        for p in model.renderer.parameters():
            p.zero_()
        model.renderer.head.bias.fill_(0.5)
    f = make_frame(32, cfg)
    out = model([f])[0]
    inside = out.alpha_exp > 0.5
    assert torch.all(out.frame[inside] == 0.5)
    assert torch.equal(out.frame[~inside], f.real[~inside])


@pytest.mark.parametrize("res", [64, 128, 256])
def test_output_resolution_matches_input(res):
    net = RendererNetwork(19, base=4, depth=2)
    assert net(torch.zeros(1, 19, res, res)).shape == (1, 3, res, res)


def test_audio_changes_face_but_not_background():
    cfg = RendererConfig(**TINY)
    torch.manual_seed(0)
    model = NeuralRenderer(cfg).double()
    f = make_frame(32, cfg)
    w = f.window.clone().requires_grad_()
    f.window = w
    out = model([f])[0]
    alpha = f.alpha > 0.5
    grad, = torch.autograd.grad(out.raw[alpha].sum(), w)
    assert grad.abs().max() > 0
    g = make_frame(32, cfg)
    g.window = g.window.clone()
    g.window[0, 5] += 0.2
    out2 = model([g])[0]
    outside = out.alpha_exp < 0.5
    assert torch.equal(out.frame.detach()[outside], out2.frame[outside])
    assert not torch.equal(out.raw.detach()[alpha], out2.raw[alpha])


# --------------------------------------------------------------------------- losses and training


def test_renderer_loss_examples():
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    ext = RandomFeatureExtractor(seed=3).double()
    total, parts = renderer_loss(x, x.clone(), torch.ones(1, 1, 2, 2, dtype=torch.float64), ext)
    assert total.item() == 0.0 and parts["perc"].item() == 0.0
    assert combine_renderer_loss(0.2, 0.3, 0.5) == pytest.approx(0.505, abs=1e-15)
    for seed in (0, 1):
        assert perceptual_loss(x, x.clone(), RandomFeatureExtractor(seed=seed).double()).item() == 0.0


def test_training_without_adversary_logs_zero_gan():
    cfg = RendererConfig(**dict(TINY, lambda_gan=0.0, epochs=1, batch_size=2, lr=1e-3))
    res = train_renderer([make_clip()], cfg, seed=0)
    assert res.curves and all(c["gan"] == 0.0 and c["disc"] == 0.0 for c in res.curves)


def test_seeded_training_is_bitwise_repeatable(tmp_path):
    cfg = RendererConfig(**dict(TINY, epochs=1, batch_size=2, lr=1e-3))
    a = train_renderer([make_clip()], cfg, seed=4, out_dir=tmp_path)
    b = train_renderer([make_clip()], cfg, seed=4)
    assert a.curves == b.curves
    loaded = load_renderer(a.checkpoints[0])
    for p, q in zip(loaded.parameters(), a.model.parameters()):
        assert torch.equal(p, q)


def test_clip_length_mismatch_rejected():
    c = make_clip()
    with pytest.raises(RendererError):
        RendererClip(c.uv, c.alpha[:2], c.frames, c.phonemes)
