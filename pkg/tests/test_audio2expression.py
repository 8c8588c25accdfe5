import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from avatarkit.audio2expression import (A2EConfig, A2EDiscriminator, A2EGenerator, A2ESample, a2e_loss,
                                        combine_a2e_loss, group_audio, load_a2e, lsgan_losses, pack_pi_var,
                                        train_a2e, unpack_pi_var, velocity_loss)

SMALL = dict(latent=16, chunk=16, batch_size=4, lr=1e-3)


def toy_samples(n_clips=4, n_frames=20, seed=0):
    cfg = A2EConfig()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_clips):
        mfcc = rng.standard_normal((4 * n_frames, 28))
        label = np.zeros(7)
        label[i % 7] = 1.0
        target = np.zeros((n_frames, cfg.out_dim))
        target[:, 6:14] = 0.3 * np.tanh(mfcc[::4, :8]) + 0.5 * label[0]
        target[:, -1] = 3.0
        out.append(A2ESample(mfcc, label, target, f"c{i}"))
    return out


def test_output_dimension():
    cfg = A2EConfig()
    gen = A2EGenerator(cfg)
    out = gen(torch.zeros(2, 40, 28), torch.zeros(2, 10, 7))
    assert out.shape == (2, 10, 3 * 2 + 8 + 6)


def test_constant_network_emits_decoder_bias():
    gen = A2EGenerator(A2EConfig(latent=8))
    with torch.no_grad():
        for p in gen.parameters():
            p.zero_()
        gen.decoder.bias.copy_(torch.arange(gen.cfg.out_dim, dtype=torch.float32))
    out = gen(torch.randn(3, 24, 28), torch.randn(3, 6, 7))
    assert torch.equal(out, gen.decoder.bias.expand(3, 6, -1))


def test_batch_permutation_equivariance():
    torch.manual_seed(0)
    gen = A2EGenerator(A2EConfig(latent=8)).double()
    a, c = torch.randn(3, 20, 28, dtype=torch.float64), torch.randn(3, 5, 7, dtype=torch.float64)
    perm = torch.tensor([2, 0, 1])
    torch.testing.assert_close(gen(a, c)[perm], gen(a[perm], c[perm]), rtol=0, atol=1e-12)


def test_misaligned_lengths_rejected():
    gen = A2EGenerator(A2EConfig(latent=8))
    with pytest.raises(ValueError, match="MFCC frames"):
        gen(torch.zeros(1, 21, 28), torch.zeros(1, 5, 7))
    with pytest.raises(ValueError):
        group_audio(torch.zeros(1, 19, 28), 5, 4)


def test_discriminator_scores_every_frame():
    disc = A2EDiscriminator(A2EConfig(latent=8))
    s = disc(torch.zeros(2, 5, 20), torch.zeros(2, 20, 28), torch.zeros(2, 5, 7))
    assert s.shape == (2, 5) and torch.isfinite(s).all()


# --------------------------------------------------------------------------- losses


def test_velocity_loss_examples():
    x = torch.randn(10, 4, dtype=torch.float64)
    assert velocity_loss(x, x).item() == 0.0
    assert velocity_loss(torch.full((6, 3), 2.0), torch.full((6, 3), -1.0)).item() == 0.0
    with pytest.raises(ValueError):
        velocity_loss(torch.zeros(1, 3), torch.zeros(1, 3))
    with pytest.raises(ValueError):
        velocity_loss(torch.zeros(4, 3), torch.zeros(5, 3))


@given(st.floats(-5, 5), st.integers(2, 30))
def test_velocity_loss_of_ramp_is_slope(slope, n):
    real = torch.as_tensor(np.random.default_rng(n).standard_normal((n, 3)))
    ramp = slope * torch.arange(n, dtype=torch.float64)[:, None]
    assert velocity_loss(real + ramp, real).item() == pytest.approx(abs(slope), abs=1e-12)


@given(st.floats(-100, 100))
def test_velocity_loss_ignores_common_offset(offset):
    rng = np.random.default_rng(3)
    p, r = torch.as_tensor(rng.standard_normal((8, 5))), torch.as_tensor(rng.standard_normal((8, 5)))
    assert velocity_loss(p + offset, r + offset).item() == pytest.approx(velocity_loss(p, r).item(), abs=1e-9)


def test_lsgan_examples():
    gen, disc = lsgan_losses(torch.ones(4), torch.zeros(4))
    assert disc.item() == 0.0
    assert lsgan_losses(torch.zeros(4), torch.ones(4))[0].item() == 0.0
    gen, disc = lsgan_losses(torch.full((4,), 0.5), torch.full((4,), 0.5))
    assert (disc.item(), gen.item()) == (0.25, 0.125)


def test_a2e_loss_examples():
    x = torch.randn(2, 6, 20, dtype=torch.float64)
    total, parts = a2e_loss(x, x, torch.ones(2, 6, dtype=torch.float64))
    assert total.item() == 0.0
    assert combine_a2e_loss(1.0, 0.0, 0.0) == 1.0
    assert combine_a2e_loss(0.1, 0.5, 0.01) == pytest.approx(1.11, abs=1e-15)
    assert set(parts) == {"l1", "gan", "vel", "total"}
    # no discriminator scores: adversarial term is reported as zero
    _, parts = a2e_loss(x, x + 1, None)
    assert parts["gan"].item() == 0.0 and parts["l1"].item() == pytest.approx(1.0)


def test_pack_round_trip(rng):
    pv = {"joints": rng.standard_normal((2, 3)), "expr": rng.standard_normal(8),
          "rvec": np.array([0.1, -0.2, 0.05]), "t": np.array([0.0, 0.1, 3.0])}
    vec = pack_pi_var(pv, 2, 8)
    assert vec.shape == (20,)
    back = unpack_pi_var(vec, 2, 8)
    assert np.allclose(pack_pi_var(back, 2, 8), vec, atol=1e-12)


# --------------------------------------------------------------------------- training


def test_without_adversarial_weight_discriminator_is_frozen():
    cfg = A2EConfig(lambda_gan=0.0, epochs=2, **SMALL)
    res = train_a2e(toy_samples(), cfg, seed=0)
    torch.manual_seed(0)
    A2EGenerator(cfg)
    fresh = A2EDiscriminator(cfg)
    for a, b in zip(fresh.parameters(), res.discriminator.parameters()):
        assert torch.equal(a, b)
    assert all(c["gan"] == 0.0 and c["disc"] == 0.0 for c in res.curves)


def test_same_seed_reproduces_bitwise():
    cfg = A2EConfig(epochs=1, **SMALL)
    a = train_a2e(toy_samples(), cfg, seed=5)
    b = train_a2e(toy_samples(), cfg, seed=5)
    assert a.curves == b.curves


def test_resume_reproduces_next_epoch(tmp_path):
    cfg = A2EConfig(epochs=2, **SMALL)
    full = train_a2e(toy_samples(), cfg, seed=1, out_dir=tmp_path / "full")
    resumed = train_a2e(toy_samples(), cfg, seed=1, resume=full.checkpoints[0])
    assert resumed.epoch_losses(1) == full.epoch_losses(1)
    assert load_a2e(full.checkpoints[-1]).cfg == cfg


def test_non_finite_data_aborts_with_last_checkpoint(tmp_path):
    from avatarkit.audio2expression import TrainingError
    samples = toy_samples()
    samples[0].target[3, 7] = np.nan
    with pytest.raises(TrainingError):
        train_a2e(samples, A2EConfig(epochs=1, **SMALL), seed=0, out_dir=tmp_path)


def test_emotion_label_is_live():
    cfg = A2EConfig(lambda_gan=0.0, epochs=20, **SMALL)
    model = train_a2e(toy_samples(), cfg, seed=0).model
    s = toy_samples()[0]
    happy = np.tile(s.label, (s.n_frames, 1))
    other = np.roll(happy, 1, axis=1)
    delta = np.abs(model.predict(s.mfcc, happy) - model.predict(s.mfcc, other)).mean()
    assert delta > 0
