"""Central finite-difference probes of autograd gradients at float64."""
import numpy as np
import torch

from avatarkit.audio2expression import A2EConfig, A2EDiscriminator, a2e_loss
from avatarkit.face_model import project, sh_irradiance
from avatarkit.neural_renderer import AudioEncoder, RendererNetwork, TextureNetwork, texture_forward

STEP = 1e-6


def directional_errors(fn, x: torch.Tensor, n_probes: int = 20, seed: int = 0) -> np.ndarray:
    """Relative error between ``grad . v`` and the central difference along ``v`` for random ``v``."""
    gen = torch.Generator().manual_seed(seed)
    x = x.detach().clone().requires_grad_()
    grad, = torch.autograd.grad(fn(x), x)
    errs = []
    for _ in range(n_probes):
        v = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        v /= v.norm()
        with torch.no_grad():
            fd = (fn(x + STEP * v) - fn(x - STEP * v)).item() / (2 * STEP)
        an = float((grad * v).sum())
        errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return np.array(errs)


def _weights(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def sh_case():
    gamma = _weights((3, 9), 1)
    w = _weights((16, 3), 2)

    def normals_fn(raw):
        n = raw / raw.norm(dim=-1, keepdim=True)
        return (sh_irradiance(n, gamma) * w).sum()

    def gamma_fn(g):
        n = _weights((16, 3), 3)
        return (sh_irradiance(n / n.norm(dim=-1, keepdim=True), g) * w).sum()

    return [(normals_fn, _weights((16, 3), 4)), (gamma_fn, gamma)]


def project_case():
    K = torch.tensor([[64.0, 0, 32], [0, 64, 32], [0, 0, 1]], dtype=torch.float64)
    R = torch.linalg.matrix_exp(torch.tensor([[0, -0.1, 0.2], [0.1, 0, -0.05], [-0.2, 0.05, 0]],
                                             dtype=torch.float64))
    t = torch.tensor([0.1, -0.05, 3.0], dtype=torch.float64)
    w = _weights((12, 2), 5)

    def verts_fn(v):
        return (project(v, K, R, t)[0] * w).sum()

    def trans_fn(tt):
        return (project(_weights((12, 3), 6) * 0.3, K, R, tt)[0] * w).sum()

    return [(verts_fn, _weights((12, 3), 7) * 0.3), (trans_fn, t)]


def texture_case():
    torch.manual_seed(0)
    net = TextureNetwork(4, 16, 2, omega0=30.0).double()
    a_enc = _weights(4, 8)
    w = _weights((10, 16), 9)
    uv0 = torch.rand(10, 2, generator=torch.Generator().manual_seed(10), dtype=torch.float64)
    return [(lambda uv: (texture_forward(net, uv, a_enc) * w).sum(), uv0),
            (lambda a: (texture_forward(net, uv0, a) * w).sum(), a_enc)]


def audio_encoder_case():
    torch.manual_seed(1)
    enc = AudioEncoder(W=4, n_phonemes=50, n_out=8, hidden=8).double()
    w = _weights(8, 11)
    window = torch.rand(8, 50, generator=torch.Generator().manual_seed(12), dtype=torch.float64)
    return [(lambda x: (enc(x) * w).sum(), window)]


def renderer_case():
    torch.manual_seed(2)
    net = RendererNetwork(19, base=4, depth=2).double()
    w = _weights((1, 3, 16, 16), 13)
    x = 0.1 * _weights((1, 19, 16, 16), 14)
    return [(lambda inp: (net(inp) * w).sum(), x)]


def a2e_loss_case():
    torch.manual_seed(3)
    cfg = A2EConfig(latent=8)
    disc = A2EDiscriminator(cfg).double()
    real = _weights((2, 6, cfg.out_dim), 15)
    audio = _weights((2, 24, 28), 16)
    labels = _weights((2, 6, 7), 17)

    def fn(pred):
        return a2e_loss(pred, real, disc(pred, audio, labels))[0]

    return [(fn, real + 0.3 * _weights(real.shape, 18))]


CASES = {"sh_irradiance": sh_case, "project": project_case, "texture_forward": texture_case,
         "encode_audio_window": audio_encoder_case, "renderer_forward": renderer_case, "a2e_loss": a2e_loss_case}


def max_error(name: str, n_probes: int = 20) -> float:
    return max(float(directional_errors(fn, x, n_probes, seed=i).max()) for i, (fn, x) in enumerate(CASES[name]()))
