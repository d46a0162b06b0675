"""GAN objectives, gradient penalty and discriminator networks.

The discriminator only ever judges right-view images: the real ``I^R`` and the
reconstruction warped from the left image with the predicted right disparity.
"""

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_EPS = 1e-7


class GanKind(str, enum.Enum):
    NONE = "NONE"
    VANILLA = "VANILLA"
    LSGAN = "LSGAN"
    WGAN_GP = "WGAN_GP"


@dataclass
class GanVariant:
    kind: GanKind = GanKind.NONE
    lambda_gp: float = 10.0
    n_critic: int = 1
    # Use the generator loss +E[D(fake)] exactly as printed instead of -E[D(fake)].
    wgan_printed_sign: bool = False
    disc_width: float = 1.0

    def __post_init__(self):
        self.kind = GanKind(self.kind)
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        if not 0 < self.disc_width <= 1:
            raise ValueError("disc_width must be in (0, 1]")

    @property
    def enabled(self):
        return self.kind != GanKind.NONE


def _prob(p):
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def d_loss(variant, D, real, fake, generator=None):
    """Discriminator (critic) loss to minimise; ``generator`` seeds the penalty interpolates."""
    kind = GanKind(variant.kind)
    if real.shape != fake.shape:
        raise ValueError(f"dimension mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    d_real, d_fake = D(real), D(fake)
    if kind == GanKind.VANILLA:
        return -(torch.log(_prob(d_real)).mean() + torch.log(1 - _prob(d_fake)).mean())
    if kind == GanKind.LSGAN:
        return 0.5 * (((d_real - 1) ** 2).mean() + (d_fake ** 2).mean())
    if kind == GanKind.WGAN_GP:
        gp = gradient_penalty(D, real, fake, generator=generator)
        return d_fake.mean() - d_real.mean() + variant.lambda_gp * gp
    raise ValueError(f"no discriminator loss for GAN kind {kind.value}")


def g_loss(variant, D, fake):
    """Adversarial part of the generator objective."""
    kind = GanKind(variant.kind)
    d_fake = D(fake)
    if kind == GanKind.VANILLA:
        return -torch.log(_prob(d_fake)).mean()
    if kind == GanKind.LSGAN:
        return 0.5 * ((d_fake - 1) ** 2).mean()
    if kind == GanKind.WGAN_GP:
        return d_fake.mean() if variant.wgan_printed_sign else -d_fake.mean()
    raise ValueError(f"no generator loss for GAN kind {kind.value}")


def combined_loss(rec_loss, adv_loss, phi_g):
    return rec_loss + phi_g * adv_loss


def gradient_penalty(D, real, fake, u=None, generator=None):
    """``E[(||grad D(x_hat)||_2 - 1)^2]`` on random real/fake interpolates.

    ``u`` (shape ``[B]``) fixes the interpolation weights; otherwise they are
    drawn uniformly, from ``generator`` if given.
    """
    if real.shape != fake.shape:
        raise ValueError(f"dimension mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    b = real.shape[0]
    if u is None:
        u = torch.rand(b, dtype=real.dtype, device=real.device, generator=generator)
    u = u.view(b, *([1] * (real.dim() - 1)))
    x_hat = (u * real + (1 - u) * fake)
    if not x_hat.requires_grad:
        x_hat = x_hat.detach().requires_grad_(True)
    score = D(x_hat)
    grads = None
    if score.requires_grad:
        grads, = torch.autograd.grad(score.sum(), x_hat, create_graph=True, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(x_hat)
    norms = grads.reshape(b, -1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


class PatchDiscriminator(nn.Module):
    """Five-layer convolutional patch discriminator (4x4 kernels)."""

    def __init__(self, in_channels=3, width=1.0, sigmoid=True):
        super().__init__()
        c = [max(1, int(round(n * width))) for n in (64, 128, 256, 512)]
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c[0], 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[0], c[1], 4, 2, 1),
            nn.BatchNorm2d(c[1]),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[1], c[2], 4, 2, 1),
            nn.BatchNorm2d(c[2]),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[2], c[3], 4, 1, 1),
            nn.BatchNorm2d(c[3]),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c[3], 1, 4, 1, 1),
        )
        self.sigmoid = sigmoid

    def forward(self, x):
        out = self.net(x)
        return torch.sigmoid(out) if self.sigmoid else out


class FCCritic(nn.Module):
    """Three fully-connected layers on a 32x64 area-downsampled input."""

    def __init__(self, in_channels=3, size=(32, 64), width=1.0):
        super().__init__()
        self.size = tuple(size)
        h1, h2 = max(1, int(round(512 * width))), max(1, int(round(256 * width)))
        self.net = nn.Sequential(
            nn.Linear(in_channels * self.size[0] * self.size[1], h1),
            nn.LeakyReLU(0.2),
            nn.Linear(h1, h2),
            nn.LeakyReLU(0.2),
            nn.Linear(h2, 1),
        )

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.size:
            x = F.adaptive_avg_pool2d(x, self.size)
        return self.net(x.flatten(1)).squeeze(1)


def build_discriminator(variant, input_shape=(3, 256, 512)):
    kind = GanKind(variant.kind)
    channels = input_shape[0]
    if kind == GanKind.VANILLA:
        return PatchDiscriminator(channels, variant.disc_width, sigmoid=True)
    if kind == GanKind.LSGAN:
        return PatchDiscriminator(channels, variant.disc_width, sigmoid=False)
    if kind == GanKind.WGAN_GP:
        h, w = input_shape[1:]
        size = (min(32, h), min(64, w))
        return FCCritic(channels, size, variant.disc_width)
    raise ValueError("GAN kind NONE has no discriminator")
