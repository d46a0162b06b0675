"""Photometric and geometric reconstruction losses and their multi-scale sum."""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from advdepth.geometry import warp

C1 = 0.01 ** 2
C2 = 0.03 ** 2
SSIM_WINDOW = 3

COMPONENTS = ("L1", "SSIM", "LR", "DISP")


@dataclass
class LossWeights:
    gamma_l1: float = 0.15
    gamma_ssim: float = 0.85
    gamma_lr: float = 1.0
    gamma_disp: float = 0.1
    phi_g: float = 0.1
    components: tuple = COMPONENTS

    def __post_init__(self):
        self.components = tuple(self.components)
        for name in ("gamma_l1", "gamma_ssim", "gamma_lr", "gamma_disp", "phi_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown loss components {sorted(unknown)}; choose from {COMPONENTS}")

    def enabled(self, name):
        return name in self.components


@dataclass
class ScaleOutput:
    """Everything the reconstruction loss needs at one scale."""

    left: torch.Tensor
    right: torch.Tensor
    disp_left: torch.Tensor
    disp_right: torch.Tensor
    recon_left: torch.Tensor = field(default=None)
    recon_right: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.recon_left is None:
            self.recon_left = warp(self.right, self.disp_left, -1)
        if self.recon_right is None:
            self.recon_right = warp(self.left, self.disp_right, +1)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_loss(reconstruction, target):
    _check_same(reconstruction, target)
    return (reconstruction - target).abs().mean()


def ssim_map(x, y):
    """Per-window SSIM with a 3x3 box filter over the valid region."""
    _check_same(x, y)
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {tuple(x.shape)} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    mu_x = F.avg_pool2d(x, SSIM_WINDOW, 1)
    mu_y = F.avg_pool2d(y, SSIM_WINDOW, 1)
    sigma_x = F.avg_pool2d(x * x, SSIM_WINDOW, 1) - mu_x ** 2
    sigma_y = F.avg_pool2d(y * y, SSIM_WINDOW, 1) - mu_y ** 2
    sigma_xy = F.avg_pool2d(x * y, SSIM_WINDOW, 1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sigma_xy + C2)
    den = (mu_x ** 2 + mu_y ** 2 + C1) * (sigma_x + sigma_y + C2)
    return num / den


def ssim_loss(reconstruction, target):
    return torch.clamp((1 - ssim_map(reconstruction, target)) / 2, 0, 1).mean()


def lr_consistency_loss(d_left, d_right, direction=-1):
    """Mean ``|d_left - d_right sampled at j + direction * d_left * W|``.

    For the left map the matching right-view column lies at ``j - d * W``
    (direction -1); the right-map counterpart uses direction +1.
    """
    _check_same(d_left, d_right)
    projected = warp(d_right, d_left, direction)
    return (d_left - projected).abs().mean()


def _grad_x(t):
    return t[..., :, 1:] - t[..., :, :-1]


def _grad_y(t):
    return t[..., 1:, :] - t[..., :-1, :]


def smoothness_loss(disparity, image):
    """Edge-aware first-order smoothness of a disparity map.

    Each direction is averaged over its forward differences; a direction with
    a single row or column contributes nothing.
    """
    if disparity.shape[0] != image.shape[0] or disparity.shape[2:] != image.shape[2:]:
        raise ValueError(f"dimension mismatch: {tuple(disparity.shape)} vs {tuple(image.shape)}")
    total = disparity.new_zeros(())
    if disparity.shape[-1] > 1:
        wx = torch.exp(-_grad_x(image).abs().mean(1, keepdim=True))
        total = total + (_grad_x(disparity).abs() * wx).mean()
    if disparity.shape[-2] > 1:
        wy = torch.exp(-_grad_y(image).abs().mean(1, keepdim=True))
        total = total + (_grad_y(disparity).abs() * wy).mean()
    return total


def reconstruction_loss(outputs, weights, return_terms=False):
    """Weighted sum over scales; smoothness at scale ``s`` is scaled by ``1/2**s``.

    With ``return_terms`` also returns the weighted per-component totals.
    """
    gammas = {
        "L1": weights.gamma_l1,
        "SSIM": weights.gamma_ssim,
        "LR": weights.gamma_lr,
        "DISP": weights.gamma_disp,
    }
    terms = {}
    total = None
    for s, out in enumerate(outputs):
        comps = scale_components(out, weights.components)
        for name, value in comps.items():
            factor = gammas[name] / (2 ** s) if name == "DISP" else gammas[name]
            contrib = factor * value
            terms[name] = terms.get(name, 0) + contrib
            total = contrib if total is None else total + contrib
    if total is None:
        ref = outputs[0].disp_left
        total = (ref * 0).sum()
    if return_terms:
        return total, terms
    return total


def scale_components(out, components=COMPONENTS):
    """Left+right sums of the requested components at one scale (unweighted)."""
    fns = {
        "L1": lambda: l1_loss(out.recon_left, out.left) + l1_loss(out.recon_right, out.right),
        "SSIM": lambda: ssim_loss(out.recon_left, out.left) + ssim_loss(out.recon_right, out.right),
        "LR": lambda: lr_consistency_loss(out.disp_left, out.disp_right, -1)
        + lr_consistency_loss(out.disp_right, out.disp_left, +1),
        "DISP": lambda: smoothness_loss(out.disp_left, out.left) + smoothness_loss(out.disp_right, out.right),
    }
    return {name: fns[name]() for name in COMPONENTS if name in components}


def downsample_image(image, scale):
    if scale == 0:
        return image
    k = 2 ** scale
    return F.avg_pool2d(image, k, k)


def build_scale_outputs(left, right, disparities):
    """Pair each predicted ``[B, 2, H_s, W_s]`` disparity with pooled targets."""
    outputs = []
    for s, disp in enumerate(disparities):
        l_s = downsample_image(left, s)
        r_s = downsample_image(right, s)
        if l_s.shape[2:] != disp.shape[2:]:
            raise ValueError(f"scale {s}: image {tuple(l_s.shape)} vs disparity {tuple(disp.shape)}")
        outputs.append(ScaleOutput(l_s, r_s, disp[:, 0:1], disp[:, 1:2]))
    return outputs
