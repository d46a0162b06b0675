"""Horizontal stereo warping, disparity/depth conversion and flip-merge.

Tensors follow the NCHW layout throughout: images are ``[B, C, H, W]`` and
disparities are ``[B, 1, H, W]``, stored as a non-negative fraction of the
image width.
"""

from dataclasses import dataclass

import torch

D_MAX = 0.3
DISP_EPS = 1e-3
RAMP_FRACTION = 0.05


@dataclass(frozen=True)
class CameraRig:
    focal_px: float
    baseline_m: float
    width_px: int

    def __post_init__(self):
        if not (self.focal_px > 0 and self.baseline_m > 0 and self.width_px > 0):
            raise ValueError(f"camera rig parameters must be positive: {self}")

    def to_dict(self):
        return {"focal_px": self.focal_px, "baseline_m": self.baseline_m, "width_px": self.width_px}


def warp(image, disparity, direction=1):
    """Resample ``image`` horizontally at column ``j + direction * d * W``.

    Bilinear interpolation along the row; coordinates beyond the grid are
    clamped to the edge column. Differentiable w.r.t. both arguments.

    ``direction=+1`` reconstructs the right view from the left image with the
    right disparity; ``direction=-1`` reconstructs the left view from the right
    image with the left disparity.
    """
    if direction not in (1, -1):
        raise ValueError(f"direction must be +1 or -1, got {direction}")
    if image.dim() != 4 or disparity.dim() != 4 or disparity.shape[1] != 1:
        raise ValueError(
            f"expected image [B,C,H,W] and disparity [B,1,H,W], got {tuple(image.shape)} and {tuple(disparity.shape)}"
        )
    b, c, h, w = image.shape
    if disparity.shape[0] != b or disparity.shape[2:] != image.shape[2:]:
        raise ValueError(f"dimension mismatch: image {tuple(image.shape)} vs disparity {tuple(disparity.shape)}")
    if not torch.isfinite(disparity).all():
        raise ValueError("disparity contains non-finite values")

    cols = torch.arange(w, dtype=disparity.dtype, device=disparity.device).view(1, 1, 1, w)
    x = (cols + direction * disparity * w).clamp(0, w - 1)
    x0 = x.detach().floor()
    frac = x - x0
    x0 = x0.long()
    x1 = (x0 + 1).clamp(max=w - 1)

    idx0 = x0.expand(b, c, h, w)
    idx1 = x1.expand(b, c, h, w)
    left = torch.gather(image, 3, idx0)
    right = torch.gather(image, 3, idx1)
    return left + frac * (right - left)


def disparity_to_depth(disparity, rig, eps=DISP_EPS):
    """Metric depth ``f * B / (max(d, eps) * W)``; accepts tensors or arrays."""
    scale = rig.focal_px * rig.baseline_m / rig.width_px
    if isinstance(disparity, torch.Tensor):
        return scale / disparity.clamp(min=eps)
    import numpy as np

    return scale / np.maximum(np.asarray(disparity, dtype=np.float64), eps)


def ramp_columns(width):
    return int(round(RAMP_FRACTION * width))


def flip_merge(d, d_flipped):
    """Combine a disparity with the re-flipped disparity of the mirrored input.

    The outer right columns (5% of the width) come from ``d``, the outer left
    columns from ``d_flipped``; everything in between is their mean.
    """
    if d.shape != d_flipped.shape:
        raise ValueError(f"dimension mismatch: {tuple(d.shape)} vs {tuple(d_flipped.shape)}")
    w = d.shape[-1]
    n = ramp_columns(w)
    out = 0.5 * (d + d_flipped)
    if n > 0:
        out[..., w - n:] = d[..., w - n:]
        out[..., :n] = d_flipped[..., :n]
    return out


def hflip(t):
    return torch.flip(t, dims=[-1])
