"""Encoder-decoder disparity generators.

Every generator maps a left image to a list of ``[B, 2, H/2^s, W/2^s]``
disparity maps, finest scale first; channel 0 is the left disparity and
channel 1 the right disparity.
"""

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from advdepth.geometry import D_MAX


class Backbone(str, enum.Enum):
    VGG30 = "VGG30"
    RESNET18 = "RESNET18"
    RESNET50 = "RESNET50"
    TINY = "TINY"


class Norm(str, enum.Enum):
    NONE = "NONE"
    BATCH = "BATCH"
    INSTANCE = "INSTANCE"


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    backbone: Backbone = Backbone.VGG30
    normalization: Norm = Norm.NONE
    num_output_scales: int = 4
    width_multiplier: float = 1.0

    def __post_init__(self):
        try:
            self.backbone = Backbone(self.backbone)
            self.normalization = Norm(self.normalization)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.num_output_scales not in (1, 2, 3, 4):
            raise ConfigError(f"num_output_scales must be in 1..4, got {self.num_output_scales}")
        if not 0 < self.width_multiplier <= 1:
            raise ConfigError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if self.backbone != Backbone.TINY and self.width_multiplier != 1.0:
            raise ConfigError("width_multiplier is only supported by the TINY backbone")

    def to_dict(self):
        return {
            "backbone": self.backbone.value,
            "normalization": self.normalization.value,
            "num_output_scales": self.num_output_scales,
            "width_multiplier": self.width_multiplier,
        }


def norm_layer(kind, channels):
    if kind == Norm.BATCH:
        return nn.BatchNorm2d(channels)
    if kind == Norm.INSTANCE:
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride, norm):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride, (kernel - 1) // 2),
            norm_layer(norm, cout),
            nn.ELU(inplace=True),
        )


class UpConv(nn.Module):
    def __init__(self, cin, cout, norm):
        super().__init__()
        self.conv = ConvBlock(cin, cout, 3, 1, norm)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DispHead(nn.Module):
    def __init__(self, cin):
        super().__init__()
        self.conv = nn.Conv2d(cin, 2, 3, 1, 1)

    def forward(self, x):
        return D_MAX * torch.sigmoid(self.conv(x))


class VGGEncoder(nn.Module):
    """Stacked two-convolution stages, each halving the resolution."""

    def __init__(self, channels, kernels, norm):
        super().__init__()
        stages = []
        cin = 3
        for c, k in zip(channels, kernels):
            stages.append(nn.Sequential(ConvBlock(cin, c, k, 1, norm), ConvBlock(c, c, k, 2, norm)))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.channels = list(channels)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ResNetEncoder(nn.Module):
    def __init__(self, depth, norm):
        super().__init__()
        if norm == Norm.BATCH:
            layer = nn.BatchNorm2d
        elif norm == Norm.INSTANCE:
            def layer(c):
                return nn.InstanceNorm2d(c, affine=True)
        else:
            def layer(c):
                return nn.Identity()
        ctor = {18: torchvision.models.resnet18, 50: torchvision.models.resnet50}[depth]
        net = ctor(weights=None, norm_layer=layer)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        exp = 4 if depth == 50 else 1
        self.channels = [64, 64 * exp, 128 * exp, 256 * exp, 512 * exp]

    def forward(self, x):
        feats = [self.stem(x)]
        x = self.pool(feats[0])
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


# decoder width by output stride (1 = full resolution)
DECODER_WIDTH = {64: 512, 32: 512, 16: 256, 8: 128, 4: 64, 2: 32, 1: 16}


class Generator(nn.Module):
    """Encoder with skip connections into a multi-scale disparity decoder."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.num_scales = config.num_output_scales
        norm = config.normalization
        if config.backbone == Backbone.VGG30:
            self.encoder = VGGEncoder((32, 64, 128, 256, 512, 512, 512), (7, 5, 3, 3, 3, 3, 3), norm)
            widths = DECODER_WIDTH
        elif config.backbone == Backbone.TINY:
            m = config.width_multiplier
            chans = [max(4, int(round(c * m))) for c in (32, 64, 128, 256, 512)]
            self.encoder = VGGEncoder(chans, (7, 5, 3, 3, 3), norm)
            widths = {k: max(4, int(round(v * m))) for k, v in DECODER_WIDTH.items()}
        else:
            self.encoder = ResNetEncoder(18 if config.backbone == Backbone.RESNET18 else 50, norm)
            widths = DECODER_WIDTH
        enc = self.encoder.channels
        self.depth = len(enc)
        # encoder output i lives at stride 2**(i+1); decoder walks back to stride 1
        self.upconvs = nn.ModuleList()
        self.iconvs = nn.ModuleList()
        self.heads = nn.ModuleDict()
        cin = enc[-1]
        for level in range(self.depth - 1, -1, -1):
            stride = 2 ** level
            cout = widths[stride]
            self.upconvs.append(UpConv(cin, cout, norm))
            skip = enc[level - 1] if level >= 1 else 0
            udisp = 2 if self._has_head(2 * stride) else 0
            self.iconvs.append(ConvBlock(cout + skip + udisp, cout, 3, 1, norm))
            if self._has_head(stride):
                self.heads[str(level)] = DispHead(cout)
            cin = cout

    def _has_head(self, stride):
        scale = stride.bit_length() - 1
        return 2 ** scale == stride and scale < self.num_scales

    @property
    def multiple(self):
        return 2 ** self.depth

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.multiple or w % self.multiple:
            raise ValueError(f"input {h}x{w} must be divisible by {self.multiple}")
        feats = self.encoder(x)
        y = feats[-1]
        disp = None
        outputs = {}
        for i, level in enumerate(range(self.depth - 1, -1, -1)):
            y = self.upconvs[i](y)
            parts = [y]
            if level >= 1:
                parts.append(feats[level - 1])
            if disp is not None:
                parts.append(F.interpolate(disp, scale_factor=2, mode="bilinear", align_corners=False))
            y = self.iconvs[i](torch.cat(parts, 1))
            if str(level) in self.heads:
                disp = self.heads[str(level)](y)
                outputs[level] = disp
            else:
                disp = None
        return [outputs[s] for s in range(self.num_scales)]

    def zero_heads(self):
        for head in self.heads.values():
            nn.init.zeros_(head.conv.weight)
            nn.init.zeros_(head.conv.bias)


def build_generator(config):
    if not isinstance(config, GeneratorConfig):
        config = GeneratorConfig(**config)
    return Generator(config)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def affine_norm_parameters(module):
    """Number of affine parameters held by normalization layers."""
    total = 0
    for m in module.modules():
        if isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            total += 2 * m.num_features
    return total
