"""Shared network building blocks for both training stages."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import spectral_norm


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, norm=True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True) if norm else nn.Identity()

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class Down(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 4, stride=2, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True)

    def forward(self, x):
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class Up(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.InstanceNorm2d(c_out, affine=True)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.leaky_relu(self.norm(self.conv(x)), 0.2)


class UNet(nn.Module):
    """Plain U-Net: `levels` stride-2 encoders, skip connections, conv head."""

    def __init__(self, c_in, c_out, base_width=32, levels=4, final_zero_init=False):
        super().__init__()
        widths = [min(base_width * 2**i, 8 * base_width) for i in range(levels + 1)]
        self.inc = ConvBlock(c_in, widths[0])
        self.downs = nn.ModuleList(Down(widths[i], widths[i + 1]) for i in range(levels))
        self.ups = nn.ModuleList(Up(widths[i + 1], widths[i]) for i in reversed(range(levels)))
        self.fuse = nn.ModuleList(
            ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(levels)))
        self.head = nn.Conv2d(widths[0], c_out, 1)
        if final_zero_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        h = skips.pop()
        for up, fuse in zip(self.ups, self.fuse):
            h = fuse(torch.cat([up(h), skips.pop()], dim=1))
        return self.head(h)


class PatchDiscriminator(nn.Module):
    """PatchGAN-style conv stack with spectral normalization throughout."""

    def __init__(self, c_in, base_width=64):
        super().__init__()
        w = base_width
        self.net = nn.Sequential(
            spectral_norm(nn.Conv2d(c_in, w, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(w, 2 * w, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1)),
            nn.LeakyReLU(0.2),
            spectral_norm(nn.Conv2d(4 * w, 1, 4, stride=1, padding=1)),
        )
        self.in_channels = c_in

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects {self.in_channels} channels, got {x.shape[1]}")
        return self.net(x)


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))], mean over patches."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


class ConvBackbone(nn.Module):
    """Small strided conv feature extractor used by the auxiliary nets."""

    def __init__(self, widths=(32, 64, 128), c_in=3):
        super().__init__()
        layers = []
        prev = c_in
        self.stage_slices = []
        for w in widths:
            layers += [nn.Conv2d(prev, w, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(w, affine=True),
                       nn.LeakyReLU(0.2)]
            prev = w
        self.net = nn.Sequential(*layers)
        self.widths = tuple(widths)

    def forward(self, x):
        return self.net(x)

    def stage_features(self, x):
        feats = []
        h = x
        for i, layer in enumerate(self.net):
            h = layer(h)
            if isinstance(layer, nn.LeakyReLU):
                feats.append(h)
        return feats


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
