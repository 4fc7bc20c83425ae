"""Small U-Net style segmentation network used for teacher, student and baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    num_classes: int = 5
    base_width: int = 32
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.in_channels not in (3, 4):
            raise ValueError(f"in_channels must be 3 or 4, got {self.in_channels}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _block(cin: int, cout: int) -> nn.Sequential:
    # GroupNorm normalizes per sample, so single-image inference is batch independent.
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(math.gcd(4, cout), cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """Encoder of ``depth`` conv+downsample stages, bilinear decoder with skips, 1x1 head.

    Input height and width must be divisible by ``2**depth``.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2**i for i in range(config.depth + 1)]
        self.encoder = nn.ModuleList()
        cin = config.in_channels
        for w in widths[:-1]:
            self.encoder.append(_block(cin, w))
            cin = w
        self.bottleneck = _block(cin, widths[-1])
        self.decoder = nn.ModuleList(
            _block(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(config.depth))
        )
        self.head = nn.Conv2d(widths[0], config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        factor = 2**self.config.depth
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.decoder, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


def build_net(config: NetConfig) -> SegNet:
    """Build a network with weights determined entirely by ``config.seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(config.seed)
        net = SegNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
