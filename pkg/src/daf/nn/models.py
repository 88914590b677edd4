"""Network modules: three-stage residual encoder, segmentation decoder, auxiliary heads."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError

DESK_CHANNELS = (16, 32, 64)
RESNET18_CHANNELS = (64, 128, 256)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.shortcut is None else self.shortcut(x)))


class ResidualEncoder(nn.Module):
    """ResNet-style encoder returning stage features at strides 4, 8 and 16.

    Stem: 7x7 conv (stride 2) + BN + ReLU + 3x3 max-pool (stride 2). Then three
    stages of two basic blocks; stages 2 and 3 open with a stride-2 block.
    """

    def __init__(self, channels: Sequence[int] = DESK_CHANNELS, in_channels: int = 3):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, c1, 7, 2, 3, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        self.layer1 = nn.Sequential(BasicBlock(c1, c1, 1), BasicBlock(c1, c1, 1))
        self.layer2 = nn.Sequential(BasicBlock(c1, c2, 2), BasicBlock(c2, c2, 1))
        self.layer3 = nn.Sequential(BasicBlock(c2, c3, 2), BasicBlock(c3, c3, 1))
        init_weights(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ShapeError(f"encoder expects (N, C, H, W) with H, W divisible by 16, got {tuple(x.shape)}")
        x = self.stem(x)
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return [f1, f2, f3]


def init_weights(module: nn.Module) -> None:
    """Kaiming-normal (fan-in, ReLU gain) convolutions; unit/zero norm affine."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def _conv_bn_relu(cin: int, cout: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class SegBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(*_conv_bn_relu(cin, cout), *_conv_bn_relu(cout, cout))


class SegDecoder(nn.Module):
    """Coarse-to-fine fusion of the discrepancy map with student features.

    ``Seg_1`` sees the discrepancy map (area-resized to stage-3 resolution)
    concatenated with stage-3 features; each later block concatenates the
    2x-upsampled previous output with the next finer stage. After ``Seg_3`` two
    upsample+conv steps reach input resolution and a 1x1 conv + sigmoid gives
    the probability map.
    """

    def __init__(
        self,
        feat_channels: Sequence[int] = DESK_CHANNELS,
        widths: Sequence[int] = (64, 32, 16),
        use_discrepancy: bool = True,
    ):
        super().__init__()
        f1, f2, f3 = feat_channels
        w1, w2, w3 = widths
        self.use_discrepancy = use_discrepancy
        self.seg1 = SegBlock(f3 + int(use_discrepancy), w1)
        self.seg2 = SegBlock(w1 + f2, w2)
        self.seg3 = SegBlock(w2 + f1, w3)
        w4 = max(w3 // 2, 4)
        self.refine1 = nn.Sequential(*_conv_bn_relu(w3, w4))
        self.refine2 = nn.Sequential(nn.Conv2d(w4, w4, 3, 1, 1), nn.ReLU(inplace=True))
        self.out = nn.Conv2d(w4, 1, 1)
        init_weights(self)

    def forward(self, feats: Sequence[torch.Tensor], discrepancy: torch.Tensor | None = None) -> torch.Tensor:
        f1, f2, f3 = feats
        if f2.shape[-2:] != tuple(2 * s for s in f3.shape[-2:]) or f1.shape[-2:] != tuple(2 * s for s in f2.shape[-2:]):
            raise ShapeError(f"stage resolutions must halve: {[tuple(f.shape) for f in feats]}")
        x = f3
        if self.use_discrepancy:
            if discrepancy is None:
                raise ShapeError("decoder built with use_discrepancy=True needs a discrepancy map")
            d = discrepancy if discrepancy.ndim == 4 else discrepancy[:, None]
            d = F.adaptive_avg_pool2d(d, f3.shape[-2:])
            x = torch.cat([d, f3], dim=1)
        x = self.seg1(x)
        x = _up(x)
        x = self.seg2(torch.cat([x, f2], dim=1))
        x = _up(x)
        x = self.seg3(torch.cat([x, f1], dim=1))
        x = self.refine1(_up(x))
        x = self.refine2(_up(x))
        return torch.sigmoid(self.out(x))


def _up(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class AuxHead(nn.Module):
    """1x1 conv -> ReLU -> 1x1 conv -> sigmoid, at the stage's own resolution."""

    def __init__(self, cin: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(cin // 2, 4)
        self.conv1 = nn.Conv2d(cin, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)
        init_weights(self)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv2(F.relu(self.conv1(f))))


class AuxHeads(nn.ModuleList):
    def __init__(self, feat_channels: Sequence[int] = DESK_CHANNELS):
        super().__init__([AuxHead(c) for c in feat_channels])

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return [head(f) for head, f in zip(self, feats)]


class RotationHead(nn.Module):
    """Global-average-pool + linear classifier used for teacher pretext training."""

    def __init__(self, cin: int, n_classes: int = 4):
        super().__init__()
        self.fc = nn.Linear(cin, n_classes)
        nn.init.normal_(self.fc.weight, std=1.0 / math.sqrt(cin))
        nn.init.zeros_(self.fc.bias)

    def forward(self, f3: torch.Tensor) -> torch.Tensor:
        return self.fc(f3.mean(dim=(2, 3)))
