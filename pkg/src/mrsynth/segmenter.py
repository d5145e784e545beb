"""U-net lesion segmenter.

Used in two roles: as the shape-consistency regularizer during synthesis
training, and as a standalone model for the augmentation-by-synthesis
evaluation. Output is a per-pixel softmax over {non-lesion, edema, cavity,
tumor}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

SEG_CLASSES = ("non_lesion", "edema", "cavity", "tumor")


@dataclass
class SegmenterConfig:
    in_channels: int = 5
    classes: int = 4
    depth: int = 4
    base_width: int = 32

    def __post_init__(self) -> None:
        if self.classes != len(SEG_CLASSES):
            raise ValueError(f"classes is fixed at {len(SEG_CLASSES)}")


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, 1, 1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, 1, 1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        downs = [_double_conv(config.in_channels, w)]
        ch = w
        for _ in range(config.depth):
            downs.append(_double_conv(ch, ch * 2))
            ch *= 2
        self.downs = nn.ModuleList(downs)
        ups, convs = [], []
        for _ in range(config.depth):
            ups.append(nn.ConvTranspose2d(ch, ch // 2, 2, 2))
            convs.append(_double_conv(ch, ch // 2))
            ch //= 2
        self.ups = nn.ModuleList(ups)
        self.up_convs = nn.ModuleList(convs)
        self.head = nn.Conv2d(ch, config.classes, 1)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        """Softmax probability maps [B, classes, H, W]."""
        div = 2 ** self.config.depth
        if y.shape[-2] % div or y.shape[-1] % div:
            raise ValueError(
                f"H and W must be divisible by {div}, got {tuple(y.shape[-2:])}"
            )
        skips = []
        h = y
        for down in self.downs[:-1]:
            h = down(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.downs[-1](h)
        for up, conv, skip in zip(self.ups, self.up_convs, reversed(skips)):
            h = conv(torch.cat([up(h), skip], dim=1))
        return torch.softmax(self.head(h), dim=1)


def build_segmenter(config: SegmenterConfig | None = None,
                    seed: int | None = None) -> UNet:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(config or SegmenterConfig())


def segment(model: UNet, y: torch.Tensor) -> torch.Tensor:
    """Probability maps for an image stack; accepts [5,H,W] or [B,5,H,W]."""
    squeeze = y.ndim == 3
    if squeeze:
        y = y.unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = model(y)
    model.train(was_training)
    return probs.squeeze(0) if squeeze else probs


def lesion_targets(mask: np.ndarray) -> np.ndarray:
    """Collapse a one-hot [5,H,W] instance mask into 4 segmentation classes.

    Channel order follows SEG_CLASSES; non-lesion merges background and
    normal brain.
    """
    non_lesion = mask[0] + mask[1]
    return np.stack([non_lesion, mask[2], mask[3], mask[4]]).astype(np.float32)
