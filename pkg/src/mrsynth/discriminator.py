"""Patch discriminators: the ROI-masked six-member set for paired training
and plain two-scale stacks for the unpaired domains.

Members share one topology but never parameters. Odd-indexed members (1, 3,
5) see full resolution, even-indexed ones (2, 4, 6) the 2x2-average-pooled
half scale of the *masked* inputs. Pairs of members cover background, normal
brain and lesion ROIs, in that order. Every member returns its patch logits
together with all intermediate activations for feature matching.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import RoiMasks


@dataclass
class PatchResponse:
    """Patch logit map plus per-layer feature taps of one member."""

    logits: torch.Tensor
    features: list[torch.Tensor]


class PatchDiscriminator(nn.Module):
    """PatchGAN stack: four stride-2 convs with leaky ReLU, then a logit conv.

    The first conv carries no normalization (PatchGAN default). Features are
    tapped after every activation and at the logits, so T = n_layers + 1.
    """

    def __init__(self, in_channels: int, base_width: int = 64,
                 n_layers: int = 4, norm: str = "batch"):
        super().__init__()
        blocks: list[nn.Module] = []
        ch = base_width
        blocks.append(nn.Sequential(
            nn.Conv2d(in_channels, ch, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
        ))
        for _ in range(n_layers - 1):
            norm_layer = (nn.BatchNorm2d(ch * 2) if norm == "batch"
                          else nn.InstanceNorm2d(ch * 2, affine=True))
            blocks.append(nn.Sequential(
                nn.Conv2d(ch, ch * 2, 4, 2, 1),
                norm_layer,
                nn.LeakyReLU(0.2, inplace=True),
            ))
            ch *= 2
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(ch, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> PatchResponse:
        features = []
        h = x
        for block in self.blocks:
            h = block(h)
            features.append(h)
        logits = self.head(h)
        features.append(logits)
        return PatchResponse(logits=logits, features=features)


# member index (1-based) -> ROI attribute; None = whole image
_ROI_BY_MEMBER = ("background", "background", "normal_brain", "normal_brain",
                  "lesion", "lesion")


class DiscriminatorSet(nn.Module):
    """Six conditional patch discriminators over masked (input, image) pairs.

    With ``labelwise=False`` (the no-label-wise ablation) the set collapses
    to two whole-image members, full scale and half scale.
    """

    def __init__(self, x_channels: int, y_channels: int, base_width: int = 64,
                 n_layers: int = 4, norm: str = "batch", labelwise: bool = True):
        super().__init__()
        self.labelwise = labelwise
        self.n_members = 6 if labelwise else 2
        in_ch = x_channels + y_channels
        self.members = nn.ModuleList(
            PatchDiscriminator(in_ch, base_width, n_layers, norm)
            for _ in range(self.n_members)
        )

    def member_input(self, k: int, x: torch.Tensor, y: torch.Tensor,
                     rois: RoiMasks | torch.Tensor | None) -> torch.Tensor:
        """Masked, scale-adjusted channel concatenation seen by member ``k``.

        Masking happens at full resolution; even members downsample the
        masked product by 2x2 average pooling.
        """
        if not 1 <= k <= self.n_members:
            raise ValueError(f"member index {k} out of range 1..{self.n_members}")
        if self.labelwise:
            roi = self._roi_tensor(k, rois, like=y)
            x = x * roi
            y = y * roi
        h = torch.cat([x, y], dim=1)
        if k % 2 == 0:
            h = F.avg_pool2d(h, 2)
        return h

    def _roi_tensor(self, k: int, rois, like: torch.Tensor) -> torch.Tensor:
        if rois is None:
            raise ValueError("labelwise discriminators need ROI masks")
        if isinstance(rois, RoiMasks):
            roi = torch.as_tensor(getattr(rois, _ROI_BY_MEMBER[k - 1]),
                                  dtype=like.dtype, device=like.device)
            return roi.unsqueeze(0).unsqueeze(0)
        # tensor [B,3,H,W] stacked background/normal/lesion
        idx = {"background": 0, "normal_brain": 1, "lesion": 2}[_ROI_BY_MEMBER[k - 1]]
        return rois[:, idx:idx + 1]

    def discriminate(self, k: int, x: torch.Tensor, y: torch.Tensor,
                     rois: RoiMasks | torch.Tensor | None) -> PatchResponse:
        """Response of member ``k`` (1-based) on the ROI-masked pair."""
        return self.members[k - 1](self.member_input(k, x, y, rois))

    def respond_all(self, x: torch.Tensor, y: torch.Tensor,
                    rois: RoiMasks | torch.Tensor | None) -> list[PatchResponse]:
        return [self.discriminate(k, x, y, rois)
                for k in range(1, self.n_members + 1)]


class MultiScaleDiscriminator(nn.Module):
    """Unconditional two-scale patch discriminator (unpaired training)."""

    def __init__(self, in_channels: int, base_width: int = 64,
                 n_layers: int = 4, norm: str = "batch", n_scales: int = 2):
        super().__init__()
        self.members = nn.ModuleList(
            PatchDiscriminator(in_channels, base_width, n_layers, norm)
            for _ in range(n_scales)
        )

    def respond_all(self, x: torch.Tensor) -> list[PatchResponse]:
        responses = []
        h = x
        for member in self.members:
            responses.append(member(h))
            h = F.avg_pool2d(h, 2)
        return responses
