"""Synthesis generator: shared encoder and residual trunk, plus a stretch-out
decoder with one sub-module per output sequence.

Each decoder branch taps its feature map at half resolution, predicts an
intermediate image there (synthesis module, SM), scores per-pixel confidence
for it (confidence map module, CM), and feeds the confidence-masked
intermediate back, concatenated with the tapped features, into the final
upsampling stage. Encoder and decoder are exposed separately so the decoder
can serve as the image-domain decoder in unpaired training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import N_MASK_LABELS, N_SEQUENCES

PRIOR_CHANNELS = 3
PAIRED_IN_CHANNELS = N_MASK_LABELS + 3 * N_SEQUENCES   # mask + atlas triplets
UNPAIRED_IN_CHANNELS = N_MASK_LABELS + PRIOR_CHANNELS  # mask + tissue priors


class SynthesisError(Exception):
    """Non-finite values appeared during synthesis; message names the stage."""


@dataclass
class GeneratorConfig:
    """Topology parameters; the defaults mirror the full-scale network."""

    in_channels: int = PAIRED_IN_CHANNELS
    out_channels: int = N_SEQUENCES
    base_width: int = 64
    n_down: int = 4
    n_resblocks_enc: int = 3
    n_resblocks_dec: int = 3
    sm_blocks: int = 4
    cm_blocks: int = 4
    norm: str = "batch"
    stretch_out: bool = True

    def __post_init__(self) -> None:
        if self.in_channels <= 0:
            raise ValueError("in_channels must be positive")
        if self.norm not in ("batch", "instance"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def n_branches(self) -> int:
        return self.out_channels if self.stretch_out else 1

    @property
    def trunk_channels(self) -> int:
        return self.base_width * (2 ** self.n_down)


@dataclass
class SynthesisOutput:
    """Full-scale stack, half-scale intermediates, confidences, tapped features."""

    y_hat: torch.Tensor           # [B, 5, H, W]
    y_hat_half: torch.Tensor      # [B, 5, H/2, W/2]
    confidence_half: torch.Tensor  # [B, 5, H/2, W/2], strictly in (0,1)
    features_half: list[torch.Tensor]  # per branch, [B, C_f, H/2, W/2]


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=True)


def _conv_block(in_ch: int, out_ch: int, kernel: int, stride: int,
                norm: str) -> nn.Sequential:
    pad = kernel // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride, pad),
        _norm_layer(norm, out_ch),
        nn.ReLU(inplace=True),
    )


def _deconv_block(in_ch: int, out_ch: int, norm: str) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1,
                           output_padding=1),
        _norm_layer(norm, out_ch),
        nn.ReLU(inplace=True),
    )


class ResBlock(nn.Module):
    """Two 3x3 convs with normalization and an identity skip."""

    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            _norm_layer(norm, channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, 1, 1),
            _norm_layer(norm, channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


def _conv_stack(in_ch: int, hidden: int, out_ch: int, n_blocks: int,
                norm: str) -> nn.Sequential:
    """n_blocks conv blocks; the last is a bare conv into a sigmoid."""
    layers: list[nn.Module] = []
    ch = in_ch
    for _ in range(n_blocks - 1):
        layers.append(_conv_block(ch, hidden, 3, 1, norm))
        ch = hidden
    layers.append(nn.Conv2d(ch, out_ch, 3, 1, 1))
    layers.append(nn.Sigmoid())
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """7x7 stem, four stride-2 conv stages, then residual blocks."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        w, norm = config.base_width, config.norm
        stages: list[nn.Module] = [_conv_block(config.in_channels, w, 7, 1, norm)]
        ch = w
        for _ in range(config.n_down):
            stages.append(_conv_block(ch, ch * 2, 3, 2, norm))
            ch *= 2
        stages.extend(ResBlock(ch, norm) for _ in range(config.n_resblocks_enc))
        self.net = nn.Sequential(*stages)
        self.out_channels = ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SynthesisBranch(nn.Module):
    """One stretch-out sub-module: three upsampling stages, SM/CM at half
    resolution, confidence-masked feedback, final upsampling and 7x7 head."""

    def __init__(self, config: GeneratorConfig, out_ch: int):
        super().__init__()
        w, norm = config.base_width, config.norm
        trunk = config.trunk_channels
        self.up1 = _deconv_block(trunk, trunk // 2, norm)       # H/8
        self.up2 = _deconv_block(trunk // 2, trunk // 4, norm)  # H/4
        self.up3 = _deconv_block(trunk // 4, trunk // 8, norm)  # H/2, taps f
        feat_ch = trunk // 8
        self.sm = _conv_stack(feat_ch, w, out_ch, config.sm_blocks, norm)
        self.cm = _conv_stack(feat_ch + out_ch, w, out_ch, config.cm_blocks, norm)
        self.up4 = _deconv_block(feat_ch + out_ch, w, norm)     # H
        self.head = nn.Sequential(nn.Conv2d(w, out_ch, 7, 1, 3), nn.Sigmoid())

    def forward(self, trunk: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        f_half = self.up3(self.up2(self.up1(trunk)))
        y_half = self.sm(f_half)
        conf = self.cm(torch.cat([f_half, y_half], dim=1))
        guided = torch.cat([conf * y_half, f_half], dim=1)
        y_full = self.head(self.up4(guided))
        return y_full, y_half, conf, f_half


class Decoder(nn.Module):
    """Shared residual blocks feeding the stretch-out branches."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        trunk = config.trunk_channels
        self.res = nn.Sequential(*[ResBlock(trunk, config.norm)
                                   for _ in range(config.n_resblocks_dec)])
        per_branch = (1 if config.stretch_out else config.out_channels)
        self.branches = nn.ModuleList(
            SynthesisBranch(config, per_branch)
            for _ in range(config.n_branches)
        )

    def forward(self, latent: torch.Tensor) -> SynthesisOutput:
        trunk = self.res(latent)
        fulls, halves, confs, feats = [], [], [], []
        for branch in self.branches:
            y_full, y_half, conf, f_half = branch(trunk)
            fulls.append(y_full)
            halves.append(y_half)
            confs.append(conf)
            feats.append(f_half)
        out = SynthesisOutput(
            y_hat=torch.cat(fulls, dim=1),
            y_hat_half=torch.cat(halves, dim=1),
            confidence_half=torch.cat(confs, dim=1),
            features_half=feats,
        )
        for name in ("y_hat", "y_hat_half", "confidence_half"):
            t = getattr(out, name)
            if not torch.isfinite(t).all():
                raise SynthesisError(f"non-finite values in {name}")
        return out


class Generator(nn.Module):
    """Encoder + stretch-out decoder; ``forward`` returns a SynthesisOutput."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x)

    def decode(self, latent: torch.Tensor) -> SynthesisOutput:
        return self.decoder(latent)

    def forward(self, x: torch.Tensor) -> SynthesisOutput:
        return self.decode(self.encode(x))

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected [B,{self.config.in_channels},H,W], got {tuple(x.shape)}"
            )
        div = 2 ** self.config.n_down
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"H and W must be divisible by {div}, got {x.shape[2]}x{x.shape[3]}"
            )
        if not torch.isfinite(x).all():
            raise SynthesisError("non-finite values in generator input")


class MaskPriorDecoder(nn.Module):
    """Decoder into the mask + tissue-prior domain (unpaired domain 1).

    Symmetric to the encoder: residual blocks, four transposed-conv stages,
    7x7 head. The first five output channels are softmaxed (a distribution
    over mask labels), the remaining prior channels are sigmoided.
    """

    def __init__(self, config: GeneratorConfig,
                 out_channels: int = UNPAIRED_IN_CHANNELS,
                 mask_channels: int = N_MASK_LABELS):
        super().__init__()
        w, norm = config.base_width, config.norm
        trunk = config.trunk_channels
        self.mask_channels = mask_channels
        self.net = nn.Sequential(
            *[ResBlock(trunk, norm) for _ in range(config.n_resblocks_dec)],
            _deconv_block(trunk, trunk // 2, norm),
            _deconv_block(trunk // 2, trunk // 4, norm),
            _deconv_block(trunk // 4, trunk // 8, norm),
            _deconv_block(trunk // 8, w, norm),
            nn.Conv2d(w, out_channels, 7, 1, 3),
        )

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        raw = self.net(latent)
        mask = torch.softmax(raw[:, :self.mask_channels], dim=1)
        priors = torch.sigmoid(raw[:, self.mask_channels:])
        return torch.cat([mask, priors], dim=1)


def init_weights(module: nn.Module, conv_std: float = 0.02) -> nn.Module:
    """Normal(0, 0.02) conv init, the convention of this GAN family."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, conv_std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)):
            if m.weight is not None:
                nn.init.normal_(m.weight, 1.0, conv_std)
                nn.init.zeros_(m.bias)
    return module


def build_generator(config: GeneratorConfig, seed: int | None = None,
                    probe: bool = True) -> Generator:
    """Construct a generator; optionally seed initialization and run a probe
    forward pass asserting confidence stays strictly inside (0,1)."""
    if seed is not None:
        torch.manual_seed(seed)
    gen = init_weights(Generator(config))
    if probe:
        div = 2 ** config.n_down
        side = div * 2
        was_training = gen.training
        gen.eval()  # fresh running stats; probe leaves no side effects
        with torch.no_grad():
            out = gen(torch.rand(1, config.in_channels, side, side))
        gen.train(was_training)
        c = out.confidence_half
        if c.min() <= 0.0 or c.max() >= 1.0:
            raise SynthesisError("confidence saturated to 0/1 at initialization")
    return gen
