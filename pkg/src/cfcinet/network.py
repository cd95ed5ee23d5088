"""CFCI-Net: four parallel residual encoders, SCFF skip fusion, MFCI bottleneck, U-Net decoder."""

from __future__ import annotations

import math
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MODALITIES, NetworkConfig
from .layers import ConvNormAct, ResBlock, param_count
from .mfci import MFCI
from .scff import SCFF, ConcatFusion

# network class index -> BraTS label value
CLASS_TO_LABEL = (0, 1, 2, 4)
LABEL_TO_CLASS = {0: 0, 1: 1, 2: 2, 4: 3}

# initial per-voxel probability of each tumour class; background takes the rest
FOREGROUND_PRIOR = 0.01


def labels_to_classes(labels: torch.Tensor) -> torch.Tensor:
    out = labels.clone()
    out[labels == 4] = 3
    return out.long()


def classes_to_labels(classes: torch.Tensor) -> torch.Tensor:
    lut = torch.tensor(CLASS_TO_LABEL, dtype=torch.long, device=classes.device)
    return lut[classes.long()]


class Encoder(nn.Module):
    """Conv + residual stem at full resolution, then ``len(widths)`` stride-2 stages.

    ``forward`` returns ``[stem, stage_1, ..., stage_depth]``; the last entry
    is the bottleneck, the others are skip features.
    """

    def __init__(self, in_channels: int, widths, norm: str = "batch"):
        super().__init__()
        self.depth = len(widths)
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, widths[0], 3, padding=1, bias=False),
            ResBlock(widths[0], widths[0], norm),
        )
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv3d(prev, w, 3, stride=2, padding=1, bias=False),
                ResBlock(w, w, norm),
            ))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        factor = 2 ** self.depth
        if any(s % factor for s in x.shape[2:]):
            raise ValueError(f"spatial shape {tuple(x.shape[2:])} not divisible by {factor}")
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, norm: str):
        super().__init__()
        self.conv = nn.Sequential(
            ConvNormAct(in_ch + skip_ch, out_ch, norm),
            ConvNormAct(out_ch, out_ch, norm),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[2:], mode="trilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class CFCINet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = list(cfg.widths)
        skip_widths = [w[0]] + w[:-1]  # stem + all stages but the bottleneck
        if cfg.parallel:
            self.encoders = nn.ModuleList([Encoder(1, w, cfg.norm) for _ in MODALITIES])
            if cfg.use_scff:
                self.fusions = nn.ModuleList([SCFF(c, c, cfg.pairing, cfg.norm) for c in skip_widths])
            else:
                self.fusions = nn.ModuleList([ConcatFusion(c, c, cfg.norm) for c in skip_widths])
            if cfg.use_mfci:
                self.bottleneck = MFCI(cfg.resolved_mfci(), cfg.norm)
            else:
                self.bottleneck = ConcatFusion(w[-1], w[-1], cfg.norm)
        else:
            self.encoders = nn.ModuleList([Encoder(len(MODALITIES), w, cfg.norm)])
            self.fusions = None
            self.bottleneck = None
        ups = []
        prev = w[-1]
        for c in reversed(skip_widths):
            ups.append(DecoderStage(prev, c, c, cfg.norm))
            prev = c
        self.decoder = nn.ModuleList(ups)
        self.head = nn.Conv3d(prev, cfg.num_classes, 1)
        self._init_head_prior(FOREGROUND_PRIOR)

    def _init_head_prior(self, prior: float) -> None:
        # The Dice loss ignores background, so without a prior the background
        # logit is unconstrained and a small class can flood it early on.
        fg = self.cfg.num_classes - 1
        with torch.no_grad():
            self.head.bias.zero_()
            self.head.bias[1:] = math.log(prior / (1 - fg * prior))

    def encode(self, x: torch.Tensor):
        """Per-level fused skips and the bottleneck feature."""
        if x.ndim != 5 or x.shape[1] != len(MODALITIES):
            raise ValueError(f"expected [B, 4, D, H, W] input, got {tuple(x.shape)}")
        if not self.cfg.parallel:
            feats = self.encoders[0](x)
            return feats[:-1], feats[-1]
        per_mod = [enc(x[:, i:i + 1]) for i, enc in enumerate(self.encoders)]
        skips = [fuse(*(f[level] for f in per_mod)) for level, fuse in enumerate(self.fusions)]
        bottom = self.bottleneck(*(f[-1] for f in per_mod))
        return skips, bottom

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips, y = self.encode(x)
        for stage, skip in zip(self.decoder, reversed(skips)):
            y = stage(y, skip)
        return self.head(y)


def build_model(cfg: NetworkConfig) -> CFCINet:
    return CFCINet(cfg)


def param_count_millions(model: nn.Module) -> float:
    return param_count(model) / 1e6
