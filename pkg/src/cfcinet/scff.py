"""Selective complementary feature fusion (SCFF).

Two modalities A, B are blended voxelwise as ``g * A + (1 - g) * B`` where the
gate ``g`` comes from spatial (axis-pooled, pointwise-mixed) and channel
(ECA-style 1D conv) attention logits computed on ``A + B``. Two such pairs
are concatenated and refined by two conv-BN-ReLU stages.
"""

from __future__ import annotations

import math
from typing import Dict, Tuple

import torch
import torch.nn as nn

from .config import MODALITIES, PAIRINGS
from .layers import make_norm


def channel_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive 1D kernel size ``[(log2(C) + b) / gamma]_odd``.

    Floors, then bumps an even result to the next odd number.
    """
    if channels < 1:
        raise ValueError(f"channel count must be >= 1, got {channels}")
    t = int((math.log2(channels) + b) / gamma)
    return t if t % 2 else t + 1


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


class SpatialWeight(nn.Module):
    """Sum of three axis-retaining average pools, each mixed by a 1x1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_d = nn.Conv3d(channels, channels, 1)
        self.conv_h = nn.Conv3d(channels, channels, 1)
        self.conv_w = nn.Conv3d(channels, channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        f_d = f.mean(dim=(3, 4), keepdim=True)  # [B, C, D, 1, 1]
        f_h = f.mean(dim=(2, 4), keepdim=True)  # [B, C, 1, H, 1]
        f_w = f.mean(dim=(2, 3), keepdim=True)  # [B, C, 1, 1, W]
        return self.conv_d(f_d) + self.conv_h(f_h) + self.conv_w(f_w)


class ChannelWeight(nn.Module):
    """Global average pool followed by a shared 1D conv across the channel axis."""

    def __init__(self, channels: int):
        super().__init__()
        self.kernel_size = channel_kernel_size(channels)
        self.conv = nn.Conv1d(1, 1, self.kernel_size, padding=(self.kernel_size - 1) // 2, bias=False)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        y = f.mean(dim=(2, 3, 4))  # [B, C]
        y = self.conv(y.unsqueeze(1)).squeeze(1)
        return y[:, :, None, None, None]


class ComplementaryGate(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.spatial = SpatialWeight(channels)
        self.channel = ChannelWeight(channels)

    def logits(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        _check_same_shape(fa, fb)
        f = fa + fb
        return self.spatial(f) + self.channel(f)

    def forward(self, fa: torch.Tensor, fb: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(fa, fb))


def complementary_blend(a: torch.Tensor, b: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    return gate * a + (1 - gate) * b


class SCFF(nn.Module):
    """Fuses four same-shape modality features into one map of ``out_channels``.

    Inputs are passed in the canonical order t1, t1ce, t2, flair (keywords
    work too); ``pairing`` picks which modalities are gated against each other.
    """

    def __init__(self, channels: int, out_channels: int | None = None,
                 pairing: str = "t1_t2+t1ce_flair", norm: str = "batch"):
        super().__init__()
        if pairing not in PAIRINGS:
            raise ValueError(f"unknown pairing {pairing!r}")
        out_channels = out_channels or channels
        self.pairs = PAIRINGS[pairing]
        self.gates = nn.ModuleList([ComplementaryGate(channels) for _ in self.pairs])
        self.refine = nn.Sequential(
            nn.Conv3d(2 * channels, out_channels, 3, padding=1, bias=False),
            make_norm(norm, out_channels),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False),
            make_norm(norm, out_channels),
            nn.ReLU(inplace=True),
        )

    def fuse_pairs(self, feats: Dict[str, torch.Tensor]) -> Tuple[torch.Tensor, Tuple[torch.Tensor, ...]]:
        """Concatenated pair blends and the gate applied to the first member of each pair."""
        _check_same_shape(*(feats[m] for m in MODALITIES))
        halves, gates = [], []
        for (ma, mb), gate_mod in zip(self.pairs, self.gates):
            a, b = feats[ma], feats[mb]
            g = gate_mod(a, b)
            halves.append(complementary_blend(a, b, g))
            gates.append(g)
        return torch.cat(halves, dim=1), tuple(gates)

    def forward(self, t1: torch.Tensor, t1ce: torch.Tensor, t2: torch.Tensor, flair: torch.Tensor) -> torch.Tensor:
        z, _ = self.fuse_pairs({"t1": t1, "t1ce": t1ce, "t2": t2, "flair": flair})
        return self.refine(z)


class ConcatFusion(nn.Module):
    """Plain concat + 1x1x1 conv fusion used when SCFF is ablated."""

    def __init__(self, channels: int, out_channels: int | None = None, norm: str = "batch"):
        super().__init__()
        out_channels = out_channels or channels
        self.proj = nn.Sequential(
            nn.Conv3d(4 * channels, out_channels, 1, bias=False),
            make_norm(norm, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, t1, t1ce, t2, flair):
        return self.proj(torch.cat([t1, t1ce, t2, flair], dim=1))

