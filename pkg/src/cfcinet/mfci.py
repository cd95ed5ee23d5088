"""Modal feature compression / interaction transformer for the bottleneck.

Data flow for four bottleneck features ``[B, C, d, h, w]``:

1. each modality is tokenized and passed through ``l1`` ordinary
   self-attention blocks (weights not shared across modalities);
2. MFC concatenates the raw features to ``4C`` channels and compresses them
   to ``out_channels`` as ``Linear(tokens(F)) + ResBlock(F)``; the result is
   re-tokenized into the compressed stream;
3. ``l2`` interaction layers update the compressed stream. Each layer
   concatenates the per-modality queries/keys along the token axis (4N
   tokens), sums the per-modality values (N tokens), reduces Q/K and raises
   V head dims, and mixes them with the compressed stream's own Q/K/V via
   ``alpha``/``beta``;
4. the stream is projected back onto the patch grid and added to the
   compressed feature.

Token counts: queries are mean-pooled over the four modality groups back to
N tokens, keys stay at 4N, and the value bank ``alpha * F_V + beta * V`` is
tiled once per modality group, so every attention matrix is ``N x 4N``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import MfciConfig
from .layers import ResBlock

Grid = Tuple[int, int, int]


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """``softmax(q k^T / sqrt(d_k)) v``; returns (output, weights)."""
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
    return weights @ v, weights


def sum_values(values: Sequence[torch.Tensor]) -> torch.Tensor:
    out = values[0]
    for v in values[1:]:
        out = out + v
    return out


def interactive_attention(
    f_q: torch.Tensor,
    f_k: torch.Tensor,
    f_v: torch.Tensor,
    q_c: torch.Tensor,
    k_c: torch.Tensor,
    v_c: torch.Tensor,
    alpha: float,
    beta: float,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mix modality and compressed streams and attend.

    Shapes: ``f_q, f_k`` are ``[B, h, M*N, d_k]`` (M modality groups),
    ``f_v`` is ``[B, h, N, d_v]``; the compressed ``q_c, k_c`` are
    ``[B, h, N, d_k]`` and ``v_c`` is ``[B, h, N, d_v]``.
    Returns ``([B, h, N, d_v], [B, h, N, M*N])``.
    """
    n = f_v.shape[-2]
    if f_q.shape[-2] != f_k.shape[-2]:
        raise ValueError(f"query/key token mismatch: {f_q.shape[-2]} vs {f_k.shape[-2]}")
    if n == 0 or f_q.shape[-2] % n:
        raise ValueError(f"concatenated token count {f_q.shape[-2]} is not a multiple of {n}")
    for name, t in (("q_c", q_c), ("k_c", k_c), ("v_c", v_c)):
        if t.shape[-2] != n:
            raise ValueError(f"{name} has {t.shape[-2]} tokens, expected {n}")
    groups = f_q.shape[-2] // n
    q_pooled = f_q.unflatten(-2, (groups, n)).mean(dim=-3)
    q = alpha * q_pooled + beta * q_c
    k = alpha * f_k + beta * torch.cat([k_c] * groups, dim=-2)
    bank = torch.cat([alpha * f_v + beta * v_c] * groups, dim=-2)
    return scaled_dot_attention(q, k, bank)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None, out_dim: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class QkvProjection(nn.Module):
    """Bias-free Q/K/V projections split into heads: ``[B, N, E] -> 3 x [B, h, N, d]``."""

    def __init__(self, embed_dim: int, heads: int, qk_dim: int, v_dim: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(embed_dim, heads * qk_dim, bias=False)
        self.k = nn.Linear(embed_dim, heads * qk_dim, bias=False)
        self.v = nn.Linear(embed_dim, heads * v_dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, -1).transpose(1, 2)

    def forward(self, tokens: torch.Tensor):
        return self._split(self.q(tokens)), self._split(self.k(tokens)), self._split(self.v(tokens))


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


class Tokenizer(nn.Module):
    """Patch embedding + projected per-channel spatial mean + learned positions.

    Tokens are laid out in raster order over the patch grid with ``w``
    fastest, then ``h``, then ``d``.
    """

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int, grid_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.patch_embed = nn.Conv3d(in_channels, embed_dim, patch_size, stride=patch_size, bias=False)
        self.channel_proj = nn.Linear(in_channels, embed_dim, bias=False)
        g = max(1, grid_size // patch_size)
        self.pos = nn.Parameter(torch.zeros(1, embed_dim, g, g, g))
        nn.init.trunc_normal_(self.pos, std=0.02)

    def positions(self, grid: Grid) -> torch.Tensor:
        pos = self.pos
        if tuple(pos.shape[2:]) != tuple(grid):
            pos = F.interpolate(pos, size=grid, mode="trilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def forward(self, f: torch.Tensor) -> Tuple[torch.Tensor, Grid]:
        p = self.patch_size
        if any(s % p for s in f.shape[2:]):
            raise ValueError(f"spatial shape {tuple(f.shape[2:])} not divisible by patch size {p}")
        x = self.patch_embed(f)
        grid = tuple(x.shape[2:])
        x = x.flatten(2).transpose(1, 2)
        x = x + self.channel_proj(f.mean(dim=(2, 3, 4))).unsqueeze(1) + self.positions(grid)
        return x, grid


class Detokenizer(nn.Module):
    """Per-token linear map back onto the patch grid (inverse of the patch embedding)."""

    def __init__(self, embed_dim: int, out_channels: int, patch_size: int):
        super().__init__()
        self.out_channels = out_channels
        self.patch_size = patch_size
        self.linear = nn.Linear(embed_dim, out_channels * patch_size ** 3)

    def forward(self, tokens: torch.Tensor, grid: Grid) -> torch.Tensor:
        b = tokens.shape[0]
        p, c = self.patch_size, self.out_channels
        gd, gh, gw = grid
        x = self.linear(tokens).view(b, gd, gh, gw, c, p, p, p)
        x = x.permute(0, 4, 1, 5, 2, 6, 3, 7)
        return x.reshape(b, c, gd * p, gh * p, gw * p)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block used for single-modality extraction."""

    def __init__(self, embed_dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(embed_dim)
        self.qkv = QkvProjection(embed_dim, heads, embed_dim // heads, embed_dim // heads)
        self.proj = nn.Linear(embed_dim, embed_dim)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.mlp = Mlp(embed_dim, int(embed_dim * mlp_ratio))

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        q, k, v = self.qkv(self.norm1(x))
        out, weights = scaled_dot_attention(q, k, v)
        x = x + self.proj(_merge_heads(out))
        x = x + self.mlp(self.norm2(x))
        return (x, weights) if return_attention else x


class MFILayer(nn.Module):
    """One interaction layer: updates the compressed stream ``x`` using the modality streams."""

    def __init__(self, embed_dim: int, heads: int, alpha: float = 0.5, beta: float = 0.5,
                 mlp_ratio: float = 4.0, n_modalities: int = 4):
        super().__init__()
        d_h = embed_dim // heads
        self.d_k = max(1, d_h // 2)
        self.d_v = 2 * d_h
        self.alpha, self.beta = alpha, beta
        self.norm_x = nn.LayerNorm(embed_dim)
        self.norm_m = nn.ModuleList([nn.LayerNorm(embed_dim) for _ in range(n_modalities)])
        self.modality_qkv = nn.ModuleList([QkvProjection(embed_dim, heads, d_h, d_h) for _ in range(n_modalities)])
        # head-dim reduction for Q/K and raise for V, each followed by an MLP
        self.linear_q = nn.Linear(d_h, self.d_k)
        self.mlp_q = Mlp(self.d_k, 2 * self.d_k)
        self.linear_k = nn.Linear(d_h, self.d_k)
        self.mlp_k = Mlp(self.d_k, 2 * self.d_k)
        self.linear_v = nn.Linear(d_h, self.d_v)
        self.mlp_v = Mlp(self.d_v, 2 * self.d_v)
        self.compressed_qkv = QkvProjection(embed_dim, heads, self.d_k, self.d_v)
        self.proj = nn.Linear(heads * self.d_v, embed_dim)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ffn = Mlp(embed_dim, int(embed_dim * mlp_ratio))

    def modality_streams(self, mods: Sequence[torch.Tensor]):
        """Per-modality Q/K concatenated along tokens and V summed (before reduce/raise)."""
        qkvs = [proj(norm(m)) for m, norm, proj in zip(mods, self.norm_m, self.modality_qkv)]
        f_q = torch.cat([q for q, _, _ in qkvs], dim=2)
        f_k = torch.cat([k for _, k, _ in qkvs], dim=2)
        f_v = sum_values([v for _, _, v in qkvs])
        return f_q, f_k, f_v

    def forward(self, x: torch.Tensor, mods: Sequence[torch.Tensor], return_attention: bool = False):
        if len(mods) != len(self.modality_qkv):
            raise ValueError(f"expected {len(self.modality_qkv)} modality streams, got {len(mods)}")
        for m in mods:
            if m.shape != x.shape:
                raise ValueError(f"modality stream shape {tuple(m.shape)} != compressed stream {tuple(x.shape)}")
        f_q, f_k, f_v = self.modality_streams(mods)
        f_q = self.mlp_q(self.linear_q(f_q + f_q.mean(dim=2, keepdim=True)))
        f_k = self.mlp_k(self.linear_k(f_k + f_k.mean(dim=2, keepdim=True)))
        f_v = self.mlp_v(self.linear_v(f_v))
        q_c, k_c, v_c = self.compressed_qkv(self.norm_x(x))
        out, weights = interactive_attention(f_q, f_k, f_v, q_c, k_c, v_c, self.alpha, self.beta)
        x = x + self.proj(_merge_heads(out))
        x = x + self.ffn(self.norm2(x))
        return (x, weights) if return_attention else x


@dataclass
class CompressedFeature:
    feature: torch.Tensor  # [B, C_out, d, h, w]
    tokens: torch.Tensor | None  # [B, N, E] compressed stream, None when MFI is off
    grid: Grid | None


class MFC(nn.Module):
    """Compresses the four concatenated modality features from 4C to ``out_channels``."""

    def __init__(self, channels: int, out_channels: int, embed_dim: int, patch_size: int, grid_size: int,
                 norm: str = "batch", enabled: bool = True, emit_tokens: bool = True):
        super().__init__()
        self.enabled = enabled
        if enabled:
            self.tokenizer = Tokenizer(4 * channels, embed_dim, patch_size, grid_size)
            self.seq_linear = Detokenizer(embed_dim, out_channels, patch_size)
            self.resblock = ResBlock(4 * channels, out_channels, norm)
        else:
            self.proj = nn.Conv3d(4 * channels, out_channels, 1, bias=False)
        self.out_tokenizer = Tokenizer(out_channels, embed_dim, patch_size, grid_size) if emit_tokens else None

    def forward(self, t1, t1ce, t2, flair) -> CompressedFeature:
        shape = t1.shape
        for t in (t1ce, t2, flair):
            if t.shape != shape:
                raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")
        f = torch.cat([t1, t1ce, t2, flair], dim=1)
        if self.enabled:
            seq, grid = self.tokenizer(f)
            fc = self.seq_linear(seq, grid) + self.resblock(f)
        else:
            fc = self.proj(f)
        tokens = grid = None
        if self.out_tokenizer is not None:
            tokens, grid = self.out_tokenizer(fc)
        return CompressedFeature(fc, tokens, grid)


class MFCI(nn.Module):
    def __init__(self, cfg: MfciConfig, norm: str = "batch"):
        super().__init__()
        cfg.validate()
        if cfg.bottleneck_channels < 1 or cfg.out_channels < 1:
            raise ValueError("bottleneck_channels and out_channels must be set")
        self.cfg = cfg
        c, e, p, g = cfg.bottleneck_channels, cfg.embed_dim, cfg.patch_size, cfg.grid_size
        self.mfc = MFC(c, cfg.out_channels, e, p, g, norm, enabled=cfg.use_mfc, emit_tokens=cfg.use_mfi)
        if cfg.use_mfi:
            self.tokenizers = nn.ModuleList([Tokenizer(c, e, p, g) for _ in range(4)])
            self.single = nn.ModuleList([
                nn.ModuleList([TransformerBlock(e, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.l1)])
                for _ in range(4)
            ])
            self.interact = nn.ModuleList([
                MFILayer(e, cfg.heads, cfg.alpha, cfg.beta, cfg.mlp_ratio) for _ in range(cfg.l2)
            ])
            self.norm = nn.LayerNorm(e)
            self.detok = Detokenizer(e, cfg.out_channels, p)

    def modality_tokens(self, feats: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        out = []
        for f, tok, blocks in zip(feats, self.tokenizers, self.single):
            x, _ = tok(f)
            for blk in blocks:
                x = blk(x)
            out.append(x)
        return out

    def forward(self, t1, t1ce, t2, flair, return_attention: bool = False):
        comp = self.mfc(t1, t1ce, t2, flair)
        if not self.cfg.use_mfi:
            return (comp.feature, []) if return_attention else comp.feature
        mods = self.modality_tokens([t1, t1ce, t2, flair])
        x = comp.tokens
        maps = []
        for layer in self.interact:
            x, w = layer(x, mods, return_attention=True)
            maps.append(w)
        out = comp.feature + self.detok(self.norm(x), comp.grid)
        return (out, maps) if return_attention else out
