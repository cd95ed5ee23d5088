"""Sliding-window whole-volume inference with uniform averaging of overlapping patches."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .network import classes_to_labels

Origin = Tuple[int, int, int]


@dataclass
class SlidingSpec:
    patch_size: int = 128
    overlap: float = 0.75
    batch_size: int = 1

    @property
    def stride(self) -> int:
        return max(1, int(round(self.patch_size * (1 - self.overlap))))

    def validate(self) -> None:
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


def axis_starts(extent: int, patch: int, stride: int) -> List[int]:
    """Regular starts with the last patch clamped to end at the volume edge."""
    if extent <= patch:
        return [0]
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def tile_positions(shape: Sequence[int], spec: SlidingSpec) -> List[Origin]:
    """Patch origins in (d, h, w) raster order for a volume at least as large as the patch."""
    spec.validate()
    per_axis = [axis_starts(s, spec.patch_size, spec.stride) for s in shape]
    return [tuple(o) for o in itertools.product(*per_axis)]


def _pad_amounts(shape: Sequence[int], patch: int):
    return [((patch - s) // 2, patch - s - (patch - s) // 2) if s < patch else (0, 0) for s in shape]


def coverage(shape: Sequence[int], spec: SlidingSpec) -> np.ndarray:
    counts = np.zeros(shape, dtype=np.int64)
    p = spec.patch_size
    for d, h, w in tile_positions(shape, spec):
        counts[d:d + p, h:h + p, w:w + p] += 1
    return counts


@torch.no_grad()
def sliding_window_probs(images: np.ndarray, model: Callable[[torch.Tensor], torch.Tensor], spec: SlidingSpec,
                         order: Optional[Sequence[int]] = None, dtype: torch.dtype = torch.float32) -> np.ndarray:
    """Per-voxel class probabilities ``[C, D, H, W]`` averaged over all covering patches.

    ``model`` maps ``[B, 4, p, p, p]`` to logits ``[B, C, p, p, p]``. Volumes
    smaller than the patch along an axis are zero-padded symmetrically and
    cropped back. ``order`` permutes the tile evaluation order.
    """
    spec.validate()
    if isinstance(model, torch.nn.Module):
        model.eval()
    p = spec.patch_size
    orig = images.shape[1:]
    pads = _pad_amounts(orig, p)
    vol = np.pad(images, [(0, 0)] + pads) if any(a or b for a, b in pads) else images
    shape = vol.shape[1:]
    tiles = tile_positions(shape, spec)
    if order is not None:
        tiles = [tiles[i] for i in order]
    x_all = torch.from_numpy(np.ascontiguousarray(vol, dtype=np.float32)).to(dtype)
    acc = None
    counts = torch.zeros(shape, dtype=torch.float64)
    for i in range(0, len(tiles), spec.batch_size):
        chunk = tiles[i:i + spec.batch_size]
        x = torch.stack([x_all[:, d:d + p, h:h + p, w:w + p] for d, h, w in chunk])
        probs = torch.softmax(model(x), dim=1).to(torch.float64)
        if acc is None:
            acc = torch.zeros((probs.shape[1],) + tuple(shape), dtype=torch.float64)
        for (d, h, w), pr in zip(chunk, probs):
            acc[:, d:d + p, h:h + p, w:w + p] += pr
            counts[d:d + p, h:h + p, w:w + p] += 1
    out = (acc / counts).numpy()
    crop = tuple(slice(a, a + s) for (a, _), s in zip(pads, orig))
    return out[(slice(None),) + crop]


def sliding_window_infer(images: np.ndarray, model, spec: SlidingSpec, **kwargs):
    """Returns ``(probabilities [C, D, H, W], labels [D, H, W] in {0, 1, 2, 4})``."""
    probs = sliding_window_probs(images, model, spec, **kwargs)
    labels = classes_to_labels(torch.from_numpy(probs.argmax(0))).numpy().astype(np.uint8)
    return probs, labels


def check_model_spec(model, spec: SlidingSpec) -> None:
    """Reject a tiling setup whose patch differs from the size the network was built for."""
    if spec.patch_size != model.cfg.in_size:
        raise ValueError(f"patch size {spec.patch_size} does not match checkpoint network in_size "
                         f"{model.cfg.in_size}")
