"""BraTS-style case I/O, intensity normalization, augmentation and synthetic phantoms."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import nibabel as nib
import numpy as np
from scipy import ndimage

from .config import MODALITIES
from .metrics import validate_labels

SEG_SUFFIX = "seg"


@dataclass
class Case:
    """Four co-registered modalities stacked as ``[4, D, H, W]`` in t1, t1ce, t2, flair order."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    case_id: str = "case"
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != len(MODALITIES):
            raise ValueError(f"images must be [4, D, H, W], got {self.images.shape}")
        if self.labels is not None:
            if self.labels.shape != self.images.shape[1:]:
                raise ValueError(f"label shape {self.labels.shape} != image shape {self.images.shape[1:]}")
            validate_labels(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _find(directory: Path, suffix: str) -> Optional[Path]:
    for ext in (".nii.gz", ".nii"):
        hits = sorted(directory.glob(f"*_{suffix}{ext}"))
        if hits:
            return hits[0]
    return None


def load_case(directory: str | Path) -> Case:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"case directory not found: {directory}")
    volumes = []
    affine = None
    spacing = (1.0, 1.0, 1.0)
    for mod in MODALITIES:
        path = _find(directory, mod)
        if path is None:
            raise FileNotFoundError(f"missing modality '{mod}' in {directory}")
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
        if volumes and data.shape != volumes[0].shape:
            raise ValueError(f"shape mismatch: {mod} has {data.shape}, expected {volumes[0].shape}")
        if affine is None:
            affine = img.affine
            spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
        volumes.append(data)
    labels = None
    seg = _find(directory, SEG_SUFFIX)
    if seg is not None:
        raw = np.asarray(nib.load(str(seg)).dataobj)
        if raw.shape != volumes[0].shape:
            raise ValueError(f"shape mismatch: seg has {raw.shape}, expected {volumes[0].shape}")
        if not np.all(raw == np.round(raw)):
            raise ValueError("invalid label volume: non-integer values")
        labels = validate_labels(raw.astype(np.uint8))
    return Case(np.stack(volumes), labels, directory.name, spacing, affine)


def _affine(case: Case) -> np.ndarray:
    if case.affine is not None:
        return case.affine
    return np.diag(list(case.spacing) + [1.0])


def write_case(case: Case, directory: str | Path) -> Path:
    """Write a case using BraTS naming ``<id>_<modality>.nii.gz``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    affine = _affine(case)
    for mod, vol in zip(MODALITIES, case.images):
        nib.save(nib.Nifti1Image(np.asarray(vol, dtype=np.float32), affine),
                 str(directory / f"{case.case_id}_{mod}.nii.gz"))
    if case.labels is not None:
        save_labels(case.labels, directory / f"{case.case_id}_{SEG_SUFFIX}.nii.gz", affine)
    return directory


def save_labels(labels: np.ndarray, path: str | Path, affine: Optional[np.ndarray] = None) -> None:
    affine = np.eye(4) if affine is None else affine
    img = nib.Nifti1Image(np.asarray(labels, dtype=np.uint8), affine)
    nib.save(img, str(path))


def load_labels(path: str | Path) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return validate_labels(np.rint(data).astype(np.uint8)), spacing


def normalize(case: Case) -> Case:
    """Per-modality z-score over nonzero (brain) voxels; background stays exactly 0."""
    out = np.zeros_like(case.images, dtype=np.float32)
    for i, (mod, vol) in enumerate(zip(MODALITIES, case.images)):
        mask = vol != 0
        if not mask.any():
            raise ValueError(f"modality '{mod}' is all zero; cannot normalize")
        vals = vol[mask].astype(np.float64)
        std = vals.std()
        out[i][mask] = (vals - vals.mean()) / (std if std > 0 else 1.0)
    return replace(case, images=out)


@dataclass
class AugmentationSpec:
    scale_range: Tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    crop_size: int = 128

    def validate(self) -> None:
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale range {self.scale_range}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")


def _pad_to(arr: np.ndarray, size: int, axes_offset: int) -> np.ndarray:
    pads = [(0, 0)] * arr.ndim
    for ax in range(axes_offset, arr.ndim):
        short = max(0, size - arr.shape[ax])
        pads[ax] = (short // 2, short - short // 2)
    return np.pad(arr, pads) if any(p != (0, 0) for p in pads) else arr


def augment(images: np.ndarray, labels: Optional[np.ndarray], spec: AugmentationSpec,
            rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Random scale, per-axis flips and crop, applied identically to every modality and the labels.

    Images are resampled trilinearly, labels by nearest neighbour. A scaled
    volume smaller than the crop is zero-padded symmetrically.
    """
    spec.validate()
    shape = images.shape[1:]
    if any(spec.crop_size > s for s in shape):
        raise ValueError(f"crop size {spec.crop_size} larger than volume {shape}")
    scale = float(rng.uniform(*spec.scale_range))
    flips = rng.random(3) < spec.flip_prob
    if scale != 1.0:
        images = np.stack([ndimage.zoom(v, scale, order=1) for v in images])
        if labels is not None:
            labels = ndimage.zoom(labels, scale, order=0)
    for axis in np.flatnonzero(flips):
        images = np.flip(images, axis=axis + 1)
        if labels is not None:
            labels = np.flip(labels, axis=axis)
    images = _pad_to(images, spec.crop_size, 1)
    if labels is not None:
        labels = _pad_to(labels, spec.crop_size, 0)
    starts = [int(rng.integers(0, s - spec.crop_size + 1)) for s in images.shape[1:]]
    sl = tuple(slice(s, s + spec.crop_size) for s in starts)
    images = np.ascontiguousarray(images[(slice(None),) + sl])
    if labels is not None:
        labels = np.ascontiguousarray(labels[sl])
    return images, labels


def random_crop(images: np.ndarray, labels: Optional[np.ndarray], size: int,
                rng: np.random.Generator) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    return augment(images, labels, AugmentationSpec((1.0, 1.0), 0.0, size), rng)


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


# mean intensity per tissue (background, brain, edema, necrosis, enhancing) for each modality
_CONTRAST = {
    "t1": (0.0, 1.0, 0.8, 0.5, 0.9),
    "t1ce": (0.0, 1.0, 0.9, 0.4, 2.2),
    "t2": (0.0, 1.0, 1.9, 2.4, 1.6),
    "flair": (0.0, 1.0, 2.3, 1.5, 1.8),
}


def synth_case(rng: np.random.Generator, size: int = 32, noise: float = 0.05, case_id: str = "synth") -> Case:
    """Ellipsoidal brain phantom with nested edema / enhancing / necrotic regions."""
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    grid = np.meshgrid(*(np.arange(size, dtype=np.float64),) * 3, indexing="ij")
    mid = (size - 1) / 2
    brain = _ellipsoid(grid, (mid,) * 3, rng.uniform(0.38, 0.46, 3) * size)
    center = mid + rng.uniform(-0.08, 0.08, 3) * size
    wt_r = rng.uniform(0.24, 0.3, 3) * size
    tc_r = wt_r * rng.uniform(0.55, 0.7)
    nc_r = tc_r * rng.uniform(0.45, 0.6)
    wt = _ellipsoid(grid, center, wt_r) & brain
    tc = _ellipsoid(grid, center, tc_r) & wt
    nc = _ellipsoid(grid, center, nc_r) & tc
    labels = np.zeros((size,) * 3, dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 4
    labels[nc] = 1
    tissue = np.zeros((size,) * 3, dtype=np.int64)
    tissue[brain] = 1
    tissue[labels == 2] = 2
    tissue[labels == 1] = 3
    tissue[labels == 4] = 4
    images = []
    for mod in MODALITIES:
        vol = np.asarray(_CONTRAST[mod], dtype=np.float64)[tissue]
        vol = vol + noise * rng.standard_normal(vol.shape) * brain
        images.append(np.where(brain, np.maximum(vol, 1e-3), 0.0))
    return Case(np.stack(images).astype(np.float32), labels, case_id)
