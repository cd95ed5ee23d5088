"""Soft Dice loss, the training loop, checkpoints and the ablation runner."""

from __future__ import annotations

import copy
import csv
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import PAIRINGS, Config
from .data import AugmentationSpec, Case, augment, normalize, synth_case
from .metrics import region_metrics
from .infer import SlidingSpec, sliding_window_infer
from .network import CFCINet, classes_to_labels, labels_to_classes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def soft_dice_loss(probs: torch.Tensor, onehot: torch.Tensor, eps: float = 1e-5,
                   classes: Optional[Sequence[int]] = None) -> torch.Tensor:
    """``1 - mean_c (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` over the chosen class channels."""
    if probs.shape != onehot.shape:
        raise ValueError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(onehot.shape)}")
    if classes is not None:
        probs, onehot = probs[:, list(classes)], onehot[:, list(classes)]
    dims = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1 - ((2 * inter + eps) / (denom + eps)).mean()


def dice_loss(logits: torch.Tensor, labels: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice on softmax probabilities, averaged over the three tumour classes.

    ``labels`` holds BraTS values {0, 1, 2, 4} with shape ``[B, D, H, W]``.
    """
    if logits.ndim != 5 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not match")
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels_to_classes(labels), logits.shape[1]).movedim(-1, 1).to(probs.dtype)
    return soft_dice_loss(probs, onehot, eps, classes=range(1, logits.shape[1]))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def make_optimizer(model: torch.nn.Module, cfg):
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)


def make_scheduler(optimizer, cfg):
    if cfg.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs * cfg.steps_per_epoch)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda _: 1.0)


def save_checkpoint(path: str | Path, model: CFCINet, cfg: Config, optimizer=None, scheduler=None,
                    epoch: int = 0, step: int = 0, rng: Optional[np.random.Generator] = None) -> None:
    state = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "epoch": epoch,
        "step": step,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state if rng is not None else None,
    }
    torch.save(state, str(path))


def load_checkpoint(path: str | Path):
    """Returns ``(model, config, raw_state)``; the model is rebuilt from the stored config."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(str(path), map_location="cpu", weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    cfg = Config.from_dict(state["config"]).validate()
    model = CFCINet(cfg.network)
    model.load_state_dict(state["model"])
    return model, cfg, state


@torch.no_grad()
def predict_labels(model: CFCINet, images: np.ndarray, overlap: float = 0.75) -> np.ndarray:
    """Label map for a ``[4, D, H, W]`` volume; sliding window unless the volume is exactly one patch."""
    model.eval()
    dtype = next(model.parameters()).dtype
    if all(s == model.cfg.in_size for s in images.shape[1:]):
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))[None].to(dtype)
        return classes_to_labels(model(x).argmax(1))[0].numpy().astype(np.uint8)
    spec = SlidingSpec(model.cfg.in_size, overlap)
    return sliding_window_infer(images, model, spec, dtype=dtype)[1]


def evaluate_cases(model: CFCINet, cases: Sequence[Case]) -> Dict[str, float]:
    """Mean Dice per region over ``cases``."""
    scores = {"WT": [], "TC": [], "ET": []}
    for case in cases:
        report = region_metrics(predict_labels(model, case.images), case.labels)
        for region in scores:
            scores[region].append(report[region]["dice"])
    return {r: float(np.mean(v)) for r, v in scores.items()}


@dataclass
class TrainResult:
    model: CFCINet
    history: List[Dict[str, float]] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    best_path: Optional[Path] = None
    last_path: Optional[Path] = None


class NonFiniteLoss(RuntimeError):
    pass


def _batch(cases: Sequence[Case], cfg, rng: np.random.Generator):
    imgs, labs = [], []
    for case in cases:
        if cfg.augment:
            spec = AugmentationSpec(tuple(cfg.scale_range), cfg.flip_prob, cfg.crop_size)
            im, lb = augment(case.images, case.labels, spec, rng)
        elif min(case.shape) > cfg.crop_size:
            spec = AugmentationSpec((1.0, 1.0), 0.0, cfg.crop_size)
            im, lb = augment(case.images, case.labels, spec, rng)
        else:
            im, lb = case.images, case.labels
        imgs.append(im)
        labs.append(lb)
    x = torch.from_numpy(np.stack(imgs).astype(np.float32))
    y = torch.from_numpy(np.stack(labs).astype(np.int64))
    return x, y


def train(cfg: Config, cases: Sequence[Case], val_cases: Sequence[Case] = (),
          out_dir: str | Path | None = None, dtype: torch.dtype = torch.float32) -> TrainResult:
    """Train from scratch; logs per-epoch loss / training Dice and writes best + last checkpoints.

    Deterministic for a fixed seed when run single-threaded.
    """
    cfg.validate()
    tc = cfg.train
    if not cases:
        raise ValueError("no training cases")
    torch.set_num_threads(tc.num_threads)
    seed_everything(tc.seed)
    rng = np.random.default_rng(tc.seed)
    model = CFCINet(cfg.network).to(dtype)
    optimizer = make_optimizer(model, tc)
    scheduler = make_scheduler(optimizer, tc)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    best = -math.inf
    step = 0
    csv_file = None
    writer = None
    if out is not None:
        csv_file = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["epoch", "loss", "train_dice_wt", "train_dice_tc", "train_dice_et", "val_dice_mean"])
    try:
        for epoch in range(1, tc.epochs + 1):
            model.train()
            losses = []
            for _ in range(tc.steps_per_epoch):
                order = rng.permutation(len(cases))
                for start in range(0, len(order), tc.batch_size):
                    batch = [cases[i] for i in order[start:start + tc.batch_size]]
                    x, y = _batch(batch, tc, rng)
                    x = x.to(dtype)
                    step += 1
                    loss = dice_loss(model(x), y, tc.loss_eps)
                    if not torch.isfinite(loss):
                        raise NonFiniteLoss(f"non-finite loss {loss.item()} at step {step} (epoch {epoch})")
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    losses.append(loss.item())
                    result.step_losses.append(loss.item())
                scheduler.step()
            train_dice = evaluate_cases(model, cases)
            val_dice = evaluate_cases(model, val_cases) if val_cases else train_dice
            score = float(np.mean(list(val_dice.values())))
            row = {"epoch": epoch, "loss": float(np.mean(losses)), **{f"train_{k}": v for k, v in train_dice.items()},
                   "val_dice_mean": score}
            result.history.append(row)
            log.info("epoch %d loss %.4f WT %.3f TC %.3f ET %.3f val %.3f", epoch, row["loss"],
                     train_dice.get("WT", float("nan")), train_dice.get("TC", float("nan")),
                     train_dice.get("ET", float("nan")), score)
            if writer is not None:
                writer.writerow([epoch, row["loss"], train_dice.get("WT"), train_dice.get("TC"),
                                 train_dice.get("ET"), score])
                csv_file.flush()
                if score > best:
                    best = score
                    result.best_path = out / "best.pt"
                    save_checkpoint(result.best_path, model, cfg, optimizer, scheduler, epoch, step, rng)
        if out is not None:
            result.last_path = out / "last.pt"
            save_checkpoint(result.last_path, model, cfg, optimizer, scheduler, tc.epochs, step, rng)
    finally:
        if csv_file is not None:
            csv_file.close()
    return result


# --- ablation grids -------------------------------------------------------

def fusion_grid() -> Dict[str, Dict[str, object]]:
    """Parallel baseline with SCFF and MFCI toggled (plus the full model)."""
    return {
        "baseline(P)": {"network.use_scff": False, "network.use_mfci": False},
        "baseline(P)+MFCI": {"network.use_scff": False, "network.use_mfci": True},
        "baseline(P)+SCFF": {"network.use_scff": True, "network.use_mfci": False},
        "CFCI-Net": {"network.use_scff": True, "network.use_mfci": True},
    }


def single_encoder_row() -> Dict[str, Dict[str, object]]:
    return {"baseline": {"network.parallel": False, "network.use_scff": False, "network.use_mfci": False}}


def mfci_parts_grid() -> Dict[str, Dict[str, object]]:
    return {
        "MFC+MFI": {"mfci.use_mfc": True, "mfci.use_mfi": True},
        "MFC only": {"mfci.use_mfc": True, "mfci.use_mfi": False},
        "MFI only": {"mfci.use_mfc": False, "mfci.use_mfi": True},
    }


def pairing_grid() -> Dict[str, Dict[str, object]]:
    return {name: {"network.pairing": name} for name in PAIRINGS}


LAYER_PAIRS = ((6, 2), (6, 4), (4, 12), (4, 16), (2, 2), (4, 4), (6, 6))


def layer_grid(layers=LAYER_PAIRS) -> Dict[str, Dict[str, object]]:
    return {f"L1={a},L2={b}": {"mfci.l1": a, "mfci.l2": b} for a, b in layers}


GRIDS = {"fusion": fusion_grid, "mfci_parts": mfci_parts_grid, "pairing": pairing_grid, "layers": layer_grid}


def apply_cell(cfg: Config, cell: Dict[str, object]) -> Config:
    cfg = copy.deepcopy(cfg)
    for dotted, value in cell.items():
        section, key = dotted.split(".", 1)
        if section == "network":
            cfg.network = replace(cfg.network, **{key: value})
        elif section == "mfci":
            cfg.network = replace(cfg.network, mfci=replace(cfg.network.mfci, **{key: value}))
        elif section == "train":
            cfg.train = replace(cfg.train, **{key: value})
        else:
            raise ValueError(f"unknown section {section!r}")
    return cfg.validate()


def ablation_run(base: Config, grid: Dict[str, Dict[str, object]], train_cases: Sequence[Case],
                 test_cases: Sequence[Case]) -> List[Dict[str, object]]:
    """Train one model per grid cell and score it on ``test_cases``; returns one row per cell."""
    rows = []
    for name, cell in grid.items():
        cfg = apply_cell(base, cell)
        res = train(cfg, train_cases)
        scores = evaluate_cases(res.model, test_cases)
        rows.append({
            "setting": name,
            "params_M": sum(p.numel() for p in res.model.parameters()) / 1e6,
            "final_loss": res.history[-1]["loss"],
            **{f"dice_{k}": v for k, v in scores.items()},
            "dice_avg": float(np.mean(list(scores.values()))),
        })
    return rows


ABLATION_COLUMNS = ("setting", "params_M", "final_loss", "dice_ET", "dice_WT", "dice_TC", "dice_avg")


def format_ablation_table(rows: Sequence[Dict[str, object]]) -> str:
    header = f"{'setting':<22}" + "".join(f"{c:>12}" for c in ABLATION_COLUMNS[1:])
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['setting']:<22}" + "".join(f"{row[c]:>12.4f}" for c in ABLATION_COLUMNS[1:]))
    return "\n".join(lines)


def write_ablation_csv(rows: Sequence[Dict[str, object]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in ABLATION_COLUMNS})


def phantom_split(n_train: int, n_test: int, size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    cases = [normalize(synth_case(rng, size, case_id=f"phantom_{i:03d}")) for i in range(n_train + n_test)]
    return cases[:n_train], cases[n_train:]
