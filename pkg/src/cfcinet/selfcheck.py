"""Fast invariant checks run by ``cfcinet selfcheck``.

Each check returns None on success and raises AssertionError otherwise.
The full, slower suite lives in the test directory.
"""

from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np
import torch

from .config import Config, MfciConfig, NetworkConfig
from .engine import dice_loss, load_checkpoint, save_checkpoint
from .infer import SlidingSpec, coverage, sliding_window_probs
from .metrics import confusion, dice, hausdorff95, region_extract, sensitivity, specificity
from .mfci import MFCI, MFILayer
from .network import CFCINet
from .scff import SCFF, channel_kernel_size


def _check_metrics():
    rng = np.random.default_rng(0)
    for _ in range(30):
        shape = tuple(rng.integers(1, 6, 3))
        a = rng.random(shape) < 0.4
        b = rng.random(shape) < 0.4
        tp = fp = fn = 0
        for idx in itertools.product(*map(range, shape)):
            tp += a[idx] and b[idx]
            fp += a[idx] and not b[idx]
            fn += b[idx] and not a[idx]
        c = confusion(a, b)
        assert (c.tp, c.fp, c.fn) == (tp, fp, fn)
        assert dice(c) == (1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        assert sensitivity(c) == (1.0 if tp + fn == 0 else tp / (tp + fn))
        assert specificity(c) == (1.0 if tp + fp == 0 else tp / (tp + fp))
    assert hausdorff95(np.eye(3, dtype=bool)[None].repeat(3, 0), np.eye(3, dtype=bool)[None].repeat(3, 0)) == 0.0
    labels = rng.choice([0, 1, 2, 4], size=(4, 4, 4))
    et, tc, wt = (region_extract(labels, r) for r in ("ET", "TC", "WT"))
    assert not (et & ~tc).any() and not (tc & ~wt).any()


def _check_kernel_rule():
    for p in range(0, 11):
        k = channel_kernel_size(2 ** p)
        assert k % 2 == 1 and k == ((p + 1) // 2 if ((p + 1) // 2) % 2 else (p + 1) // 2 + 1)


def _check_scff_convexity():
    torch.manual_seed(0)
    for _ in range(10):
        m = SCFF(3).double()
        feats = {k: torch.randn(1, 3, 3, 4, 2, dtype=torch.float64) for k in ("t1", "t1ce", "t2", "flair")}
        z, gates = m.fuse_pairs(feats)
        for half, (ma, mb), g in zip(z.chunk(2, dim=1), m.pairs, gates):
            lo = torch.minimum(feats[ma], feats[mb])
            hi = torch.maximum(feats[ma], feats[mb])
            assert bool(((half >= lo - 1e-12) & (half <= hi + 1e-12)).all())
            assert bool(((g > 0) & (g < 1)).all())


def _check_attention_rows():
    torch.manual_seed(0)
    for heads, n in ((1, 1), (2, 8), (4, 5)):
        layer = MFILayer(8 * heads, heads, 0.5, 0.5).double()
        x = torch.randn(2, n, 8 * heads, dtype=torch.float64)
        mods = [torch.randn_like(x) for _ in range(4)]
        _, w = layer(x, mods, return_attention=True)
        assert w.shape[-2:] == (n, 4 * n)
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def _check_gradients():
    torch.manual_seed(0)
    m = MFCI(MfciConfig(l1=1, l2=1, heads=2, embed_dim=8, bottleneck_channels=2, out_channels=2, grid_size=2),
             norm="group").double()
    inputs = [torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True) for _ in range(4)]
    assert torch.autograd.gradcheck(lambda *xs: m(*xs).sum(), inputs, eps=1e-6, atol=1e-6, rtol=1e-3)
    logits = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 4, 4, 2, 1, 0]).view(1, 2, 2, 2)
    assert torch.autograd.gradcheck(lambda x: dice_loss(x, labels), (logits,), eps=1e-6, atol=1e-8, rtol=1e-4)


def _small_config(size: int = 32) -> Config:
    return Config(network=NetworkConfig(in_size=size, widths=(4, 8, 16, 32),
                                        mfci=MfciConfig(l1=1, l2=1, heads=2, embed_dim=16)))


def _check_shape_and_checkpoint():
    torch.manual_seed(0)
    cfg = _small_config()
    model = CFCINet(cfg.network).eval()
    x = torch.randn(1, 4, 32, 32, 32)
    with torch.no_grad():
        y = model(x)
    assert y.shape == (1, 4, 32, 32, 32)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.pt"
        save_checkpoint(path, model, cfg)
        loaded, _, _ = load_checkpoint(path)
        with torch.no_grad():
            assert torch.equal(loaded.eval()(x), y)


def _check_sliding_window():
    spec = SlidingSpec(128, 0.75)
    cov = coverage((160, 128, 128), spec)[:, 0, 0]
    assert (cov[32:128] == 2).all() and (cov[:32] == 1).all() and (cov[128:] == 1).all()
    const = torch.tensor([0.3, -1.0, 2.0, 0.5])

    def model(x):
        return const.view(1, 4, 1, 1, 1).expand(x.shape[0], 4, *x.shape[2:])

    vol = np.zeros((4, 24, 20, 16), dtype=np.float32)
    ref = torch.softmax(const, 0).double().numpy()
    for overlap in (0.0, 0.5, 0.75):
        probs = sliding_window_probs(vol, model, SlidingSpec(8, overlap))
        assert np.allclose(probs, ref[:, None, None, None], atol=1e-12)


CHECKS: List[Tuple[str, Callable[[], None]]] = [
    ("metrics vs voxel counting", _check_metrics),
    ("channel kernel rule", _check_kernel_rule),
    ("SCFF convexity / gate range", _check_scff_convexity),
    ("attention rows sum to 1", _check_attention_rows),
    ("MFCI + dice loss gradients", _check_gradients),
    ("shape contract + checkpoint round-trip", _check_shape_and_checkpoint),
    ("sliding-window averaging", _check_sliding_window),
]


def run_selfcheck(verbose: bool = False) -> bool:
    ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            status = "PASS"
        except Exception as exc:  # noqa: BLE001 - report every failure, keep going
            ok = False
            status = f"FAIL ({type(exc).__name__}: {exc})"
        if verbose:
            print(f"{status[:4]:<5} {name} [{time.perf_counter() - t0:.2f}s]{status[4:]}")
    return ok
