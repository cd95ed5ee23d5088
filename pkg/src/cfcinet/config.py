"""Structured configuration for the network, training and inference.

A single YAML/JSON file holds four sections (``network``, ``mfci``,
``train``, ``infer``). ``apply_overrides`` accepts ``section.key=value``
strings so CLI flags can override file values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

import yaml

MODALITIES: Tuple[str, ...] = ("t1", "t1ce", "t2", "flair")

# Modality pairings compared in the SCFF ablation; the first is the default.
PAIRINGS: Dict[str, Tuple[Tuple[str, str], Tuple[str, str]]] = {
    "t1_t2+t1ce_flair": (("t1", "t2"), ("t1ce", "flair")),
    "t1_t1ce+t2_flair": (("t1", "t1ce"), ("t2", "flair")),
    "t1_flair+t1ce_t2": (("t1", "flair"), ("t1ce", "t2")),
}

NORMS = ("batch", "instance", "group")


@dataclass
class MfciConfig:
    l1: int = 4
    l2: int = 4
    heads: int = 8
    embed_dim: int = 128
    patch_size: int = 1
    alpha: float = 0.5
    beta: float = 0.5
    mlp_ratio: float = 4.0
    # per-modality input channels and compressed output channels; 0 = take from network widths
    bottleneck_channels: int = 0
    out_channels: int = 0
    # spatial extent of the bottleneck the positional table is built for
    grid_size: int = 8
    use_mfc: bool = True
    use_mfi: bool = True

    def validate(self) -> None:
        if self.l1 < 1 or self.l2 < 1:
            raise ValueError("l1 and l2 must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.heads < 1 or self.embed_dim % (2 * self.heads):
            raise ValueError("embed_dim must be divisible by 2 * heads")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


@dataclass
class NetworkConfig:
    in_size: int = 128
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    num_classes: int = 4
    norm: str = "batch"
    pairing: str = "t1_t2+t1ce_flair"
    use_scff: bool = True
    use_mfci: bool = True
    parallel: bool = True
    mfci: MfciConfig = field(default_factory=MfciConfig)

    @property
    def depth(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        if self.depth < 2:
            raise ValueError("encoder depth must be >= 2")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if any(b != 2 * a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"widths must double per stage, got {self.widths}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {sorted(PAIRINGS)}")
        if not self.parallel and (self.use_scff or self.use_mfci):
            raise ValueError("SCFF and MFCI need parallel per-modality encoders")
        divisor = 2 ** self.depth * (self.mfci.patch_size if self.use_mfci else 1)
        if self.in_size % divisor:
            raise ValueError(f"in_size {self.in_size} must be divisible by {divisor}")
        if self.use_mfci:
            self.mfci.validate()

    def resolved_mfci(self) -> MfciConfig:
        """MFCI config with channel/grid fields filled in from the network."""
        return replace(
            self.mfci,
            bottleneck_channels=self.mfci.bottleneck_channels or self.widths[-1],
            out_channels=self.mfci.out_channels or self.widths[-1],
            grid_size=self.in_size // 2 ** self.depth,
        )


@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 1
    batch_size: int = 1
    lr: float = 1e-4
    weight_decay: float = 1e-5
    optimizer: str = "adamw"
    schedule: str = "cosine"
    seed: int = 0
    augment: bool = True
    scale_range: Tuple[float, float] = (0.9, 1.1)
    flip_prob: float = 0.5
    crop_size: int = 128
    loss_eps: float = 1e-5
    num_threads: int = 1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adamw", "adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class InferConfig:
    # 0 = the network's in_size (128 by default)
    patch_size: int = 0
    overlap: float = 0.75
    batch_size: int = 1


@dataclass
class Config:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["mfci"] = d["network"].pop("mfci")
        return _listify(d)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Config":
        d = dict(d or {})
        net = dict(d.get("network", {}))
        mfci = _build(MfciConfig, d.get("mfci", net.pop("mfci", {})))
        return cls(
            network=_build(NetworkConfig, net, mfci=mfci),
            train=_build(TrainConfig, d.get("train", {})),
            infer=_build(InferConfig, d.get("infer", {})),
        )

    def validate(self) -> "Config":
        self.network.validate()
        self.train.validate()
        if not 0 <= self.infer.overlap < 1:
            raise ValueError("overlap must be in [0, 1)")
        return self


def _listify(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_listify(v) for v in obj]
    return obj


def _build(cls, values: Dict[str, Any], **extra):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in (values or {}).items():
        if key not in known:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    kwargs.update(extra)
    return cls(**kwargs)


def load_config(path: Optional[str | Path]) -> Config:
    if path is None:
        return Config()
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return Config.from_dict(data or {})


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_overrides(cfg: Config, overrides: Iterable[str]) -> Config:
    """Return a new config with ``section.key=value`` overrides applied."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in data:
            raise ValueError(f"unknown config section {section!r}")
        if key not in data[section]:
            raise ValueError(f"unknown key {key!r} in section {section!r}")
        data[section][key] = yaml.safe_load(raw)
    return Config.from_dict(data)
