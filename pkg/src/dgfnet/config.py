"""Experiment configuration: one YAML-serializable tree that pins the
dataset, the time-frequency grid, the model, and the optimizer.

Desk defaults train in minutes on a CPU; paper_scale() switches to the
full 1022/256 grid with 256x256 spectrograms. Every run directory gets a
verbatim copy of the config that produced it, and reloading that copy
reproduces the run.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from dgfnet.data import DatasetSpec
from dgfnet.dsp import StftParams
from dgfnet.errors import ContractError
from dgfnet.model import FUSION_MODES, GridConfig, ModelConfig


@dataclass(frozen=True)
class DataSection:
    n_classes: int = 8
    k_sources: int = 2
    n_train: int = 2000
    n_test: int = 200
    duration: float = 0.372
    sample_rate: int = 11025
    hard: bool = False
    c_o: int = 64
    c_m: int = 32
    t_motion: int = 16

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError(f"n_classes must be >= 2, got {self.n_classes}")
        if not 2 <= self.k_sources <= self.n_classes:
            raise ContractError(
                f"k_sources must lie in [2, n_classes], got {self.k_sources}"
            )
        if self.n_train < 1 or self.n_test < 1:
            raise ContractError("dataset sizes must be positive")


@dataclass(frozen=True)
class GridSection:
    window_len: int = 254
    hop: int = 64
    target_frames: int = 64
    log_bins: int = 64

    def __post_init__(self):
        if self.target_frames < 1:
            raise ContractError(f"target_frames must be positive, got {self.target_frames}")


@dataclass(frozen=True)
class ModelSection:
    fusion: str = "dgfm+attention"
    depth: int = 4
    base_channels: int = 8
    c_a: int = 64
    c_final: int = 16
    c_q: int = 128
    heads: int = 4
    decoder_layers: int = 3
    ffn_ratio: int = 2
    attention_groups: int = 4
    positional_encoding: bool = False
    mask_floor: float = 1e-8
    mask_cap: float = 1.0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ContractError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")


@dataclass(frozen=True)
class OptimSection:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 2
    batch_size: int = 8
    checkpoint_every_steps: int = 100
    eval_examples_per_epoch: int = 8

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_root: str | None = None
    data: DataSection = field(default_factory=DataSection)
    grid: GridSection = field(default_factory=GridSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def dataset_spec(self, split_seed: int, n: int) -> DatasetSpec:
        d = self.data
        return DatasetSpec(
            n_classes=d.n_classes, k_sources=d.k_sources, n_examples=n,
            duration=d.duration, sample_rate=d.sample_rate, seed=split_seed,
            hard=d.hard, c_o=d.c_o, c_m=d.c_m, t_motion=d.t_motion,
        )

    def grid_config(self) -> GridConfig:
        g = self.grid
        return GridConfig(
            StftParams(g.window_len, g.hop, self.data.sample_rate),
            g.target_frames, g.log_bins,
        )

    def model_config(self) -> ModelConfig:
        m, d = self.model, self.data
        return ModelConfig(
            n_classes=d.n_classes, fusion=m.fusion, depth=m.depth,
            base_channels=m.base_channels, c_a=m.c_a, c_final=m.c_final,
            c_o=d.c_o, c_m=d.c_m, c_q=m.c_q, heads=m.heads,
            decoder_layers=m.decoder_layers, ffn_ratio=m.ffn_ratio,
            attention_groups=m.attention_groups,
            positional_encoding=m.positional_encoding,
            mask_floor=m.mask_floor, mask_cap=m.mask_cap,
        )

    def resolve_out_root(self) -> Path:
        root = self.out_root or os.environ.get("DGFNET_OUT") or "runs"
        return Path(root)


_SECTIONS = {"data": DataSection, "grid": GridSection,
             "model": ModelSection, "optim": OptimSection}


def _build_section(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ContractError(f"config section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ContractError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**payload)
    except TypeError as e:
        raise ContractError(f"bad config section {where!r}: {e}") from None


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ContractError("config root must be a mapping")
    known = {"seed", "out_root", *_SECTIONS}
    unknown = set(payload) - known
    if unknown:
        raise ContractError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs = {}
    if "seed" in payload:
        if not isinstance(payload["seed"], int):
            raise ContractError(f"seed must be an integer, got {payload['seed']!r}")
        kwargs["seed"] = payload["seed"]
    if "out_root" in payload and payload["out_root"] is not None:
        kwargs["out_root"] = str(payload["out_root"])
    for name, cls in _SECTIONS.items():
        if name in payload:
            kwargs[name] = _build_section(cls, payload[name], name)
    return ExperimentConfig(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        payload = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ContractError(f"{path}: not valid YAML: {e}") from None
    if payload is None:
        payload = {}
    return config_from_dict(payload)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def desk_defaults() -> ExperimentConfig:
    return ExperimentConfig()


def paper_scale() -> ExperimentConfig:
    """Full-size preset: 1022/256 STFT, 256x256 grids, the published epoch
    and batch settings. Far too slow for desk runs; selectable only."""
    return ExperimentConfig(
        data=DataSection(n_classes=11, duration=5.944),
        grid=GridSection(window_len=1022, hop=256, target_frames=256, log_bins=256),
        model=ModelSection(depth=5, base_channels=16, c_a=128, c_final=32, c_q=256),
        optim=OptimSection(epochs=100, batch_size=20),
    )


def preset(name: str) -> ExperimentConfig:
    if name == "desk":
        return desk_defaults()
    if name == "paper-scale":
        return paper_scale()
    raise ContractError(f"unknown preset {name!r} (expected desk or paper-scale)")
