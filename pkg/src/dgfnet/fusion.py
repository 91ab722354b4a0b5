"""Bottleneck audio-visual fusion with a learned sigmoid gate.

The object feature is projected to the bottleneck channel count, tiled
over the spatial grid, and multiplied into the audio feature. The gated
variant mixes that product with the raw audio feature under a per-cell
sigmoid coefficient produced by summing two 1x1 convolutions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dgfnet.autodiff import Tensor, ops
from dgfnet.autodiff.nn import Conv2d, Linear, Module
from dgfnet.errors import ContractError

# Gate conv weights start small so the pre-sigmoid sum stays near zero and
# sigma opens at ~0.5 (balanced fusion) regardless of feature magnitude.
GATE_WEIGHT_SCALE = 0.01


@dataclass(frozen=True)
class GateField:
    sigma: Tensor  # bottleneck-shaped, values in (0,1)

    def __post_init__(self):
        d = self.sigma.data
        if d.min() < 0.0 or d.max() > 1.0:
            raise ContractError("gate field outside [0,1]")

    @property
    def mean_sigma(self) -> float:
        return float(self.sigma.data.mean())

    def per_example_means(self) -> np.ndarray:
        nb = self.sigma.data.shape[0]
        return self.sigma.data.reshape(nb, -1).mean(axis=1)

    def spatial_field(self) -> np.ndarray:
        """Channel-averaged sigma grids, (B, H, W) — heatmap source."""
        return self.sigma.data.mean(axis=1)


class FusionParams(Module):
    def __init__(self, c_o: int, c_a: int, rng: np.random.Generator):
        super().__init__()
        self.c_o, self.c_a = c_o, c_a
        self.visual_proj = Linear(c_o, c_a, rng)
        self.gate_av = Conv2d(c_a, c_a, 1, rng, weight_scale=GATE_WEIGHT_SCALE)
        self.gate_a = Conv2d(c_a, c_a, 1, rng, weight_scale=GATE_WEIGHT_SCALE)


def _project(f_o: Tensor, params: FusionParams, override) -> Tensor:
    if override is not None:
        v = override if isinstance(override, Tensor) else Tensor(np.asarray(override))
        if v.shape[-1] != params.c_a:
            raise ContractError(
                f"projected override dim {v.shape[-1]} != C_A {params.c_a}"
            )
        return v
    if f_o.shape[-1] != params.c_o:
        raise ContractError(f"object feature dim {f_o.shape[-1]} != C_O {params.c_o}")
    return params.visual_proj(f_o)


def fuse_multiplicative(f_o: Tensor, f_a_mid: Tensor, params: FusionParams,
                        projected_override=None) -> Tensor:
    """Tile the projected object feature over the grid and multiply."""
    if f_a_mid.ndim != 4:
        raise ContractError(f"bottleneck feature must be (B,C,H,W), got {f_a_mid.shape}")
    b, c = f_a_mid.shape[0], f_a_mid.shape[1]
    if c != params.c_a:
        raise ContractError(f"bottleneck channels {c} != C_A {params.c_a}")
    v = _project(f_o, params, projected_override)
    if v.ndim == 1:
        v = v.reshape(1, c, 1, 1)
    elif v.ndim == 2:
        if v.shape[0] != b:
            raise ContractError(f"visual batch {v.shape[0]} != audio batch {b}")
        v = v.reshape(b, c, 1, 1)
    else:
        raise ContractError(f"projected feature must be 1-D or 2-D, got {v.ndim}-D")
    return f_a_mid * v


def fuse_mul_only(f_o: Tensor, f_a_mid: Tensor, params: FusionParams,
                  projected_override=None) -> Tensor:
    """Multiplicative fusion used directly as the bottleneck replacement."""
    return fuse_multiplicative(f_o, f_a_mid, params, projected_override)


def dgfm(f_av: Tensor, f_a_mid: Tensor, params: FusionParams,
         sigma_override=None) -> tuple[Tensor, GateField]:
    """F_d = sigma*F_av + (1-sigma)*F_a_mid with sigma = sigmoid of summed
    1x1-conv responses. sigma_override injects a fixed gate (tests)."""
    if f_av.shape != f_a_mid.shape:
        raise ContractError(f"fused shape {f_av.shape} != bottleneck {f_a_mid.shape}")
    if sigma_override is not None:
        arr = np.broadcast_to(np.asarray(sigma_override, dtype=np.float64),
                              f_a_mid.shape).copy()
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("injected sigma outside [0,1]")
        sigma = Tensor(arr)
    else:
        sigma = ops.sigmoid(params.gate_av(f_av) + params.gate_a(f_a_mid))
    f_d = sigma * f_av + (1.0 - sigma) * f_a_mid
    return f_d, GateField(sigma)


@dataclass(frozen=True)
class GateRecord:
    example_id: str
    class_id: int
    mean_sigma: float


def write_gate_records(path: str | Path, records: list[GateRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["example_id", "class_id", "mean_sigma"])
        for r in records:
            w.writerow([r.example_id, r.class_id, f"{r.mean_sigma:.10f}"])
