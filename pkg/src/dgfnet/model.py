"""End-to-end separator: spectrogram front end, U-Net, bottleneck fusion,
query decoding, mask prediction, and waveform reconstruction.

Fusion modes select the bottleneck hook: "baseline" leaves the audio
feature untouched, "mul" substitutes the multiplicative product, "dgfm"
mixes the two under the learned gate, and "dgfm+attention" additionally
turns on the decoder's audio attention blocks.

During training with K sources the encoder runs once per mixture and the
bottleneck-to-mask path runs once per source with that source's visual
features, so gradients from all K masks accumulate into shared weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dgfnet.autodiff import Tensor, no_grad, ops
from dgfnet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from dgfnet.autodiff.nn import Module
from dgfnet.data import MixtureExample
from dgfnet.dsp import (Spectrogram, StftParams, Waveform, istft, log_resample,
                        stft)
from dgfnet.errors import CheckpointFormatError, ContractError
from dgfnet.fusion import FusionParams, GateField, dgfm, fuse_mul_only
from dgfnet.seeds import rng_for
from dgfnet.transformer import MaskMap, QueryTransformer, ground_truth_mask
from dgfnet.unet import UNet, UNetConfig

FUSION_MODES = ("baseline", "mul", "dgfm", "dgfm+attention")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    fusion: str = "dgfm+attention"
    depth: int = 4
    base_channels: int = 8
    c_a: int = 64
    c_final: int = 16
    c_o: int = 64
    c_m: int = 32
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
        if self.mask_floor <= 0:
            raise ContractError(f"mask_floor must be positive, got {self.mask_floor}")
        if not 1.0 <= self.mask_cap <= 5.0:
            raise ContractError(f"mask_cap must lie in [1, 5], got {self.mask_cap}")

    @property
    def uses_attention(self) -> bool:
        return self.fusion == "dgfm+attention"

    @property
    def uses_gate(self) -> bool:
        return self.fusion in ("dgfm", "dgfm+attention")


@dataclass(frozen=True)
class GridConfig:
    stft: StftParams = field(default_factory=StftParams)
    target_frames: int = 256
    log_bins: int = 256

    @staticmethod
    def desk_scale() -> "GridConfig":
        return GridConfig(StftParams(254, 64, 11025), 64, 64)


def compress(mag: np.ndarray) -> np.ndarray:
    """Log dynamic-range compression for network input."""
    return np.log1p(mag)


class Separator(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        # independent init streams per submodule: models that share a
        # submodule across fusion modes share its exact initialization
        self.unet = UNet(
            UNetConfig(
                depth=cfg.depth, base_channels=cfg.base_channels,
                bottleneck_channels=cfg.c_a, final_channels=cfg.c_final,
                attention=cfg.uses_attention, attention_groups=cfg.attention_groups,
            ),
            rng_for(seed, "init", "unet"),
        )
        self.fusion = FusionParams(cfg.c_o, cfg.c_a, rng_for(seed, "init", "fusion"))
        self.xf = QueryTransformer(
            n_classes=cfg.n_classes, c_q=cfg.c_q, c_o=cfg.c_o, c_m=cfg.c_m,
            c_a=cfg.c_a, c_final=cfg.c_final, heads=cfg.heads,
            layers=cfg.decoder_layers, rng=rng_for(seed, "init", "transformer"),
            ffn_ratio=cfg.ffn_ratio,
            positional_encoding=cfg.positional_encoding,
        )

    def fused_bottleneck(self, mid: Tensor, f_o: Tensor,
                         ) -> tuple[Tensor, GateField | None]:
        mode = self.cfg.fusion
        if mode == "baseline":
            return mid, None
        f_av = fuse_mul_only(f_o, mid, self.fusion)
        if mode == "mul":
            return f_av, None
        return dgfm(f_av, mid, self.fusion)

    def forward_batch(self, grid: Tensor, obj: np.ndarray, motion: np.ndarray,
                      labels: np.ndarray, bypass_self_attention: bool = False,
                      ) -> tuple[list[Tensor], list[GateField | None]]:
        """grid: (B, 1, F, T) compressed log-magnitudes. obj: (B, K, C_O).
        motion: (B, K, C_M, T'). labels: (B, K) class ids. Returns K
        per-source sigmoid masks, each (B, F, T), plus gate fields."""
        if grid.ndim != 4:
            raise ContractError(f"expected (B,1,F,T) input, got {grid.shape}")
        b, k = labels.shape
        if obj.shape[:2] != (b, k) or motion.shape[:2] != (b, k):
            raise ContractError("visual feature batch/slot dims disagree with labels")
        mid, skips = self.unet.encode(grid)
        masks, gates = [], []
        for slot in range(k):
            f_o = Tensor(np.ascontiguousarray(obj[:, slot]))
            f_m = Tensor(np.ascontiguousarray(motion[:, slot]).transpose(0, 2, 1))
            cids = labels[:, slot]
            fed, gate = self.fused_bottleneck(mid, f_o)
            f_a = self.unet.decode(fed, skips)
            q0 = self.xf.named_queries(f_o, cids)
            a_e = self.xf.decode(q0, fed, f_m,
                                 bypass_self_attention=bypass_self_attention)
            logits = self.xf.mask_logits(self.xf.mask_embeddings(a_e), f_a)
            masks.append(ops.sigmoid(self.xf.select_class(logits, cids)))
            gates.append(gate)
        return masks, gates

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.state_entries().items()}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    def load(self, path) -> None:
        arrays = load_checkpoint(path)
        try:
            self.load_state(arrays)
        except ContractError as e:
            raise CheckpointFormatError(
                f"checkpoint does not match the configured model: {e}"
            ) from None


def featurize(ex: MixtureExample, grid: GridConfig, floor: float = 1e-8,
              cap: float = 1.0) -> dict:
    """One example -> network input grid, per-source GT masks, and the
    pieces needed for reconstruction."""
    s_mix = stft(ex.mixture, grid.stft, target_frames=grid.target_frames)
    mix_log = log_resample(s_mix, grid.log_bins)
    gts = []
    for src in ex.sources:
        s_k = stft(src, grid.stft, target_frames=grid.target_frames)
        k_log = log_resample(s_k, grid.log_bins)
        gts.append(ground_truth_mask(k_log, mix_log, floor=floor, cap=cap))
    obj = np.stack([v.object_feature for v in ex.visuals])
    motion = np.stack([v.motion_feature for v in ex.visuals])
    return {
        "input": compress(mix_log.bins),
        "gt_masks": [g.array() for g in gts],
        "mix_complex": s_mix,
        "mix_log": mix_log,
        "obj": obj,
        "motion": motion,
        "labels": np.asarray(ex.labels, dtype=int),
    }


def collate(feats: list[dict]) -> dict:
    """Stack per-example featurizations into batch arrays."""
    k = len(feats[0]["gt_masks"])
    return {
        "input": np.stack([f["input"] for f in feats])[:, None],
        "gt_masks": [np.stack([f["gt_masks"][s] for f in feats]) for s in range(k)],
        "obj": np.stack([f["obj"] for f in feats]),
        "motion": np.stack([f["motion"] for f in feats]),
        "labels": np.stack([f["labels"] for f in feats]),
    }


def reconstruct(mask_log: np.ndarray, mix_complex: Spectrogram,
                mix_log: Spectrogram) -> Waveform:
    """Map a log-grid mask back to linear bins, scale the mixture
    magnitude, and invert with the mixture phase."""
    mask_lin = np.clip(mix_log.logmap.inverse(mask_log), 0.0, None)
    sep = Spectrogram(
        bins=np.abs(mix_complex.bins) * mask_lin, kind="magnitude",
        freq_axis="linear", params=mix_complex.params,
        pad_left=mix_complex.pad_left, orig_len=mix_complex.orig_len,
    )
    return istft(sep, mix_complex.params, phase=np.angle(mix_complex.bins))


@dataclass
class SeparationResult:
    waveforms: list[Waveform]
    masks: list[np.ndarray]
    spectrograms: list[np.ndarray]
    gates: list[GateField | None]
    labels: list[int]


def separate_example(model: Separator, ex: MixtureExample, grid: GridConfig,
                     oracle: bool = False) -> SeparationResult:
    """Run the full pipeline on one mixture. oracle=True bypasses the model
    and applies the ground-truth ratio masks (upper-bound reference)."""
    f = featurize(ex, grid, floor=model.cfg.mask_floor, cap=model.cfg.mask_cap)
    if oracle:
        mask_arrays = f["gt_masks"]
        gates: list = [None] * len(mask_arrays)
    else:
        model.eval()
        with no_grad():
            masks, gates = model.forward_batch(
                Tensor(f["input"][None, None]),
                f["obj"][None], f["motion"][None], f["labels"][None],
            )
        mask_arrays = [m.data[0] for m in masks]
    waves, specs = [], []
    for mk in mask_arrays:
        w = reconstruct(mk, f["mix_complex"], f["mix_log"])
        waves.append(w)
        specs.append(f["mix_log"].bins * mk)
    return SeparationResult(waves, mask_arrays, specs, gates, list(f["labels"]))
