"""Post-hoc analysis: fusion-arm ablation and gate-field statistics.

``ablate`` trains one model per fusion arm on identical seeds and data
and tabulates separation metrics next to the loss trajectory endpoints.
``analyze_gates`` runs a gated model over a dataset, records the mean
gate value per (example, source) pair, histograms them, and renders
averaged gate heatmaps for the lowest and highest deciles.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dgfnet.autodiff.tensor import Tensor, no_grad
from dgfnet.config import ExperimentConfig
from dgfnet.errors import ContractError, category_of
from dgfnet.fusion import GateRecord, write_gate_records
from dgfnet.model import FUSION_MODES, Separator, featurize
from dgfnet.train import train
from dgfnet.viz import heatmap_png

GATE_HIST_BINS = 20

ABLATION_HEADER = ["arm", "sdr_db", "sir_db", "sar_db",
                   "initial_loss", "final_loss", "status"]


def write_ablation_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r[k] if k in ("arm", "status") else f"{r[k]:.6f}"
                        for k in ABLATION_HEADER])


def ablate(cfg: ExperimentConfig, out_dir: str | Path,
           arms: tuple[str, ...] = FUSION_MODES,
           progress=None) -> list[dict]:
    """Train every fusion arm with a shared seed and write ablation.csv.

    Shared submodules start from identical weights across arms (their
    init streams are keyed by submodule name, not by fusion mode), so the
    rows differ only through the fusion path. If an arm fails, the rows
    collected so far are still written, the failed arm is flagged in the
    CSV, and the error propagates."""
    for arm in arms:
        if arm not in FUSION_MODES:
            raise ContractError(f"unknown fusion arm {arm!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    rows: list[dict] = []
    for arm in arms:
        arm_cfg = replace(cfg, model=replace(cfg.model, fusion=arm))
        if progress is not None:
            progress({"arm": arm, "state": "training"})
        try:
            res = train(arm_cfg, out_dir=out / arm.replace("+", "-"),
                        progress=progress)
        except Exception as e:
            rows.append({"arm": arm, "sdr_db": float("nan"),
                         "sir_db": float("nan"), "sar_db": float("nan"),
                         "initial_loss": float("nan"), "final_loss": float("nan"),
                         "status": f"failed ({category_of(e)})"})
            write_ablation_csv(csv_path, rows)
            raise
        rows.append({"arm": arm, "sdr_db": res.eval_sdr_db,
                     "sir_db": res.eval_sir_db, "sar_db": res.eval_sar_db,
                     "initial_loss": res.initial_loss,
                     "final_loss": res.final_loss, "status": "ok"})
        write_ablation_csv(csv_path, rows)
    return rows


@dataclass
class GateSummary:
    n_records: int
    mean_sigma: float
    center_mass: float  # fraction of per-source means inside [0.45, 0.55]
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    low_decile_map: np.ndarray
    high_decile_map: np.ndarray
    csv_path: Path
    hist_path: Path
    low_png: Path
    high_png: Path


def collect_gate_records(model: Separator, dataset, grid,
                         limit: int | None = None,
                         ) -> tuple[list[GateRecord], list[np.ndarray]]:
    """Forward the encoder + fusion gate over examples (decoder skipped;
    the gate only depends on the bottleneck and the object feature)."""
    if not model.cfg.uses_gate:
        raise ContractError(
            f"gate analysis requires a dgfm fusion mode, "
            f"model uses {model.cfg.fusion!r}")
    n = len(dataset) if limit is None else min(limit, len(dataset))
    records: list[GateRecord] = []
    fields: list[np.ndarray] = []
    model.eval()
    with no_grad():
        for i in range(n):
            ex = dataset[i]
            f = featurize(ex, grid, floor=model.cfg.mask_floor,
                          cap=model.cfg.mask_cap)
            mid, _ = model.unet.encode(Tensor(f["input"][None, None]))
            for slot, cid in enumerate(f["labels"]):
                f_o = Tensor(np.ascontiguousarray(f["obj"][slot][None]))
                _, gate = model.fused_bottleneck(mid, f_o)
                records.append(GateRecord(
                    example_id=f"ex{i:05d}.s{slot}", class_id=int(cid),
                    mean_sigma=float(gate.per_example_means()[0])))
                fields.append(gate.spatial_field()[0])
    return records, fields


def analyze_gates(model: Separator, dataset, grid, out_dir: str | Path,
                  limit: int | None = None) -> GateSummary:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, fields = collect_gate_records(model, dataset, grid, limit=limit)
    if not records:
        raise ContractError("no gate records collected (empty dataset?)")
    means = np.array([r.mean_sigma for r in records])
    counts, edges = np.histogram(means, bins=GATE_HIST_BINS, range=(0.0, 1.0))
    hist_path = out / "gate_histogram.csv"
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for k in range(GATE_HIST_BINS):
            w.writerow([f"{edges[k]:.6f}", f"{edges[k + 1]:.6f}", int(counts[k])])
    csv_path = out / "gates.csv"
    write_gate_records(csv_path, records)

    order = np.argsort(means, kind="stable")
    k = max(1, len(order) // 10)
    low_map = np.mean([fields[i] for i in order[:k]], axis=0)
    high_map = np.mean([fields[i] for i in order[-k:]], axis=0)
    lo, hi = float(min(low_map.min(), high_map.min())), \
        float(max(low_map.max(), high_map.max()))
    low_png = heatmap_png(low_map, out / "gate_low_decile.png",
                          title="mean gate, lowest decile", vmin=lo, vmax=hi)
    high_png = heatmap_png(high_map, out / "gate_high_decile.png",
                           title="mean gate, highest decile", vmin=lo, vmax=hi)
    center = float(np.mean((means >= 0.45) & (means <= 0.55)))
    return GateSummary(
        n_records=len(records), mean_sigma=float(means.mean()),
        center_mass=center, hist_counts=counts, hist_edges=edges,
        low_decile_map=low_map, high_decile_map=high_map,
        csv_path=csv_path, hist_path=hist_path,
        low_png=low_png, high_png=high_png)
