"""End-to-end separator wiring, training-loop contracts, and the analysis
harness, all on a deliberately tiny grid so every test runs in seconds."""

import csv
import dataclasses
import json

import numpy as np
import pytest

from conftest import tiny_config
from dgfnet.analysis import ablate, analyze_gates, collect_gate_records
from dgfnet.autodiff import Tensor
from dgfnet.errors import CheckpointFormatError, ContractError, NumericError
from dgfnet.model import (
    FUSION_MODES,
    ModelConfig,
    Separator,
    collate,
    featurize,
    reconstruct,
    separate_example,
)
from dgfnet.train import build_datasets, build_model, train


def _example_and_grid(cfg):
    train_ds, _ = build_datasets(cfg)
    return train_ds[0], cfg.grid_config()


def test_forward_batch_shapes_and_ranges(tmp_path):
    cfg = tiny_config(tmp_path)
    ex, grid = _example_and_grid(cfg)
    model = build_model(cfg)
    batch = collate([featurize(ex, grid), featurize(ex, grid)])
    masks, gates = model.forward_batch(
        Tensor(batch["input"]), batch["obj"], batch["motion"], batch["labels"])
    assert len(masks) == 2 and len(gates) == 2
    for m in masks:
        assert m.shape == (2, 32, 32)
        assert 0.0 < m.data.min() and m.data.max() < 1.0
    for g in gates:
        assert g is not None
        assert 0.0 < g.sigma.data.min() and g.sigma.data.max() < 1.0


def test_gate_presence_tracks_fusion_mode(tmp_path):
    for fusion, has_gate in [("baseline", False), ("mul", False),
                             ("dgfm", True), ("dgfm+attention", True)]:
        cfg = tiny_config(tmp_path, fusion=fusion)
        ex, grid = _example_and_grid(cfg)
        model = build_model(cfg)
        batch = collate([featurize(ex, grid)])
        _, gates = model.forward_batch(
            Tensor(batch["input"]), batch["obj"], batch["motion"], batch["labels"])
        assert (gates[0] is not None) == has_gate


def test_fusion_arms_share_submodule_initialization(tmp_path):
    models = {}
    for fusion in FUSION_MODES:
        cfg = tiny_config(tmp_path, fusion=fusion)
        models[fusion] = build_model(cfg)
    base = models["baseline"].state_dict()
    for fusion in ("mul", "dgfm"):
        other = models[fusion].state_dict()
        shared = [k for k in base if k in other and not k.startswith("unet.")]
        assert shared
        for k in shared:
            assert np.array_equal(base[k], other[k]), k


def test_featurize_and_collate_shapes(tmp_path):
    cfg = tiny_config(tmp_path)
    ex, grid = _example_and_grid(cfg)
    f = featurize(ex, grid, floor=0.1)
    assert f["input"].shape == (32, 32)
    assert len(f["gt_masks"]) == 2
    assert all(g.shape == (32, 32) for g in f["gt_masks"])
    assert f["obj"].shape == (2, 8)
    assert f["motion"].shape == (2, 6, 4)
    batch = collate([f, f, f])
    assert batch["input"].shape == (3, 1, 32, 32)
    assert batch["labels"].shape == (3, 2)


def test_reconstruct_with_unit_mask_returns_the_mixture(tmp_path):
    cfg = tiny_config(tmp_path)
    ex, grid = _example_and_grid(cfg)
    f = featurize(ex, grid)
    ones = np.ones_like(f["gt_masks"][0])
    w = reconstruct(ones, f["mix_complex"], f["mix_log"])
    assert w.samples.shape == ex.mixture.samples.shape
    assert np.max(np.abs(w.samples - ex.mixture.samples)) < 1e-9


def test_separate_example_oracle_beats_unit_mask(tmp_path):
    from dgfnet.metrics import bss_eval

    cfg = tiny_config(tmp_path)
    ex, grid = _example_and_grid(cfg)
    model = build_model(cfg)
    res = separate_example(model, ex, grid, oracle=True)
    assert len(res.waveforms) == 2
    assert res.labels == list(ex.labels)
    oracle = bss_eval(res.waveforms, ex.sources)
    mix = bss_eval([ex.mixture, ex.mixture], ex.sources)
    assert oracle.mean_sdr > mix.mean_sdr + 3.0


def test_checkpoint_round_trip_and_config_mismatch(tmp_path):
    cfg = tiny_config(tmp_path)
    model = build_model(cfg)
    path = tmp_path / "model.dgfn"
    model.save(path)
    clone = Separator(model.cfg, seed=99)
    clone.load(path)
    for k, v in model.state_dict().items():
        assert np.array_equal(v, clone.state_dict()[k])

    smaller = dataclasses.replace(model.cfg, base_channels=2)
    wrong = Separator(smaller, seed=0)
    with pytest.raises(CheckpointFormatError):
        wrong.load(path)


def test_model_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(fusion="gated")
    with pytest.raises(ContractError):
        ModelConfig(mask_floor=0.0)
    with pytest.raises(ContractError):
        ModelConfig(mask_cap=9.0)


# -- training loop ---------------------------------------------------------


def test_training_decreases_loss_and_writes_artifacts(tmp_path):
    cfg = tiny_config(tmp_path)
    res = train(cfg)
    assert res.final_loss < res.initial_loss
    assert res.global_steps == 6
    out = res.out_dir
    for name in ("config.yaml", "losses.csv", "runlog.jsonl", "ckpt.dgfn", "eval.csv"):
        assert (out / name).exists(), name
    rows = list(csv.reader(open(out / "losses.csv")))
    assert rows[0] == ["step", "epoch", "loss"]
    assert len(rows) == 7
    events = [json.loads(l)["event"] for l in open(out / "runlog.jsonl")]
    assert events[0] == "start"
    assert events.count("epoch") == 2
    assert events[-1] == "final_eval"


def test_training_is_deterministic(tmp_path):
    cfg = tiny_config(tmp_path / "a")
    r1 = train(cfg)
    cfg2 = tiny_config(tmp_path / "b")
    r2 = train(cfg2)
    l1 = (r1.out_dir / "losses.csv").read_bytes()
    l2 = (r2.out_dir / "losses.csv").read_bytes()
    assert l1 == l2
    c1 = (r1.out_dir / "ckpt.dgfn").read_bytes()
    c2 = (r2.out_dir / "ckpt.dgfn").read_bytes()
    assert c1 == c2


def test_seed_changes_the_loss_stream(tmp_path):
    r1 = train(tiny_config(tmp_path / "a"))
    cfg = dataclasses.replace(tiny_config(tmp_path / "b"), seed=6)
    r2 = train(cfg)
    assert (r1.out_dir / "losses.csv").read_bytes() != \
        (r2.out_dir / "losses.csv").read_bytes()


def test_resume_reproduces_the_uninterrupted_run(tmp_path):
    full = train(tiny_config(tmp_path / "full"))
    short = tiny_config(tmp_path / "short", epochs=1)
    train(short)
    res = train(tiny_config(tmp_path / "resumed"),
                resume_from=tmp_path / "short" / "train-dgfm+attention-seed5" / "ckpt.dgfn")

    def by_step(p):
        return {r[0]: r for r in list(csv.reader(open(p)))[1:]}

    full_rows, res_rows = by_step(full.out_dir / "losses.csv"), by_step(res.out_dir / "losses.csv")
    assert set(res_rows) == {"4", "5", "6"}
    for step, row in res_rows.items():
        assert full_rows[step] == row
    assert (full.out_dir / "ckpt.dgfn").read_bytes() == \
        (res.out_dir / "ckpt.dgfn").read_bytes()


def test_resume_past_end_is_rejected(tmp_path):
    done = train(tiny_config(tmp_path))
    with pytest.raises(ContractError):
        train(tiny_config(tmp_path / "again"), resume_from=done.checkpoint)


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    import dgfnet.train as train_mod

    real = train_mod.separation_loss
    calls = {"n": 0}

    def poisoned(preds, gts, reduction="mean"):
        calls["n"] += 1
        loss = real(preds, gts, reduction=reduction)
        if calls["n"] >= 3:
            loss.data = np.asarray(np.nan)
        return loss

    monkeypatch.setattr(train_mod, "separation_loss", poisoned)
    cfg = tiny_config(tmp_path)
    with pytest.raises(NumericError):
        train(cfg)
    out = tmp_path / "train-dgfm+attention-seed5"
    events = [json.loads(l) for l in open(out / "runlog.jsonl")]
    assert events[-1]["event"] == "abort"
    # the rolling checkpoint predates the poisoned step and still loads
    model = build_model(cfg)
    model.load(out / "ckpt.dgfn")


def test_baseline_and_gated_arms_see_identical_data(tmp_path):
    r1 = train(tiny_config(tmp_path / "a", epochs=1))
    cfg = tiny_config(tmp_path / "b", epochs=1)
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, fusion="baseline"))
    r2 = train(cfg)
    rows1 = list(csv.reader(open(r1.out_dir / "losses.csv")))[1:]
    rows2 = list(csv.reader(open(r2.out_dir / "losses.csv")))[1:]
    # same steps, different losses from the very first step
    assert [r[0] for r in rows1] == [r[0] for r in rows2]
    assert rows1[0][2] != rows2[0][2]


# -- analysis harness --------------------------------------------------------


def test_ablate_writes_per_arm_rows(tmp_path):
    cfg = tiny_config(tmp_path, epochs=1)
    rows_path = tmp_path / "ablation" / "ablation.csv"
    ablate(cfg, tmp_path / "ablation", arms=("baseline", "mul"))
    rows = list(csv.DictReader(open(rows_path)))
    assert [r["arm"] for r in rows] == ["baseline", "mul"]
    for r in rows:
        assert r["status"] == "ok"
        assert float(r["final_loss"]) < float(r["initial_loss"])
        float(r["sdr_db"]), float(r["sir_db"]), float(r["sar_db"])


def test_ablate_rejects_unknown_arm(tmp_path):
    cfg = tiny_config(tmp_path, epochs=1)
    with pytest.raises(ContractError):
        ablate(cfg, tmp_path / "ablation", arms=("baseline", "gated"))


def test_gate_analysis_on_fresh_model(tmp_path):
    cfg = tiny_config(tmp_path)
    train_ds, _ = build_datasets(cfg)
    model = build_model(cfg)
    summary = analyze_gates(model, train_ds, cfg.grid_config(),
                            tmp_path / "gates", limit=4)
    assert summary.n_records == 8
    assert 0.45 <= summary.mean_sigma <= 0.55
    assert summary.center_mass > 0.99
    assert sum(summary.hist_counts) == summary.n_records
    for p in (summary.csv_path, summary.hist_path,
              summary.low_png, summary.high_png):
        assert p.exists()
    hist_rows = list(csv.DictReader(open(summary.hist_path)))
    assert len(hist_rows) == 20
    assert float(hist_rows[0]["bin_lo"]) == 0.0
    assert float(hist_rows[-1]["bin_hi"]) == 1.0


def test_gate_analysis_requires_a_gated_model(tmp_path):
    cfg = tiny_config(tmp_path, )
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, fusion="mul"))
    train_ds, _ = build_datasets(cfg)
    model = build_model(cfg)
    with pytest.raises(ContractError):
        collect_gate_records(model, train_ds, cfg.grid_config(), limit=2)
