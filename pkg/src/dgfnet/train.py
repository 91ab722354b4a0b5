"""Deterministic training loop for the separation model.

Mini-batch L1 mask regression with two optimizer groups: the query
transformer takes decoupled weight decay, everything else is plain Adam.
Batch order is a pure function of (seed, epoch), so two runs with the
same config produce byte-identical loss logs and checkpoints, and a run
resumed from a mid-run checkpoint continues exactly where it left off.

Run directory layout:
    config.yaml    verbatim copy of the config that produced the run
    losses.csv     step,epoch,loss (full float precision, deterministic)
    runlog.jsonl   append-only event log (wall-clock fields vary run to
                   run; the determinism guarantee covers losses.csv and
                   checkpoints, not this file)
    ckpt.dgfn      rolling last-good checkpoint (model + optimizer +
                   position counters)
    eval.csv       per-source metrics on the test split after training
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dgfnet.autodiff.checkpoint import load_checkpoint, save_checkpoint
from dgfnet.autodiff.optim import Adam
from dgfnet.autodiff.tensor import Tensor, backward
from dgfnet.config import ExperimentConfig, config_to_dict, save_config
from dgfnet.data import SyntheticDataset
from dgfnet.errors import CheckpointFormatError, ContractError, NumericError
from dgfnet.metrics import evaluate_testset
from dgfnet.model import Separator, collate, featurize
from dgfnet.seeds import derive_seed, rng_for
from dgfnet.transformer import separation_loss


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    initial_loss: float
    final_loss: float
    global_steps: int
    eval_sdr_db: float
    eval_sir_db: float
    eval_sar_db: float


def build_datasets(cfg: ExperimentConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Disjoint seed streams for the two splits; same class bank geometry."""
    train = SyntheticDataset(
        cfg.dataset_spec(derive_seed(cfg.seed, "train-data"), cfg.data.n_train))
    test = SyntheticDataset(
        cfg.dataset_spec(derive_seed(cfg.seed, "test-data"), cfg.data.n_test))
    return train, test


def build_model(cfg: ExperimentConfig) -> Separator:
    return Separator(cfg.model_config(), seed=derive_seed(cfg.seed, "model"))


def build_optimizer(model: Separator, cfg: ExperimentConfig) -> Adam:
    o = cfg.optim
    xf_params, rest = {}, {}
    for name, p in model.named_parameters():
        (xf_params if name.startswith("xf.") else rest)[name] = p
    return Adam(
        [
            {"name": "transformer", "params": xf_params, "lr": o.lr,
             "decoupled_decay": o.weight_decay},
            {"name": "backbone", "params": rest, "lr": o.lr,
             "decoupled_decay": 0.0},
        ],
        betas=(o.beta1, o.beta2),
    )


def _append_runlog(path: Path, event: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(event, sort_keys=True) + "\n")


def _save_state(path: Path, model: Separator, opt: Adam,
                epoch: int, step_in_epoch: int, global_step: int) -> None:
    arrays = model.state_dict()
    arrays.update(opt.state_arrays())
    arrays["meta.epoch"] = np.array([epoch], dtype=np.float64)
    arrays["meta.step_in_epoch"] = np.array([step_in_epoch], dtype=np.float64)
    arrays["meta.global_step"] = np.array([global_step], dtype=np.float64)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(tmp, arrays)
    os.replace(tmp, path)


def _load_state(path: Path, model: Separator, opt: Adam) -> tuple[int, int, int]:
    arrays = load_checkpoint(path)
    for key in ("meta.epoch", "meta.step_in_epoch", "meta.global_step", "optim.step"):
        if key not in arrays:
            raise CheckpointFormatError(
                f"checkpoint {path} has no {key!r} record; not a training checkpoint")
    model_arrays = {k: v for k, v in arrays.items()
                    if not k.startswith(("optim.", "meta."))}
    try:
        model.load_state(model_arrays)
    except ContractError as e:
        raise CheckpointFormatError(
            f"checkpoint does not match the configured model: {e}") from None
    opt.load_state_arrays(arrays)
    return (int(arrays["meta.epoch"][0]),
            int(arrays["meta.step_in_epoch"][0]),
            int(arrays["meta.global_step"][0]))


def train(cfg: ExperimentConfig, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          progress=None) -> TrainResult:
    """Run the full loop. ``resume_from`` restarts from a checkpoint written
    by a previous call with the same config; subsequent losses match the
    uninterrupted run exactly. ``progress`` is an optional callable that
    receives a small dict after every step."""
    if out_dir is None:
        out_dir = cfg.resolve_out_root() / f"train-{cfg.model.fusion}-seed{cfg.seed}"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    runlog = out / "runlog.jsonl"
    ckpt_path = out / "ckpt.dgfn"

    grid = cfg.grid_config()
    train_ds, test_ds = build_datasets(cfg)
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)

    o = cfg.optim
    n = len(train_ds)
    bs = o.batch_size
    batches_per_epoch = math.ceil(n / bs)

    start_epoch, start_batch, global_step = 0, 0, 0
    if resume_from is not None:
        start_epoch, start_batch, global_step = _load_state(
            Path(resume_from), model, opt)
        if start_batch >= batches_per_epoch:
            start_epoch += 1
            start_batch = 0
        if start_epoch >= o.epochs:
            raise ContractError(
                f"checkpoint is already past the configured {o.epochs} epochs")
    else:
        # last-good baseline before the first step, so an abort on step one
        # still leaves a loadable state behind
        _save_state(ckpt_path, model, opt, 0, 0, 0)

    _append_runlog(runlog, {
        "event": "start", "time": time.time(),
        "resumed_from": str(resume_from) if resume_from else None,
        "epoch": start_epoch, "step_in_epoch": start_batch,
        "config": config_to_dict(cfg),
        "n_parameters": int(sum(p.data.size for _, p in model.named_parameters())),
    })

    losses_path = out / "losses.csv"
    losses_f = open(losses_path, "w")
    losses_f.write("step,epoch,loss\n")

    floor, cap = cfg.model.mask_floor, cfg.model.mask_cap
    initial_loss = None
    recent: list[float] = []
    model.train()
    try:
        for epoch in range(start_epoch, o.epochs):
            order = rng_for(cfg.seed, "order", epoch).permutation(n)
            first = start_batch if epoch == start_epoch else 0
            epoch_losses: list[float] = []
            for b_i in range(first, batches_per_epoch):
                idx = order[b_i * bs:(b_i + 1) * bs]
                batch = collate([featurize(train_ds[int(i)], grid, floor, cap)
                                 for i in idx])
                opt.zero_grad()
                masks, _ = model.forward_batch(
                    Tensor(batch["input"]), batch["obj"],
                    batch["motion"], batch["labels"])
                loss = separation_loss(
                    masks, [Tensor(g) for g in batch["gt_masks"]])
                lv = float(loss.data)
                if not np.isfinite(lv):
                    _append_runlog(runlog, {
                        "event": "abort", "time": time.time(),
                        "epoch": epoch, "step": global_step,
                        "reason": f"non-finite loss {lv}"})
                    raise NumericError(
                        f"non-finite training loss {lv} at step {global_step}; "
                        f"last-good checkpoint retained at {ckpt_path}")
                backward(loss, dict(model.named_parameters()))
                opt.step()
                global_step += 1
                if initial_loss is None:
                    initial_loss = lv
                epoch_losses.append(lv)
                recent.append(lv)
                if len(recent) > 5:
                    recent.pop(0)
                losses_f.write(f"{global_step},{epoch},{lv!r}\n")
                losses_f.flush()
                if progress is not None:
                    progress({"epoch": epoch, "step": global_step, "loss": lv})
                if o.checkpoint_every_steps > 0 and \
                        global_step % o.checkpoint_every_steps == 0:
                    _save_state(ckpt_path, model, opt, epoch, b_i + 1, global_step)
                    _append_runlog(runlog, {
                        "event": "checkpoint", "time": time.time(),
                        "step": global_step, "path": str(ckpt_path)})
            epoch_event = {"event": "epoch", "time": time.time(), "epoch": epoch,
                           "mean_loss": float(np.mean(epoch_losses))
                           if epoch_losses else None}
            if o.eval_examples_per_epoch > 0:
                res, _ = evaluate_testset(model, test_ds, grid,
                                          limit=o.eval_examples_per_epoch)
                model.train()
                epoch_event["eval_sdr_db"] = res.mean_sdr
            _append_runlog(runlog, epoch_event)
            _save_state(ckpt_path, model, opt, epoch, batches_per_epoch, global_step)
    except NumericError:
        losses_f.close()
        raise
    losses_f.close()

    res, _ = evaluate_testset(model, test_ds, grid, csv_path=out / "eval.csv")
    model.train()
    _append_runlog(runlog, {
        "event": "final_eval", "time": time.time(),
        "sdr_db": res.mean_sdr, "sir_db": res.mean_sir, "sar_db": res.mean_sar,
        "examples": int(res.sdr.size)})
    final_loss = float(np.mean(recent)) if recent else float("nan")
    return TrainResult(
        out_dir=out, checkpoint=ckpt_path,
        initial_loss=float(initial_loss) if initial_loss is not None else float("nan"),
        final_loss=final_loss, global_steps=global_step,
        eval_sdr_db=res.mean_sdr, eval_sir_db=res.mean_sir,
        eval_sar_db=res.mean_sar)
