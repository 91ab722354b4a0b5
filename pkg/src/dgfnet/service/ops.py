"""Job bodies behind the service endpoints.

Each function takes a validated request plus a progress callback and
returns a JSON-able result dict. Dataset seeds are derived exactly as in
the training loop, so eval, gen-data and separate see the same examples
a trained checkpoint was fitted and tested on.
"""

from __future__ import annotations

from pathlib import Path

from dgfnet.analysis import ablate, analyze_gates
from dgfnet.config import (ExperimentConfig, config_from_dict, load_config,
                           preset)
from dgfnet.data import SyntheticDataset
from dgfnet.dsp import write_wav
from dgfnet.errors import ContractError
from dgfnet.metrics import bss_eval, evaluate_testset, mixture_baseline
from dgfnet.model import Separator, separate_example
from dgfnet.seeds import derive_seed
from dgfnet.service import schemas
from dgfnet.train import train
from dgfnet.viz import heatmap_png, spectrogram_png


def resolve_config(req: schemas.ConfigSource) -> ExperimentConfig:
    if req.config is not None and req.config_path is not None:
        raise ContractError("give either an inline config or config_path, not both")
    if req.config is not None:
        return config_from_dict(req.config)
    if req.config_path is not None:
        return load_config(req.config_path)
    return preset(req.preset)


def build_split(cfg: ExperimentConfig, split: str,
                n_override: int | None = None) -> SyntheticDataset:
    if split == "train":
        seed, n = derive_seed(cfg.seed, "train-data"), cfg.data.n_train
    elif split == "test":
        seed, n = derive_seed(cfg.seed, "test-data"), cfg.data.n_test
    else:
        raise ContractError(f"unknown split {split!r} (expected train or test)")
    if n_override is not None:
        if n_override < 1:
            raise ContractError(f"limit must be positive, got {n_override}")
        n = min(n, n_override)
    return SyntheticDataset(cfg.dataset_spec(seed, n))


def _load_model(cfg: ExperimentConfig, checkpoint: str | None) -> Separator:
    model = Separator(cfg.model_config(), seed=derive_seed(cfg.seed, "model"))
    if checkpoint is not None:
        model.load(checkpoint)
    return model


def _out_dir(cfg: ExperimentConfig, requested: str | None, default_name: str) -> Path:
    out = Path(requested) if requested else cfg.resolve_out_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_gen_data(req: schemas.GenDataRequest, progress) -> dict:
    from dgfnet.data import write_manifest
    cfg = resolve_config(req)
    ds = build_split(cfg, req.split, n_override=req.limit)
    out = _out_dir(cfg, req.out_dir, f"data-{req.split}")
    progress({"state": "writing", "n_examples": len(ds)})
    wav_dir = out / "wav" if req.write_wavs else None
    write_manifest(ds, out / "manifest.jsonl", wav_dir=wav_dir)
    return {"out_dir": str(out), "manifest": str(out / "manifest.jsonl"),
            "n_examples": len(ds),
            "wav_dir": str(wav_dir) if wav_dir else None}


def run_train(req: schemas.TrainRequest, progress) -> dict:
    cfg = resolve_config(req)
    res = train(cfg, out_dir=req.out_dir, resume_from=req.resume_from,
                progress=progress)
    return {"out_dir": str(res.out_dir), "checkpoint": str(res.checkpoint),
            "initial_loss": res.initial_loss, "final_loss": res.final_loss,
            "global_steps": res.global_steps, "sdr_db": res.eval_sdr_db,
            "sir_db": res.eval_sir_db, "sar_db": res.eval_sar_db}


def run_eval(req: schemas.EvalRequest, progress) -> dict:
    cfg = resolve_config(req)
    if req.checkpoint is None and not req.oracle:
        raise ContractError("eval needs a checkpoint, or oracle=true")
    model = _load_model(cfg, req.checkpoint)
    ds = build_split(cfg, "test")
    out = _out_dir(cfg, req.out_dir, "eval")
    progress({"state": "evaluating", "n_examples":
              len(ds) if req.limit is None else min(req.limit, len(ds))})
    res, _ = evaluate_testset(model, ds, cfg.grid_config(),
                              csv_path=out / "eval.csv", oracle=req.oracle,
                              use_filter=req.use_filter, limit=req.limit)
    result = {"out_dir": str(out), "csv": str(out / "eval.csv"),
              "sdr_db": res.mean_sdr, "sir_db": res.mean_sir,
              "sar_db": res.mean_sar, "examples": int(res.sdr.size)}
    if req.include_baseline:
        base = mixture_baseline(ds, limit=req.limit)
        result["baseline_sdr_db"] = base.mean_sdr
    return result


def run_ablate(req: schemas.AblateRequest, progress) -> dict:
    cfg = resolve_config(req)
    out = _out_dir(cfg, req.out_dir, "ablation")
    rows = ablate(cfg, out, progress=progress)
    return {"out_dir": str(out), "csv": str(out / "ablation.csv"), "rows": rows}


def run_analyze_gates(req: schemas.AnalyzeGatesRequest, progress) -> dict:
    cfg = resolve_config(req)
    model = _load_model(cfg, req.checkpoint)
    ds = build_split(cfg, "test")
    out = _out_dir(cfg, req.out_dir, "gates")
    progress({"state": "collecting gates"})
    s = analyze_gates(model, ds, cfg.grid_config(), out, limit=req.limit)
    return {"out_dir": str(out), "n_records": s.n_records,
            "mean_sigma": s.mean_sigma, "center_mass": s.center_mass,
            "histogram_csv": str(s.hist_path), "records_csv": str(s.csv_path),
            "low_decile_png": str(s.low_png), "high_decile_png": str(s.high_png)}


def run_separate(req: schemas.SeparateRequest, progress) -> dict:
    cfg = resolve_config(req)
    if req.checkpoint is None and not req.oracle:
        raise ContractError("separate needs a checkpoint, or oracle=true")
    ds = build_split(cfg, req.split)
    if not 0 <= req.index < len(ds):
        raise ContractError(
            f"index {req.index} outside the {req.split} split (size {len(ds)})")
    model = _load_model(cfg, req.checkpoint)
    grid = cfg.grid_config()
    ex = ds[req.index]
    out = _out_dir(cfg, req.out_dir, f"separate-{req.split}{req.index:05d}")
    progress({"state": "separating", "index": req.index})
    res = separate_example(model, ex, grid, oracle=req.oracle)

    files = []
    mix_path = out / "mixture.wav"
    write_wav(mix_path, ex.mixture)
    files.append(str(mix_path))
    from dgfnet.dsp import stft, log_resample
    mix_log = log_resample(stft(ex.mixture, grid.stft,
                                target_frames=grid.target_frames), grid.log_bins)
    files.append(str(spectrogram_png(mix_log.bins, out / "mixture.png",
                                     title="mixture")))
    for k, (wave, mask, spec, cid) in enumerate(
            zip(res.waveforms, res.masks, res.spectrograms, res.labels)):
        ref = out / f"ref{k}_class{cid}.wav"
        est = out / f"est{k}_class{cid}.wav"
        write_wav(ref, ex.sources[k])
        write_wav(est, wave)
        files += [str(ref), str(est)]
        files.append(str(heatmap_png(mask, out / f"mask{k}_class{cid}.png",
                                     title=f"mask, class {cid}",
                                     vmin=0.0, vmax=1.0)))
        files.append(str(spectrogram_png(spec, out / f"est{k}_class{cid}.png",
                                         title=f"estimate, class {cid}")))
    ev = bss_eval([w.samples for w in res.waveforms],
                  [s.samples for s in ex.sources])
    return {"out_dir": str(out), "files": files,
            "classes": [int(c) for c in res.labels],
            "sdr_db": [float(x) for x in ev.sdr],
            "sir_db": [float(x) for x in ev.sir],
            "sar_db": [float(x) for x in ev.sar]}
