"""Command-line client for the separation service.

Every command submits a job over HTTP and polls it to completion. With
DGFNET_URL set, commands talk to a running server; otherwise the app is
hosted in-process over an ASGI transport, so the CLI works standalone.

Exit codes: 0 success, 2 contract violation, 3 numeric failure,
4 I/O failure, 1 anything else.
"""

from __future__ import annotations

import asyncio
import json
import os
import sys
import time

import click
import httpx

from dgfnet import __version__
from dgfnet.config import config_to_dict, dump_config, load_config, preset
from dgfnet.errors import CATEGORY_EXIT_CODES, category_of

POLL_SECONDS = 0.1


def _config_payload(config_path: str | None, preset_name: str) -> dict:
    """Parse and validate the config client-side, send the full tree."""
    try:
        if config_path is not None:
            return {"config": config_to_dict(load_config(config_path))}
        return {"preset": preset_name}
    except Exception as e:
        _fail(category_of(e), str(e))


def _fail(category: str, message: str) -> None:
    click.echo(f"error ({category}): {message}", err=True)
    sys.exit(CATEGORY_EXIT_CODES.get(category, 1))


def _job_id_of(resp: httpx.Response) -> str:
    if resp.status_code == 422:
        _fail("contract", f"bad request: {resp.text}")
    resp.raise_for_status()
    return resp.json()["job_id"]


class _Progress:
    def __init__(self, quiet: bool):
        self.quiet = quiet
        self.last = None

    def update(self, status: dict) -> None:
        p = status.get("progress")
        if p is not None and p != self.last and not self.quiet:
            click.echo(f"  {json.dumps(p)}", err=True)
            self.last = p


def _finish(status: dict) -> dict:
    if status["state"] == "failed":
        _fail(status.get("error_category") or "error",
              status.get("error") or "job failed")
    return status["result"]


def _run_remote(url: str, op: str, payload: dict, quiet: bool) -> dict:
    with httpx.Client(base_url=url, timeout=None) as client:
        job_id = _job_id_of(client.post(f"/jobs/{op}", json=payload))
        prog = _Progress(quiet)
        while True:
            r = client.get(f"/jobs/{job_id}")
            r.raise_for_status()
            status = r.json()
            if status["state"] in ("done", "failed"):
                return _finish(status)
            prog.update(status)
            time.sleep(POLL_SECONDS)


async def _run_in_process(op: str, payload: dict, quiet: bool) -> dict:
    from dgfnet.service.app import create_app
    transport = httpx.ASGITransport(app=create_app())
    async with httpx.AsyncClient(transport=transport,
                                 base_url="http://dgfnet.internal",
                                 timeout=None) as client:
        job_id = _job_id_of(await client.post(f"/jobs/{op}", json=payload))
        prog = _Progress(quiet)
        while True:
            r = await client.get(f"/jobs/{job_id}")
            r.raise_for_status()
            status = r.json()
            if status["state"] in ("done", "failed"):
                return _finish(status)
            prog.update(status)
            await asyncio.sleep(POLL_SECONDS)


def _run_job(op: str, payload: dict, quiet: bool = False) -> dict:
    """Submit a job and poll it to completion, against DGFNET_URL if set,
    otherwise against the app hosted inside this process."""
    payload = {k: v for k, v in payload.items() if v is not None}
    url = os.environ.get("DGFNET_URL")
    try:
        if url:
            return _run_remote(url, op, payload, quiet)
        return asyncio.run(_run_in_process(op, payload, quiet))
    except httpx.HTTPError as e:
        _fail("io", f"service request failed: {e}")


def _emit(result: dict) -> None:
    click.echo(json.dumps(result, indent=2, sort_keys=True))


def _config_options(f):
    f = click.option("--preset", "preset_name", default="desk",
                     show_default=True,
                     help="Named defaults (desk or paper-scale).")(f)
    f = click.option("--config", "config_path", default=None,
                     help="YAML experiment config; overrides --preset.")(f)
    return f


@click.group()
@click.version_option(version=__version__, prog_name="dgfnet")
def main() -> None:
    """Audio-visual source separation: data, training, evaluation."""


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8717, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the HTTP service in the foreground."""
    import uvicorn
    from dgfnet.service.app import create_app
    uvicorn.run(create_app(), host=host, port=port)


@main.command("show-config")
@_config_options
def show_config(config_path: str | None, preset_name: str) -> None:
    """Print the fully-resolved YAML config for a preset or file."""
    try:
        cfg = load_config(config_path) if config_path else preset(preset_name)
    except Exception as e:
        _fail(category_of(e), str(e))
    click.echo(dump_config(cfg), nl=False)


@main.command("gen-data")
@_config_options
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "test"]))
@click.option("--out", "out_dir", default=None, help="Output directory.")
@click.option("--no-wavs", is_flag=True, help="Manifest only, skip WAV export.")
@click.option("--limit", default=None, type=int, help="Only the first N examples.")
def gen_data(config_path, preset_name, split, out_dir, no_wavs, limit) -> None:
    """Synthesize a dataset split to WAV files plus a JSONL manifest."""
    payload = _config_payload(config_path, preset_name)
    payload.update(split=split, out_dir=out_dir,
                   write_wavs=not no_wavs, limit=limit)
    _emit(_run_job("gen-data", payload))


@main.command()
@_config_options
@click.option("--out", "out_dir", default=None, help="Run directory.")
@click.option("--resume", "resume_from", default=None,
              help="Checkpoint to resume from.")
@click.option("--quiet", is_flag=True, help="Suppress progress lines.")
def train(config_path, preset_name, out_dir, resume_from, quiet) -> None:
    """Train the separator; writes losses.csv, runlog.jsonl, ckpt.dgfn."""
    payload = _config_payload(config_path, preset_name)
    payload.update(out_dir=out_dir, resume_from=resume_from)
    _emit(_run_job("train", payload, quiet=quiet))


@main.command("eval")
@_config_options
@click.option("--checkpoint", default=None, help="Trained model checkpoint.")
@click.option("--oracle", is_flag=True, help="Ground-truth masks instead of a model.")
@click.option("--use-filter", is_flag=True,
              help="Distortion-filter projection in the metrics.")
@click.option("--baseline", "include_baseline", is_flag=True,
              help="Also report the mixture-as-estimate baseline.")
@click.option("--limit", default=None, type=int)
@click.option("--out", "out_dir", default=None)
def eval_cmd(config_path, preset_name, checkpoint, oracle, use_filter,
             include_baseline, limit, out_dir) -> None:
    """Evaluate separation quality on the test split; writes eval.csv."""
    payload = _config_payload(config_path, preset_name)
    payload.update(checkpoint=checkpoint, oracle=oracle, use_filter=use_filter,
                   include_baseline=include_baseline, limit=limit, out_dir=out_dir)
    _emit(_run_job("eval", payload))


@main.command()
@_config_options
@click.option("--out", "out_dir", default=None)
@click.option("--quiet", is_flag=True)
def ablate(config_path, preset_name, out_dir, quiet) -> None:
    """Train all fusion arms on one seed; writes ablation.csv."""
    payload = _config_payload(config_path, preset_name)
    payload.update(out_dir=out_dir)
    _emit(_run_job("ablate", payload, quiet=quiet))


@main.command("analyze-gates")
@_config_options
@click.option("--checkpoint", required=True)
@click.option("--limit", default=None, type=int)
@click.option("--out", "out_dir", default=None)
def analyze_gates(config_path, preset_name, checkpoint, limit, out_dir) -> None:
    """Gate-value histogram and decile heatmaps for a gated checkpoint."""
    payload = _config_payload(config_path, preset_name)
    payload.update(checkpoint=checkpoint, limit=limit, out_dir=out_dir)
    _emit(_run_job("analyze-gates", payload))


@main.command()
@_config_options
@click.option("--checkpoint", default=None)
@click.option("--oracle", is_flag=True)
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "test"]))
@click.option("--index", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", default=None)
def separate(config_path, preset_name, checkpoint, oracle, split,
             index, out_dir) -> None:
    """Separate one mixture; exports WAVs, masks and spectrogram PNGs."""
    payload = _config_payload(config_path, preset_name)
    payload.update(checkpoint=checkpoint, oracle=oracle, split=split,
                   index=index, out_dir=out_dir)
    _emit(_run_job("separate", payload))


if __name__ == "__main__":
    main()
