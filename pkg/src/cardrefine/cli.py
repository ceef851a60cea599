"""Command line client for the pipeline service.

Every subcommand builds an HTTP request and sends it either to a remote
server (``--server URL``) or to an in-process instance of the app, so the
CLI always exercises the same request/response surface as remote clients.

Exit codes: 0 full success, 1 configuration error, 2 partial per-subject
failure (failures are listed in the run report).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click


def _client(server: str | None):
    if server:
        import httpx

        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service import app

    return TestClient(app)


def _load_config_doc(config_path: str | None) -> dict:
    if not config_path:
        return {}
    p = Path(config_path)
    if not p.is_file():
        click.echo(f"error: config file not found: {p}", err=True)
        sys.exit(1)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        click.echo(f"error: config file is not valid JSON: {exc}", err=True)
        sys.exit(1)


def _apply_overrides(doc: dict, seed, out, atlas_dir, subject_dir, prediction_dir,
                     reference_dir, model_path, workers) -> dict:
    paths = doc.setdefault("paths", {})
    if out:
        paths["output_dir"] = out
    if atlas_dir:
        paths["atlas_dir"] = atlas_dir
    if subject_dir:
        paths["subject_dir"] = subject_dir
    if prediction_dir:
        paths["prediction_dir"] = prediction_dir
    if reference_dir:
        paths["reference_dir"] = reference_dir
    if model_path:
        paths["model_path"] = model_path
    if seed is not None:
        doc["seed"] = seed
    if workers is not None:
        doc["worker_count"] = workers
    return doc


def _post_stage(endpoint: str, doc: dict, server: str | None) -> None:
    if "seed" not in doc:
        click.echo("error: a seed is required (config file or --seed)", err=True)
        sys.exit(1)
    with _client(server) as client:
        resp = client.post(endpoint, json={"config": doc})
    _finish(resp)


def _finish(resp) -> None:
    if resp.status_code == 400:
        click.echo(f"error: {resp.json().get('detail')}", err=True)
        sys.exit(1)
    if resp.status_code == 422:
        click.echo(f"error: invalid request: {resp.text}", err=True)
        sys.exit(1)
    resp.raise_for_status()
    report = resp.json()
    for subject in report.get("subjects", []):
        status = subject["status"]
        line = f"{subject['id']}: {status}"
        if subject.get("error"):
            line += f" ({subject['error']})"
        click.echo(line)
    failures = report.get("failures", [])
    click.echo(
        f"{report['command']}: {len(report.get('subjects', [])) - len(failures)} ok, "
        f"{len(failures)} failed, {report['elapsed_s']:.1f}s"
    )
    sys.exit(2 if failures else 0)


def _stage_options(fn):
    for deco in (
        click.option("--config", "config_path", type=str, default=None, help="pipeline config JSON"),
        click.option("--seed", type=int, default=None, help="override the config seed"),
        click.option("--out", type=str, default=None, help="override output_dir"),
        click.option("--atlas-dir", type=str, default=None),
        click.option("--subject-dir", type=str, default=None),
        click.option("--prediction-dir", type=str, default=None),
        click.option("--reference-dir", type=str, default=None),
        click.option("--model-path", type=str, default=None),
        click.option("--workers", type=int, default=None, help="worker_count override"),
        click.option("--server", type=str, default=None, help="remote service URL (default: in-process)"),
    ):
        fn = deco(fn)
    return fn


@click.group()
def main():
    """Shape-refined bi-ventricular segmentation pipeline."""


def _make_stage(name: str, endpoint: str):
    @main.command(name=name)
    @_stage_options
    def _cmd(config_path, seed, out, atlas_dir, subject_dir, prediction_dir,
             reference_dir, model_path, workers, server):
        doc = _load_config_doc(config_path)
        doc = _apply_overrides(doc, seed, out, atlas_dir, subject_dir,
                               prediction_dir, reference_dir, model_path, workers)
        _post_stage(endpoint, doc, server)

    _cmd.__doc__ = f"Run the {name} stage over all subjects."
    return _cmd


for _name, _endpoint in [
    ("simulate", "/simulate"),
    ("train", "/train"),
    ("refine", "/refine"),
    ("evaluate", "/evaluate"),
    ("fuse", "/fuse"),
    ("register", "/register"),
    ("select-atlases", "/select-atlases"),
]:
    _make_stage(_name, _endpoint)


@main.command()
@click.option("--count", type=int, default=1, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=str, required=True)
@click.option("--dims", type=str, default="64,64,64", show_default=True)
@click.option("--spacing", type=str, default="1.25,1.25,2.0", show_default=True)
@click.option("--config", "config_path", type=str, default=None, help="unused for phantom; accepted for symmetry")
@click.option("--server", type=str, default=None)
def phantom(count, seed, out, dims, spacing, config_path, server):
    """Generate synthetic bi-ventricular phantom subjects."""
    req = {
        "count": count,
        "seed": seed,
        "out_dir": out,
        "dims": [int(v) for v in dims.split(",")],
        "spacing": [float(v) for v in spacing.split(",")],
    }
    with _client(server) as client:
        resp = client.post("/phantom", json=req)
    _finish(resp)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8420, show_default=True)
def serve(host, port):
    """Run the pipeline service."""
    import uvicorn

    uvicorn.run("cardrefine.service:app", host=host, port=port)


if __name__ == "__main__":
    main()
