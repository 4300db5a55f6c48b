"""Thin command-line client for the experiment service.

Every subcommand speaks HTTP to the service; without ``--server`` the app is
mounted in-process, so the CLI works standalone while exercising the exact
same endpoints.
"""

import contextlib
import json
import sys

import click
import yaml

from .config import ConfigError, _coerce


@contextlib.contextmanager
def _client(server: str | None):
    if server:
        import httpx

        with httpx.Client(base_url=server, timeout=None) as client:
            yield client
    else:
        from fastapi.testclient import TestClient

        from .service.app import app

        with TestClient(app) as client:
            yield client


def _request(client, method: str, path: str, payload: dict):
    resp = client.request(method, path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except Exception:
            detail = resp.text
        click.echo(f"error ({resp.status_code}): {detail}", err=True)
        sys.exit(1)
    return resp.json()


def _experiment_payload(config_path, overrides) -> dict:
    payload = {}
    if config_path:
        raw = yaml.safe_load(open(config_path).read()) or {}
        if not isinstance(raw, dict):
            click.echo(f"error: {config_path} must be a flat key-value mapping", err=True)
            sys.exit(1)
        payload.update(raw)
    for item in overrides:
        if "=" not in item:
            click.echo(f"error: override {item!r} must be key=value", err=True)
            sys.exit(1)
        key, value = item.split("=", 1)
        try:
            payload[key] = _coerce(key, value)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return payload


server_option = click.option("--server", default=None, metavar="URL",
                             help="Remote service URL; defaults to in-process.")
config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                             default=None, help="Flat YAML config file.")
set_option = click.option("--set", "-s", "overrides", multiple=True, metavar="KEY=VALUE",
                          help="Config field override (repeatable).")


@click.group()
def main():
    """Federated spatial-temporal prediction lab."""


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8000, type=int)
def serve(host, port):
    """Start the experiment service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


@main.command()
@server_option
@config_option
@set_option
def run(server, config_path, overrides):
    """Run one federated experiment and print its summary."""
    payload = _experiment_payload(config_path, overrides)
    with _client(server) as client:
        summary = _request(client, "POST", "/experiments/run", payload)
    click.echo(json.dumps(summary, indent=2))


@main.command()
@server_option
@config_option
@set_option
def ablate(server, config_path, overrides):
    """Run the full model plus the four component-removal variants."""
    payload = _experiment_payload(config_path, overrides)
    with _client(server) as client:
        result = _request(client, "POST", "/experiments/ablate", payload)
    click.echo(json.dumps(result, indent=2))


@main.command()
@server_option
@config_option
@set_option
@click.option("--grid", "grid_items", multiple=True, metavar="KEY=V1,V2,...",
              help="Sweep axis (repeatable), e.g. --grid global_patterns=8,16")
def sweep(server, config_path, overrides, grid_items):
    """Grid-sweep config fields such as pattern counts and top-k."""
    payload = _experiment_payload(config_path, overrides)
    grid = {}
    for item in grid_items:
        if "=" not in item:
            click.echo(f"error: grid axis {item!r} must be key=v1,v2,...", err=True)
            sys.exit(1)
        key, values = item.split("=", 1)
        try:
            grid[key] = [_coerce(key, v) for v in values.split(",") if v]
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    if not grid:
        click.echo("error: at least one --grid axis is required", err=True)
        sys.exit(1)
    with _client(server) as client:
        result = _request(client, "POST", "/experiments/sweep",
                          {"config": payload, "grid": grid})
    click.echo(json.dumps(result, indent=2))


@main.command()
@server_option
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--clients", default=4, type=int)
@click.option("--nodes-per-client", default=10, type=int)
@click.option("--t-total", default=2880, type=int)
@click.option("--prototypes", default=3, type=int)
@click.option("--amplitude", default=4.0, type=float)
@click.option("--noise-std", default=1.0, type=float)
@click.option("--seed", default=0, type=int)
@click.option("--partition-out", default=None, type=click.Path(),
              help="Also write the ground-truth partition index file.")
def synth(server, out_path, clients, nodes_per_client, t_total, prototypes,
          amplitude, noise_std, seed, partition_out):
    """Emit a synthetic heterogeneous dataset (matrix-binary)."""
    payload = {
        "out_path": out_path,
        "clients": clients,
        "nodes_per_client": nodes_per_client,
        "t_total": t_total,
        "prototypes": prototypes,
        "amplitude": amplitude,
        "noise_std": noise_std,
        "seed": seed,
        "partition_index_out": partition_out,
    }
    with _client(server) as client:
        result = _request(client, "POST", "/datasets/synthetic", payload)
    click.echo(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
