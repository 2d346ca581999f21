"""Command-line entry point: `dfl node ...`, `dfl sim ...`, `dfl topo ...`."""

from __future__ import annotations

import asyncio
import json
import logging
import os
import sys

import click
from pydantic import ValidationError

from . import ledger


def _configure_logging() -> None:
    level = os.environ.get("DFL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _echo_json(data) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _load(cls, path: str):
    try:
        return cls.load(path)
    except ValidationError as exc:
        raise click.ClickException(f"invalid config {path}:\n{exc}") from exc
    except OSError as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
def main() -> None:
    """Decentralized federated learning node, simulator and tools."""
    _configure_logging()


# ---------------------------------------------------------------- node

@main.group()
def node() -> None:
    """Run a networked node or inspect its outputs."""


@node.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def node_run(config_path: str) -> None:
    """Run a node until its stop condition or SIGINT."""
    from .net.node import NodeConfig
    from .net.service import serve_node

    config = _load(NodeConfig, config_path)
    report = asyncio.run(serve_node(config))
    click.echo(report.table())
    if config.out_dir:
        click.echo(f"outputs written to {config.out_dir}")


def _load_chain_dir(directory: str):
    try:
        return ledger.load_chain(directory)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot load chain from {directory}: {exc}") from exc


@node.command("export-stats")
@click.option("--chain", "chain_dir", required=True, type=click.Path(exists=True, file_okay=False))
def node_export_stats(chain_dir: str) -> None:
    """Blockchain statistics of a saved chain, after verifying it."""
    chain, genesis = _load_chain_dir(chain_dir)
    report = ledger.verify_chain(chain, genesis)
    if not report:
        raise click.ClickException(f"chain does not verify: {report.reason} (block {report.index})")
    try:
        stats = ledger.chain_stats(chain)
    except ledger.LedgerError as exc:
        raise click.ClickException(str(exc)) from exc
    _echo_json(stats.as_dict())


@node.command("export-chain")
@click.option("--chain", "chain_dir", required=True, type=click.Path(exists=True, file_okay=False))
def node_export_chain(chain_dir: str) -> None:
    """Dump a saved chain as JSON."""
    chain, genesis = _load_chain_dir(chain_dir)
    _echo_json(ledger.chain_to_json(chain, genesis))


def _api(url: str, method: str, path: str):
    import httpx

    try:
        resp = httpx.request(method, url.rstrip("/") + path, timeout=10)
    except httpx.HTTPError as exc:
        raise click.ClickException(f"cannot reach {url}: {exc}") from exc
    if resp.status_code >= 400:
        raise click.ClickException(f"{resp.status_code}: {resp.text}")
    return resp.json()


@node.command("status")
@click.option("--api", "url", required=True, help="Base URL of the node API, e.g. http://127.0.0.1:8700")
def node_status(url: str) -> None:
    _echo_json(_api(url, "GET", "/status"))


@node.command("stats")
@click.option("--api", "url", required=True)
def node_stats(url: str) -> None:
    """Live chain statistics from a running node."""
    _echo_json(_api(url, "GET", "/stats"))


@node.command("stop")
@click.option("--api", "url", required=True)
def node_stop(url: str) -> None:
    _echo_json(_api(url, "POST", "/stop"))


# ---------------------------------------------------------------- simulator

@main.group()
def sim() -> None:
    """Deterministic tick simulations."""


@sim.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", default="sim-out", show_default=True, type=click.Path(file_okay=False))
def sim_run(config_path: str, out_dir: str) -> None:
    from .sim import SimConfig, SimConfigError, run_repetitions

    config = _load(SimConfig, config_path)
    try:
        runs = run_repetitions(config, out_dir)
    except SimConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    for k, run in enumerate(runs):
        accs = run.final_accuracies()
        click.echo(f"run {k}: final accuracy min {min(accs):.4f} mean {sum(accs) / len(accs):.4f}")
    click.echo(f"artifacts in {out_dir}")


@sim.command("ratio")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--buffers", default="32,8,2", show_default=True)
@click.option("--target", default=0.8, show_default=True, type=float)
@click.option("--out", "out_dir", default="ratio-out", show_default=True, type=click.Path(file_okay=False))
def sim_ratio(config_path: str, buffers: str, target: float, out_dir: str) -> None:
    """Observer accuracy for several FedAvg buffer sizes on a fully connected network."""
    from .sim import SimConfig, run_ratio_experiment

    try:
        sizes = [int(b) for b in buffers.split(",") if b.strip()]
    except ValueError as exc:
        raise click.BadParameter("buffers must be comma-separated integers") from exc
    if not sizes or min(sizes) < 1:
        raise click.BadParameter("buffers must be positive")
    result = run_ratio_experiment(_load(SimConfig, config_path), sizes, target, out_dir)
    _echo_json(result.summary())


# ---------------------------------------------------------------- topology

@main.group()
def topo() -> None:
    """Network topology tools."""


@topo.command("gen")
@click.option("--nodes", required=True, type=int)
@click.option("--active", required=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def topo_gen(nodes: int, active: int, seed: int) -> None:
    """Print a connected random adjacency list as JSON."""
    from .sim import SimConfigError, generate_topology

    try:
        _echo_json(generate_topology(nodes, active, seed))
    except SimConfigError as exc:
        raise click.ClickException(str(exc)) from exc


if __name__ == "__main__":
    sys.exit(main())
