"""HTTP control plane for a running node."""

from __future__ import annotations

import asyncio
import contextlib
import logging
import signal

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .. import ledger
from .node import NetNode, NodeConfig, _split_endpoint
from .profiler import ProfilerReport

log = logging.getLogger(__name__)


class _EmbeddedServer(uvicorn.Server):
    # the node owns signal handling; the API only stops when the node does
    def capture_signals(self):
        return contextlib.nullcontext()


class NodeStatus(BaseModel):
    name: str
    address: str
    state: str
    behavior: str
    listen_port: int | None
    peers: list[str]
    chain_height: int
    pending_transactions: int
    transactions_sent: int
    trainings: int
    model_updates: int
    self_accuracy: float | None
    samples_ingested: int
    frames_dropped: int
    unfinalized_blocks: int
    halted: str | None
    uptime_seconds: float


class ChainStatsModel(BaseModel):
    transactions_per_block: float
    confirmations_per_block: float
    peers: int
    blocks: int


class ProfilerModel(BaseModel):
    mode: str
    wall_seconds: float
    categories: dict[str, float]
    total: float
    blockchain_overhead: float
    blockchain_overhead_fraction: float


class IngestRequest(BaseModel):
    features: list[list[float]] = Field(min_length=1)
    labels: list[int] = Field(min_length=1)


class IngestResponse(BaseModel):
    accepted: int


class PeerRequest(BaseModel):
    endpoint: str


def create_app(node: NetNode) -> FastAPI:
    # handlers are async so they run on the node's own event loop
    app = FastAPI(title="dfl node", version="0.1.0")

    @app.get("/status", response_model=NodeStatus)
    async def status() -> dict:
        return node.status()

    @app.get("/stats", response_model=ChainStatsModel)
    async def stats() -> dict:
        try:
            return ledger.chain_stats(node.protocol.chain).as_dict()
        except ledger.LedgerError as exc:
            raise HTTPException(409, str(exc)) from exc

    @app.get("/profiler", response_model=ProfilerModel)
    async def profiler() -> dict:
        return node.profiler.report().to_json()

    @app.get("/chain")
    async def chain() -> dict:
        return ledger.chain_to_json(node.protocol.chain, node.genesis)

    @app.post("/ingest", response_model=IngestResponse)
    async def ingest(req: IngestRequest) -> dict:
        features = np.asarray(req.features, dtype=np.float64)
        labels = np.asarray(req.labels, dtype=np.int64)
        dim, classes = node.architecture.input_dim, node.architecture.classes
        if features.ndim != 2 or features.shape[1] != dim:
            raise HTTPException(422, f"features must be rows of length {dim}")
        if labels.shape[0] != features.shape[0]:
            raise HTTPException(422, "features and labels differ in length")
        if labels.min() < 0 or labels.max() >= classes:
            raise HTTPException(422, f"labels must lie in [0, {classes})")
        return {"accepted": node.ingest(features, labels)}

    @app.post("/peers", status_code=202)
    async def add_peer(req: PeerRequest) -> dict:
        try:
            _split_endpoint(req.endpoint)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from exc
        node.connect_to(req.endpoint)
        return {"dialing": req.endpoint}

    @app.post("/stop", status_code=202)
    async def stop() -> dict:
        node.request_stop()
        return {"state": "stopping"}

    return app


async def serve_node(config: NodeConfig) -> ProfilerReport:
    """Run a node until a stop condition, with the HTTP API alongside when configured."""
    node = NetNode(config)
    await node.start()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError, RuntimeError):
            loop.add_signal_handler(sig, node.request_stop)
    server = None
    api_task = None
    if config.api_port is not None:
        server = _EmbeddedServer(uvicorn.Config(create_app(node), host=config.api_host, port=config.api_port,
                                                log_level="warning", lifespan="off"))
        api_task = loop.create_task(server.serve())
    try:
        return await node.run()
    finally:
        if server is not None:
            server.should_exit = True
            await api_task
