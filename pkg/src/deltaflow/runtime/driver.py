"""Single-process cluster assembly: build the units, run one query.

The driver owns everything the engine logic should not: creating the
snapshot, partitioning base relations onto workers (owner plus replicas),
choosing the transport, and collecting the outcome into a RunResult.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .. import _kernels
from ..errors import QueryAbort
from .requestor import Requestor
from .ring import PartitionSnapshot
from .transport import InprocNet, TcpNet
from .worker import REQUESTOR, Worker, worker_name


@dataclass
class RunResult:
    rows: list
    schema: object
    metrics_rows: list
    bytes_total: int
    duration_s: float
    worker_count: int
    incremental_recoveries: int = 0
    restarts: int = 0
    failed_workers: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def strata(self) -> int:
        """Coordinated strata across all epochs — the recovery work metric."""
        return len(self.metrics_rows)


def key_bytes(schema, key_cols, row):
    """Canonical routing bytes of a row's key columns."""
    tags = bytes(schema.tags[i] for i in key_cols)
    return _kernels.encode_row(tags, tuple(row[i] for i in key_cols))


def partition_stores(plan, relations, snapshot):
    """Place every base row at its owner and replicas; each worker stores
    rows keyed by canonical bytes so scans iterate deterministically."""
    stores = {w: {} for w in snapshot.workers}
    for spec in plan.scan_ops():
        relation = spec.params["relation"]
        if relation not in relations:
            raise QueryAbort(f"no data for base relation {relation!r}")
        outs = plan.edges_from(spec.op_id)
        schema = plan.schema(outs[0].schema_id)
        key_cols = tuple(spec.params["key"])
        for row in relations[relation]:
            row = tuple(row)
            canon = schema.canon(row)
            kb = key_bytes(schema, key_cols, row)
            for w in snapshot.placement(kb):
                stores[w].setdefault(relation, {})[canon] = row
    return stores


def execute(plan, relations, workers=2, replication=3, seed=0,
            transport="inproc", fail=None, recovery="incremental",
            max_strata=1000, hb_timeout=2.0, tick=0.05,
            timeout=300.0) -> RunResult:
    """Run one compiled plan over in-memory base relations and return the
    sorted result rows plus per-stratum metrics."""
    fail = list(fail or [])
    for cfg in fail:
        if cfg.get("stratum", 1) < 1:
            raise ValueError("failure injection starts at stratum 1")
    snapshot = PartitionSnapshot(range(workers), replication)
    stores = partition_stores(plan, relations, snapshot)

    if transport == "inproc":
        net = InprocNet(seed)
    elif transport == "tcp":
        net = TcpNet(tick=tick)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    req = Requestor(net, plan, snapshot, fail=fail, recovery=recovery,
                    max_strata=max_strata, hb_timeout=hb_timeout)
    net.register(REQUESTOR, req.handle, on_tick=req.on_tick)
    for w in snapshot.workers:
        unit = Worker(w, net, stores[w])
        net.register(worker_name(w), unit.on_frame, on_tick=unit.on_tick)

    if transport == "inproc":
        net.set_idle_hook(req.on_idle)
        req.start()
        net.run()
    else:
        req.done_event = threading.Event()
        req.start()
        net.run(req.done_event, timeout=timeout)

    return RunResult(
        rows=req.rows(),
        schema=plan.schema(plan.result_schema_id),
        metrics_rows=req.metrics_rows,
        bytes_total=req.bytes_total,
        duration_s=req.duration_s if req.duration_s is not None else 0.0,
        worker_count=workers,
        incremental_recoveries=req.incremental_recoveries,
        restarts=req.restarts,
        failed_workers=sorted(req.failed_cum),
        warnings=list(req.warnings),
    )
