"""Requestor: disseminates the plan, arbitrates strata, assembles results.

The requestor never touches data except the final result union.  Per
stratum it waits for every live worker's barrier report *and* checkpoint
acknowledgement, folds the gate partials, and broadcasts one verdict:
continue, terminate, or — after a failure — recover/restart.  Holding the
verdict until checkpoints are fully replicated trades a little pipeline
overlap for a hard guarantee: when stratum s+1 starts, stratum s can always
be reconstructed, so a failure during stratum s+1 rewinds exactly to s.

Failure detection is transport-appropriate: under the in-process scheduler
the requestor probes for liveness whenever the network quiesces while work
is outstanding; under TCP it watches heartbeat recency.
"""

from __future__ import annotations

import time

from .. import core, wire
from ..errors import ProtocolError, QueryAbort
from .worker import REQUESTOR, make_gate, worker_name


class _Tally:
    __slots__ = ("reports", "cks")

    def __init__(self):
        self.reports = {}
        self.cks = set()


class Requestor:
    def __init__(self, net, plan, snapshot, fail=None, recovery="incremental",
                 max_strata=1000, hb_timeout=2.0):
        self.net = net
        self.plan = plan
        self.snapshot = snapshot
        self.live = list(snapshot.workers)
        self.fail = list(fail or [])
        self.recovery = recovery
        self.max_strata = int(max_strata)
        self.hb_timeout = hb_timeout

        self.has_fx = bool(plan.fixpoint_ops())
        self.gate = (make_gate(plan.fixpoint_ops()[0].params.get("gate"))
                     if self.has_fx else None)
        # Conservative recoverability bound: every key range keeps at least
        # one live holder as long as fewer ranges' worth of workers failed
        # than there are distinct replicas per range.
        self._tolerance = min(snapshot.replication, len(snapshot.workers))
        self.epoch = snapshot.epoch
        self.phase = "acks"
        self.current = 0          # stratum whose tally is awaited
        self.acks = set()
        self.tallies = {}
        self.finals = set()
        self.result_workers = set()
        self.rel = core.KeyedRelation(plan.schema(plan.result_schema_id))

        self.metrics_rows = []
        self.bytes_total = 0
        self.warnings = []
        self.failed_cum = set()
        self.incremental_recoveries = 0
        self.restarts = 0
        self._ready = set()
        self._resume_stratum = -1

        self._probing = False
        self._probe_id = 0
        self._echoed = set()
        self._last_seen = {}
        self._t_start = time.perf_counter()
        self._t_mark = self._t_start
        self.duration_s = None
        self.done = False
        self.done_event = None    # set by the TCP driver

    # -- outbound ------------------------------------------------------------

    def _broadcast(self, kind, body):
        frame = wire.encode_control(kind, body)
        for w in self.live:
            self.net.send(REQUESTOR, worker_name(w), frame)

    def start(self):
        self._broadcast(wire.F_PLAN, {
            "plan": self.plan.to_json(),
            "snapshot": self.snapshot.to_json(),
            "epoch": self.epoch,
            "fail": self.fail,
        })

    def _verdict(self, stratum, decision, extra=None):
        body = {"stratum": stratum, "decision": decision,
                "epoch": self.epoch}
        if extra:
            body.update(extra)
        self._broadcast(wire.F_VERDICT, body)

    # -- inbound -------------------------------------------------------------

    def handle(self, src, buf):
        kind = buf[0]
        if kind == wire.F_PLAN_ACK:
            body = wire.decode(buf, None).body
            self._last_seen[body["worker"]] = time.perf_counter()
            if body["epoch"] == self.epoch:
                self.acks.add(body["worker"])
                if self.phase == "acks" and self.acks >= set(self.live):
                    self._begin()
        elif kind == wire.F_REPORT:
            body = wire.decode(buf, None).body
            self._last_seen[body["worker"]] = time.perf_counter()
            if body["epoch"] != self.epoch:
                return
            self._on_report(body)
        elif kind == wire.F_RESULT:
            msg = wire.decode(buf, self.plan.schema_tags)
            self._last_seen[msg.worker] = time.perf_counter()
            if msg.epoch != self.epoch:
                return
            for d in msg.deltas:
                self.rel.apply(d)
            self.result_workers.add(msg.worker)
            self._check_done()
        elif kind == wire.F_HEARTBEAT:
            body = wire.decode(buf, None).body
            self._last_seen[body["worker"]] = time.perf_counter()
            if "echo" in body and body["echo"] == self._probe_id:
                self._echoed.add(body["worker"])
        else:
            raise ProtocolError(f"requestor got unexpected frame kind {kind}")

    def _begin(self):
        self.phase = "stratum" if self.has_fx else "final"
        self.current = 0
        self._t_mark = time.perf_counter()
        self._verdict(-1, "continue")

    def _on_report(self, body):
        t = body["type"]
        if t == "barrier":
            tally = self.tallies.setdefault(body["stratum"], _Tally())
            tally.reports[body["worker"]] = body
            self._try_advance()
        elif t == "ck":
            tally = self.tallies.setdefault(body["stratum"], _Tally())
            tally.cks.add(body["worker"])
            self._try_advance()
        elif t == "ready":
            if self.phase != "recovering":
                raise ProtocolError("ready report outside recovery")
            self._ready.add(body["worker"])
            if self._ready >= set(self.live):
                self.phase = "stratum"
                self.current = self._resume_stratum + 1
                self._verdict(self._resume_stratum, "continue")
        elif t == "final":
            self.bytes_total += body.get("bytes", 0)
            self.finals.add(body["worker"])
            self._check_done()
        else:
            raise ProtocolError(f"unknown report type {t!r}")

    # -- stratum arbitration ---------------------------------------------------

    def _try_advance(self):
        if self.phase != "stratum" or not self.has_fx:
            return
        tally = self.tallies.get(self.current)
        live = set(self.live)
        if tally is None or set(tally.reports) < live or tally.cks < live:
            return
        reports = [tally.reports[w] for w in sorted(tally.reports)]
        admitted = sum(r["admitted"] for r in reports)
        processed = sum(r["processed"] for r in reports)
        stratum_bytes = sum(r["bytes"] for r in reports)
        now = time.perf_counter()
        self.metrics_rows.append({
            "stratum": self.current, "admitted": admitted,
            "processed": processed, "bytes": stratum_bytes,
            "ms": (now - self._t_mark) * 1e3,
        })
        self._t_mark = now
        self.bytes_total += stratum_bytes

        terminate = admitted == 0
        if not terminate and self.gate is not None:
            value = self.gate.fold([r["gate"] for r in reports])
            if value is not None and self.gate.holds(value):
                terminate = True
        if not terminate and len(self.metrics_rows) >= self.max_strata:
            self.warnings.append(
                f"stopped at the stratum ceiling ({self.max_strata})")
            terminate = True

        if terminate:
            self.phase = "final"
            self._verdict(self.current, "terminate")
        else:
            self._verdict(self.current, "continue")
            self.current += 1

    def _check_done(self):
        live = set(self.live)
        if self.phase == "final" and self.finals >= live \
                and self.result_workers >= live:
            self.done = True
            self.duration_s = time.perf_counter() - self._t_start
            if self.done_event is not None:
                self.done_event.set()

    # -- failure detection -----------------------------------------------------

    def on_idle(self):
        """In-process scheduler hook: called when no frames are in flight.
        Returns True while the query should keep running."""
        if self.done:
            return False
        if not self._probing:
            self._probe_id += 1
            self._echoed = set()
            self._probing = True
            self._broadcast(wire.F_HEARTBEAT, {"probe": self._probe_id})
            return True
        failed = set(self.live) - self._echoed
        self._probing = False
        if not failed:
            raise ProtocolError(
                f"network quiesced with all workers live in phase "
                f"{self.phase!r} (stratum {self.current})")
        self._handle_failure(failed)
        return True

    def on_tick(self):
        """TCP hook: heartbeat staleness check."""
        if self.done or self.phase == "acks":
            return
        now = time.perf_counter()
        failed = {w for w in self.live
                  if now - self._last_seen.get(w, self._t_start)
                  > self.hb_timeout}
        if failed:
            self._handle_failure(failed)

    # -- recovery orchestration --------------------------------------------------

    def _handle_failure(self, failed):
        if self.phase not in ("stratum",):
            raise ProtocolError(
                f"workers {sorted(failed)} failed in phase {self.phase!r}")
        self.failed_cum |= failed
        survivors = [w for w in self.live if w not in failed]
        if not survivors:
            raise QueryAbort("every worker failed; nothing to recover with")
        self.live = survivors
        self.tallies.clear()
        self._probing = False
        old = self.snapshot
        self.snapshot = old.without(failed)
        self.epoch = self.snapshot.epoch
        now = time.perf_counter()
        for w in survivors:
            self._last_seen[w] = now

        recoverable = (self.recovery == "incremental"
                       and self.current >= 1
                       and len(self.failed_cum) < self._tolerance)
        if recoverable:
            self.incremental_recoveries += 1
            self._resume_stratum = self.current - 1
            self._ready = set()
            self.phase = "recovering"
            self._verdict(self._resume_stratum, "recover", {
                "epoch": self.epoch,
                "snapshot": self.snapshot.to_json(),
                "s_last": self._resume_stratum,
            })
        else:
            if self.recovery == "incremental":
                self.warnings.append(
                    "incremental recovery not possible "
                    f"(cumulative failures {sorted(self.failed_cum)}); "
                    "restarting")
            if len(self.failed_cum) >= self._tolerance:
                self.warnings.append(
                    "failures reached the replication factor; base-relation "
                    "partitions may have lost every copy and restarted "
                    "results may be incomplete")
            self.restarts += 1
            self.current = 0
            self.phase = "stratum" if self.has_fx else "final"
            self._t_mark = time.perf_counter()
            self._verdict(-1, "restart", {
                "epoch": self.epoch,
                "snapshot": self.snapshot.to_json(),
            })

    # -- result ----------------------------------------------------------------

    def rows(self):
        return self.rel.sorted_rows()
