"""Pipelined stateful operators.

Operators consume one delta at a time and emit deltas downstream immediately
(pipelining); punctuation markers separate strata.  Unary operators forward
punctuation as soon as it arrives; n-ary operators wait until every live
input has delivered the marker for the stratum, where inputs that already
delivered EndOfQuery are exempt.  Stratum markers must arrive in order per
input; a regression is a protocol error.

Determinism rule: any state fold whose result depends on float evaluation
order is performed at stratum barriers over canonically sorted deltas, never
in arrival order.  Arrival order between workers is scheduling-dependent; the
sorted per-stratum fold makes results bit-identical for any worker count.
"""

from __future__ import annotations

from collections import deque, OrderedDict
from typing import Callable, Optional

from deltaflow import _kernels, core
from deltaflow.errors import PlanError, ProtocolError, QueryAbort
from deltaflow.uda import Bucket, HandlerContext

_EOS = core.END_OF_STRATUM
_EOQ = core.END_OF_QUERY


class PunctTracker:
    """Coordinates punctuation across an operator's input ports."""

    def __init__(self, n_ports):
        self.pending = [deque() for _ in range(n_ports)]
        self.done = [False] * n_ports
        self.next_stratum = 0
        self.eoq_fired = False

    def note(self, port, punct):
        """Record one marker; returns the list of markers that became ready,
        in order (EndOfStratum markers, possibly followed by EndOfQuery)."""
        if self.done[port]:
            raise ProtocolError(f"punctuation after EndOfQuery on port {port}")
        if punct.kind == _EOQ:
            self.done[port] = True
        else:
            if punct.stratum < self.next_stratum:
                raise ProtocolError(
                    f"punctuation regressed to stratum {punct.stratum}, "
                    f"already at {self.next_stratum}")
            self.pending[port].append(punct.stratum)
        return self._drain()

    def _drain(self):
        fired = []
        while True:
            s = self.next_stratum
            ready = True
            any_head = False  # someone must actually carry the marker
            for q, d in zip(self.pending, self.done):
                if q:
                    if q[0] != s:
                        ready = False
                        break
                    any_head = True
                elif not d:
                    ready = False
                    break
            if not ready or not any_head:
                break
            for q in self.pending:
                if q and q[0] == s:
                    q.popleft()
            fired.append(core.Punctuation(_EOS, s))
            self.next_stratum += 1
        if not self.eoq_fired and all(self.done) \
                and not any(self.pending):
            fired.append(core.END_OF_QUERY_PUNCT)
            self.eoq_fired = True
        return fired


class LruCache:
    """Bounded deterministic-function cache keyed on canonical input bytes."""

    def __init__(self, capacity=65536):
        self.capacity = capacity
        self.data = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key, compute):
        if key in self.data:
            self.hits += 1
            self.data.move_to_end(key)
            return self.data[key]
        self.misses += 1
        value = compute()
        self.data[key] = value
        if len(self.data) > self.capacity:
            self.data.popitem(last=False)
        return value


class Output:
    """Where an operator's deltas go.  The runtime subclasses this for local
    edges, rehash boundaries, the back edge, and result shipping."""

    def deliver(self, d: core.Delta):
        raise NotImplementedError

    def deliver_punct(self, punct: core.Punctuation):
        raise NotImplementedError


class NullOutput(Output):
    def deliver(self, d):
        pass

    def deliver_punct(self, punct):
        pass


class Operator:
    """Base: punctuation bookkeeping and counters."""

    n_inputs = 1

    def __init__(self, op_id, out: Output, metrics=None):
        self.op_id = op_id
        self.out = out
        self.tracker = PunctTracker(self.n_inputs)
        self.metrics = metrics if metrics is not None else {}

    def bump(self, name, n=1):
        key = (self.op_id, name)
        self.metrics[key] = self.metrics.get(key, 0) + n

    def consume(self, port, d):
        raise NotImplementedError

    def punctuate(self, port, punct):
        for p in self.tracker.note(port, punct):
            if p.kind == _EOS:
                self.on_stratum(p.stratum)
            else:
                self.on_eoq()
            self.out.deliver_punct(p)

    def on_stratum(self, stratum):
        pass

    def on_eoq(self):
        pass


class Select(Operator):
    """Predicate filter.  Replace deltas degrade to Insert/Delete when only
    one side passes.  Deterministic predicates are cached on input bytes."""

    def __init__(self, op_id, out, schema, pred: Callable, metrics=None,
                 cache: Optional[LruCache] = None):
        super().__init__(op_id, out, metrics)
        self.schema = schema
        self.pred = pred
        self.cache = cache

    def _passes(self, row):
        if self.cache is None:
            return bool(self.pred(row))
        key = self.schema.canon(row)
        return self.cache.get(key, lambda: bool(self.pred(row)))

    def consume(self, port, d):
        self.bump("in")
        if d.kind == core.REPLACE:
            new_ok = self._passes(d.row)
            old_ok = self._passes(d.aux)
            if new_ok and old_ok:
                self.out.deliver(d)
            elif new_ok:
                self.out.deliver(core.insert(d.row))
            elif old_ok:
                self.out.deliver(core.delete(d.aux))
            else:
                return
            self.bump("out")
        elif self._passes(d.row):
            self.bump("out")
            self.out.deliver(d)


class Project(Operator):
    """Expression projection; Replace transforms both the new and the
    replaced tuple, other annotations ride along unchanged."""

    def __init__(self, op_id, out, fn: Callable, metrics=None):
        super().__init__(op_id, out, metrics)
        self.fn = fn

    def consume(self, port, d):
        self.bump("in")
        self.bump("out")
        if d.kind == core.REPLACE:
            self.out.deliver(core.Delta(core.REPLACE, self.fn(d.row), self.fn(d.aux)))
        else:
            self.out.deliver(core.Delta(d.kind, self.fn(d.row), d.aux))


class HashJoin(Operator):
    """Symmetric annotated hash join.  Each side is stored keyed by its join
    attributes; arrivals probe the opposite store and emit combined tuples
    carrying the arriving annotation.  Custom deltas with no handler follow
    the insert path with annotation and payload propagated."""

    n_inputs = 2

    def __init__(self, op_id, out, schemas, keys, metrics=None):
        super().__init__(op_id, out, metrics)
        self.keys = keys
        self.state = [core.KeyedRelation(schemas[0], keys[0]),
                      core.KeyedRelation(schemas[1], keys[1])]

    def _combined(self, port, row, other):
        return row + other if port == 0 else other + row

    def _probe(self, port, row):
        key = core.key_of(row, self.keys[port])
        return self.state[1 - port].by_key(key)

    def consume(self, port, d):
        self.bump("in")
        store = self.state[port]
        if d.kind == core.INSERT or d.kind == core.CUSTOM:
            store.apply(core.insert(d.row))
            for other in self._probe(port, d.row):
                self._emit(core.Delta(d.kind, self._combined(port, d.row, other), d.aux))
        elif d.kind == core.DELETE:
            if store.apply(d).deleted:
                for other in self._probe(port, d.row):
                    self._emit(core.delete(self._combined(port, d.row, other)))
        else:  # replace
            same_key = core.key_of(d.row, self.keys[port]) == \
                core.key_of(d.aux, self.keys[port])
            store.apply(d)
            if same_key:
                for other in self._probe(port, d.row):
                    self._emit(core.replace(self._combined(port, d.row, other),
                                            self._combined(port, d.aux, other)))
            else:
                for other in self._probe(port, d.aux):
                    self._emit(core.delete(self._combined(port, d.aux, other)))
                for other in self._probe(port, d.row):
                    self._emit(core.insert(self._combined(port, d.row, other)))

    def _emit(self, d):
        self.bump("out")
        self.out.deliver(d)


class HandlerJoin(Operator):
    """Join driven by a UDA's join-form handler.  The storage port feeds a
    keyed relation with default annotation semantics; every drive-port delta
    is handed to the handler together with both buckets.  The handler's
    emissions (rows over its output fields) are prefixed with the configured
    passthrough columns of the triggering delta."""

    n_inputs = 2

    def __init__(self, op_id, out, storage_schema, storage_key, drive_key,
                 handler, params, passthrough=(), metrics=None,
                 reset_each_stratum=False, arg_cols=None):
        super().__init__(op_id, out, metrics)
        self.opposite = core.KeyedRelation(storage_schema, storage_key)
        self.drive_key = drive_key
        self.handler = handler
        self.params = params
        self.passthrough = tuple(passthrough)  # drive-side column indices
        # Drive rows may be wider than the handler's declared arguments (the
        # recursive relation carries every result column); arg_cols picks the
        # argument projection.  None means the rows already are the arguments.
        self.arg_cols = tuple(arg_cols) if arg_cols is not None else None
        self.storage = {}
        self.drive_port = 1  # port 0 loads storage, port 1 drives the handler
        self.reset_each_stratum = reset_each_stratum
        self._stratum = 0

    def _ctx(self, trigger_row):
        def emit(d):
            self.bump("out")
            self.bump("emitted")
            if trigger_row is not None:
                row = trigger_row + d.row
                aux = trigger_row + d.aux if d.kind == core.REPLACE else d.aux
            else:
                row, aux = d.row, d.aux
            self.out.deliver(core.Delta(d.kind, row, aux))
        return HandlerContext(self.params, self._stratum, emit)

    def consume(self, port, d):
        self.bump("in")
        if port == 0:
            if d.kind == core.CUSTOM:
                self.opposite.apply(core.insert(d.row))
            else:
                self.opposite.apply(d)
            return
        self.bump("drive_in")
        trigger = tuple(d.row[i] for i in self.passthrough) \
            if self.passthrough else None
        if self.arg_cols is not None:
            row = tuple(d.row[i] for i in self.arg_cols)
            aux = tuple(d.aux[i] for i in self.arg_cols) \
                if d.kind == core.REPLACE else d.aux
            d = core.Delta(d.kind, row, aux)
        self.handler.update(self.storage, Bucket(self.opposite), d,
                            self._ctx(trigger))

    def on_stratum(self, stratum):
        self._stratum = stratum
        self.handler.flush(self.storage, Bucket(self.opposite), self._ctx(None))
        if self.reset_each_stratum:
            self.storage.clear()
        self._stratum = stratum + 1  # updates that follow belong to the next stratum


class DependentJoin(Operator):
    """Per-tuple invocation of a table-valued function: each input row is
    extended by every row the function yields for its arguments.  The
    function must be deterministic when caching is enabled."""

    def __init__(self, op_id, out, schema, fn, arg_cols, metrics=None,
                 cache: Optional[LruCache] = None):
        super().__init__(op_id, out, metrics)
        self.schema = schema
        self.fn = fn
        self.arg_cols = tuple(arg_cols)
        self.cache = cache

    def _rows_for(self, row):
        args = tuple(row[i] for i in self.arg_cols)
        if self.cache is None:
            return list(self.fn(*args))
        key = self.schema.canon(row)
        return self.cache.get(key, lambda: list(self.fn(*args)))

    def consume(self, port, d):
        self.bump("in")
        if d.kind == core.REPLACE:
            for extra in self._rows_for(d.aux):
                self._emit(core.delete(d.aux + tuple(extra)))
            for extra in self._rows_for(d.row):
                self._emit(core.insert(d.row + tuple(extra)))
            return
        for extra in self._rows_for(d.row):
            self._emit(core.Delta(d.kind, d.row + tuple(extra), d.aux))

    def _emit(self, d):
        self.bump("out")
        self.out.deliver(d)


class _Group:
    __slots__ = ("states", "pending", "last", "last_rows")

    def __init__(self, states):
        self.states = states
        self.pending = []
        self.last = None       # last emitted row (single-row aggregates)
        self.last_rows = None  # last emitted row set (table-valued)


class GroupBy(Operator):
    """Stateful grouping with delta-interpreting aggregates.

    Buffered mode (the default inside recursive regions) queues each
    stratum's deltas per group and folds them at the barrier in canonical
    order, then emits one Insert/Replace per changed group.  Streaming mode
    folds and re-emits on every arrival.  ``merge_partials`` consumes
    pre-aggregated partial rows via the aggregates' merge path.  With
    ``per_stratum`` scope the state is discarded after every flush instead of
    persisting across strata.
    """

    def __init__(self, op_id, out, schema, key_attrs, aggs, out_schema=None,
                 metrics=None, stream=False, per_stratum=False,
                 merge_partials=False):
        super().__init__(op_id, out, metrics)
        self.schema = schema
        self.key_attrs = tuple(key_attrs)
        self.aggs = aggs  # list of (Aggregate, arg col indices or None)
        self.out_schema = out_schema  # for bitwise change suppression
        self.stream = stream
        self.per_stratum = per_stratum
        self.merge_partials = merge_partials
        self.groups = {}
        self.touched = {}  # key -> canonical key bytes (sort key)
        key_tags = bytes(self.schema.tags[i] for i in self.key_attrs)
        self._key_tags = key_tags

    def _canon_key(self, key):
        return _kernels.encode_row(self._key_tags, key)

    def _group(self, key):
        g = self.groups.get(key)
        if g is None:
            g = _Group([agg.init() for agg, _ in self.aggs])
            self.groups[key] = g
        return g

    def _args(self, row, cols):
        if cols is None:
            return ()
        return tuple(row[i] for i in cols)

    def _apply(self, g, d):
        for i, (agg, cols) in enumerate(self.aggs):
            if self.merge_partials:
                if d.kind != core.INSERT and d.kind != core.CUSTOM:
                    raise QueryAbort("partial streams are insert-only")
                g.states[i] = agg.merge(g.states[i],
                                        agg.from_partial(self._args(d.row, cols)))
            else:
                old = self._args(d.aux, cols) if d.kind == core.REPLACE else None
                g.states[i] = agg.update(g.states[i], d,
                                         self._args(d.row, cols), old)

    def consume(self, port, d):
        self.bump("in")
        if d.kind == core.REPLACE:
            new_key = core.key_of(d.row, self.key_attrs)
            old_key = core.key_of(d.aux, self.key_attrs)
            if new_key != old_key:
                self.consume(port, core.delete(d.aux))
                self.consume(port, core.insert(d.row))
                return
            key = new_key
        else:
            key = core.key_of(d.row, self.key_attrs)
        g = self._group(key)
        if self.stream:
            self._apply(g, d)
            self._emit_group(key, g)
        else:
            g.pending.append((core.canon_delta(self.schema, d), d))
            if key not in self.touched:
                self.touched[key] = self._canon_key(key)

    def _emit_group(self, key, g):
        values = []
        for i, (agg, _) in enumerate(self.aggs):
            r = agg.result(g.states[i])
            if r is None:
                return  # suppressed (e.g. empty average): keep last emission
            values.append(r)
        if len(self.aggs) == 1 and isinstance(values[0], list):
            self._emit_table(key, g, values[0])
            return
        row = key + tuple(v for r in values for v in r)
        if g.last is None:
            self.bump("out")
            self.out.deliver(core.insert(row))
            g.last = row
        elif self._row_canon(row) != self._row_canon(g.last):
            self.bump("out")
            self.out.deliver(core.replace(row, g.last))
            g.last = row

    def _row_canon(self, row):
        return self.out_schema.canon(row) if self.out_schema else row

    def _emit_table(self, key, g, rows):
        new_rows = {self._row_canon(key + tuple(r)): key + tuple(r) for r in rows}
        old_rows = g.last_rows or {}
        for c in sorted(old_rows.keys() - new_rows.keys()):
            self.bump("out")
            self.out.deliver(core.delete(old_rows[c]))
        for c in sorted(new_rows.keys() - old_rows.keys()):
            self.bump("out")
            self.out.deliver(core.insert(new_rows[c]))
        g.last_rows = new_rows

    def on_stratum(self, stratum):
        for key in sorted(self.touched, key=self.touched.get):
            g = self.groups[key]
            g.pending.sort(key=lambda cd: cd[0])
            for _, d in g.pending:
                self._apply(g, d)
            g.pending.clear()
            self._emit_group(key, g)
            if self.per_stratum:
                del self.groups[key]
        self.touched.clear()

    def on_eoq(self):
        self.on_stratum(-1)


class PreAggregate(Operator):
    """Partial aggregation ahead of a rehash or join: folds locally and emits
    partial-state rows (as Inserts) at stratum barriers, or earlier when the
    group table hits the spill cap, then clears.  The final GroupBy merges
    the partials."""

    def __init__(self, op_id, out, schema, key_attrs, aggs, metrics=None,
                 spill_cap=4096):
        super().__init__(op_id, out, metrics)
        self.schema = schema
        self.key_attrs = tuple(key_attrs)
        self.aggs = aggs
        self.spill_cap = spill_cap
        self.groups = {}
        key_tags = bytes(self.schema.tags[i] for i in self.key_attrs)
        self._key_tags = key_tags

    def consume(self, port, d):
        self.bump("in")
        key = core.key_of(d.row, self.key_attrs)
        entry = self.groups.get(key)
        if entry is None:
            entry = self.groups[key] = \
                [_kernels.encode_row(self._key_tags, key), []]
        entry[1].append((core.canon_delta(self.schema, d), d))
        if len(self.groups) >= self.spill_cap:
            self._flush()

    def _flush(self):
        for key, (ck, pend) in sorted(self.groups.items(),
                                      key=lambda kv: kv[1][0]):
            states = [agg.init() for agg, _ in self.aggs]
            pend.sort(key=lambda cd: cd[0])
            for _, d in pend:
                for i, (agg, cols) in enumerate(self.aggs):
                    vals = tuple(d.row[c] for c in cols) if cols else ()
                    old = tuple(d.aux[c] for c in cols) \
                        if d.kind == core.REPLACE and cols else None
                    states[i] = agg.update(states[i], d, vals, old)
            row = key + tuple(v for i, (agg, _) in enumerate(self.aggs)
                              for v in agg.partial(states[i]))
            self.bump("out")
            self.out.deliver(core.insert(row))
        self.groups.clear()

    def on_stratum(self, stratum):
        self._flush()

    def on_eoq(self):
        self._flush()


class GateSpec:
    """Explicit termination condition: an aggregate over each stratum's
    admitted deltas, compared against a literal by the requestor."""

    def __init__(self, agg, arg_cols, pred, cmp, literal):
        self.agg = agg          # Aggregate instance (merge-capable)
        self.arg_cols = arg_cols
        self.pred = pred        # row filter or None
        self.cmp = cmp          # one of < <= > >= = <>
        self.literal = literal

    _CMPS = {
        "<": lambda a, b: a < b, "<=": lambda a, b: a <= b,
        ">": lambda a, b: a > b, ">=": lambda a, b: a >= b,
        "=": lambda a, b: a == b, "<>": lambda a, b: a != b,
    }

    def holds(self, value):
        return self._CMPS[self.cmp](value, self.literal)

    def fold(self, partials):
        """Combine per-worker gate partials into the stratum's global value.
        Returns None when no worker contributed (e.g. avg over nothing)."""
        state = None
        for p in partials:
            if p is None:
                continue
            s = self.agg.from_partial(tuple(p))
            state = s if state is None else self.agg.merge(state, s)
        if state is None:
            return None
        out = self.agg.result(state)
        return None if out is None else out[0]


class Fixpoint(Operator):
    """Recursive UNION point.  Stores one tuple per key; an arriving tuple is
    suppressed iff its non-key attributes bitwise-equal the stored ones,
    otherwise it replaces the stored tuple and counts as newly admitted.
    Admitted deltas are buffered during the stratum and released along the
    back edge only when the requestor's verdict arrives; the per-stratum
    admitted count (and the explicit-gate partial, when configured) goes to
    the requestor at each barrier.
    """

    n_inputs = 2  # port 0: base case, port 1: recursive input

    def __init__(self, op_id, out, schema, key_attrs, metrics=None,
                 gate: Optional[GateSpec] = None, while_handler=None,
                 union_all=True, admit_theta=0.0):
        super().__init__(op_id, out, metrics)
        self.schema = schema
        self.key_attrs = tuple(key_attrs)
        self.gate = gate
        self.while_handler = while_handler
        self.union_all = union_all
        # Convergence slack for admission: with a positive value, a row
        # whose float attributes all moved by at most this much (others
        # bitwise equal) is treated as a duplicate.  Full re-evaluation
        # plans need it because a float iteration has no bitwise fixpoint
        # in general -- the last bits can oscillate forever.
        self.admit_theta = float(admit_theta)
        self.state = {}          # key -> (canon row bytes, row)
        self.admitted = []       # this stratum, in admission order
        self.admitted_count = 0
        self.gate_state = gate.agg.init() if gate else None
        self.gate_closed = False
        self.pending_release = []
        self.barrier_ready = None  # set at each barrier for the runtime
        self.loading = False     # recovery replay: drop arrivals, keep barriers
        self._base_done = False
        self._next_recursive = 0

    def consume(self, port, d):
        self.bump("in")
        if self.loading or self.gate_closed:
            return
        if self.while_handler is not None:
            emitted = self.while_handler.update(self.state, d)
            for nd in emitted or ():
                self._admit(nd)
            return
        key = core.key_of(d.row, self.key_attrs)
        canon = self.schema.canon(d.row)
        if d.kind == core.DELETE:
            stored = self.state.get(key)
            if stored is not None and stored[0] == canon:
                del self.state[key]
                self._admit(d)
            return
        stored = self.state.get(key)
        if stored is not None and stored[0] == canon:
            return  # duplicate under the key: suppressed
        if stored is not None and self._within_theta(stored[1], d.row):
            return  # converged under the admission slack: suppressed
        self.state[key] = (canon, d.row)
        self._admit(d)

    def _within_theta(self, old_row, new_row):
        if self.admit_theta <= 0.0:
            return False
        for t, old, new in zip(self.schema.types, old_row, new_row):
            if t == core.FLOAT64:
                if not abs(new - old) <= self.admit_theta:
                    return False
            elif old != new:
                return False
        return True

    def _admit(self, d):
        self.bump("admitted")
        self.admitted.append((core.canon_delta(self.schema, d), d))
        self.admitted_count += 1
        if self.gate is not None:
            row = d.row
            if self.gate.pred is None or self.gate.pred(row):
                vals = tuple(row[i] for i in self.gate.arg_cols) \
                    if self.gate.arg_cols else ()
                self.gate_state = self.gate.agg.update(
                    self.gate_state, core.insert(row), vals, None)

    def on_stratum(self, stratum):
        # Checkpoint entries: the stratum's admissions folded per key (one
        # entry per key, the last admitted delta wins).
        folded = {}
        for _, d in self.admitted:
            folded[core.key_of(d.row, self.key_attrs)] = d
        entries = [folded[k] for k in
                   sorted(folded, key=lambda k: self._key_canon(k))]
        self.admitted.sort(key=lambda cd: cd[0])
        self.pending_release = [d for _, d in self.admitted]
        partial = None
        if self.gate is not None:
            partial = self.gate.agg.partial(self.gate_state)
            self.gate_state = self.gate.agg.init()
        self.barrier_ready = {
            "stratum": stratum,
            "admitted": self.admitted_count,
            "checkpoint": entries,
            "gate_partial": partial,
        }
        self.admitted = []
        self.admitted_count = 0

    def _key_canon(self, key):
        tags = bytes(self.schema.tags[i] for i in self.key_attrs)
        return _kernels.encode_row(tags, key)

    def punctuate(self, port, punct):
        # The two ports live one stratum apart.  The base port is exhausted
        # while stratum 0 is being computed, so its stratum-0 marker alone
        # completes barrier 0.  The recursive port's marker for stratum s
        # means the release that drove stratum s+1 has been fully consumed,
        # completing barrier s+1.  Barriers never forward punctuation
        # downstream by themselves: the back edge speaks only when the
        # verdict arrives, and termination is likewise verdict-driven, so
        # EndOfQuery markers need no action here.
        if port == 0:
            if punct.kind == _EOS:
                if punct.stratum != 0 or self._base_done:
                    raise ProtocolError(
                        f"fixpoint {self.op_id}: unexpected base-port marker "
                        f"{punct}")
                self._base_done = True
                self.on_stratum(0)
            return
        if punct.kind == _EOS:
            if punct.stratum != self._next_recursive:
                raise ProtocolError(
                    f"fixpoint {self.op_id}: recursive-port marker "
                    f"{punct} out of order (expected stratum "
                    f"{self._next_recursive})")
            self._next_recursive += 1
            self.on_stratum(punct.stratum + 1)

    def release(self, stratum):
        """Verdict says continue: push the previous stratum's admissions into
        the recursive segment, then the stratum marker."""
        released = self.pending_release
        self.pending_release = []
        self.bump("released", len(released))
        for d in released:
            self.out.deliver(d)
        self.out.deliver_punct(core.Punctuation(_EOS, stratum))
        return len(released)

    def finalize(self):
        """Verdict says done: the accumulated relation is the result."""
        self.pending_release = []
        rows = [row for _, (c, row) in
                sorted(self.state.items(), key=lambda kv: kv[1][0])]
        self.out.deliver_punct(core.END_OF_QUERY_PUNCT)
        return rows

    def reemit_all(self):
        """No-delta driver: stage the full mutable relation for the next
        release instead of just the admissions."""
        self.pending_release = [core.insert(row) for c, (cb, row) in
                                sorted(self.state.items(),
                                       key=lambda kv: kv[1][0])]

    def fold_checkpoint(self, deltas):
        """Recovery: fold one stratum's checkpointed admissions into the
        store without counting them as new.  Idempotent per key."""
        for d in deltas:
            key = core.key_of(d.row, self.key_attrs)
            if d.kind == core.DELETE:
                self.state.pop(key, None)
            else:
                self.state[key] = (self.schema.canon(d.row), d.row)


class ResultSink(Operator):
    """Folds the root stream into a relation; the runtime dumps it (sorted)
    when EndOfQuery arrives."""

    def __init__(self, op_id, out, schema, metrics=None):
        super().__init__(op_id, out, metrics)
        self.schema = schema
        self.rel = core.KeyedRelation(schema)
        self.complete = False

    def consume(self, port, d):
        self.bump("in")
        if d.kind == core.CUSTOM:
            d = core.insert(d.row)
        self.rel.apply(d)

    def on_eoq(self):
        self.complete = True

    def rows(self):
        return self.rel.sorted_rows()
