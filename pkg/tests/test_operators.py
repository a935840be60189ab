"""Operator semantics: annotated propagation, stateful folds vs brute-force
oracles, punctuation coordination."""

import math
import random

import pytest

from deltaflow import core, operators, uda
from deltaflow.errors import ProtocolError
from deltaflow.operators import (DependentJoin, Fixpoint, GroupBy, HashJoin,
                                 HandlerJoin, LruCache, PreAggregate,
                                 PunctTracker, Select, Project)

KV = core.Schema([("k", core.INT64), ("v", core.INT64)])
KF = core.Schema([("k", core.INT64), ("x", core.FLOAT64)])


class Capture(operators.Output):
    def __init__(self):
        self.items = []

    def deliver(self, d):
        self.items.append(d)

    def deliver_punct(self, p):
        self.items.append(p)

    def deltas(self):
        return [x for x in self.items if isinstance(x, core.Delta)]

    def puncts(self):
        return [x for x in self.items if isinstance(x, core.Punctuation)]


def fold(schema, deltas):
    """Naive fold of emissions into a row set (customs land as inserts)."""
    rel = core.KeyedRelation(schema)
    for d in deltas:
        if d.kind == core.CUSTOM:
            d = core.insert(d.row)
        rel.apply(d)
    return set(rel.sorted_rows())


def consistent_stream(rng, schema, n, key_domain=6, val_domain=8):
    """Random set-consistent delta stream (no duplicate inserts, no deletes
    of absent rows) plus the final row set."""
    live = {}
    out = []
    for _ in range(n):
        row = (rng.randrange(key_domain),
               rng.randrange(val_domain) if schema is KV
               else float(rng.randrange(val_domain)))
        c = schema.canon(row)
        choice = rng.random()
        if c in live and choice < 0.4:
            out.append(core.delete(row))
            del live[c]
        elif c in live and choice < 0.7:
            new = (rng.randrange(key_domain),
                   rng.randrange(val_domain) if schema is KV
                   else float(rng.randrange(val_domain)))
            nc = schema.canon(new)
            if nc in live:
                continue
            out.append(core.replace(new, row))
            del live[c]
            live[nc] = new
        elif c not in live:
            out.append(core.insert(row))
            live[c] = row
    return out, set(live.values())


class TestSelect:
    def setup_method(self):
        self.cap = Capture()
        self.op = Select(1, self.cap, KV, lambda r: r[1] > 10)

    def test_insert_filtered(self):
        self.op.consume(0, core.insert((1, 5)))
        self.op.consume(0, core.insert((1, 11)))
        assert self.cap.deltas() == [core.insert((1, 11))]

    def test_replace_only_new_passes(self):
        self.op.consume(0, core.replace((1, 11), (1, 5)))
        assert self.cap.deltas() == [core.insert((1, 11))]

    def test_replace_only_old_passes(self):
        self.op.consume(0, core.replace((1, 5), (1, 11)))
        assert self.cap.deltas() == [core.delete((1, 11))]

    def test_replace_both_pass(self):
        self.op.consume(0, core.replace((1, 12), (1, 11)))
        assert self.cap.deltas() == [core.replace((1, 12), (1, 11))]

    def test_replace_neither_passes(self):
        self.op.consume(0, core.replace((1, 1), (1, 2)))
        assert self.cap.deltas() == []

    def test_custom_annotation_rides_along(self):
        d = core.custom((1, 20), "adj", (1,))
        self.op.consume(0, d)
        assert self.cap.deltas() == [d]

    def test_cache_counts_hits(self):
        cache = LruCache(16)
        calls = []
        op = Select(1, Capture(), KV, lambda r: calls.append(r) or True,
                    cache=cache)
        for _ in range(3):
            op.consume(0, core.insert((1, 1)))
        assert len(calls) == 1
        assert cache.hits == 2 and cache.misses == 1


class TestProject:
    def test_replace_transforms_both_rows(self):
        cap = Capture()
        op = Project(1, cap, lambda r: (r[0], r[1] * 10))
        op.consume(0, core.replace((1, 2), (1, 1)))
        assert cap.deltas() == [core.replace((1, 20), (1, 10))]


class TestHashJoin:
    def make(self):
        self.cap = Capture()
        return HashJoin(1, self.cap, (KV, KV), ((0,), (0,)))

    def test_insert_meets_two_matches(self):
        op = self.make()
        op.consume(1, core.insert((1, 10)))
        op.consume(1, core.insert((1, 20)))
        op.consume(0, core.insert((1, 7)))
        assert fold(_j(), self.cap.deltas()) == {(1, 7, 1, 10), (1, 7, 1, 20)}

    def test_delete_retracts_matches(self):
        op = self.make()
        op.consume(0, core.insert((1, 7)))
        op.consume(1, core.insert((1, 10)))
        op.consume(0, core.delete((1, 7)))
        assert fold(_j(), self.cap.deltas()) == set()

    def test_replace_with_key_change_decomposes(self):
        op = self.make()
        op.consume(0, core.insert((1, 7)))
        op.consume(1, core.insert((1, 10)))
        op.consume(1, core.insert((2, 30)))
        op.consume(0, core.replace((2, 7), (1, 7)))
        assert fold(_j(), self.cap.deltas()) == {(2, 7, 2, 30)}

    def test_custom_rides_insert_path_with_payload(self):
        op = self.make()
        op.consume(1, core.insert((1, 10)))
        op.consume(0, core.custom((1, 7), "h", (1.5,)))
        assert self.cap.deltas() == [core.custom((1, 7, 1, 10), "h", (1.5,))]

    def test_random_streams_match_naive_join(self):
        rng = random.Random(31)
        for _ in range(60):
            cap = Capture()
            op = HashJoin(1, cap, (KV, KV), ((0,), (0,)))
            left, lfinal = consistent_stream(rng, KV, rng.randrange(40))
            right, rfinal = consistent_stream(rng, KV, rng.randrange(40))
            # Interleave randomly but keep each port's order intact.
            feeds = [list(left), list(right)]
            while feeds[0] or feeds[1]:
                port = rng.choice([p for p in (0, 1) if feeds[p]])
                op.consume(port, feeds[port].pop(0))
            want = {l + r for l in lfinal for r in rfinal if l[0] == r[0]}
            assert fold(_j(), cap.deltas()) == want


def _j():
    return core.Schema([("a", core.INT64), ("b", core.INT64),
                        ("c", core.INT64), ("d", core.INT64)])


def _groupby(aggs, schema=KV, out_fields=None, **kw):
    cap = Capture()
    out_schema = core.Schema([("k", core.INT64)] + list(out_fields))
    op = GroupBy(1, cap, schema, (0,), aggs, out_schema=out_schema, **kw)
    return op, cap


class TestGroupByStreaming:
    def test_sum_emits_replacement_per_delta(self):
        op, cap = _groupby([(uda.make_builtin("sum"), (1,))],
                           out_fields=[("sum", core.INT64)], stream=True)
        op.consume(0, core.insert((1, 3)))
        op.consume(0, core.insert((1, 5)))
        op.consume(0, core.delete((1, 3)))
        assert cap.deltas() == [
            core.insert((1, 3)),
            core.replace((1, 8), (1, 3)),
            core.replace((1, 5), (1, 8)),
        ]

    def test_min_falls_back_on_deletion(self):
        op, cap = _groupby([(uda.make_builtin("min"), (1,))],
                           out_fields=[("min", core.INT64)], stream=True)
        op.consume(0, core.insert((1, 3)))
        op.consume(0, core.insert((1, 5)))
        op.consume(0, core.delete((1, 3)))
        assert cap.deltas() == [core.insert((1, 3)),
                                core.replace((1, 5), (1, 3))]


class TestGroupByBuffered:
    def test_flush_emits_once_per_touched_group(self):
        op, cap = _groupby([(uda.make_builtin("sum"), (1,))],
                           out_fields=[("sum", core.INT64)])
        op.consume(0, core.insert((1, 3)))
        op.consume(0, core.insert((1, 5)))
        op.consume(0, core.insert((2, 7)))
        op.punctuate(0, core.end_of_stratum(0))
        assert fold(op.out_schema, cap.deltas()) == {(1, 8), (2, 7)}
        # Untouched groups stay silent on the next stratum.
        cap.items.clear()
        op.consume(0, core.insert((2, 1)))
        op.punctuate(0, core.end_of_stratum(1))
        assert cap.deltas() == [core.replace((2, 8), (2, 7))]

    def test_unchanged_result_is_suppressed(self):
        op, cap = _groupby([(uda.make_builtin("sum"), (1,))],
                           out_fields=[("sum", core.INT64)])
        op.consume(0, core.insert((1, 4)))
        op.punctuate(0, core.end_of_stratum(0))
        op.consume(0, core.insert((1, 2)))
        op.consume(0, core.delete((1, 2)))
        op.punctuate(0, core.end_of_stratum(1))
        assert [d for d in cap.deltas()] == [core.insert((1, 4))]

    def test_random_streams_match_recomputation(self):
        """Folded group-by output equals aggregates recomputed from the
        folded input relation, for any set-consistent stream."""
        rng = random.Random(77)
        for trial in range(120):
            aggs = [(uda.make_builtin("sum"), (1,)),
                    (uda.make_builtin("count"), None),
                    (uda.make_builtin("min"), (1,)),
                    (uda.make_builtin("max"), (1,))]
            out_fields = [("sum", core.INT64), ("count", core.INT64),
                          ("min", core.INT64), ("max", core.INT64)]
            op, cap = _groupby(aggs, out_fields=out_fields)
            stream, final = consistent_stream(rng, KV, rng.randrange(200))
            cut = rng.randrange(len(stream) + 1)
            for d in stream[:cut]:
                op.consume(0, d)
            op.punctuate(0, core.end_of_stratum(0))
            for d in stream[cut:]:
                op.consume(0, d)
            op.punctuate(0, core.end_of_stratum(1))
            got = fold(op.out_schema, cap.deltas())
            want = set()
            keys = {r[0] for r in final}
            for k in keys:
                vals = [r[1] for r in final if r[0] == k]
                want.add((k, sum(vals), len(vals), min(vals), max(vals)))
            # Groups whose rows all vanished keep their last emission minus
            # min/max (empty multiset suppresses the row), so compare only
            # groups that still have rows plus sum/count rows for dead ones.
            got_live = {r for r in got if r[0] in keys}
            assert got_live == want

    def test_average_empty_group_suppressed(self):
        op, cap = _groupby([(uda.make_builtin("average"), (1,))],
                           out_fields=[("avg", core.FLOAT64)])
        op.consume(0, core.insert((1, 4)))
        op.consume(0, core.insert((1, 6)))
        op.punctuate(0, core.end_of_stratum(0))
        op.consume(0, core.delete((1, 4)))
        op.consume(0, core.delete((1, 6)))
        op.punctuate(0, core.end_of_stratum(1))
        assert cap.deltas() == [core.insert((1, 5.0))]

    def test_adjustment_payload_average(self):
        op, cap = _groupby([(uda.make_builtin("average"), (1,))],
                           schema=KF, out_fields=[("avg", core.FLOAT64)])
        op.consume(0, core.custom((1, 6.0), uda.ADJUST, (3,)))
        op.punctuate(0, core.end_of_stratum(0))
        assert cap.deltas() == [core.insert((1, 2.0))]

    def test_replace_across_groups_splits(self):
        op, cap = _groupby([(uda.make_builtin("sum"), (1,))],
                           out_fields=[("sum", core.INT64)])
        op.consume(0, core.insert((1, 5)))
        op.consume(0, core.insert((2, 1)))
        op.punctuate(0, core.end_of_stratum(0))
        op.consume(0, core.replace((2, 5), (1, 5)))
        op.punctuate(0, core.end_of_stratum(1))
        assert fold(op.out_schema, cap.deltas()) == {(1, 0), (2, 6)}


class TestFloatDeterminism:
    def test_barrier_fold_is_arrival_order_independent(self):
        values = [0.1 * i for i in range(1, 30)]
        results = []
        for seed in range(6):
            op, cap = _groupby([(uda.make_builtin("sum"), (1,))],
                               schema=KF, out_fields=[("s", core.FLOAT64)])
            shuffled = values[:]
            random.Random(seed).shuffle(shuffled)
            for v in shuffled:
                op.consume(0, core.insert((1, v)))
            op.punctuate(0, core.end_of_stratum(0))
            results.append(cap.deltas()[0].row)
        assert len({op.out_schema.canon(r) for r in results}) == 1

    def test_replace_rounding_is_pinned(self):
        agg = uda.make_builtin("sum", core.FLOAT64)
        state = agg.update(agg.init(), core.insert((0,)), (0.1,), None)
        state = agg.update(state, core.replace((0,), (0,)), (0.7,), (0.3,))
        assert state == (0.1 - 0.3) + 0.7


class TestPreAggregate:
    def test_partials_merge_to_exact_totals(self):
        rng = random.Random(5)
        pre_out = core.Schema([("k", core.INT64), ("sum", core.INT64),
                               ("count", core.INT64)])
        cap1 = Capture()
        pre = PreAggregate(1, cap1, KV, (0,),
                           [(uda.make_builtin("sum"), (1,)),
                            (uda.make_builtin("count"), None)], spill_cap=3)
        final, cap2 = _groupby(
            [(uda.make_builtin("sum"), (1,)), (uda.make_builtin("count"), (2,))],
            schema=pre_out,
            out_fields=[("sum", core.INT64), ("count", core.INT64)],
            merge_partials=True)
        rows = [(rng.randrange(5), rng.randrange(10)) for _ in range(100)]
        for r in rows:
            pre.consume(0, core.insert(r))
        pre.punctuate(0, core.end_of_stratum(0))
        for d in cap1.deltas():
            final.consume(0, d)
        final.punctuate(0, core.end_of_stratum(0))
        got = fold(final.out_schema, cap2.deltas())
        want = {(k, sum(v for kk, v in rows if kk == k),
                 sum(1 for kk, _ in rows if kk == k))
                for k in {r[0] for r in rows}}
        assert got == want


class _ProbeHandler(uda.JoinHandler):
    """Stores the running per-key max and emits the opposite bucket's values
    whenever the max grows; flush emits one marker row per stratum."""

    def update(self, storage, opposite, d, ctx):
        k, v = d.row
        if v > storage.get(k, -1):
            storage[k] = v
            for row in opposite.rows_for((k,)):
                ctx.emit(core.insert((row[1],)))

    def flush(self, storage, opposite, ctx):
        ctx.emit(core.insert((-1, ctx.stratum)))


class TestHandlerJoin:
    def make(self):
        self.cap = Capture()
        return HandlerJoin(1, self.cap, KV, (0,), (0,), _ProbeHandler(), {},
                           passthrough=(0,))

    def test_storage_port_loads_without_driving(self):
        op = self.make()
        op.consume(0, core.insert((1, 10)))
        assert self.cap.deltas() == []

    def test_drive_port_invokes_handler_with_passthrough(self):
        op = self.make()
        op.consume(0, core.insert((1, 10)))
        op.consume(0, core.insert((1, 20)))
        op.consume(1, core.insert((1, 5)))
        assert fold(KV, self.cap.deltas()) == {(1, 10), (1, 20)}
        # A smaller value leaves handler storage untouched: silence.
        self.cap.items.clear()
        op.consume(1, core.insert((1, 3)))
        assert self.cap.deltas() == []

    def test_flush_runs_at_barrier_with_stratum(self):
        op = self.make()
        op.punctuate(0, core.end_of_stratum(0))
        op.punctuate(1, core.end_of_stratum(0))
        assert self.cap.deltas() == [core.insert((-1, 0))]
        op.punctuate(0, core.end_of_stratum(1))
        op.punctuate(1, core.end_of_stratum(1))
        assert self.cap.deltas()[-1] == core.insert((-1, 1))


class TestDependentJoin:
    def test_per_tuple_invocation(self):
        cap = Capture()
        out2 = core.Schema([("k", core.INT64), ("v", core.INT64),
                            ("e", core.INT64)])
        op = DependentJoin(1, cap, KV, lambda k, v: [(v,), (v + 1,)], (0, 1))
        op.consume(0, core.insert((1, 10)))
        op.consume(0, core.insert((2, 20)))
        assert fold(out2, cap.deltas()) == {(1, 10, 10), (1, 10, 11),
                                            (2, 20, 20), (2, 20, 21)}

    def test_delete_retracts_function_rows(self):
        cap = Capture()
        out2 = core.Schema([("k", core.INT64), ("v", core.INT64),
                            ("e", core.INT64)])
        op = DependentJoin(1, cap, KV, lambda k, v: [(v,)], (0, 1),
                           cache=LruCache(8))
        op.consume(0, core.insert((1, 10)))
        op.consume(0, core.delete((1, 10)))
        assert fold(out2, cap.deltas()) == set()


class TestFixpoint:
    def make(self, **kw):
        self.cap = Capture()
        return Fixpoint(1, self.cap, KV, (0,), **kw)

    def test_keyed_replacement_and_suppression(self):
        fp = self.make()
        fp.consume(0, core.insert((1, 10)))
        fp.consume(0, core.insert((1, 10)))  # bitwise duplicate: suppressed
        fp.consume(0, core.insert((1, 11)))  # same key, new value: admitted
        fp.consume(0, core.insert((2, 5)))
        assert fp.admitted_count == 3
        assert {k: row for k, (c, row) in fp.state.items()} == \
            {(1,): (1, 11), (2,): (2, 5)}

    def test_barrier_reports_and_release(self):
        # The base port alone completes barrier 0: recursive-port markers
        # only exist after the first release.
        fp = self.make()
        fp.consume(0, core.insert((2, 5)))
        fp.consume(0, core.insert((1, 10)))
        fp.punctuate(0, core.end_of_stratum(0))
        rep = fp.barrier_ready
        assert rep["stratum"] == 0 and rep["admitted"] == 2
        assert [d.row for d in rep["checkpoint"]] == [(1, 10), (2, 5)]
        n = fp.release(0)
        assert n == 2
        released = self.cap.deltas()
        assert [d.row for d in released] == [(1, 10), (2, 5)]
        assert self.cap.puncts() == [core.end_of_stratum(0)]

    def test_recursive_marker_completes_next_barrier(self):
        fp = self.make()
        fp.consume(0, core.insert((1, 10)))
        fp.punctuate(0, core.end_of_stratum(0))
        fp.release(0)
        fp.consume(1, core.insert((1, 11)))
        fp.punctuate(1, core.end_of_stratum(0))
        rep = fp.barrier_ready
        assert rep["stratum"] == 1 and rep["admitted"] == 1
        fp.release(1)
        fp.punctuate(1, core.end_of_stratum(1))
        assert fp.barrier_ready["stratum"] == 2

    def test_marker_out_of_order_raises(self):
        fp = self.make()
        with pytest.raises(ProtocolError):
            fp.punctuate(0, core.end_of_stratum(1))
        fp2 = self.make()
        with pytest.raises(ProtocolError):
            fp2.punctuate(1, core.end_of_stratum(1))

    def test_checkpoint_folds_per_key(self):
        fp = self.make()
        fp.consume(0, core.insert((1, 10)))
        fp.consume(1, core.insert((1, 11)))
        fp.punctuate(0, core.end_of_stratum(0))
        ck = fp.barrier_ready["checkpoint"]
        assert len(ck) == 1 and ck[0].row == (1, 11)

    def test_loading_discards_but_counts_barriers(self):
        fp = self.make()
        fp.loading = True
        fp.consume(0, core.insert((1, 10)))
        fp.punctuate(0, core.end_of_stratum(0))
        assert fp.state == {} and fp.barrier_ready["admitted"] == 0

    def test_fold_checkpoint_rebuilds_state(self):
        fp = self.make()
        fp.fold_checkpoint([core.insert((1, 10)), core.insert((2, 5))])
        fp.fold_checkpoint([core.replace((1, 12), (1, 10)),
                            core.delete((2, 5))])
        assert {k: row for k, (c, row) in fp.state.items()} == {(1,): (1, 12)}
        # Re-folding the same stratum is idempotent.
        fp.fold_checkpoint([core.replace((1, 12), (1, 10)),
                            core.delete((2, 5))])
        assert {k: row for k, (c, row) in fp.state.items()} == {(1,): (1, 12)}

    def test_finalize_dumps_sorted_state(self):
        fp = self.make()
        fp.consume(0, core.insert((2, 5)))
        fp.consume(0, core.insert((1, 10)))
        rows = fp.finalize()
        assert rows == [(1, 10), (2, 5)]
        assert self.cap.puncts() == [core.END_OF_QUERY_PUNCT]

    def test_gate_partial_and_closing(self):
        gate = operators.GateSpec(uda.make_builtin("count"), None, None, "<", 3)
        fp = self.make(gate=gate)
        fp.consume(0, core.insert((1, 1)))
        fp.consume(0, core.insert((2, 1)))
        fp.punctuate(0, core.end_of_stratum(0))
        assert fp.barrier_ready["gate_partial"] == (2,)
        assert gate.holds(2) is True
        fp.gate_closed = True
        fp.consume(1, core.insert((3, 1)))
        assert fp.admitted_count == 0

    def test_delete_of_stored_tuple_is_admitted(self):
        fp = self.make()
        fp.consume(0, core.insert((1, 10)))
        fp.consume(1, core.delete((1, 10)))
        assert fp.admitted_count == 2
        assert fp.state == {}


class TestPunctuation:
    def test_unary_forwards_immediately(self):
        cap = Capture()
        op = Project(1, cap, lambda r: r)
        op.punctuate(0, core.end_of_stratum(0))
        assert cap.puncts() == [core.end_of_stratum(0)]

    def test_nary_waits_for_all_inputs(self):
        cap = Capture()
        op = HashJoin(1, cap, (KV, KV), ((0,), (0,)))
        op.punctuate(0, core.end_of_stratum(0))
        assert cap.puncts() == []
        op.punctuate(1, core.end_of_stratum(0))
        assert cap.puncts() == [core.end_of_stratum(0)]

    def test_end_of_query_exempts_port(self):
        cap = Capture()
        op = HashJoin(1, cap, (KV, KV), ((0,), (0,)))
        op.punctuate(0, core.end_of_stratum(0))
        op.punctuate(0, core.END_OF_QUERY_PUNCT)
        op.punctuate(1, core.end_of_stratum(0))
        assert cap.puncts() == [core.end_of_stratum(0)]
        op.punctuate(1, core.end_of_stratum(1))
        assert cap.puncts()[-1] == core.end_of_stratum(1)
        op.punctuate(1, core.END_OF_QUERY_PUNCT)
        assert cap.puncts()[-1] == core.END_OF_QUERY_PUNCT

    def test_regression_is_protocol_error(self):
        tr = PunctTracker(1)
        tr.note(0, core.end_of_stratum(0))
        tr.note(0, core.end_of_stratum(1))
        with pytest.raises(ProtocolError):
            tr.note(0, core.end_of_stratum(0))

    def test_after_eoq_is_protocol_error(self):
        tr = PunctTracker(1)
        tr.note(0, core.END_OF_QUERY_PUNCT)
        with pytest.raises(ProtocolError):
            tr.note(0, core.end_of_stratum(2))

    def test_random_interleavings_fire_in_order(self):
        rng = random.Random(11)
        for _ in range(200):
            n = rng.randint(1, 4)
            strata = rng.randint(0, 6)
            tr = PunctTracker(n)
            feeds = []
            for p in range(n):
                feeds += [(p, core.end_of_stratum(s)) for s in range(strata)]
                feeds.append((p, core.END_OF_QUERY_PUNCT))
            # Interleave ports randomly while preserving per-port order.
            by_port = {p: [f for f in feeds if f[0] == p] for p in range(n)}
            fired = []
            live = [p for p in range(n) if by_port[p]]
            while live:
                p = rng.choice(live)
                port, punct = by_port[p].pop(0)
                fired += tr.note(port, punct)
                if not by_port[p]:
                    live.remove(p)
            want = [core.end_of_stratum(s) for s in range(strata)]
            want.append(core.END_OF_QUERY_PUNCT)
            assert fired == want
