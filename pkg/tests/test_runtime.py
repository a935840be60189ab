"""End-to-end distributed execution: algorithm correctness against
independent oracles, determinism across worker counts and scheduling
jitter, delta/no-delta equivalence, both transports, and metrics shape."""

import logging
import random

import pytest

import oracles
from deltaflow import algorithms, core, datasets, metrics
from deltaflow.errors import QueryAbort
from deltaflow.rql import Catalog, compile_program
from deltaflow.runtime import (PartitionSnapshot, execute, key_bytes,
                               partition_stores)

logging.getLogger("deltaflow").setLevel(logging.ERROR)


def compile_algo(name, no_delta=False, **params):
    defaults = {"pagerank": {"theta": 1e-9}, "sssp": {"startNode": 0},
                "kmeans": {"k": 4, "seed": 3}}[name]
    defaults.update(params)
    return compile_program(algorithms.query_text(name),
                           algorithms.base_catalog(), params=defaults,
                           no_delta=no_delta)


def small_graph(seed=7, n=40, m=110):
    return datasets.synth_graph(n, m, seed=seed, connected=True)


def small_points(seed=11, n=60):
    return datasets.synth_points(n, clusters=4, spread=0.04, seed=seed)


# ---------------------------------------------------------------------------
# Oracle agreement


class TestOracleAgreement:
    def test_sssp_equals_bfs(self):
        for seed in (1, 2, 3):
            edges = small_graph(seed=seed)
            res = execute(compile_algo("sssp"), {"graph": edges}, workers=3)
            assert sorted(res.rows) == oracles.bfs_rows(edges, 0)

    def test_sssp_unreachable_vertices_absent(self):
        edges = [(0, 1), (1, 2), (5, 6)]  # 5,6 unreachable from 0
        res = execute(compile_algo("sssp"), {"graph": edges}, workers=2)
        assert sorted(res.rows) == oracles.bfs_rows(edges, 0)
        assert {r[0] for r in res.rows} == {0, 1, 2}

    def test_sssp_cycle_through_start(self):
        edges = [(0, 1), (1, 2), (2, 0)]
        res = execute(compile_algo("sssp"), {"graph": edges}, workers=2)
        assert sorted(res.rows) == [(0, 0, 0), (1, 0, 1), (2, 1, 2)]

    def test_pagerank_against_power_iteration(self):
        edges = small_graph(seed=9)
        res = execute(compile_algo("pagerank"), {"graph": edges}, workers=3)
        ranks = dict(res.rows)
        want = oracles.pagerank_power(edges)
        assert set(ranks) == set(want)
        assert max(abs(ranks[v] - want[v]) for v in want) <= 1e-6
        assert oracles.pagerank_residual(edges, ranks) <= 1e-6

    def test_pagerank_two_cycle_exact(self):
        res = execute(compile_algo("pagerank"),
                      {"graph": [(0, 1), (1, 0)]}, workers=2)
        assert sorted(res.rows) == [(0, 1.0), (1, 1.0)]

    def test_kmeans_trace_matches_lloyd(self):
        """Forcing termination after m strata exposes the engine's centroid
        trajectory; it must track sequential Lloyd's from the same initial
        centroids, stratum for stratum."""
        pts = small_points()
        plan = compile_algo("kmeans")
        full = execute(plan, {"geodata": pts}, workers=2)
        trunc = [execute(plan, {"geodata": pts}, workers=2, max_strata=m)
                 for m in range(1, full.strata + 1)]
        cent0 = {c: (x, y) for c, x, y in trunc[0].rows}
        trace, _assign = oracles.lloyd_trace(pts, cent0)
        assert len(cent0) == 4
        for m in range(2, full.strata + 1):
            got = {c: (x, y) for c, x, y in trunc[m - 1].rows}
            want = trace[min(m - 2, len(trace) - 1)]
            for cid, (wx, wy) in want.items():
                gx, gy = got[cid]
                assert abs(gx - wx) <= 1e-9 and abs(gy - wy) <= 1e-9
        assert sorted(trunc[-1].rows) == sorted(full.rows)


# ---------------------------------------------------------------------------
# Determinism


class TestDeterminism:
    @pytest.mark.parametrize("algo,rel,data", [
        ("pagerank", "graph", small_graph(seed=5)),
        ("sssp", "graph", small_graph(seed=6)),
        ("kmeans", "geodata", small_points(seed=8)),
    ])
    def test_digest_stable_across_workers_and_jitter(self, algo, rel, data):
        plan = compile_algo(algo)
        digests = set()
        for workers in (1, 2, 4):
            for jitter in (0, 1):
                res = execute(plan, {rel: data}, workers=workers, seed=jitter)
                digests.add(metrics.result_digest(res.schema, res.rows))
        assert len(digests) == 1

    def test_rows_bitwise_identical_across_workers(self):
        edges = small_graph(seed=12)
        plan = compile_algo("pagerank")
        base = execute(plan, {"graph": edges}, workers=1).rows
        for workers in (2, 4):
            assert execute(plan, {"graph": edges}, workers=workers).rows == base


# ---------------------------------------------------------------------------
# Delta vs no-delta


class TestNoDeltaEquivalence:
    def test_pagerank_within_1e9(self):
        edges = small_graph(seed=13)
        d = dict(execute(compile_algo("pagerank"), {"graph": edges},
                         workers=3).rows)
        nd = dict(execute(compile_algo("pagerank", no_delta=True),
                          {"graph": edges}, workers=3).rows)
        assert set(d) == set(nd)
        assert max(abs(d[v] - nd[v]) for v in d) <= 1e-9

    def test_sssp_exact(self):
        edges = small_graph(seed=14)
        d = execute(compile_algo("sssp"), {"graph": edges}, workers=3)
        nd = execute(compile_algo("sssp", no_delta=True), {"graph": edges},
                     workers=3)
        assert sorted(d.rows) == sorted(nd.rows)

    def test_kmeans_result_file_equal(self):
        pts = small_points(seed=15)
        d = execute(compile_algo("kmeans"), {"geodata": pts}, workers=3)
        nd = execute(compile_algo("kmeans", no_delta=True), {"geodata": pts},
                     workers=3)
        assert (metrics.result_lines(d.schema, d.rows)
                == metrics.result_lines(nd.schema, nd.rows))

    def test_delta_processes_fewer_tuples(self):
        edges = small_graph(seed=16, n=60, m=200)
        plan_d = compile_algo("pagerank", theta=1e-7)
        plan_nd = compile_algo("pagerank", no_delta=True, theta=1e-7)
        d = execute(plan_d, {"graph": edges}, workers=2)
        nd = execute(plan_nd, {"graph": edges}, workers=2)
        assert (metrics.totals(d.metrics_rows)["processed"]
                < metrics.totals(nd.metrics_rows)["processed"])


# ---------------------------------------------------------------------------
# Transports


class TestTcpTransport:
    def test_sssp_over_sockets_matches_inproc(self):
        edges = small_graph(seed=17)
        plan = compile_algo("sssp")
        inproc = execute(plan, {"graph": edges}, workers=2)
        tcp = execute(plan, {"graph": edges}, workers=2, transport="tcp",
                      timeout=60.0)
        assert tcp.rows == inproc.rows
        assert tcp.strata == inproc.strata

    def test_nonrecursive_over_sockets(self):
        cat = Catalog({"t": core.Schema([("k", core.INT64),
                                         ("v", core.FLOAT64)])})
        plan = compile_program("SELECT k, sum(v) FROM t GROUP BY k", cat)
        rows = [(i % 5, float(i)) for i in range(40)]
        res = execute(plan, {"t": rows}, workers=3, transport="tcp",
                      timeout=60.0)
        want = sorted((k, float(sum(range(k, 40, 5)))) for k in range(5))
        assert sorted(res.rows) == want


# ---------------------------------------------------------------------------
# Non-recursive queries against naive evaluation


class TestNonRecursive:
    CAT = Catalog({
        "orders": core.Schema([("okey", core.INT64), ("cust", core.INT64)]),
        "items": core.Schema([("okey", core.INT64), ("qty", core.INT64),
                              ("price", core.FLOAT64)]),
    })

    @staticmethod
    def naive(orders, items):
        groups = {}
        for okey, cust in orders:
            for ikey, qty, price in items:
                if ikey == okey:
                    groups.setdefault(cust, []).append((qty, price))
        return sorted(
            (cust, float(sum(p for _, p in rows)), len(rows),
             min(q for q, _ in rows))
            for cust, rows in groups.items())

    def test_join_aggregate_random_instances(self):
        rng = random.Random(20)
        q = ("SELECT cust, sum(price), count(*), min(qty) "
             "FROM orders, items WHERE orders.okey = items.okey "
             "GROUP BY cust")
        plan = compile_program(q, self.CAT)
        for trial in range(25):
            orders = list({(rng.randrange(12), rng.randrange(4))
                           for _ in range(rng.randint(1, 15))})
            items = list({(rng.randrange(12), rng.randrange(1, 9),
                           float(rng.randint(1, 50)) / 2)
                          for _ in range(rng.randint(1, 25))})
            res = execute(plan, {"orders": orders, "items": items},
                          workers=rng.choice((1, 2, 3)))
            assert sorted(res.rows) == self.naive(orders, items), trial

    def test_select_only(self):
        cat = Catalog({"t": core.Schema([("a", core.INT64),
                                         ("b", core.INT64)])})
        plan = compile_program("SELECT a, b FROM t WHERE a > 3", cat)
        rows = [(i, i * i) for i in range(8)]
        res = execute(plan, {"t": rows}, workers=2)
        assert sorted(res.rows) == [(i, i * i) for i in range(4, 8)]


# ---------------------------------------------------------------------------
# Metrics and placement


class TestMetrics:
    def test_stratum_rows_shape(self):
        edges = small_graph(seed=21)
        res = execute(compile_algo("sssp"), {"graph": edges}, workers=2)
        rows = res.metrics_rows
        assert [r["stratum"] for r in rows] == list(range(len(rows)))
        assert rows[0]["processed"] == 0  # nothing released before stratum 0
        assert rows[-1]["admitted"] == 0  # termination stratum
        assert all(r["bytes"] >= 0 and r["ms"] >= 0 for r in rows)
        assert res.bytes_total >= sum(r["bytes"] for r in rows)

    def test_admitted_reaches_zero_for_delta_pagerank(self):
        edges = small_graph(seed=22)
        res = execute(compile_algo("pagerank", theta=1e-6), {"graph": edges},
                      workers=2)
        assert res.metrics_rows[-1]["admitted"] == 0

    def test_metrics_csv_header(self):
        assert metrics.metrics_lines([])[0] == "stratum,admitted,processed,bytes,ms"

    def test_bandwidth_formula(self):
        edges = small_graph(seed=23)
        res = execute(compile_algo("sssp"), {"graph": edges}, workers=2)
        bw = metrics.report_bandwidth(res)
        assert bw == res.bytes_total / (2 * res.duration_s)

    def test_max_strata_warns_and_stops(self):
        edges = small_graph(seed=24)
        res = execute(compile_algo("pagerank"), {"graph": edges}, workers=2,
                      max_strata=3)
        assert res.strata == 3
        assert any("ceiling" in w for w in res.warnings)


class TestPlacement:
    def test_rows_replicated_to_placement(self):
        edges = [(0, 1), (1, 2), (2, 0), (5, 6)]
        plan = compile_algo("sssp")
        snap = PartitionSnapshot(range(4), replication=3)
        stores = partition_stores(plan, {"graph": edges}, snap)
        schema = algorithms.GRAPH_SCHEMA
        for row in edges:
            kb = key_bytes(schema, (0,), row)
            holders = [w for w, store in stores.items()
                       if schema.canon(row) in store.get("graph", {})]
            assert sorted(holders) == sorted(snap.placement(kb))

    def test_missing_relation_aborts(self):
        with pytest.raises(QueryAbort, match="graph"):
            execute(compile_algo("sssp"), {}, workers=2)
