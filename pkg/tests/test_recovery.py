"""Failure injection and recovery: incremental takeover from checkpointed
strata, the restart baseline, repeated failures, and the fallback when the
replication budget is exhausted."""

import logging

import pytest

import oracles
from deltaflow import algorithms, core, datasets
from deltaflow.rql import compile_program
from deltaflow.runtime import execute
from deltaflow.runtime.recovery import CheckpointStore

logging.getLogger("deltaflow").setLevel(logging.ERROR)


def compile_algo(name, no_delta=False, **params):
    defaults = {"pagerank": {"theta": 1e-6}, "sssp": {"startNode": 0},
                "kmeans": {"k": 3, "seed": 5}}[name]
    defaults.update(params)
    return compile_program(algorithms.query_text(name),
                           algorithms.base_catalog(), params=defaults,
                           no_delta=no_delta)


def path_edges(n):
    return [(i, i + 1) for i in range(n - 1)]


class TestCheckpointStore:
    def test_put_overwrites_per_slot(self):
        st = CheckpointStore()
        d1 = core.insert((1, 2))
        d2 = core.insert((1, 3))
        st.put(0, [(b"k1", d1)])
        st.put(0, [(b"k1", d2)])
        assert st.stratum_deltas(0) == [d2]

    def test_items_sorted_by_key_bytes(self):
        st = CheckpointStore()
        st.put(1, [(b"zz", core.insert((1,))), (b"aa", core.insert((2,)))])
        assert [kb for kb, _ in st.stratum_items(1)] == [b"aa", b"zz"]

    def test_truncate_and_clear(self):
        st = CheckpointStore()
        for s in range(5):
            st.put(s, [(b"k", core.insert((s,)))])
        st.truncate_after(2)
        assert st.strata() == [0, 1, 2]
        st.clear()
        assert len(st) == 0


class TestIncrementalRecovery:
    def test_sssp_failure_sweep_results_identical(self):
        """A 20-stratum chain walk: killing a worker at every possible
        stratum must leave the answer bitwise identical and re-coordinate
        only the strata from the failure point."""
        edges = path_edges(19)
        plan = compile_algo("sssp")
        ref = execute(plan, {"graph": edges}, workers=3, seed=0)
        assert ref.strata == 20
        assert sorted(ref.rows) == oracles.bfs_rows(edges, 0)
        for stratum in range(1, 20):
            res = execute(plan, {"graph": edges}, workers=3, seed=0,
                          fail=[{"worker": 1, "stratum": stratum}])
            assert res.rows == ref.rows, f"stratum {stratum}"
            assert res.incremental_recoveries == 1
            assert res.failed_workers == [1]
            assert res.strata == ref.strata

    def test_incremental_never_worse_than_restart(self):
        edges = path_edges(19)
        plan = compile_algo("sssp")
        for stratum in range(1, 20):
            inc = execute(plan, {"graph": edges}, workers=3, seed=0,
                          fail=[{"worker": 1, "stratum": stratum}])
            rst = execute(plan, {"graph": edges}, workers=3, seed=0,
                          fail=[{"worker": 1, "stratum": stratum}],
                          recovery="restart")
            assert inc.rows == rst.rows
            assert inc.strata <= rst.strata, f"stratum {stratum}"

    def test_restart_reexecutes_lost_strata(self):
        edges = path_edges(19)
        plan = compile_algo("sssp")
        rst = execute(plan, {"graph": edges}, workers=3, seed=0,
                      fail=[{"worker": 1, "stratum": 8}], recovery="restart")
        # 8 coordinated strata are thrown away, then 20 run fresh.
        assert rst.strata == 28
        assert rst.restarts == 1 and rst.incremental_recoveries == 0

    @pytest.mark.parametrize("algo,rel,data,victim,stratum", [
        ("pagerank", "graph",
         datasets.synth_graph(50, 150, seed=4, connected=True), 2, 5),
        ("kmeans", "geodata",
         datasets.synth_points(45, clusters=3, seed=6), 0, 2),
    ])
    def test_float_algorithms_recover_bitwise(self, algo, rel, data, victim,
                                              stratum):
        plan = compile_algo(algo)
        ref = execute(plan, {rel: data}, workers=3, seed=0)
        res = execute(plan, {rel: data}, workers=3, seed=0,
                      fail=[{"worker": victim, "stratum": stratum}])
        assert res.rows == ref.rows

    def test_no_delta_mode_recovers(self):
        edges = path_edges(12)
        plan = compile_algo("sssp", no_delta=True)
        ref = execute(plan, {"graph": edges}, workers=3, seed=0)
        res = execute(plan, {"graph": edges}, workers=3, seed=0,
                      fail=[{"worker": 0, "stratum": 4}])
        assert res.rows == ref.rows
        assert res.incremental_recoveries == 1

    def test_two_sequential_failures(self):
        edges = path_edges(16)
        plan = compile_algo("sssp")
        ref = execute(plan, {"graph": edges}, workers=4, seed=0)
        res = execute(plan, {"graph": edges}, workers=4, seed=0,
                      fail=[{"worker": 1, "stratum": 4},
                            {"worker": 2, "stratum": 9}])
        assert res.rows == ref.rows
        assert res.incremental_recoveries == 2
        assert res.failed_workers == [1, 2]

    def test_failure_on_termination_stratum(self):
        edges = path_edges(10)
        plan = compile_algo("sssp")
        ref = execute(plan, {"graph": edges}, workers=3, seed=0)
        res = execute(plan, {"graph": edges}, workers=3, seed=0,
                      fail=[{"worker": 1, "stratum": ref.strata - 1}])
        assert res.rows == ref.rows

    def test_checkpoint_traffic_tracks_delta_volume(self):
        """Late SSSP strata move one frontier vertex; early ones move many.
        Checkpoint bytes ride the same curve, so per-stratum bytes must
        shrink from the widest stratum to the last."""
        edges = path_edges(19) + [(0, i) for i in range(2, 6)]
        res = execute(compile_algo("sssp"), {"graph": edges}, workers=3)
        rows = res.metrics_rows
        widest = max(rows[1:-1], key=lambda r: r["admitted"])
        last_work = rows[-2]
        assert widest["bytes"] > last_work["bytes"]


class TestFallback:
    def test_beyond_tolerance_restarts_with_warning(self):
        edges = path_edges(12)
        plan = compile_algo("sssp")
        res = execute(plan, {"graph": edges}, workers=4, replication=2,
                      seed=0, fail=[{"worker": 1, "stratum": 3},
                                    {"worker": 2, "stratum": 5}])
        assert res.incremental_recoveries == 1  # first failure tolerated
        assert res.restarts == 1                # second exceeds replication
        assert any("replication factor" in w for w in res.warnings)

    def test_restart_mode_never_recovers_incrementally(self):
        edges = path_edges(12)
        res = execute(compile_algo("sssp"), {"graph": edges}, workers=3,
                      seed=0, fail=[{"worker": 1, "stratum": 3}],
                      recovery="restart")
        assert res.incremental_recoveries == 0
        assert res.restarts == 1

    def test_injection_before_first_barrier_rejected(self):
        with pytest.raises(ValueError):
            execute(compile_algo("sssp"), {"graph": path_edges(5)},
                    workers=2, fail=[{"worker": 0, "stratum": 0}])
