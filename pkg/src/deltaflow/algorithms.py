"""Built-in delta algorithms: PageRank, single-source shortest path, and
K-means, each packaged as registered UDAs plus a shipped query text.

The handlers speak the annotation protocol directly: they receive argument
rows extracted from the drive relation's deltas, keep their own state in the
operator-owned storage dict, and emit deltas that the downstream grouping
operators fold.
"""

from __future__ import annotations

import hashlib
import math
import struct
from importlib import resources

from deltaflow import core, uda
from deltaflow.errors import QueryAbort
from deltaflow.rql.typecheck import Catalog

GRAPH_SCHEMA = core.Schema([("srcId", core.INT64), ("dst", core.INT64)])
POINTS_SCHEMA = core.Schema([("id", core.INT64), ("lng", core.FLOAT64),
                             ("lat", core.FLOAT64)])

ALGORITHMS = ("pagerank", "sssp", "kmeans")

_QUERY_FILES = {"pagerank": "pagerank.rql", "sssp": "sssp.rql",
                "kmeans": "kmeans.rql"}


def query_text(algorithm: str) -> str:
    """The shipped query text driving the named algorithm."""
    try:
        fname = _QUERY_FILES[algorithm]
    except KeyError:
        raise QueryAbort(f"unknown algorithm {algorithm!r}; "
                         f"choose from {ALGORITHMS}") from None
    return resources.files("deltaflow.queries").joinpath(fname).read_text()


def base_catalog() -> Catalog:
    """Catalog holding the relations the shipped queries read."""
    return Catalog({"graph": GRAPH_SCHEMA, "geodata": POINTS_SCHEMA})


# ---------------------------------------------------------------------------
# PageRank


class PageRankHandler(uda.JoinHandler):
    """Per-vertex rank differences scattered along out-edges.

    Storage maps vertex -> last rank *propagated*.  An arriving rank whose
    difference from the stored value exceeds ``theta`` is stored and emits
    (neighbor, diff / out-degree) for every out-edge; a smaller difference
    leaves the stored value untouched, so sub-threshold changes accumulate
    against it instead of being silently absorbed — at any point, at most
    ``theta`` of each vertex's rank movement is unpropagated.  Vertices
    without out-edges contribute nothing.
    """

    def update(self, storage, opposite, d, ctx):
        if d.kind == core.DELETE:
            raise QueryAbort("PRAgg cannot retract ranks")
        vertex, rank = d.row
        old = storage.get(vertex, 0.0)
        diff = rank - old
        if abs(diff) <= ctx.params.get("theta", 0.01):
            return
        storage[vertex] = rank
        edges = opposite.rows_for((vertex,))
        if not edges:
            return
        share = diff / len(edges)
        for edge in edges:
            ctx.emit(core.insert((edge[1], share)))


# ---------------------------------------------------------------------------
# Shortest path


class ShortestPathHandler(uda.JoinHandler):
    """Distance relaxation: storage maps vertex -> best distance stored so
    far (missing means unreached).  Only strict improvements are stored and
    propagated as (neighbor, dist + 1).

    Every stored improvement is also emitted as a candidate for the vertex
    itself.  Without it the selection state downstream never learns the
    settled distance of a vertex whose value entered the mutable relation
    directly (the start vertex), so a longer path closing a cycle back into
    it would win the group and corrupt the settled value."""

    def update(self, storage, opposite, d, ctx):
        if d.kind == core.DELETE:
            raise QueryAbort("SPagg cannot retract distances")
        vertex, dist = d.row
        best = storage.get(vertex)
        if best is not None and dist >= best:
            return
        storage[vertex] = dist
        ctx.emit(core.insert((vertex, dist)))
        for edge in opposite.rows_for((vertex,)):
            ctx.emit(core.insert((edge[1], dist + 1)))


# ---------------------------------------------------------------------------
# K-means


class KMeansHandler(uda.JoinHandler):
    """Centroid-driven reassignment.  Arriving centroid rows are buffered;
    at the stratum barrier every stored point is compared against the
    current centroids and, when a strictly closer one exists, switches:
    its coordinates are inserted into the new centroid's group and deleted
    from the old one.  Ties keep the current assignment."""

    def update(self, storage, opposite, d, ctx):
        cid, cx, cy = d.row
        if not (math.isfinite(cx) and math.isfinite(cy)):
            raise QueryAbort(f"centroid {cid} has non-finite coordinates")
        centroids = storage.setdefault("centroids", {})
        if d.kind == core.DELETE:
            centroids.pop(cid, None)
        else:
            centroids[cid] = (cx, cy)
        storage["dirty"] = True

    def flush(self, storage, opposite, ctx):
        if not storage.pop("dirty", False):
            return
        centroids = storage.get("centroids", {})
        if not centroids:
            return
        assign = storage.setdefault("assign", {})
        ordered = sorted(centroids.items())
        for pid, x, y in opposite.sorted_rows():
            current = assign.get(pid)
            best_cid, best_d = None, math.inf
            for cid, (cx, cy) in ordered:
                d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy)
                if d2 < best_d:
                    best_cid, best_d = cid, d2
            if current is not None:
                cx, cy = centroids[current]
                cur_d = (x - cx) * (x - cx) + (y - cy) * (y - cy)
                if best_d >= cur_d:  # switch only when strictly closer
                    continue
            assign[pid] = best_cid
            ctx.emit(core.insert((best_cid, x, y)))
            if current is not None:
                ctx.emit(core.delete((current, x, y)))


class KmSampleAggregate(uda.Aggregate):
    """Seeded, order-independent choice of k distinct coordinate pairs.
    Candidates are ranked by a keyed hash of their canonical float encoding,
    so every arrival order and partitioning yields the same sample."""

    def __init__(self, k, seed):
        self.k = int(k)
        self.seed = int(seed)
        self.name = "KMSampleAgg"
        self.out_fields = (("cid", core.INT64), ("x", core.FLOAT64),
                           ("y", core.FLOAT64))

    def init(self):
        return {}

    def update(self, state, d, values, old_values):
        w = uda.delta_weight(d)
        if d.kind == core.REPLACE and old_values is not None:
            self._bump(state, tuple(old_values), -1)
            self._bump(state, tuple(values), 1)
            return state
        self._bump(state, tuple(values), w)
        return state

    @staticmethod
    def _bump(state, coords, w):
        n = state.get(coords, 0) + w
        if n == 0:
            state.pop(coords, None)
        else:
            state[coords] = n

    def _rank(self, coords):
        payload = struct.pack("<dd", *coords)
        key = self.seed.to_bytes(8, "little", signed=True)
        return hashlib.blake2b(payload, digest_size=8, key=key).digest()

    def result(self, state):
        live = [coords for coords, n in state.items() if n > 0]
        if not live:
            return None
        if self.k > len(live):
            raise QueryAbort(
                f"cannot sample {self.k} centroids from {len(live)} "
                "distinct points")
        chosen = sorted(live, key=lambda c: (self._rank(c), c))[:self.k]
        return [(cid, x, y) for cid, (x, y) in enumerate(chosen)]


# ---------------------------------------------------------------------------
# Registration


def _register():
    reg = uda.registry
    if reg.has("PRAgg"):
        return
    reg.register(uda.UdaDefinition(
        name="PRAgg",
        in_types=(core.INT64, core.FLOAT64),
        out_fields=(("nbr", core.INT64), ("prDiff", core.FLOAT64)),
        make_join_handler=lambda **params: PageRankHandler(),
        params={"theta": 0.01},
    ))
    reg.register(uda.UdaDefinition(
        name="SPagg",
        in_types=(core.INT64, None),
        out_fields=(("nbr", core.INT64), ("distOut", None)),
        make_join_handler=lambda **params: ShortestPathHandler(),
    ))
    reg.register(uda.UdaDefinition(
        name="KMAgg",
        in_types=(core.INT64, core.FLOAT64, core.FLOAT64),
        out_fields=(("cid", core.INT64), ("xDiff", core.FLOAT64),
                    ("yDiff", core.FLOAT64)),
        make_join_handler=lambda **params: KMeansHandler(),
    ))
    reg.register(uda.UdaDefinition(
        name="KMSampleAgg",
        in_types=(core.FLOAT64, core.FLOAT64),
        out_fields=(("cid", core.INT64), ("x", core.FLOAT64),
                    ("y", core.FLOAT64)),
        make_aggregate=lambda lng_t=core.FLOAT64, lat_t=core.FLOAT64,
        k=8, seed=0: KmSampleAggregate(k, seed),
        params={"k": 8, "seed": 0},
    ))


_register()
