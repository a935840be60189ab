"""Synthetic workload generation and flat-file ingestion.

Graphs are directed edge lists in TSV (``src<TAB>dst``, ``#`` comments);
point sets are CSV (``id,lng,lat``).  Generators are pure functions of
their arguments — the same call writes the same bytes every run — and
check the degree distribution they produced against the requested family
before returning.
"""

from __future__ import annotations

import logging
import math
import random
from collections import Counter

from deltaflow.errors import QueryAbort

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Generators


def synth_graph(vertices, edges, distribution="uniform", alpha=2.2, seed=0,
                connected=True, path=None):
    """Deterministic directed multigraph collapsed to a simple edge list.

    ``uniform`` draws both endpoints uniformly; ``power-law`` draws source
    out-degrees from a discrete Pareto tail with exponent ``alpha`` and
    scatters destinations uniformly.  With ``connected`` (the default) a
    Hamiltonian cycle over all vertex ids is added first, so every vertex
    has in- and out-degree at least one and the graph is strongly
    connected.  Returns the sorted edge list; also writes it to ``path``
    when given.
    """
    vertices = int(vertices)
    edges = int(edges)
    if vertices < 1:
        raise QueryAbort("synth_graph needs at least one vertex")
    if connected and edges < vertices:
        raise QueryAbort(
            f"{edges} edges cannot close a cycle over {vertices} vertices")
    if distribution not in ("uniform", "power-law"):
        raise QueryAbort(f"unknown degree distribution {distribution!r}")

    rng = random.Random(seed)
    got = set()
    if connected:
        got.update((i, (i + 1) % vertices) for i in range(vertices))

    if distribution == "uniform":
        def pick_src():
            return rng.randrange(vertices)
    else:
        # One Pareto weight per vertex; sources are then drawn from the
        # induced categorical distribution, giving a heavy out-degree tail.
        weights = [(1.0 - rng.random()) ** (-1.0 / (alpha - 1.0))
                   for _ in range(vertices)]
        cum = []
        total = 0.0
        for w in weights:
            total += w
            cum.append(total)
        import bisect

        def pick_src():
            return bisect.bisect_left(cum, rng.random() * total)

    attempts = 0
    limit = 50 * edges + 1000
    while len(got) < edges and attempts < limit:
        attempts += 1
        u = pick_src()
        v = rng.randrange(vertices)
        if u != v:
            got.add((u, v))
    if len(got) < edges:
        raise QueryAbort(
            f"could not place {edges} distinct edges over {vertices} "
            "vertices (parameters infeasible)")

    out = sorted(got)
    _check_degrees(out, distribution, vertices)
    if path is not None:
        write_edges(path, out)
    return out


def _check_degrees(edge_list, distribution, vertices):
    """Sanity-check the generated out-degree distribution against the
    requested family; a bad fit is loudly reported, not fatal, because
    small samples are legitimately noisy."""
    degrees = Counter(u for u, _ in edge_list)
    counts = sorted(degrees.values())
    n = len(counts)
    if n < 10:
        return
    mean = sum(counts) / n
    if distribution == "power-law":
        if counts[-1] < 3.0 * mean:
            log.warning(
                "power-law generation produced a thin tail: max degree "
                "%d vs mean %.1f", counts[-1], mean)
        return
    # Uniform sources: out-degrees are approximately Poisson(mean).
    # Kolmogorov-Smirnov distance against that reference.
    d_stat = 0.0
    cdf = 0.0
    term = math.exp(-mean)
    k = 0
    for i, c in enumerate(counts):
        while k <= c:
            cdf += term
            term *= mean / (k + 1)
            k += 1
        emp = (i + 1) / n
        d_stat = max(d_stat, abs(emp - cdf))
    if d_stat > 0.2:
        log.warning(
            "uniform generation deviates from Poisson degrees "
            "(KS distance %.3f)", d_stat)


def synth_points(count, clusters=4, spread=0.05, seed=0, path=None):
    """Deterministic 2-D point set: ``clusters`` Gaussian blobs with the
    given relative spread, centers drawn uniformly in [0, 1)^2.  Returns
    (id, lng, lat) rows; also writes them to ``path`` when given."""
    count = int(count)
    clusters = int(clusters)
    if count < 1 or clusters < 1:
        raise QueryAbort("synth_points needs positive count and clusters")
    rng = random.Random(seed)
    centers = [(rng.random(), rng.random()) for _ in range(clusters)]
    pts = []
    for i in range(count):
        cx, cy = centers[i % clusters]
        pts.append((i, rng.gauss(cx, spread), rng.gauss(cy, spread)))
    if path is not None:
        write_points(path, pts)
    return pts


# ---------------------------------------------------------------------------
# Flat-file I/O


def load_edges(path):
    """Directed edges from TSV ``src<TAB>dst``; ``#`` starts a comment and
    blank lines are skipped.  Duplicate edges collapse.  Any malformed or
    negative-id line aborts with its line number."""
    edges = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise QueryAbort(
                    f"{path}:{lineno}: expected 'src<TAB>dst', got {raw!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise QueryAbort(
                    f"{path}:{lineno}: non-integer vertex id in {raw!r}"
                ) from None
            if u < 0 or v < 0:
                raise QueryAbort(
                    f"{path}:{lineno}: negative vertex id in {raw!r}")
            edges.add((u, v))
    if not edges:
        log.warning("%s: empty edge relation", path)
    out = sorted(edges)
    log.info("%s: %d edges over %d vertices", path, len(out),
             len({x for e in out for x in e}))
    return out


def load_points(path):
    """Points from CSV ``id,lng,lat``; ``#`` comments, blank lines, and one
    literal header line are allowed.  Malformed lines abort with their
    line number."""
    pts = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.replace(" ", "") == "id,lng,lat":
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise QueryAbort(
                    f"{path}:{lineno}: expected 'id,lng,lat', got {raw!r}")
            try:
                pid = int(parts[0])
                lng = float(parts[1])
                lat = float(parts[2])
            except ValueError:
                raise QueryAbort(
                    f"{path}:{lineno}: malformed point row {raw!r}") from None
            if pid < 0:
                raise QueryAbort(f"{path}:{lineno}: negative point id")
            if pid in seen:
                raise QueryAbort(f"{path}:{lineno}: duplicate point id {pid}")
            seen.add(pid)
            if not (math.isfinite(lng) and math.isfinite(lat)):
                raise QueryAbort(
                    f"{path}:{lineno}: non-finite coordinate in {raw!r}")
            pts.append((pid, lng, lat))
    if not pts:
        log.warning("%s: empty point relation", path)
    return pts


def write_edges(path, edge_list):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# src\tdst\n")
        for u, v in edge_list:
            fh.write(f"{u}\t{v}\n")


def write_points(path, pts):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id,lng,lat\n")
        for pid, x, y in pts:
            fh.write(f"{pid},{x!r},{y!r}\n")
