"""Independent reference implementations for checking engine output.

Everything here is written in the most direct textbook style possible —
plain dicts, queues, and loops, sharing no code with the engine — so that
agreement between the two is evidence of correctness rather than of a
common bug.
"""

import collections
import math


# ---------------------------------------------------------------------------
# Graphs


def vertices(edges):
    vs = set()
    for u, v in edges:
        vs.add(u)
        vs.add(v)
    return vs


def out_adjacency(edges):
    adj = collections.defaultdict(list)
    for u, v in edges:
        adj[u].append(v)
    return adj


# ---------------------------------------------------------------------------
# Breadth-first shortest path


def bfs_distances(edges, start):
    """Unit-weight shortest distances from ``start`` (unreachable omitted)."""
    adj = out_adjacency(edges)
    dist = {start: 0}
    queue = collections.deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist

def bfs_rows(edges, start):
    """(vertex, predecessor, distance) rows matching the engine's shortest
    path output.  The predecessor recorded for a vertex is the smallest id
    among the vertex itself and every neighbor one hop closer; the start
    vertex is its own predecessor."""
    dist = bfs_distances(edges, start)
    preds = {v: {v} for v in dist}
    for u, v in edges:
        if u in dist and v in dist and dist[u] + 1 == dist[v]:
            preds[v].add(u)
    return sorted((v, min(preds[v]), d) for v, d in dist.items())


# ---------------------------------------------------------------------------
# PageRank power iteration


def pagerank_power(edges, tol=1e-12, max_iter=100000):
    """Unnormalized PageRank: pr(v) = 0.15 + 0.85 * sum of pr(u)/outdeg(u)
    over in-edges u -> v, iterated from 1.0 until the largest per-vertex
    change drops below ``tol``.  Vertices without out-edges contribute no
    mass anywhere."""
    adj = out_adjacency(edges)
    pr = {v: 1.0 for v in vertices(edges)}
    for _ in range(max_iter):
        incoming = collections.defaultdict(float)
        for u, nbrs in adj.items():
            share = pr[u] / len(nbrs)
            for v in nbrs:
                incoming[v] += share
        nxt = {v: 0.15 + 0.85 * incoming[v] for v in pr}
        delta = max(abs(nxt[v] - pr[v]) for v in pr)
        pr = nxt
        if delta < tol:
            break
    return pr


def pagerank_residual(edges, ranks):
    """Largest self-consistency violation |pr(v) - (0.15 + 0.85 * in-mass)|
    of a claimed rank vector, measured against the claimed values
    themselves."""
    adj = out_adjacency(edges)
    incoming = collections.defaultdict(float)
    for u, nbrs in adj.items():
        share = ranks[u] / len(nbrs)
        for v in nbrs:
            incoming[v] += share
    return max(abs(ranks[v] - (0.15 + 0.85 * incoming[v])) for v in ranks)


# ---------------------------------------------------------------------------
# Lloyd's K-means


def lloyd_assign(points, centroids, assign=None):
    """Assign each (id, x, y) point to the centroid with the smallest
    squared distance.  Lower centroid ids win exact ties, and a point with
    an existing assignment keeps it unless another centroid is strictly
    closer."""
    assign = dict(assign or {})
    ordered = sorted(centroids.items())
    for pid, x, y in points:
        best_cid, best_d = None, math.inf
        for cid, (cx, cy) in ordered:
            d2 = (x - cx) ** 2 + (y - cy) ** 2
            if d2 < best_d:
                best_cid, best_d = cid, d2
        current = assign.get(pid)
        if current is not None:
            cx, cy = centroids[current]
            if best_d >= (x - cx) ** 2 + (y - cy) ** 2:
                continue
        assign[pid] = best_cid
    return assign


def lloyd_update(points, centroids, assign):
    """Move every centroid to the mean of its assigned points; a centroid
    with no points keeps its position."""
    sums = {cid: [0.0, 0.0, 0] for cid in centroids}
    by_id = {pid: (x, y) for pid, x, y in points}
    for pid, cid in assign.items():
        x, y = by_id[pid]
        acc = sums[cid]
        acc[0] += x
        acc[1] += y
        acc[2] += 1
    out = {}
    for cid, (sx, sy, n) in sums.items():
        out[cid] = (sx / n, sy / n) if n else centroids[cid]
    return out


def lloyd_trace(points, centroids0, max_iter=500):
    """Centroid positions after each full assign/update round, starting
    from the given initial centroids, until assignments stop changing."""
    centroids = dict(centroids0)
    assign = {}
    trace = []
    for _ in range(max_iter):
        nxt = lloyd_assign(points, centroids, assign)
        changed = nxt != assign
        assign = nxt
        centroids = lloyd_update(points, centroids, assign)
        trace.append(dict(centroids))
        if not changed:
            break
    return trace, assign
