"""Consistent-hash partitioning of keys over workers.

Every worker contributes a fixed number of virtual nodes whose positions are
a seeded 64-bit hash of (worker id, vnode index); a key maps to the worker
owning the next vnode clockwise from the key's own hash, and its replicas are
the next distinct workers after that.  The layout is a pure function of the
worker set, so any process that knows the membership derives identical
placement without coordination, and removing a worker only reassigns the
arcs that worker owned.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from bisect import bisect_right

log = logging.getLogger(__name__)

VNODES_PER_WORKER = 64

# Pinned hash seed: placement must be identical across processes and runs.
_HASH_KEY = bytes.fromhex("d1b54a32d192ed03a9e3779b97f4a7c1")

# Degraded layouts are worth one warning per shape, not one per snapshot
# object (every worker rebuilds the snapshot from JSON).
_warned_degraded = set()


def hash64(data: bytes) -> int:
    """Seeded 64-bit position on the ring for arbitrary canonical bytes."""
    h = hashlib.blake2b(data, digest_size=8, key=_HASH_KEY)
    return int.from_bytes(h.digest(), "little")


class PartitionSnapshot:
    """Immutable placement: a sorted vnode ring plus the replication factor.

    ``epoch`` increments every time membership changes so frames produced
    under an older layout can be recognised and dropped.
    """

    def __init__(self, workers, replication=3, vnodes=VNODES_PER_WORKER,
                 epoch=0):
        if not workers:
            raise ValueError("a snapshot needs at least one worker")
        self.workers = tuple(sorted(workers))
        self.replication = int(replication)
        self.vnodes = int(vnodes)
        self.epoch = int(epoch)
        points = []
        for w in self.workers:
            for i in range(self.vnodes):
                points.append((hash64(struct.pack("<qq", w, i)), w))
        points.sort()
        self._points = [p for p, _ in points]
        self._owners = [w for _, w in points]
        if len(self.workers) < self.replication:
            shape = (self.workers, self.replication)
            if shape not in _warned_degraded:
                _warned_degraded.add(shape)
                log.warning(
                    "degraded placement: %d workers cannot hold %d distinct "
                    "replicas", len(self.workers), self.replication)

    # -- lookups ----------------------------------------------------------

    def placement(self, key_bytes: bytes) -> tuple:
        """(owner, replica, ...) for a key: the owner is the worker of the
        next vnode clockwise, replicas the next distinct workers, at most
        ``replication`` in total."""
        idx = bisect_right(self._points, hash64(key_bytes)) % len(self._points)
        return self._walk(idx)

    def _walk(self, idx: int) -> tuple:
        chosen = []
        n = len(self._points)
        for step in range(n):
            w = self._owners[(idx + step) % n]
            if w not in chosen:
                chosen.append(w)
                if len(chosen) == self.replication:
                    break
        return tuple(chosen)

    def owner(self, key_bytes: bytes) -> int:
        return self.placement(key_bytes)[0]

    def arcs(self):
        """Iterate (placement tuple) per ring arc — one entry per vnode."""
        for idx in range(len(self._points)):
            yield self._walk(idx)

    # -- membership changes ------------------------------------------------

    def without(self, failed) -> "PartitionSnapshot":
        survivors = [w for w in self.workers if w not in set(failed)]
        return PartitionSnapshot(survivors, self.replication, self.vnodes,
                                 self.epoch + 1)

    # -- serialization ------------------------------------------------------

    def to_json(self):
        return {"workers": list(self.workers),
                "replication": self.replication,
                "vnodes": self.vnodes,
                "epoch": self.epoch}

    @staticmethod
    def from_json(obj) -> "PartitionSnapshot":
        return PartitionSnapshot(obj["workers"], obj["replication"],
                                 obj["vnodes"], obj["epoch"])

    def __eq__(self, other):
        return (isinstance(other, PartitionSnapshot)
                and self.to_json() == other.to_json())

    def __repr__(self):
        return (f"PartitionSnapshot(workers={self.workers}, "
                f"replication={self.replication}, epoch={self.epoch})")
