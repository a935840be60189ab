"""Per-worker durable state for incremental recovery.

A checkpoint is the per-key fold of one stratum's admissions into the
fixpoint's mutable relation.  Each worker keeps its own strata plus the
copies replicated to it by ring neighbours; entries are keyed by
(stratum, canonical key bytes), so re-delivery after a second failure
overwrites instead of duplicating — folding is idempotent per key.
"""

from __future__ import annotations


class CheckpointStore:
    """In-memory map: stratum -> {canonical key bytes -> last admitted
    delta for that key}.  Origin does not matter for folding (any replica's
    copy of a (stratum, key) slot holds the same delta), so copies from all
    origins merge into one table."""

    def __init__(self):
        self._strata = {}

    def put(self, stratum: int, entries):
        """entries: iterable of (key_bytes, delta)."""
        table = self._strata.setdefault(stratum, {})
        for kb, delta in entries:
            table[kb] = delta

    def stratum_deltas(self, stratum: int):
        """The stratum's fold, ordered by canonical key bytes."""
        table = self._strata.get(stratum, {})
        return [table[kb] for kb in sorted(table)]

    def stratum_items(self, stratum: int):
        table = self._strata.get(stratum, {})
        return [(kb, table[kb]) for kb in sorted(table)]

    def strata(self):
        return sorted(self._strata)

    def truncate_after(self, stratum: int):
        """Drop strata beyond ``stratum`` — used when a recovery rewinds the
        query so stale slots can never leak into a later fold."""
        for s in [s for s in self._strata if s > stratum]:
            del self._strata[s]

    def clear(self):
        self._strata.clear()

    def __len__(self):
        return sum(len(t) for t in self._strata.values())
