"""Core model: schemas, deltas, keyed state, canonical byte identity."""

import math
import random

import pytest

from deltaflow import core
from deltaflow.errors import MalformedDeltaError, SchemaError
from helpers import random_delta, random_row, random_schema

AB = core.Schema([("k", core.INT64), ("v", core.STRING)])


def rel(key=()):
    return core.KeyedRelation(AB, key)


class TestApplyDelta:
    def test_insert_into_empty(self):
        r = rel()
        s = r.apply(core.insert((1, "a")))
        assert s == core.ChangeSummary(1, 0, 0)
        assert list(r) == [(1, "a")]

    def test_duplicate_insert_is_noop(self):
        r = rel()
        r.apply(core.insert((1, "a")))
        s = r.apply(core.insert((1, "a")))
        assert s == core.ChangeSummary(0, 0, 0)
        assert len(r) == 1

    def test_delete_if_exists(self):
        r = rel()
        s = r.apply(core.delete((1, "a")))
        assert s == core.ChangeSummary(0, 0, 0)
        r.apply(core.insert((1, "a")))
        s = r.apply(core.delete((1, "a")))
        assert s == core.ChangeSummary(0, 1, 0)
        assert len(r) == 0

    def test_replace_swaps_tuples(self):
        r = rel()
        r.apply(core.insert((1, "a")))
        s = r.apply(core.replace((1, "b"), (1, "a")))
        assert s == core.ChangeSummary(0, 0, 1)
        assert list(r) == [(1, "b")]

    def test_replace_of_absent_tuple_upserts(self):
        r = rel()
        s = r.apply(core.replace((1, "b"), (1, "a")))
        assert s == core.ChangeSummary(1, 0, 0)
        assert list(r) == [(1, "b")]

    def test_replace_without_old_row_rejected(self):
        r = rel()
        with pytest.raises(MalformedDeltaError):
            r.apply(core.Delta(core.REPLACE, (1, "a"), None))

    def test_custom_has_no_default_fold(self):
        r = rel()
        with pytest.raises(MalformedDeltaError):
            r.apply(core.custom((1, "a"), "adj", (1,)))

    def test_arity_mismatch_rejected(self):
        r = rel()
        with pytest.raises(SchemaError):
            r.apply(core.insert((1,)))

    def test_type_mismatch_rejected(self):
        r = rel()
        with pytest.raises(SchemaError):
            r.apply(core.insert((1.5, "a")))

    def test_replay_matches_naive_set_oracle(self):
        """Folding any Insert/Delete sequence equals naive set replay."""
        rng = random.Random(101)
        for _ in range(40):
            schema = random_schema(rng)
            r = core.KeyedRelation(schema)
            oracle = {}
            for _ in range(rng.randint(0, 1000)):
                d = random_delta(rng, schema, kinds=(core.INSERT, core.DELETE))
                r.apply(d)
                c = schema.canon(d.row)
                if d.kind == core.INSERT:
                    oracle[c] = d.row
                else:
                    oracle.pop(c, None)
            assert r.rows == oracle


class TestBitwiseIdentity:
    FS = core.Schema([("x", core.FLOAT64)])

    def test_negative_zero_is_distinct(self):
        r = core.KeyedRelation(self.FS)
        r.apply(core.insert((0.0,)))
        r.apply(core.insert((-0.0,)))
        assert len(r) == 2
        r.apply(core.delete((-0.0,)))
        assert list(r) == [(0.0,)]

    def test_nan_is_self_identical(self):
        r = core.KeyedRelation(self.FS)
        r.apply(core.insert((math.nan,)))
        assert r.apply(core.insert((math.nan,))) == core.ChangeSummary(0, 0, 0)
        assert r.apply(core.delete((math.nan,))).deleted == 1


class TestKeyOf:
    def test_single_attribute(self):
        assert core.key_of((7, 3.5), (0,)) == (7,)

    def test_unit_key(self):
        assert core.key_of((7, 3.5), ()) == ()

    def test_multi_attribute(self):
        assert core.key_of((7, 3.5, "a"), (2, 0)) == ("a", 7)


class TestKeyedIndex:
    def test_bucket_lookup(self):
        r = rel(key=(0,))
        r.apply(core.insert((1, "a")))
        r.apply(core.insert((1, "b")))
        r.apply(core.insert((2, "c")))
        assert sorted(r.by_key((1,))) == [(1, "a"), (1, "b")]
        assert r.by_key((3,)) == []
        r.apply(core.delete((1, "a")))
        r.apply(core.delete((1, "b")))
        assert (1,) not in r.keys()

    def test_sorted_rows_are_canonical(self):
        rng = random.Random(7)
        r = core.KeyedRelation(AB)
        rows = {random_row(rng, AB) for _ in range(50)}
        for row in rows:
            r.apply(core.insert(row))
        once = r.sorted_rows()
        assert sorted(once, key=AB.canon) == once
        assert set(once) == set(r)


class TestSchema:
    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError):
            core.Schema([("a", core.INT64), ("a", core.STRING)])

    def test_unknown_type_rejected(self):
        with pytest.raises(SchemaError):
            core.Schema([("a", "varchar")])

    def test_int64_range_enforced(self):
        s = core.Schema([("a", core.INT64)])
        with pytest.raises(SchemaError):
            s.canon((1 << 63,))
        s.canon(((1 << 63) - 1,))

    def test_bool_is_not_int(self):
        s = core.Schema([("a", core.INT64)])
        with pytest.raises(SchemaError):
            s.validate((True,))
