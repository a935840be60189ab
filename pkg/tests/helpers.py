"""Shared generators for randomized tests.  Everything is driven by an
explicit seeded Random so failures reproduce exactly."""

import math
import random

from deltaflow import core

TYPES = (core.INT64, core.FLOAT64, core.STRING, core.BOOL)


def random_schema(rng, max_arity=5):
    arity = rng.randint(1, max_arity)
    return core.Schema([(f"c{i}", rng.choice(TYPES)) for i in range(arity)])


def random_value(rng, t):
    if t == core.INT64:
        # Bias toward small values but cover the full 64-bit range.
        if rng.random() < 0.2:
            return rng.randint(-(1 << 63), (1 << 63) - 1)
        return rng.randint(-100, 100)
    if t == core.FLOAT64:
        r = rng.random()
        if r < 0.05:
            return rng.choice([0.0, -0.0, math.inf, -math.inf, math.nan])
        if r < 0.5:
            return float(rng.randint(-50, 50))
        return rng.uniform(-1e12, 1e12)
    if t == core.STRING:
        n = rng.randint(0, 12)
        return "".join(rng.choice("abcxyz0189 émoji✓") for _ in range(n))
    return rng.random() < 0.5


def random_row(rng, schema):
    return tuple(random_value(rng, t) for t in schema.types)


def random_payload(rng):
    n = rng.randint(0, 3)
    args = []
    for _ in range(n):
        t = rng.choice(TYPES)
        args.append(random_value(rng, t))
    return core.Payload(rng.choice(["adj", "weight", "h"]), tuple(args))


def random_delta(rng, schema, kinds=(core.INSERT, core.DELETE, core.REPLACE, core.CUSTOM)):
    kind = rng.choice(kinds)
    row = random_row(rng, schema)
    if kind == core.REPLACE:
        return core.Delta(kind, row, random_row(rng, schema))
    if kind == core.CUSTOM:
        return core.Delta(kind, row, random_payload(rng))
    return core.Delta(kind, row)


def canon_eq(schema, a, b):
    """Bitwise row equality (NaN == NaN, -0.0 != 0.0)."""
    return schema.canon(a) == schema.canon(b)
