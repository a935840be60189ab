"""Pure-Python implementations of the hot kernels.

Three things live here because they sit on the per-delta fast path and must
behave bit-for-bit identically in the compiled variant:

* value/row/delta encoding (also used as the canonical byte form for
  bitwise set membership and deterministic ordering),
* batch encode/decode for data frames,
* the seeded 64-bit key hash used for partition routing.

Deltas cross this boundary as plain ``(kind, row, aux)`` triples so the
kernels stay independent of the object model layered on top.
"""

import struct

IMPL = "python"

# Column type tags (one byte per column in a schema signature).
T_INT64 = 0
T_FLOAT64 = 1
T_STRING = 2
T_BOOL = 3

# Delta annotation tags.
K_INSERT = 0
K_DELETE = 1
K_REPLACE = 2
K_CUSTOM = 3

# Punctuation tags inside a batch header.
P_NONE = 0
P_END_OF_STRATUM = 1
P_END_OF_QUERY = 2

_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1

_pack_i64 = struct.Struct("<q").pack
_pack_f64 = struct.Struct("<d").pack
_pack_u32 = struct.Struct("<I").pack
_pack_u16 = struct.Struct("<H").pack
_unpack_i64 = struct.Struct("<q").unpack_from
_unpack_f64 = struct.Struct("<d").unpack_from
_unpack_u32 = struct.Struct("<I").unpack_from
_unpack_u16 = struct.Struct("<H").unpack_from


class KernelError(ValueError):
    """Raised for malformed values or undecodable bytes; the caller maps it
    onto the engine's error types."""


def _encode_value(tag, v, out):
    if tag == T_INT64:
        if v.__class__ is not int:
            raise KernelError(f"expected int64, got {type(v).__name__}: {v!r}")
        if not (_INT64_MIN <= v <= _INT64_MAX):
            raise KernelError(f"int64 out of range: {v!r}")
        out.append(_pack_i64(v))
    elif tag == T_FLOAT64:
        if v.__class__ is not float:
            raise KernelError(f"expected float64, got {type(v).__name__}: {v!r}")
        out.append(_pack_f64(v))
    elif tag == T_STRING:
        if v.__class__ is not str:
            raise KernelError(f"expected string, got {type(v).__name__}: {v!r}")
        b = v.encode("utf-8")
        out.append(_pack_u32(len(b)))
        out.append(b)
    elif tag == T_BOOL:
        if v.__class__ is not bool:
            raise KernelError(f"expected bool, got {type(v).__name__}: {v!r}")
        out.append(b"\x01" if v else b"\x00")
    else:
        raise KernelError(f"unknown type tag {tag}")


def _decode_value(tag, buf, off):
    if tag == T_INT64:
        if off + 8 > len(buf):
            raise KernelError("truncated int64")
        return _unpack_i64(buf, off)[0], off + 8
    if tag == T_FLOAT64:
        if off + 8 > len(buf):
            raise KernelError("truncated float64")
        return _unpack_f64(buf, off)[0], off + 8
    if tag == T_STRING:
        if off + 4 > len(buf):
            raise KernelError("truncated string length")
        n = _unpack_u32(buf, off)[0]
        off += 4
        if off + n > len(buf):
            raise KernelError("truncated string body")
        return buf[off:off + n].decode("utf-8"), off + n
    if tag == T_BOOL:
        if off + 1 > len(buf):
            raise KernelError("truncated bool")
        b = buf[off]
        if b > 1:
            raise KernelError(f"bad bool byte {b}")
        return b == 1, off + 1
    raise KernelError(f"unknown type tag {tag}")


# Payload arguments are self-describing (tag byte per value) because custom
# payloads are typed by the emitting handler, not by the edge schema.
_PY_TO_TAG = {int: T_INT64, float: T_FLOAT64, str: T_STRING, bool: T_BOOL}


def _encode_row(tags, row, out):
    if len(row) != len(tags):
        raise KernelError(f"row arity {len(row)} != schema arity {len(tags)}")
    for i in range(len(tags)):
        _encode_value(tags[i], row[i], out)


def _decode_row(tags, buf, off):
    vals = []
    for tag in tags:
        v, off = _decode_value(tag, buf, off)
        vals.append(v)
    return tuple(vals), off


def encode_row(tags, row):
    """Canonical byte form of a tuple under a schema signature.

    Bitwise-equal rows (floats compared by bit pattern) produce equal bytes,
    so these bytes double as set-membership keys and as deterministic sort
    keys.
    """
    out = []
    _encode_row(tags, row, out)
    return b"".join(out)


def _encode_delta(tags, kind, row, aux, out):
    out.append(bytes((kind,)))
    _encode_row(tags, row, out)
    if kind == K_REPLACE:
        if aux is None:
            raise KernelError("replace delta without replaced row")
        _encode_row(tags, aux, out)
    elif kind == K_CUSTOM:
        if aux is None:
            raise KernelError("custom delta without payload")
        handler, args = aux
        hb = handler.encode("utf-8")
        out.append(_pack_u16(len(hb)))
        out.append(hb)
        if len(args) > 255:
            raise KernelError("payload too wide")
        out.append(bytes((len(args),)))
        for a in args:
            t = _PY_TO_TAG.get(a.__class__)
            if t is None:
                raise KernelError(f"unsupported payload value {a!r}")
            out.append(bytes((t,)))
            _encode_value(t, a, out)
    elif aux is not None:
        raise KernelError(f"delta kind {kind} takes no auxiliary data")


def encode_delta(tags, kind, row, aux):
    """Canonical byte form of one delta (annotation tag, row, auxiliary)."""
    if not 0 <= kind <= 3:
        raise KernelError(f"unknown delta kind {kind}")
    out = []
    _encode_delta(tags, kind, row, aux, out)
    return b"".join(out)


def _decode_delta(tags, buf, off):
    if off >= len(buf):
        raise KernelError("truncated delta")
    kind = buf[off]
    off += 1
    if kind > 3:
        raise KernelError(f"unknown delta kind {kind}")
    row, off = _decode_row(tags, buf, off)
    aux = None
    if kind == K_REPLACE:
        aux, off = _decode_row(tags, buf, off)
    elif kind == K_CUSTOM:
        if off + 2 > len(buf):
            raise KernelError("truncated payload handler")
        n = _unpack_u16(buf, off)[0]
        off += 2
        if off + n > len(buf):
            raise KernelError("truncated payload handler")
        handler = buf[off:off + n].decode("utf-8")
        off += n
        if off >= len(buf):
            raise KernelError("truncated payload arity")
        nargs = buf[off]
        off += 1
        args = []
        for _ in range(nargs):
            if off >= len(buf):
                raise KernelError("truncated payload value")
            t = buf[off]
            off += 1
            v, off = _decode_value(t, buf, off)
            args.append(v)
        aux = (handler, tuple(args))
    return (kind, row, aux), off


def encode_batch(schema_id, tags, deltas, punct_kind, punct_stratum):
    """Encode a data batch: header (schema id, count, punctuation) followed by
    the deltas in order.  ``punct_kind`` is P_NONE/P_END_OF_STRATUM/
    P_END_OF_QUERY; the punctuation travels after the deltas it follows."""
    out = [_pack_u32(schema_id), _pack_u32(len(deltas)), bytes((punct_kind,))]
    if punct_kind != P_NONE:
        out.append(_pack_u32(punct_stratum))
    for kind, row, aux in deltas:
        _encode_delta(tags, kind, row, aux, out)
    return b"".join(out)


def decode_batch(buf, schema_lookup):
    """Decode a data batch.  ``schema_lookup(schema_id)`` returns the type-tag
    signature.  Returns ``(schema_id, deltas, punct_kind, punct_stratum)``;
    trailing bytes are an error."""
    if len(buf) < 9:
        raise KernelError("truncated batch header")
    schema_id = _unpack_u32(buf, 0)[0]
    count = _unpack_u32(buf, 4)[0]
    punct_kind = buf[8]
    off = 9
    punct_stratum = 0
    if punct_kind != P_NONE:
        if punct_kind > P_END_OF_QUERY:
            raise KernelError(f"unknown punctuation tag {punct_kind}")
        if off + 4 > len(buf):
            raise KernelError("truncated punctuation")
        punct_stratum = _unpack_u32(buf, off)[0]
        off += 4
    tags = schema_lookup(schema_id)
    if tags is None:
        raise KernelError(f"unknown schema id {schema_id}")
    deltas = []
    for _ in range(count):
        d, off = _decode_delta(tags, buf, off)
        deltas.append(d)
    if off != len(buf):
        raise KernelError(f"{len(buf) - off} trailing bytes in batch")
    return schema_id, deltas, punct_kind, punct_stratum


_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1


def hash64(data, seed):
    """Seeded FNV-1a over the seed's 8 little-endian bytes then the data.
    Stable across processes and interpreter versions; both kernel variants
    must agree bit for bit."""
    h = _FNV_OFFSET
    for b in (seed & _MASK64).to_bytes(8, "little"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h
