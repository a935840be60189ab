# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Mirrors _pykernels exactly: same functions, same bytes out, same hash values.
Little-endian byte order is assumed (x86-64 / aarch64); the parity test suite
guards against drift between the two variants.
"""

from libc.stdint cimport uint8_t, uint16_t, uint32_t, int64_t, uint64_t
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy
from cpython.bytes cimport PyBytes_FromStringAndSize
from cpython.unicode cimport PyUnicode_AsUTF8String, PyUnicode_DecodeUTF8

IMPL = "cython"

T_INT64 = 0
T_FLOAT64 = 1
T_STRING = 2
T_BOOL = 3

K_INSERT = 0
K_DELETE = 1
K_REPLACE = 2
K_CUSTOM = 3

P_NONE = 0
P_END_OF_STRATUM = 1
P_END_OF_QUERY = 2


class KernelError(ValueError):
    """Raised for malformed values or undecodable bytes."""


cdef union _f64bits:
    double d
    uint64_t u


cdef struct _Buf:
    unsigned char *data
    Py_ssize_t size
    Py_ssize_t cap


cdef int _buf_init(_Buf *b) except -1:
    b.cap = 256
    b.size = 0
    b.data = <unsigned char *> malloc(b.cap)
    if b.data == NULL:
        raise MemoryError()
    return 0


cdef int _buf_reserve(_Buf *b, Py_ssize_t extra) except -1:
    cdef Py_ssize_t need = b.size + extra
    cdef Py_ssize_t cap = b.cap
    if need <= cap:
        return 0
    while cap < need:
        cap *= 2
    b.data = <unsigned char *> realloc(b.data, cap)
    if b.data == NULL:
        raise MemoryError()
    b.cap = cap
    return 0


cdef inline int _put_u8(_Buf *b, uint8_t v) except -1:
    _buf_reserve(b, 1)
    b.data[b.size] = v
    b.size += 1
    return 0


cdef inline int _put_u16(_Buf *b, uint16_t v) except -1:
    _buf_reserve(b, 2)
    memcpy(b.data + b.size, &v, 2)
    b.size += 2
    return 0


cdef inline int _put_u32(_Buf *b, uint32_t v) except -1:
    _buf_reserve(b, 4)
    memcpy(b.data + b.size, &v, 4)
    b.size += 4
    return 0


cdef inline int _put_i64(_Buf *b, int64_t v) except -1:
    _buf_reserve(b, 8)
    memcpy(b.data + b.size, &v, 8)
    b.size += 8
    return 0


cdef inline int _put_bytes(_Buf *b, const unsigned char *p, Py_ssize_t n) except -1:
    _buf_reserve(b, n)
    memcpy(b.data + b.size, p, n)
    b.size += n
    return 0


cdef int _encode_value(_Buf *b, int tag, object v) except -1:
    cdef int64_t iv
    cdef _f64bits fb
    cdef bytes sb
    if tag == 0:  # int64
        if type(v) is not int:
            raise KernelError(f"expected int64, got {type(v).__name__}: {v!r}")
        try:
            iv = v
        except OverflowError:
            raise KernelError(f"int64 out of range: {v!r}") from None
        _put_i64(b, iv)
    elif tag == 1:  # float64
        if type(v) is not float:
            raise KernelError(f"expected float64, got {type(v).__name__}: {v!r}")
        fb.d = v
        _buf_reserve(b, 8)
        memcpy(b.data + b.size, &fb.u, 8)
        b.size += 8
    elif tag == 2:  # string
        if type(v) is not str:
            raise KernelError(f"expected string, got {type(v).__name__}: {v!r}")
        sb = PyUnicode_AsUTF8String(v)
        _put_u32(b, <uint32_t> len(sb))
        _put_bytes(b, <const unsigned char *> <char *> sb, len(sb))
    elif tag == 3:  # bool
        if v is not True and v is not False:
            raise KernelError(f"expected bool, got {type(v).__name__}: {v!r}")
        _put_u8(b, 1 if v is True else 0)
    else:
        raise KernelError(f"unknown type tag {tag}")
    return 0


cdef int _encode_row(_Buf *b, const unsigned char *tags, Py_ssize_t ntags, tuple row) except -1:
    cdef Py_ssize_t i
    if len(row) != ntags:
        raise KernelError(f"row arity {len(row)} != schema arity {ntags}")
    for i in range(ntags):
        _encode_value(b, tags[i], row[i])
    return 0


cdef int _encode_delta(_Buf *b, const unsigned char *tags, Py_ssize_t ntags,
                       int kind, tuple row, object aux) except -1:
    cdef bytes hb
    cdef object handler, args, a
    cdef int t
    _put_u8(b, <uint8_t> kind)
    _encode_row(b, tags, ntags, row)
    if kind == 2:  # replace
        if aux is None:
            raise KernelError("replace delta without replaced row")
        _encode_row(b, tags, ntags, <tuple> aux)
    elif kind == 3:  # custom
        if aux is None:
            raise KernelError("custom delta without payload")
        handler = aux[0]
        args = aux[1]
        hb = PyUnicode_AsUTF8String(handler)
        _put_u16(b, <uint16_t> len(hb))
        _put_bytes(b, <const unsigned char *> <char *> hb, len(hb))
        if len(args) > 255:
            raise KernelError("payload too wide")
        _put_u8(b, <uint8_t> len(args))
        for a in args:
            if type(a) is bool:
                t = 3
            elif type(a) is int:
                t = 0
            elif type(a) is float:
                t = 1
            elif type(a) is str:
                t = 2
            else:
                raise KernelError(f"unsupported payload value {a!r}")
            _put_u8(b, <uint8_t> t)
            _encode_value(b, t, a)
    elif aux is not None:
        raise KernelError(f"delta kind {kind} takes no auxiliary data")
    return 0


cdef bytes _buf_take(_Buf *b):
    cdef bytes out = PyBytes_FromStringAndSize(<char *> b.data, b.size)
    free(b.data)
    b.data = NULL
    return out


def encode_row(bytes tags, tuple row):
    """Canonical byte form of a tuple under a schema signature."""
    cdef _Buf b
    _buf_init(&b)
    try:
        _encode_row(&b, <const unsigned char *> tags, len(tags), row)
    except BaseException:
        free(b.data)
        raise
    return _buf_take(&b)


def encode_delta(bytes tags, int kind, tuple row, object aux):
    """Canonical byte form of one delta (annotation tag, row, auxiliary)."""
    cdef _Buf b
    if kind < 0 or kind > 3:
        raise KernelError(f"unknown delta kind {kind}")
    _buf_init(&b)
    try:
        _encode_delta(&b, <const unsigned char *> tags, len(tags), kind, row, aux)
    except BaseException:
        free(b.data)
        raise
    return _buf_take(&b)


def encode_batch(uint32_t schema_id, bytes tags, list deltas, int punct_kind, uint32_t punct_stratum):
    """Encode a data batch: header then deltas in order."""
    cdef _Buf b
    cdef const unsigned char *tp = <const unsigned char *> tags
    cdef Py_ssize_t nt = len(tags)
    cdef object d
    _buf_init(&b)
    try:
        _put_u32(&b, schema_id)
        _put_u32(&b, <uint32_t> len(deltas))
        _put_u8(&b, <uint8_t> punct_kind)
        if punct_kind != 0:
            _put_u32(&b, punct_stratum)
        for d in deltas:
            _encode_delta(&b, tp, nt, d[0], <tuple> d[1], d[2])
    except BaseException:
        free(b.data)
        raise
    return _buf_take(&b)


# ---------------------------------------------------------------------------
# Decoding


cdef object _decode_value(int tag, const unsigned char *buf, Py_ssize_t n, Py_ssize_t *off):
    cdef int64_t iv
    cdef _f64bits fb
    cdef uint32_t sn
    cdef uint8_t bb
    cdef object v
    if tag == 0:
        if off[0] + 8 > n:
            raise KernelError("truncated int64")
        memcpy(&iv, buf + off[0], 8)
        off[0] += 8
        return iv
    if tag == 1:
        if off[0] + 8 > n:
            raise KernelError("truncated float64")
        memcpy(&fb.u, buf + off[0], 8)
        off[0] += 8
        return fb.d
    if tag == 2:
        if off[0] + 4 > n:
            raise KernelError("truncated string length")
        memcpy(&sn, buf + off[0], 4)
        off[0] += 4
        if off[0] + <Py_ssize_t> sn > n:
            raise KernelError("truncated string body")
        v = PyUnicode_DecodeUTF8(<const char *> (buf + off[0]), sn, NULL)
        off[0] += sn
        return v
    if tag == 3:
        if off[0] + 1 > n:
            raise KernelError("truncated bool")
        bb = buf[off[0]]
        if bb > 1:
            raise KernelError(f"bad bool byte {bb}")
        off[0] += 1
        return bb == 1
    raise KernelError(f"unknown type tag {tag}")


cdef tuple _decode_row(const unsigned char *tags, Py_ssize_t ntags,
                       const unsigned char *buf, Py_ssize_t n, Py_ssize_t *off):
    cdef Py_ssize_t i
    cdef list vals = []
    for i in range(ntags):
        vals.append(_decode_value(tags[i], buf, n, off))
    return tuple(vals)


cdef tuple _decode_delta(const unsigned char *tags, Py_ssize_t ntags,
                         const unsigned char *buf, Py_ssize_t n, Py_ssize_t *off):
    cdef int kind, t
    cdef uint16_t hn
    cdef uint8_t nargs
    cdef Py_ssize_t i
    cdef tuple row
    cdef object aux = None
    cdef object handler
    cdef list args
    if off[0] >= n:
        raise KernelError("truncated delta")
    kind = buf[off[0]]
    off[0] += 1
    if kind > 3:
        raise KernelError(f"unknown delta kind {kind}")
    row = _decode_row(tags, ntags, buf, n, off)
    if kind == 2:
        aux = _decode_row(tags, ntags, buf, n, off)
    elif kind == 3:
        if off[0] + 2 > n:
            raise KernelError("truncated payload handler")
        memcpy(&hn, buf + off[0], 2)
        off[0] += 2
        if off[0] + <Py_ssize_t> hn > n:
            raise KernelError("truncated payload handler")
        handler = PyUnicode_DecodeUTF8(<const char *> (buf + off[0]), hn, NULL)
        off[0] += hn
        if off[0] >= n:
            raise KernelError("truncated payload arity")
        nargs = buf[off[0]]
        off[0] += 1
        args = []
        for i in range(nargs):
            if off[0] >= n:
                raise KernelError("truncated payload value")
            t = buf[off[0]]
            off[0] += 1
            args.append(_decode_value(t, buf, n, off))
        aux = (handler, tuple(args))
    return (kind, row, aux)


def decode_batch(bytes buf, object schema_lookup):
    """Decode a data batch; returns (schema_id, deltas, punct_kind, punct_stratum)."""
    cdef const unsigned char *p = <const unsigned char *> buf
    cdef Py_ssize_t n = len(buf)
    cdef Py_ssize_t off = 9
    cdef uint32_t schema_id, count, punct_stratum = 0
    cdef int punct_kind
    cdef Py_ssize_t i
    cdef bytes tags
    cdef list deltas = []
    if n < 9:
        raise KernelError("truncated batch header")
    memcpy(&schema_id, p, 4)
    memcpy(&count, p + 4, 4)
    punct_kind = p[8]
    if punct_kind != 0:
        if punct_kind > 2:
            raise KernelError(f"unknown punctuation tag {punct_kind}")
        if off + 4 > n:
            raise KernelError("truncated punctuation")
        memcpy(&punct_stratum, p + off, 4)
        off += 4
    tags_obj = schema_lookup(schema_id)
    if tags_obj is None:
        raise KernelError(f"unknown schema id {schema_id}")
    tags = tags_obj
    for i in range(<Py_ssize_t> count):
        deltas.append(_decode_delta(<const unsigned char *> tags, len(tags), p, n, &off))
    if off != n:
        raise KernelError(f"{n - off} trailing bytes in batch")
    return schema_id, deltas, punct_kind, punct_stratum


def hash64(bytes data, object seed):
    """Seeded FNV-1a over the seed's 8 little-endian bytes then the data."""
    cdef uint64_t h = 14695981039346656037ULL
    cdef uint64_t prime = 1099511628211ULL
    cdef uint64_t s = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    cdef const unsigned char *p = <const unsigned char *> data
    cdef Py_ssize_t n = len(data)
    cdef Py_ssize_t i
    for i in range(8):
        h = (h ^ ((s >> (8 * i)) & 0xFF)) * prime
    for i in range(n):
        h = (h ^ p[i]) * prime
    return h
