"""Kernel selection: compiled extension when available, pure Python otherwise.

Set DELTAFLOW_PURE_PYTHON=1 to force the fallback (used by the parity tests
and the kernel benchmark).
"""

import os

if os.environ.get("DELTAFLOW_PURE_PYTHON") == "1":
    from deltaflow._kernels import _pykernels as _impl
else:
    try:
        from deltaflow._kernels import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from deltaflow._kernels import _pykernels as _impl

IMPL = _impl.IMPL
KernelError = _impl.KernelError
encode_row = _impl.encode_row
encode_delta = _impl.encode_delta
encode_batch = _impl.encode_batch
decode_batch = _impl.decode_batch
hash64 = _impl.hash64

T_INT64 = _impl.T_INT64
T_FLOAT64 = _impl.T_FLOAT64
T_STRING = _impl.T_STRING
T_BOOL = _impl.T_BOOL
P_NONE = _impl.P_NONE
P_END_OF_STRATUM = _impl.P_END_OF_STRATUM
P_END_OF_QUERY = _impl.P_END_OF_QUERY
