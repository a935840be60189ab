"""Distributed execution: partitioning, transports, workers, requestor."""

from .driver import RunResult, execute, key_bytes, partition_stores
from .ring import PartitionSnapshot, hash64
from .transport import InprocNet, TcpNet

__all__ = ["RunResult", "execute", "key_bytes", "partition_stores",
           "PartitionSnapshot", "hash64", "InprocNet", "TcpNet"]
