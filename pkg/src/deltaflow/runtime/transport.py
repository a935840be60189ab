"""Message transports connecting the requestor and the workers.

Both transports expose the same contract: units are registered by name with
a frame handler, `send()` posts one encoded frame, and per-(sender,
receiver) order is preserved.  Nothing else is guaranteed — cross-channel
interleaving is up to the transport — so the engine logic must be (and is)
correct under any interleaving.

``InprocNet`` runs everything on the calling thread and picks the next
channel to deliver from with a seeded RNG: one seed reproduces one exact
interleaving, different seeds exercise different ones.  ``TcpNet`` gives
every unit a real OS thread and a mesh of loopback TCP connections with
length-prefixed frames.
"""

from __future__ import annotations

import queue
import random
import socket
import struct
import threading

from ..errors import ProtocolError


class Unit:
    """Registration record: a frame handler plus an optional tick hook the
    transport calls when its mailbox stays quiet (TCP only)."""

    def __init__(self, name, handler, on_tick=None):
        self.name = name
        self.handler = handler
        self.on_tick = on_tick


class InprocNet:
    """Single-threaded network with seeded adversarial scheduling.

    Frames queue per (src, dst) channel; the run loop repeatedly picks a
    non-empty channel (seeded choice over the sorted channel list) and
    delivers its head frame.  When every channel is empty the registered
    idle hook runs — the requestor uses it for liveness probing and to
    signal completion.
    """

    def __init__(self, seed=0):
        self._rng = random.Random(0x5EED ^ seed)
        self._units = {}
        self._chans = {}
        self._idle = None
        self.delivered = 0

    def register(self, name, handler, on_tick=None):
        if name in self._units:
            raise ProtocolError(f"duplicate unit {name!r}")
        self._units[name] = Unit(name, handler, on_tick)

    def set_idle_hook(self, hook):
        """hook() -> bool: True keeps the loop alive (new frames expected)."""
        self._idle = hook

    def send(self, src, dst, frame: bytes):
        if dst not in self._units:
            return  # late frame for a departed unit: drop
        self._chans.setdefault((src, dst), []).append(frame)

    def run(self):
        while True:
            ready = sorted(k for k, q in self._chans.items() if q)
            if not ready:
                if self._idle is not None and self._idle():
                    continue
                return
            src, dst = ready[self._rng.randrange(len(ready))]
            frame = self._chans[(src, dst)].pop(0)
            self.delivered += 1
            self._units[dst].handler(src, frame)


_LEN = struct.Struct("<I")


class TcpNet:
    """Full-mesh TCP over loopback, one thread per unit.

    Each unit gets a listening socket; connections are opened lazily by the
    sender and announced with a one-line handshake naming the dialer.  A
    reader thread per connection feeds the receiving unit's mailbox; the
    unit's dispatch thread drains the mailbox and runs the handler, calling
    the unit's tick hook whenever the mailbox stays quiet for ``tick``
    seconds (that is where heartbeats and failure detection live).
    """

    def __init__(self, tick=0.1):
        self.tick = tick
        self._units = {}
        self._addrs = {}
        self._listeners = {}
        self._mailboxes = {}
        self._conns = {}          # (src, dst) -> socket, sender side
        self._conn_locks = {}
        self._threads = []
        self._stop = threading.Event()

    def register(self, name, handler, on_tick=None):
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.bind(("127.0.0.1", 0))
        srv.listen(16)
        self._units[name] = Unit(name, handler, on_tick)
        self._addrs[name] = srv.getsockname()
        self._listeners[name] = srv
        self._mailboxes[name] = queue.SimpleQueue()

    def set_idle_hook(self, hook):
        self._idle = hook  # unused: TCP liveness is timeout-based

    # -- frame I/O ----------------------------------------------------------

    def send(self, src, dst, frame: bytes):
        if self._stop.is_set() or dst not in self._addrs:
            return
        key = (src, dst)
        lock = self._conn_locks.setdefault(key, threading.Lock())
        with lock:
            sock = self._conns.get(key)
            try:
                if sock is None:
                    sock = socket.create_connection(self._addrs[dst],
                                                    timeout=5.0)
                    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    name = src.encode()
                    sock.sendall(_LEN.pack(len(name)) + name)
                    self._conns[key] = sock
                sock.sendall(_LEN.pack(len(frame)) + frame)
            except OSError:
                # Peer gone (dead worker or shutdown): drop the frame, the
                # stratum protocol tolerates silence, not corruption.
                self._conns.pop(key, None)

    @staticmethod
    def _read_exact(sock, n):
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def _reader(self, unit_name, sock):
        hdr = self._read_exact(sock, _LEN.size)
        if hdr is None:
            return
        src = self._read_exact(sock, _LEN.unpack(hdr)[0]).decode()
        box = self._mailboxes[unit_name]
        while not self._stop.is_set():
            hdr = self._read_exact(sock, _LEN.size)
            if hdr is None:
                return
            frame = self._read_exact(sock, _LEN.unpack(hdr)[0])
            if frame is None:
                return
            box.put((src, frame))

    def _acceptor(self, name):
        srv = self._listeners[name]
        while not self._stop.is_set():
            try:
                sock, _ = srv.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._reader, args=(name, sock),
                                 daemon=True)
            t.start()

    def _dispatcher(self, name):
        unit = self._units[name]
        box = self._mailboxes[name]
        while not self._stop.is_set():
            try:
                src, frame = box.get(timeout=self.tick)
            except queue.Empty:
                if unit.on_tick is not None:
                    unit.on_tick()
                continue
            unit.handler(src, frame)

    # -- lifecycle ----------------------------------------------------------

    def start(self):
        for name in self._units:
            for target in (self._acceptor, self._dispatcher):
                t = threading.Thread(target=target, args=(name,),
                                     daemon=True)
                t.start()
                self._threads.append(t)

    def run(self, done_event, timeout=None):
        """Block the caller until the query signals completion."""
        self.start()
        finished = done_event.wait(timeout)
        self.close()
        if not finished:
            raise ProtocolError("query did not complete before the timeout")

    def close(self):
        self._stop.set()
        for srv in self._listeners.values():
            try:
                srv.close()
            except OSError:
                pass
        for sock in self._conns.values():
            try:
                sock.close()
            except OSError:
                pass
        for t in self._threads:
            t.join(timeout=2.0)
