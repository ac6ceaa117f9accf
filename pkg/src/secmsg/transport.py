"""Rank-addressed point-to-point messaging over a TCP mesh.

A process group is fully connected: exactly one TCP connection per
unordered pair of ranks.  Every message starts with a 12-byte
little-endian header ``[u32 body_length][u32 tag][u8 mode][3 zero
bytes]``.  Messages whose payload classifies below the configured
threshold are sent eagerly (header and body written back to back);
larger ones use a rendezvous handshake: the header goes out with mode
RTS, the receiver answers with the single byte 0xC7 (CTS) once a
matching receive is posted, and only then does the body follow.
Encrypted variants carry a sealed frame as the body (wire body is 28
bytes longer than the plaintext); the eager/rendezvous decision is made
on the plaintext length so that the protocol split lines up with the
sizes a benchmark sweep requests.

Per connection, at most one rendezvous send is in flight at a time and
no other frame may be written between its header and its body; queued
sends drain once the body is on the wire.  The CTS byte is the only
unframed unit on the wire, so while a rendezvous send is awaiting CTS
the opposite direction must not deliver a frame whose first header byte
equals 0xC7 (a body length of 199 mod 256).  The communication patterns
in this package (ping-pong, windowed multi-pair, rank-ordered
collectives) never produce that crossing.

Tags are free-form u32 values; tags at and above 0xFFFFFFF0 are reserved
for internal use (barrier, collectives).
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
import time
from collections import deque

from .aead import AeadProvider, Frame, IntegrityError

HEADER = struct.Struct("<IIB3x")  # body_length, tag, mode; 12 bytes
HELLO = struct.Struct("<I")

MODE_EAGER = 0
MODE_RTS = 1
CTS_BYTE = 0xC7

DEFAULT_THRESHOLD = 131072  # plaintext bytes; at or above goes rendezvous

RESERVED_TAG_BASE = 0xFFFFFFF0
BARRIER_TAG = 0xFFFFFFFF
COLLECTIVE_TAG = 0xFFFFFFFE
COLLECTIVE_META_TAG = 0xFFFFFFFD

_MAX_BODY = 0xFFFFFFFF


class TransportError(Exception):
    """Base class for connection and protocol failures."""


class StartupError(TransportError):
    """The group could not be brought up (bind failure, missing peer)."""


class ConnectionLost(TransportError):
    pass


class HandleKind(enum.Enum):
    SEND = "send"
    RECV = "recv"


def read_roster(path: str) -> list[tuple[str, int]]:
    """Parse a roster file of ``rank host port`` lines into an address list."""
    entries: dict[int, tuple[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'rank host port'")
            rank, host, port = int(parts[0]), parts[1], int(parts[2])
            if rank in entries:
                raise ValueError(f"{path}:{lineno}: duplicate rank {rank}")
            entries[rank] = (host, port)
    n = len(entries)
    if sorted(entries) != list(range(n)):
        raise ValueError(f"{path}: ranks must be a permutation of 0..{n - 1}")
    return [entries[r] for r in range(n)]


def write_roster(path: str, roster: list[tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rank, (host, port) in enumerate(roster):
            fh.write(f"{rank} {host} {port}\n")


class RequestHandle:
    """Completion handle for a non-blocking send or receive.

    ``wait`` is idempotent; waiting on a completed handle returns
    immediately.  For encrypted receives the frame is opened inside the
    first ``wait`` call, and only then does ``data`` expose plaintext.
    """

    def __init__(self, kind: HandleKind, provider: AeadProvider | None = None):
        self.kind = kind
        self._event = threading.Event()
        self._error: Exception | None = None
        self._raw: bytes | None = None
        self._plain: bytes | None = None
        self._provider = provider
        self._decrypt_lock = threading.Lock()

    @property
    def done(self) -> bool:
        return self._event.is_set()

    def _complete(self, body: bytes | None = None) -> None:
        self._raw = body
        self._event.set()

    def _fail(self, error: Exception) -> None:
        self._error = error
        self._event.set()

    def wait(self, timeout: float | None = None) -> None:
        if not self._event.wait(timeout):
            raise TimeoutError(f"{self.kind.value} not complete after {timeout}s")
        if self._error is not None:
            raise self._error
        if self._provider is not None and self._plain is None:
            with self._decrypt_lock:
                if self._plain is None and self._error is None:
                    try:
                        frame = Frame.from_bytes(self._raw or b"")
                        self._plain = self._provider.open(frame)
                    except (IntegrityError, ValueError) as exc:
                        err = exc if isinstance(exc, IntegrityError) else IntegrityError(str(exc))
                        self._error = err
            if self._error is not None:
                raise self._error

    @property
    def data(self) -> bytes:
        if self.kind is not HandleKind.RECV:
            raise TransportError("send handles carry no data")
        if not self.done:
            raise TransportError("receive not complete; call wait() first")
        if self._error is not None:
            raise self._error
        if self._provider is not None:
            if self._plain is None:
                raise TransportError("encrypted receive not opened; call wait() first")
            return self._plain
        return self._raw if self._raw is not None else b""


def waitall(handles, timeout: float | None = None) -> None:
    """Complete every handle; order of completion is immaterial."""
    for h in handles:
        h.wait(timeout)


class _RdvSend:
    """An outbound rendezvous transfer: header written, body gated on CTS."""

    __slots__ = ("handle", "body")

    def __init__(self, handle: RequestHandle, body: bytes):
        self.handle = handle
        self.body = body


class _RdvArrival:
    """An announced inbound rendezvous transfer awaiting CTS and body."""

    __slots__ = ("length", "handle")

    def __init__(self, length: int):
        self.length = length
        self.handle: RequestHandle | None = None


class _Conn:
    def __init__(self, peer: int, sock: socket.socket):
        self.peer = peer
        self.sock = sock
        self.lock = threading.Lock()
        self.out_queue: deque = deque()  # ("eager", handle, payload) | ("rdv", _RdvSend, header)
        self.rdv_active: _RdvSend | None = None
        self.pending_cts = 0
        self.bytes_out = 0
        self.bytes_in = 0
        self.alive = True
        self.reader: threading.Thread | None = None

    def write(self, data: bytes) -> None:
        # caller holds self.lock
        self.sock.sendall(data)
        self.bytes_out += len(data)

    def read_exact(self, n: int) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            r = self.sock.recv_into(view[got:], n - got)
            if r == 0:
                raise ConnectionLost(f"peer {self.peer} closed the connection")
            got += r
        self.bytes_in += n
        return bytes(buf)


class ProcessGroup:
    """A rank's endpoint in a fully connected TCP process group.

    Construction establishes the mesh and returns only after every rank
    is reachable (an implicit barrier).  ``provider`` enables the
    encrypted message variants.
    """

    def __init__(
        self,
        rank: int,
        roster: list[tuple[str, int]],
        *,
        provider: AeadProvider | None = None,
        threshold: int = DEFAULT_THRESHOLD,
        timeout: float = 30.0,
    ):
        n = len(roster)
        if n < 1:
            raise ValueError("roster must have at least one entry")
        if not 0 <= rank < n:
            raise ValueError(f"rank {rank} out of range for roster of {n}")
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        self.rank = rank
        self.size = n
        self.provider = provider
        self.threshold = threshold
        self._roster = list(roster)
        self._conns: dict[int, _Conn] = {}
        self._closing = False
        self._listener: socket.socket | None = None

        # matching engine: per (src, tag), posted receives and inbound
        # traffic queue, kept in one FIFO each so arrival order is kept
        self._match_lock = threading.Lock()
        self._posted: dict[tuple[int, int], deque[RequestHandle]] = {}
        self._inbound: dict[tuple[int, int], deque] = {}
        self._dead_peers: set[int] = set()

        if n > 1:
            try:
                self._establish_mesh(timeout)
                self.barrier()
            except Exception:
                self.close(synchronize=False)
                raise

    # -- mesh formation -------------------------------------------------

    def _establish_mesh(self, timeout: float) -> None:
        host, port = self._roster[self.rank]
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host, port))
        except OSError as exc:
            listener.close()
            raise StartupError(f"rank {self.rank} cannot bind {host}:{port}: {exc}") from exc
        listener.listen(self.size)
        listener.settimeout(0.2)
        self._listener = listener
        deadline = time.monotonic() + timeout

        # ranks dial their lower-numbered peers; the listener fields the rest
        for peer in range(self.rank):
            sock = self._dial(peer, deadline)
            sock.sendall(HELLO.pack(self.rank))
            self._add_conn(peer, sock)

        expected = set(range(self.rank + 1, self.size))
        while expected:
            if time.monotonic() > deadline:
                missing = ", ".join(str(p) for p in sorted(expected))
                raise StartupError(f"rank {self.rank}: no connection from rank(s) {missing}")
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                continue
            raw = b""
            while len(raw) < HELLO.size:
                chunk = sock.recv(HELLO.size - len(raw))
                if not chunk:
                    raise StartupError(f"rank {self.rank}: peer hung up during hello")
                raw += chunk
            (peer,) = HELLO.unpack(raw)
            if peer not in expected:
                sock.close()
                raise StartupError(f"rank {self.rank}: unexpected hello from rank {peer}")
            expected.discard(peer)
            self._add_conn(peer, sock)

        for conn in self._conns.values():
            t = threading.Thread(
                target=self._reader_loop,
                args=(conn,),
                name=f"secmsg-reader-{self.rank}-{conn.peer}",
                daemon=True,
            )
            conn.reader = t
            t.start()

    def _dial(self, peer: int, deadline: float) -> socket.socket:
        host, port = self._roster[peer]
        while True:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                sock.settimeout(max(0.2, min(2.0, deadline - time.monotonic())))
                sock.connect((host, port))
                sock.settimeout(None)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError as exc:
                sock.close()
                if time.monotonic() > deadline:
                    raise StartupError(
                        f"rank {self.rank} cannot reach rank {peer} at {host}:{port}: {exc}"
                    ) from exc
                time.sleep(0.05)

    def _add_conn(self, peer: int, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        self._conns[peer] = _Conn(peer, sock)

    # -- properties -----------------------------------------------------

    @property
    def connection_count(self) -> int:
        return len(self._conns)

    @property
    def bytes_sent(self) -> int:
        return sum(c.bytes_out for c in self._conns.values())

    @property
    def bytes_received(self) -> int:
        return sum(c.bytes_in for c in self._conns.values())

    # -- inbound engine ---------------------------------------------------

    def _reader_loop(self, conn: _Conn) -> None:
        try:
            while True:
                first = conn.read_exact(1)
                if conn.pending_cts > 0 and first[0] == CTS_BYTE:
                    self._on_cts(conn)
                    continue
                header = first + conn.read_exact(HEADER.size - 1)
                length, tag, mode = HEADER.unpack(header)
                if mode == MODE_EAGER:
                    body = conn.read_exact(length) if length else b""
                    self._deliver(conn.peer, tag, body)
                elif mode == MODE_RTS:
                    arrival = _RdvArrival(length)
                    self._announce(conn, tag, arrival)
                    # body bytes only start flowing after our CTS goes out
                    body = conn.read_exact(length) if length else b""
                    if arrival.handle is None:
                        raise ConnectionLost(f"peer {conn.peer} sent a body before CTS")
                    arrival.handle._complete(body)
                else:
                    raise ConnectionLost(f"peer {conn.peer} sent unknown mode {mode}")
        except (ConnectionLost, OSError) as exc:
            if not self._closing:
                self._on_connection_dead(conn, exc)

    def _on_cts(self, conn: _Conn) -> None:
        with conn.lock:
            transfer = conn.rdv_active
            if transfer is None:
                raise ConnectionLost(f"peer {conn.peer} sent CTS with no transfer pending")
            conn.pending_cts -= 1
            conn.write(transfer.body)
            conn.rdv_active = None
            transfer.handle._complete()
            self._drain_locked(conn)

    def _drain_locked(self, conn: _Conn) -> None:
        # caller holds conn.lock; flush queued sends up to the next rendezvous
        while conn.out_queue and conn.rdv_active is None:
            item = conn.out_queue.popleft()
            if item[0] == "eager":
                _, handle, payload = item
                conn.write(payload)
                handle._complete()
            else:
                # mark the transfer before the header hits the wire: the
                # reader checks pending_cts without taking this lock
                _, transfer, header = item
                conn.rdv_active = transfer
                conn.pending_cts += 1
                conn.write(header)

    def _deliver(self, src: int, tag: int, body: bytes) -> None:
        key = (src, tag)
        with self._match_lock:
            posted = self._posted.get(key)
            if posted:
                handle = posted.popleft()
                if not posted:
                    del self._posted[key]
            else:
                self._inbound.setdefault(key, deque()).append(("body", body))
                return
        handle._complete(body)

    def _announce(self, conn: _Conn, tag: int, arrival: _RdvArrival) -> None:
        key = (conn.peer, tag)
        with self._match_lock:
            posted = self._posted.get(key)
            if posted:
                handle = posted.popleft()
                if not posted:
                    del self._posted[key]
                arrival.handle = handle
                self._send_cts(conn)
            else:
                self._inbound.setdefault(key, deque()).append(("rdv", arrival, conn))

    def _send_cts(self, conn: _Conn) -> None:
        with conn.lock:
            conn.write(bytes([CTS_BYTE]))

    def _on_connection_dead(self, conn: _Conn, exc: Exception) -> None:
        conn.alive = False
        error = exc if isinstance(exc, TransportError) else ConnectionLost(str(exc))
        with conn.lock:
            if conn.rdv_active is not None:
                conn.rdv_active.handle._fail(error)
                conn.rdv_active = None
            while conn.out_queue:
                item = conn.out_queue.popleft()
                handle = item[1] if item[0] == "eager" else item[1].handle
                handle._fail(error)
        with self._match_lock:
            self._dead_peers.add(conn.peer)
            for (src, _tag), handles in list(self._posted.items()):
                if src != conn.peer:
                    continue
                for h in handles:
                    h._fail(error)
                del self._posted[(src, _tag)]

    # -- point-to-point API ----------------------------------------------

    def _check_peer(self, peer: int) -> _Conn:
        if peer == self.rank:
            raise ValueError("self-addressed messages are not supported")
        if not 0 <= peer < self.size:
            raise ValueError(f"rank {peer} out of range for group of {self.size}")
        conn = self._conns[peer]
        if not conn.alive:
            raise ConnectionLost(f"connection to rank {peer} is down")
        return conn

    def _post_send(self, dest: int, tag: int, body: bytes, classify_len: int) -> RequestHandle:
        conn = self._check_peer(dest)
        if len(body) > _MAX_BODY:
            raise ValueError("message larger than the u32 wire limit")
        handle = RequestHandle(HandleKind.SEND)
        mode = MODE_RTS if classify_len >= self.threshold else MODE_EAGER
        header = HEADER.pack(len(body), tag, mode)
        with conn.lock:
            if mode == MODE_EAGER:
                if conn.rdv_active is None and not conn.out_queue:
                    conn.write(header + body)
                    handle._complete()
                else:
                    conn.out_queue.append(("eager", handle, header + body))
            else:
                transfer = _RdvSend(handle, body)
                if conn.rdv_active is None and not conn.out_queue:
                    conn.rdv_active = transfer
                    conn.pending_cts += 1
                    conn.write(header)
                else:
                    conn.out_queue.append(("rdv", transfer, header))
        return handle

    def _post_recv(self, src: int, tag: int, provider: AeadProvider | None) -> RequestHandle:
        self._check_peer(src)
        handle = RequestHandle(HandleKind.RECV, provider=provider)
        key = (src, tag)
        send_cts_on: _Conn | None = None
        with self._match_lock:
            if src in self._dead_peers:
                handle._fail(ConnectionLost(f"connection to rank {src} is down"))
                return handle
            queue = self._inbound.get(key)
            if queue:
                item = queue.popleft()
                if not queue:
                    del self._inbound[key]
                if item[0] == "body":
                    handle._complete(item[1])
                else:
                    _, arrival, conn = item
                    arrival.handle = handle
                    send_cts_on = conn
            else:
                self._posted.setdefault(key, deque()).append(handle)
        if send_cts_on is not None:
            self._send_cts(send_cts_on)
        return handle

    def isend(self, dest: int, tag: int, body: bytes) -> RequestHandle:
        return self._post_send(dest, tag, bytes(body), classify_len=len(body))

    def irecv(self, src: int, tag: int) -> RequestHandle:
        return self._post_recv(src, tag, provider=None)

    def send(self, dest: int, tag: int, body: bytes) -> None:
        self.isend(dest, tag, body).wait()

    def recv(self, src: int, tag: int) -> bytes:
        h = self.irecv(src, tag)
        h.wait()
        return h.data

    # -- encrypted variants ------------------------------------------------

    def _require_provider(self) -> AeadProvider:
        if self.provider is None:
            raise ValueError("group has no AEAD provider configured")
        return self.provider

    def encrypted_isend(self, dest: int, tag: int, body: bytes) -> RequestHandle:
        frame = self._require_provider().seal(bytes(body))
        return self._post_send(dest, tag, frame.to_bytes(), classify_len=len(body))

    def encrypted_irecv(self, src: int, tag: int) -> RequestHandle:
        return self._post_recv(src, tag, provider=self._require_provider())

    def encrypted_send(self, dest: int, tag: int, body: bytes) -> None:
        self.encrypted_isend(dest, tag, body).wait()

    def encrypted_recv(self, src: int, tag: int) -> bytes:
        h = self.encrypted_irecv(src, tag)
        h.wait()
        return h.data

    # -- group operations ---------------------------------------------------

    def barrier(self) -> None:
        """Dissemination barrier over the mesh."""
        step = 1
        while step < self.size:
            dest = (self.rank + step) % self.size
            src = (self.rank - step) % self.size
            h = self._post_send(dest, BARRIER_TAG, b"", classify_len=0)
            self._post_recv(src, BARRIER_TAG, provider=None).wait()
            h.wait()
            step <<= 1

    def close(self, *, synchronize: bool = True) -> None:
        """Tear down the mesh.

        By default the teardown is collective: ranks align on a final
        barrier before any socket goes away, so a fast rank cannot kill
        its peers mid-operation.  ``synchronize=False`` tears down
        immediately (failure paths, or deliberately abrupt shutdown).
        """
        if self._closing:
            return
        if (
            synchronize
            and self.size > 1
            and all(c.alive for c in self._conns.values())
        ):
            try:
                self.barrier()
            except (TransportError, TimeoutError):
                pass
        self._closing = True
        for conn in self._conns.values():
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                conn.sock.close()
            except OSError:
                pass
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for conn in self._conns.values():
            if conn.reader is not None and conn.reader.is_alive():
                conn.reader.join(timeout=2.0)

    def __enter__(self) -> "ProcessGroup":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        # graceful collective close on success; abrupt on error, since a
        # failing rank cannot assume its peers will reach the farewell
        # barrier
        self.close(synchronize=exc_type is None)


def group_init(
    rank: int,
    roster: list[tuple[str, int]],
    *,
    provider: AeadProvider | None = None,
    threshold: int = DEFAULT_THRESHOLD,
    timeout: float = 30.0,
) -> ProcessGroup:
    """Bring up this rank's endpoint and block until the mesh is complete."""
    return ProcessGroup(rank, roster, provider=provider, threshold=threshold, timeout=timeout)
