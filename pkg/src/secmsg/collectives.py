"""Encrypted collectives: seal every outgoing element, run the plaintext
collective, open every incoming element.

The plaintext collectives are deliberately simple: broadcast walks a
binomial tree and the all-to-all style operations do a rank-ordered
pairwise exchange (the lower rank of each pair sends first).  The
ordering keeps rendezvous handshakes strictly sequential per connection,
which the transport's wire protocol requires.

Self-addressed elements bypass the wire but are still sealed and opened,
so every rank performs exactly ``n`` seal calls and ``n`` open calls in
an all-to-all of group size ``n``.
"""

from __future__ import annotations

import struct

from .aead import AeadProvider, Frame, FRAME_OVERHEAD, IntegrityError
from .transport import (
    COLLECTIVE_META_TAG,
    COLLECTIVE_TAG,
    ProcessGroup,
    TransportError,
)

_LEN = struct.Struct("<I")


class ProtocolError(TransportError):
    """The ranks disagree about the collective's buffer geometry."""


class CollectiveIntegrityError(IntegrityError):
    """An element failed authentication; carries the offending source rank."""

    def __init__(self, source_rank: int):
        super().__init__(f"element from rank {source_rank} failed authentication")
        self.source_rank = source_rank


def displacements(lengths: list[int], element_overhead: int = 0) -> list[int]:
    """Byte offset of each element in a packed buffer.

    With ``element_overhead`` set to the frame expansion, these are the
    displacements of the encrypted buffer: element i starts at
    sum(lengths[j] + overhead for j < i).
    """
    offsets = []
    pos = 0
    for length in lengths:
        offsets.append(pos)
        pos += length + element_overhead
    return offsets


def _ordered_peers(g: ProcessGroup) -> list[int]:
    return [p for p in range(g.size) if p != g.rank]


def _exchange(g: ProcessGroup, peer: int, payload: bytes, tag: int = COLLECTIVE_TAG) -> bytes:
    # lower rank sends first; the higher receives first, so the pair
    # never has two rendezvous handshakes crossing on one connection
    if g.rank < peer:
        g.send(peer, tag, payload)
        return g.recv(peer, tag)
    received = g.recv(peer, tag)
    g.send(peer, tag, payload)
    return received


def alltoall(g: ProcessGroup, sendbuf: list[bytes]) -> list[bytes]:
    """Each rank i receives sendbuf[i] of every rank; pairwise exchange."""
    if len(sendbuf) != g.size:
        raise ValueError(f"sendbuf must have {g.size} elements, got {len(sendbuf)}")
    recvbuf: list[bytes] = [b""] * g.size
    recvbuf[g.rank] = bytes(sendbuf[g.rank])
    for peer in _ordered_peers(g):
        recvbuf[peer] = _exchange(g, peer, sendbuf[peer])
    return recvbuf


def allgather(g: ProcessGroup, element: bytes) -> list[bytes]:
    """Every rank ends up with [rank 0's element, ..., rank n-1's element]."""
    result: list[bytes] = [b""] * g.size
    result[g.rank] = bytes(element)
    for peer in _ordered_peers(g):
        received = _exchange(g, peer, element)
        if len(received) != len(element):
            raise ProtocolError(
                f"rank {peer} contributed {len(received)} bytes, expected {len(element)}"
            )
        result[peer] = received
    return result


def bcast(g: ProcessGroup, root: int, body: bytes | None = None) -> bytes:
    """Binomial-tree broadcast; returns the root's body at every rank."""
    if not 0 <= root < g.size:
        raise ValueError(f"root {root} out of range for group of {g.size}")
    if g.rank == root:
        if body is None:
            raise ValueError("root must supply a body")
        data = bytes(body)
    else:
        data = b""

    vrank = (g.rank - root) % g.size
    mask = 1
    while mask < g.size:
        if vrank & mask:
            src = (vrank - mask + root) % g.size
            data = g.recv(src, COLLECTIVE_TAG)
            break
        mask <<= 1
    mask >>= 1
    while mask > 0:
        if vrank + mask < g.size:
            dest = (vrank + mask + root) % g.size
            g.send(dest, COLLECTIVE_TAG, data)
        mask >>= 1
    return data


def alltoallv(g: ProcessGroup, sendbuf: list[bytes], recv_lengths: list[int]) -> list[bytes]:
    """Variable-length all-to-all.

    ``recv_lengths[i]`` is the number of bytes this rank expects from
    rank i.  Length vectors are exchanged and validated before any data
    moves; a mismatch raises ProtocolError.
    """
    n = g.size
    if len(sendbuf) != n or len(recv_lengths) != n:
        raise ValueError(f"sendbuf and recv_lengths must each have {n} elements")
    if len(sendbuf[g.rank]) != recv_lengths[g.rank]:
        raise ProtocolError(
            f"self element is {len(sendbuf[g.rank])} bytes but "
            f"{recv_lengths[g.rank]} expected"
        )
    # complete every announcement before validating any of them, so no
    # rank aborts while a peer is still mid-handshake
    announced: dict[int, int] = {}
    for peer in _ordered_peers(g):
        raw = _exchange(g, peer, _LEN.pack(len(sendbuf[peer])), tag=COLLECTIVE_META_TAG)
        (announced[peer],) = _LEN.unpack(raw)
    for peer in _ordered_peers(g):
        if announced[peer] != recv_lengths[peer]:
            raise ProtocolError(
                f"rank {peer} will send {announced[peer]} bytes but "
                f"{recv_lengths[peer]} expected"
            )
    recvbuf: list[bytes] = [b""] * n
    recvbuf[g.rank] = bytes(sendbuf[g.rank])
    for peer in _ordered_peers(g):
        recvbuf[peer] = _exchange(g, peer, sendbuf[peer])
    return recvbuf


def _seal_all(provider: AeadProvider, elements: list[bytes]) -> list[bytes]:
    return [provider.seal(bytes(element)).to_bytes() for element in elements]


def _open_from(provider: AeadProvider, blob: bytes, source_rank: int) -> bytes:
    try:
        return provider.open(Frame.from_bytes(blob))
    except (IntegrityError, ValueError) as exc:
        raise CollectiveIntegrityError(source_rank) from exc


def encrypted_alltoall(
    g: ProcessGroup, provider: AeadProvider, sendbuf: list[bytes]
) -> list[bytes]:
    """All-to-all of sealed elements; each element gets a fresh nonce."""
    if len(sendbuf) != g.size:
        raise ValueError(f"sendbuf must have {g.size} elements, got {len(sendbuf)}")
    lengths = {len(element) for element in sendbuf}
    if len(lengths) > 1:
        raise ValueError("alltoall elements must all have the same length")
    enc_sendbuf = _seal_all(provider, sendbuf)
    enc_recvbuf = alltoall(g, enc_sendbuf)
    return [_open_from(provider, blob, src) for src, blob in enumerate(enc_recvbuf)]


def encrypted_allgather(
    g: ProcessGroup, provider: AeadProvider, element: bytes
) -> list[bytes]:
    """Allgather where each rank seals its own element exactly once."""
    sealed = provider.seal(bytes(element)).to_bytes()
    enc_all = allgather(g, sealed)
    return [_open_from(provider, blob, src) for src, blob in enumerate(enc_all)]


def encrypted_bcast(
    g: ProcessGroup, provider: AeadProvider, root: int, body: bytes | None = None
) -> bytes:
    """Broadcast with one seal at the root and one open per rank."""
    sealed = None
    if g.rank == root:
        if body is None:
            raise ValueError("root must supply a body")
        sealed = provider.seal(bytes(body)).to_bytes()
    frame = bcast(g, root, sealed)
    return _open_from(provider, frame, root)


def encrypted_alltoallv(
    g: ProcessGroup,
    provider: AeadProvider,
    sendbuf: list[bytes],
    recv_lengths: list[int],
) -> list[bytes]:
    """Variable-length encrypted all-to-all.

    Encrypted elements are each 28 bytes longer than their plaintext, so
    the wire-level length vector (and any packed-buffer displacement) is
    recomputed with the frame expansion added per element.
    """
    if len(sendbuf) != g.size or len(recv_lengths) != g.size:
        raise ValueError(f"sendbuf and recv_lengths must each have {g.size} elements")
    enc_sendbuf = _seal_all(provider, sendbuf)
    enc_recv_lengths = [length + FRAME_OVERHEAD for length in recv_lengths]
    enc_recvbuf = alltoallv(g, enc_sendbuf, enc_recv_lengths)
    return [_open_from(provider, blob, src) for src, blob in enumerate(enc_recvbuf)]
