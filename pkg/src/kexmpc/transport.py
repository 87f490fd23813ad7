"""Ordered, reliable message channels between the three computing peers.

Two backends share one endpoint interface: an in-process backend (queues and
a barrier, used by tests and `run-local`) and a TCP backend for distributed
deployment.  Every endpoint records a transcript of (round tag, direction,
payload bytes); data-obliviousness checks compare these transcripts.

Wire format (TCP): 4-byte little-endian payload length, 4-byte little-endian
round tag, raw payload.  Transcripts count payload bytes only, so they are
bit-comparable across backends.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time

logger = logging.getLogger("kexmpc.transport")

NUM_PEERS = 3

_HEADER = struct.Struct("<II")


class TransportError(Exception):
    pass


class ChannelClosedError(TransportError):
    pass


class DesyncError(TransportError):
    """Round tags disagree: the peers' protocol flows have diverged."""


class PeerUnreachableError(TransportError):
    pass


def other_peers(peer_id: int) -> tuple[int, int]:
    return tuple(p for p in range(NUM_PEERS) if p != peer_id)


class Transcript:
    """Append-only log of (round_tag, direction, payload_bytes) per endpoint."""

    def __init__(self):
        self.entries: list[tuple[int, str, int]] = []

    def record(self, tag: int, direction: str, n_bytes: int) -> None:
        self.entries.append((tag, direction, n_bytes))

    def summary(self) -> list[tuple[int, int]]:
        """Per-round totals of bytes sent, ordered by round tag."""
        totals: dict[int, int] = {}
        for tag, direction, n in self.entries:
            if direction == "out":
                totals[tag] = totals.get(tag, 0) + n
        return sorted(totals.items())

    def total_sent(self) -> int:
        return sum(n for _, d, n in self.entries if d == "out")


def combined_summary(transcripts: list[Transcript]) -> list[tuple[int, int]]:
    """Session-wide per-round byte totals (sum of all peers' sends)."""
    totals: dict[int, int] = {}
    for t in transcripts:
        for tag, n in t.summary():
            totals[tag] = totals.get(tag, 0) + n
    return sorted(totals.items())


class InProcessNetwork:
    """Shared state for three endpoints living in one process.

    `exchange_round` uses a double barrier: all peers post their outgoing
    messages, synchronize, drain their inboxes, and synchronize again before
    anyone may post the next round.  This keeps the per-channel queues free
    of cross-round interleaving without locks on the queues themselves.
    """

    def __init__(self, timeout: float = 120.0):
        self.timeout = timeout
        self.queues = {
            (s, r): queue.SimpleQueue()
            for s in range(NUM_PEERS)
            for r in range(NUM_PEERS)
            if s != r
        }
        self.barrier = threading.Barrier(NUM_PEERS)
        self.closed = threading.Event()
        self._handed_out: set[int] = set()

    def endpoint(self, peer_id: int) -> "InProcessEndpoint":
        if peer_id in self._handed_out:
            raise ValueError(f"endpoint {peer_id} already created")
        self._handed_out.add(peer_id)
        return InProcessEndpoint(self, peer_id)

    def endpoints(self) -> list["InProcessEndpoint"]:
        return [self.endpoint(p) for p in range(NUM_PEERS)]

    def close(self) -> None:
        self.closed.set()
        self.barrier.abort()


class InProcessEndpoint:
    def __init__(self, net: InProcessNetwork, peer_id: int):
        self.net = net
        self.peer_id = peer_id
        self.transcript = Transcript()
        self.round_tag = 0
        self._send_tags = {p: 0 for p in other_peers(peer_id)}
        self._recv_tags = {p: 0 for p in other_peers(peer_id)}

    def _check_open(self) -> None:
        if self.net.closed.is_set():
            raise ChannelClosedError("session closed")

    def send(self, to: int, payload: bytes) -> None:
        """Raw ordered send on the (self, to) channel."""
        self._check_open()
        if not payload:
            raise ValueError("payload must be nonempty")
        self._send_tags[to] += 1
        tag = self._send_tags[to]
        self.net.queues[(self.peer_id, to)].put((tag, payload))
        self.transcript.record(tag, "out", len(payload))

    def recv(self, frm: int) -> bytes:
        self._check_open()
        try:
            tag, payload = self.net.queues[(frm, self.peer_id)].get(
                timeout=self.net.timeout
            )
        except queue.Empty:
            raise PeerUnreachableError(f"no message from peer {frm}") from None
        self._recv_tags[frm] += 1
        if tag != self._recv_tags[frm]:
            raise DesyncError(
                f"expected tag {self._recv_tags[frm]} from {frm}, got {tag}"
            )
        self.transcript.record(tag, "in", len(payload))
        return payload

    def exchange_round(self, outgoing: dict[int, bytes]) -> dict[int, bytes]:
        """Post `outgoing`, wait for all peers, collect what was addressed here.

        All three peers must call this the same number of times; mismatched
        round tags raise DesyncError.
        """
        self._check_open()
        self.round_tag += 1
        tag = self.round_tag
        for to, payload in outgoing.items():
            if to == self.peer_id:
                raise ValueError("cannot address own peer id")
            if not payload:
                raise ValueError("round payloads must be nonempty")
            self.net.queues[(self.peer_id, to)].put((tag, payload))
            self.transcript.record(tag, "out", len(payload))
        self._wait()
        incoming: dict[int, bytes] = {}
        for frm in other_peers(self.peer_id):
            q = self.net.queues[(frm, self.peer_id)]
            while True:
                try:
                    in_tag, payload = q.get_nowait()
                except queue.Empty:
                    break
                if in_tag != tag:
                    self.net.close()
                    raise DesyncError(
                        f"round {tag}: got tag {in_tag} from peer {frm}"
                    )
                incoming[frm] = payload
                self.transcript.record(tag, "in", len(payload))
        self._wait()
        return incoming

    def _wait(self) -> None:
        try:
            self.net.barrier.wait(timeout=self.net.timeout)
        except threading.BrokenBarrierError:
            if self.net.closed.is_set():
                raise ChannelClosedError("session closed") from None
            raise DesyncError("peer left the round barrier") from None

    def close(self) -> None:
        self.net.close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise PeerUnreachableError("timed out waiting for peer") from None
        except OSError as exc:
            raise ChannelClosedError(str(exc)) from None
        if not chunk:
            raise ChannelClosedError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


class TcpEndpoint:
    """One peer's side of a three-way TCP session.

    Peer i accepts connections from peers j > i and dials peers j < i, so the
    session comes up without a coordinator.  `exchange_round` always writes a
    frame to both other peers (empty payload when nothing is addressed), which
    keeps the blocking send/recv order deadlock-free for moderate frames.
    """

    def __init__(self, peer_id: int, socks: dict[int, socket.socket]):
        self.peer_id = peer_id
        self._socks = socks
        self.transcript = Transcript()
        self.round_tag = 0
        self._send_tags = {p: 0 for p in socks}
        self._recv_tags = {p: 0 for p in socks}
        self._closed = False

    @classmethod
    def connect(
        cls,
        peer_id: int,
        addresses: list[tuple[str, int]],
        connect_timeout: float = 20.0,
        io_timeout: float = 120.0,
    ) -> "TcpEndpoint":
        if len(addresses) != NUM_PEERS:
            raise ValueError("need one host:port per peer")
        socks: dict[int, socket.socket] = {}
        listener = None
        n_accept = NUM_PEERS - 1 - peer_id
        if n_accept:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind(addresses[peer_id])
            listener.listen(n_accept)
            listener.settimeout(connect_timeout)
        try:
            for other in range(peer_id):
                deadline = time.monotonic() + connect_timeout
                while True:
                    try:
                        s = socket.create_connection(
                            addresses[other], timeout=connect_timeout
                        )
                        break
                    except OSError:
                        if time.monotonic() > deadline:
                            raise PeerUnreachableError(
                                f"cannot reach peer {other} at {addresses[other]}"
                            ) from None
                        time.sleep(0.05)
                s.sendall(bytes([peer_id]))
                socks[other] = s
            for _ in range(n_accept):
                try:
                    s, _ = listener.accept()
                except socket.timeout:
                    raise PeerUnreachableError("peer never connected") from None
                who = _recv_exact(s, 1)[0]
                socks[who] = s
        finally:
            if listener is not None:
                listener.close()
        for s in socks.values():
            s.settimeout(io_timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        logger.info("peer %d connected to %s", peer_id, sorted(socks))
        return cls(peer_id, socks)

    def _sock(self, to: int) -> socket.socket:
        if self._closed:
            raise ChannelClosedError("session closed")
        try:
            return self._socks[to]
        except KeyError:
            raise ValueError(f"unknown peer {to}") from None

    def _send_frame(self, to: int, tag: int, payload: bytes) -> None:
        try:
            self._sock(to).sendall(_HEADER.pack(len(payload), tag) + payload)
        except OSError as exc:
            raise ChannelClosedError(str(exc)) from None
        if payload:
            self.transcript.record(tag, "out", len(payload))

    def _recv_frame(self, frm: int) -> tuple[int, bytes]:
        sock = self._sock(frm)
        length, tag = _HEADER.unpack(_recv_exact(sock, _HEADER.size))
        payload = _recv_exact(sock, length) if length else b""
        if payload:
            self.transcript.record(tag, "in", len(payload))
        return tag, payload

    def send(self, to: int, payload: bytes) -> None:
        if not payload:
            raise ValueError("payload must be nonempty")
        self._send_tags[to] += 1
        self._send_frame(to, self._send_tags[to], payload)

    def recv(self, frm: int) -> bytes:
        tag, payload = self._recv_frame(frm)
        self._recv_tags[frm] += 1
        if tag != self._recv_tags[frm]:
            raise DesyncError(f"expected tag {self._recv_tags[frm]}, got {tag}")
        return payload

    def exchange_round(self, outgoing: dict[int, bytes]) -> dict[int, bytes]:
        self.round_tag += 1
        tag = self.round_tag
        for to in other_peers(self.peer_id):
            self._send_frame(to, tag, outgoing.get(to, b""))
        incoming: dict[int, bytes] = {}
        for frm in other_peers(self.peer_id):
            in_tag, payload = self._recv_frame(frm)
            if in_tag != tag:
                raise DesyncError(f"round {tag}: got tag {in_tag} from {frm}")
            if payload:
                incoming[frm] = payload
        return incoming

    def close(self) -> None:
        self._closed = True
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
