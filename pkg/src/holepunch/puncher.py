"""Client-side traversal engine.

A :class:`PeerClient` lives on one simulated host and one local port.  It
registers with the rendezvous server and then either requests a peer-to-peer
session (``punch_*``) or answers the server's forwarded requests from other
peers.  Each attempt is tracked by a :class:`PunchSession`; its
:class:`PunchOutcome` is filled in once the session locks or fails.

Peers authenticate each other with the server-issued nonce: a session only
locks on a remote that answered a HELLO carrying that exact nonce.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from typing import Callable, Optional

from .core import (Connect, DecodeError, Endpoint, Error, Forward, Hello, HelloAck,
                   LineBuffer, PeerId, Register, RegisterOk, Relay, RelayDeliver, Transport,
                   decode_message, encode_message, parse_endpoint)
from .simnet import (MS, SECOND, AddressInUse, Failure, Host, Packet, TcpConn, TcpState,
                     UsageError, seconds)

log = logging.getLogger(__name__)

HELLO_INTERVAL = 500 * MS
CONNECT_RETRY = SECOND
DEFAULT_DEADLINE = 30 * SECOND
KEEPALIVE_INTERVAL = 15 * SECOND
KEEPALIVE_MISSES = 3


class PunchState(enum.Enum):
    REQUESTING = "requesting"
    PUNCHING = "punching"
    LOCKED = "locked"
    FAILED = "failed"


class Path(enum.Enum):
    PUBLIC = "public"
    PRIVATE = "private"
    HAIRPIN = "hairpin"
    RELAY = "relay"
    REVERSAL = "reversal"


class NotApplicable(Exception):
    """Connection reversal needs the requesting side to be reachable."""


@dataclass(frozen=True)
class PunchOutcome:
    success: bool
    path: Optional[Path]
    elapsed: int
    retries_used: int
    locked_remote: Optional[Endpoint] = None

    def __post_init__(self):
        if not self.success and self.path is not None:
            raise ValueError("a failed outcome has no path")

    def to_dict(self) -> dict:
        return {"success": self.success, "path": self.path.value if self.path else None,
                "elapsed_ns": self.elapsed, "retries_used": self.retries_used,
                "locked_remote": str(self.locked_remote) if self.locked_remote else None}


class PunchSession:
    """State of one attempt to reach ``peer``.

    ``retries_used`` counts HELLO rounds after the first (UDP) or failed
    connection attempts that were re-armed for another try (TCP).
    """

    def __init__(self, client: "PeerClient", peer: str, transport: Transport, role: str,
                 deadline: int, mode: str = "parallel"):
        self.client = client
        self.peer = peer
        self.transport = transport
        self.role = role
        self.mode = mode
        self.state = PunchState.REQUESTING
        self.nonce: Optional[bytes] = None
        self.public_candidate: Optional[Endpoint] = None
        self.private_candidate: Optional[Endpoint] = None
        self.candidates: list[Endpoint] = []
        self.locked_remote: Optional[Endpoint] = None
        self.attempts: dict[Endpoint, int] = {}
        self.responded: dict[Endpoint, int] = {}
        self.started = client.net.now
        self.deadline = self.started + deadline
        self.retries_used = 0
        self.rounds = 0
        self.strays = 0
        self.predictive = False
        self.outcome: Optional[PunchOutcome] = None
        self.stream: Optional[TcpConn] = None
        self.conns: dict[Endpoint, TcpConn] = {}
        self.authenticated: list[TcpConn] = []
        self.awaiting_signal = False
        self.doomed = False
        self.hello_sent_after_lock: dict[Endpoint, int] = {}
        self._timers = []
        self._callbacks: list[Callable] = []

    def __repr__(self):
        return f"<PunchSession {self.client.id}->{self.peer} {self.transport.value} {self.state.name}>"

    @property
    def done(self) -> bool:
        return self.state in (PunchState.LOCKED, PunchState.FAILED)

    def on_done(self, callback: Callable[["PunchSession"], None]):
        if self.outcome is not None:
            callback(self)
        else:
            self._callbacks.append(callback)

    def _cancel_timers(self):
        for t in self._timers:
            t.cancel()
        self._timers.clear()

    def _finish(self, outcome: PunchOutcome):
        self.outcome = outcome
        for cb in self._callbacks:
            cb(self)
        self._callbacks.clear()


class KeepAlive:
    """Periodic HELLOs on a locked UDP session; re-punches after repeated silence."""

    def __init__(self, client: "PeerClient", peer: str, interval: int = KEEPALIVE_INTERVAL,
                 misses: int = KEEPALIVE_MISSES):
        self.client = client
        self.peer = peer
        self.interval = interval
        self.misses = misses
        self.unacked = 0
        self.sent = 0
        self.repunches = 0
        self.stopped = False
        self._timer = client.net.schedule(interval, self._tick)

    @property
    def session(self) -> Optional[PunchSession]:
        return self.client.sessions.get((Transport.UDP, self.peer))

    def acked(self):
        self.unacked = 0

    def stop(self):
        self.stopped = True
        self._timer.cancel()

    def _tick(self):
        if self.stopped:
            return
        s = self.session
        if s is not None and s.state is PunchState.LOCKED:
            if self.unacked >= self.misses:
                self.repunch()
            else:
                self.client._send_udp(s.locked_remote, Hello(self.client.id, s.nonce))
                self.unacked += 1
                self.sent += 1
        elif s is None or s.state is PunchState.FAILED:
            self.repunch()
        self._timer = self.client.net.schedule(self.interval, self._tick)

    def repunch(self):
        self.repunches += 1
        self.unacked = 0
        log.debug("%s: re-punching %s", self.client.id, self.peer)
        self.client.register_udp()
        self.client.punch_udp(self.peer)


class PeerClient:
    def __init__(self, host: Host, peer_id: str, server: Endpoint, *, port: int = 4321,
                 hello_interval: int = HELLO_INTERVAL, connect_retry: int = CONNECT_RETRY,
                 deadline: int = DEFAULT_DEADLINE, connect_delay: int = 0,
                 tcp_sequential: bool = False, doomed_wait: int = 2 * SECOND,
                 predict: bool = False, probe_ports=()):
        self.host = host
        self.net = host.net
        self.id = PeerId(peer_id)
        self.server = server.with_transport(Transport.UDP)
        self.port = port
        self.hello_interval = hello_interval
        self.connect_retry = connect_retry
        self.deadline = deadline
        self.connect_delay = connect_delay
        self.tcp_sequential = tcp_sequential
        self.doomed_wait = doomed_wait
        self.predict = predict
        self.probe_ports = tuple(probe_ports)
        self.rng = self.net.rng(f"client/{peer_id}")
        self.public: dict[Transport, Optional[Endpoint]] = {Transport.UDP: None, Transport.TCP: None}
        self.observations: list[tuple[Endpoint, Endpoint]] = []
        self.sessions: dict[tuple, PunchSession] = {}
        self.history: list[PunchSession] = []
        self._by_nonce: dict[tuple, PunchSession] = {}
        self.inbox: list[tuple[str, bytes]] = []
        self.errors: list[Error] = []
        self.strays = 0
        self.keepalives: dict[str, KeepAlive] = {}
        self.server_stream: Optional[TcpConn] = None
        self._listener = None
        self._buffers: dict[TcpConn, LineBuffer] = {}
        self._hello_sent: dict[TcpConn, set] = {}

    def __repr__(self):
        return f"<PeerClient {self.id} on {self.host.name}:{self.port}>"

    @property
    def private(self) -> Endpoint:
        return self.host.endpoint(self.port)

    def behind_nat(self, transport: Transport = Transport.UDP) -> Optional[bool]:
        pub = self.public[transport]
        if pub is None:
            return None
        return pub != self.host.endpoint(self.port, transport)

    # -- sessions -----------------------------------------------------------

    def _new_session(self, peer: str, transport: Transport, role: str,
                     deadline: Optional[int] = None, mode: str = "parallel") -> PunchSession:
        old = self.sessions.get((transport, peer))
        if old is not None and not old.done:
            self._abandon(old)
        s = PunchSession(self, peer, transport, role,
                         self.deadline if deadline is None else deadline, mode)
        self.sessions[(transport, peer)] = s
        self.history.append(s)
        s._timers.append(self.net.schedule(s.deadline - self.net.now, self._expire, s))
        return s

    def _abandon(self, s: PunchSession):
        s._cancel_timers()
        self._close_attempts(s, keep=None)
        s.state = PunchState.FAILED
        s._finish(PunchOutcome(False, None, self.net.now - s.started, s.retries_used))

    def _expire(self, s: PunchSession):
        if s.done:
            return
        log.debug("%s: session to %s expired", self.id, s.peer)
        self._abandon(s)

    def _path(self, s: PunchSession, remote: Endpoint) -> Path:
        if s.mode == "reversal":
            return Path.REVERSAL
        if remote == s.private_candidate and remote != s.public_candidate:
            return Path.PRIVATE
        own = self.public[s.transport]
        if own is not None and remote.address == own.address and self.behind_nat(s.transport):
            return Path.HAIRPIN
        return Path.PUBLIC

    def _lock(self, s: PunchSession, remote: Endpoint, stream: Optional[TcpConn] = None):
        s.state = PunchState.LOCKED
        s.locked_remote = remote
        s.stream = stream
        s._cancel_timers()
        if stream is not None:
            self._close_attempts(s, keep=stream)
        log.debug("%s: locked %s at %s", self.id, s.peer, remote)
        s._finish(PunchOutcome(True, self._path(s, remote), self.net.now - s.started,
                               s.retries_used, remote))

    def _on_forward(self, msg: Forward, transport: Transport):
        s = self.sessions.get((transport, msg.peer))
        if s is None or s.state is not PunchState.REQUESTING:
            mode = "sequential" if (transport is Transport.TCP and self.tcp_sequential) else "parallel"
            s = self._new_session(msg.peer, transport, "responder", mode=mode)
        s.nonce = msg.nonce
        self._by_nonce[(transport, msg.nonce)] = s
        s.public_candidate = msg.public_ep
        s.private_candidate = msg.private_ep
        cands = [msg.public_ep]
        if msg.private_ep != msg.public_ep:
            cands.append(msg.private_ep)
        if s.predictive or self.predict:
            cands.extend(ep for ep in msg.predicted if ep not in cands)
        s.candidates = cands
        s.attempts = {c: 0 for c in cands}
        s.state = PunchState.PUNCHING
        if transport is Transport.UDP:
            self._hello_round(s)
        else:
            self._tcp_start(s)

    def _on_error(self, msg: Error, transport: Transport):
        self.errors.append(msg)
        s = self.sessions.get((transport, msg.detail))
        if s is not None and s.state is PunchState.REQUESTING:
            self._abandon(s)

    def _on_relay_deliver(self, msg: RelayDeliver, transport: Transport):
        try:
            request = json.loads(msg.payload)
            target = request["reverse"] if isinstance(request, dict) else None
        except (ValueError, KeyError):
            target = None
        if target is None:
            self.inbox.append((msg.sender, msg.payload))
            return
        # connection-reversal request: connect back to the requester
        s = self._new_session(msg.sender, Transport.TCP, "responder", mode="reversal")
        s.nonce = bytes.fromhex(request["nonce"])
        self._by_nonce[(Transport.TCP, s.nonce)] = s
        ep = parse_endpoint(target, Transport.TCP)
        s.public_candidate = s.private_candidate = ep
        s.candidates = [ep]
        s.attempts = {ep: 0}
        s.state = PunchState.PUNCHING
        self._connect_all(s)

    # -- UDP ----------------------------------------------------------------

    def _ensure_udp(self):
        if self.port not in self.host.udp:
            self.host.bind_udp(self.port, self._on_datagram)

    def _send_udp(self, dst: Endpoint, msg):
        self.host.send_datagram(self.port, dst, encode_message(msg))

    def register_udp(self):
        """Register (or refresh) with the server; with ``predict``, also probe."""
        self._ensure_udp()
        reg = Register(self.id, self.private)
        self._send_udp(self.server, reg)
        if self.predict:
            for port in self.probe_ports:
                self._send_udp(Endpoint(self.server.address, port), reg)

    def relay(self, peer: str, payload: bytes, transport: Transport = Transport.UDP):
        """Fallback path: ask the server to carry ``payload`` to ``peer``."""
        msg = Relay(peer, payload)
        if transport is Transport.UDP:
            self._send_udp(self.server, msg)
        else:
            self._require_stream().send(encode_message(msg, stream=True))

    def punch_udp(self, peer: str, deadline: Optional[int] = None,
                  predictive: bool = False) -> PunchSession:
        self._ensure_udp()
        s = self._new_session(peer, Transport.UDP, "requester", deadline)
        s.predictive = predictive
        self._send_udp(self.server, Connect(self.id, peer, self.rng.randbytes(16)))
        return s

    def punch_udp_predictive(self, peer: str, deadline: Optional[int] = None) -> PunchSession:
        """As :meth:`punch_udp`, adding the server's predicted ports of ``peer``.

        When the server had no consistent stride for the peer the FORWARD
        carries no predictions and this is a plain punch.
        """
        return self.punch_udp(peer, deadline, predictive=True)

    def maintain_udp(self, session_or_peer, interval: int = KEEPALIVE_INTERVAL) -> KeepAlive:
        peer = getattr(session_or_peer, "peer", session_or_peer)
        s = self.sessions.get((Transport.UDP, peer))
        if s is None or s.state is not PunchState.LOCKED:
            raise UsageError("keep-alives need a locked UDP session")
        old = self.keepalives.pop(peer, None)
        if old:
            old.stop()
        ka = KeepAlive(self, peer, interval)
        self.keepalives[peer] = ka
        return ka

    def _hello_round(self, s: PunchSession):
        if s.state is not PunchState.PUNCHING:
            return
        if s.rounds:
            s.retries_used += 1
        s.rounds += 1
        hello = Hello(self.id, s.nonce)
        for c in s.candidates:
            self._send_udp(c, hello)
            s.attempts[c] = s.attempts.get(c, 0) + 1
        s._timers.append(self.net.schedule(self.hello_interval, self._hello_round, s))

    def _from_server(self, src: Endpoint) -> bool:
        return src.address == self.server.address

    def _on_datagram(self, pkt: Packet):
        try:
            msg = decode_message(pkt.payload, Transport.UDP)
        except DecodeError:
            self.strays += 1
            return
        if isinstance(msg, (RegisterOk, Forward, Error, RelayDeliver)) and not self._from_server(pkt.src):
            self.strays += 1
            return
        if isinstance(msg, RegisterOk):
            self.observations.append((pkt.src, msg.public_ep))
            if pkt.src == self.server:
                self.public[Transport.UDP] = msg.public_ep
        elif isinstance(msg, Forward):
            self._on_forward(msg, Transport.UDP)
        elif isinstance(msg, Error):
            self._on_error(msg, Transport.UDP)
        elif isinstance(msg, RelayDeliver):
            self._on_relay_deliver(msg, Transport.UDP)
        elif isinstance(msg, Hello):
            s = self._by_nonce.get((Transport.UDP, msg.nonce))
            if s is None or msg.sender != s.peer:
                self._stray(s)
                return
            self._send_udp(pkt.src, HelloAck(self.id, msg.nonce))
        elif isinstance(msg, HelloAck):
            s = self._by_nonce.get((Transport.UDP, msg.nonce))
            if s is None or msg.sender != s.peer or pkt.src not in s.candidates:
                self._stray(s)
                return
            s.responded.setdefault(pkt.src, self.net.now)
            if s.state is PunchState.PUNCHING:
                self._lock(s, pkt.src)
            elif s.state is PunchState.LOCKED and pkt.src == s.locked_remote:
                ka = self.keepalives.get(s.peer)
                if ka is not None:
                    ka.acked()
        else:
            self.strays += 1

    def _stray(self, s: Optional[PunchSession]):
        self.strays += 1
        if s is not None:
            s.strays += 1

    # -- TCP ----------------------------------------------------------------

    @property
    def server_tcp(self) -> Endpoint:
        return self.server.with_transport(Transport.TCP)

    def _require_stream(self) -> TcpConn:
        if self.server_stream is None or not self.server_stream.established:
            raise UsageError(f"{self.id}: no connection to the rendezvous server")
        return self.server_stream

    def register_tcp(self) -> TcpConn:
        """Open a connection to the server from the local port and register."""
        buf = LineBuffer()

        def established(conn):
            conn.send(encode_message(Register(self.id, self.host.endpoint(self.port, Transport.TCP)),
                                     stream=True))

        def data(conn, chunk):
            for line in buf.feed(chunk):
                try:
                    msg = decode_message(line, Transport.TCP)
                except DecodeError:
                    self.strays += 1
                    continue
                if isinstance(msg, RegisterOk):
                    self.public[Transport.TCP] = msg.public_ep
                elif isinstance(msg, Forward):
                    self._on_forward(msg, Transport.TCP)
                elif isinstance(msg, Error):
                    self._on_error(msg, Transport.TCP)
                elif isinstance(msg, RelayDeliver):
                    self._on_relay_deliver(msg, Transport.TCP)

        self.server_stream = self.host.tcp_open(
            self.port, self.server_tcp, on_established=established, on_data=data,
            on_closed=self._on_server_closed, on_failed=lambda c, why: None)
        return self.server_stream

    def _on_server_closed(self, conn: TcpConn, reason: str):
        if conn is self.server_stream:
            self.server_stream = None
        # sequential punching: the server hanging up is the go signal
        for s in list(self.sessions.values()):
            if s.transport is Transport.TCP and s.awaiting_signal and s.state is PunchState.PUNCHING:
                s.awaiting_signal = False
                self._connect_all(s)

    def punch_tcp(self, peer: str, deadline: Optional[int] = None) -> PunchSession:
        s = self._new_session(peer, Transport.TCP, "requester", deadline)
        self._require_stream().send(encode_message(Connect(self.id, peer, self.rng.randbytes(16)),
                                                   stream=True))
        return s

    def punch_tcp_sequential(self, peer: str, deadline: Optional[int] = None) -> PunchSession:
        """Request without listening; connect only once the server hangs up.

        The peer must run with ``tcp_sequential=True``.  Both clients' server
        connections are used up and need :meth:`register_tcp` again.
        """
        s = self._new_session(peer, Transport.TCP, "requester", deadline, mode="sequential")
        self._require_stream().send(encode_message(Connect(self.id, peer, self.rng.randbytes(16)),
                                                   stream=True))
        return s

    def connection_reversal(self, peer: str, deadline: Optional[int] = None) -> PunchSession:
        """Ask ``peer`` (via the server) to connect back to this client."""
        own = self.public[Transport.TCP]
        if own is None:
            raise UsageError(f"{self.id}: not registered over TCP")
        if own != self.host.endpoint(self.port, Transport.TCP):
            raise NotApplicable(f"{self.id} is behind a NAT; reversal cannot help")
        s = self._new_session(peer, Transport.TCP, "requester", deadline, mode="reversal")
        s.nonce = self.rng.randbytes(16)
        self._by_nonce[(Transport.TCP, s.nonce)] = s
        s.state = PunchState.PUNCHING
        self._ensure_listener()
        payload = json.dumps({"reverse": str(own), "nonce": s.nonce.hex()},
                             separators=(",", ":")).encode()
        self.relay(peer, payload, Transport.TCP)
        return s

    def _ensure_listener(self):
        if self._listener is None or self._listener.closed:
            self._listener = self.host.tcp_listen(self.port, self._on_p2p_established)

    def _tcp_start(self, s: PunchSession):
        if s.mode == "sequential":
            if s.role == "requester":
                s.awaiting_signal = True
                return
            s.doomed = True
            self._connect_all(s)
            s._timers.append(self.net.schedule(self.doomed_wait, self._doomed_over, s))
            return
        self._ensure_listener()
        if self.connect_delay:
            s._timers.append(self.net.schedule(self.connect_delay, self._connect_all, s))
        else:
            self._connect_all(s)

    def _doomed_over(self, s: PunchSession):
        if not s.doomed or s.state is not PunchState.PUNCHING:
            return
        s.doomed = False
        for c, conn in list(s.conns.items()):
            if conn.state is TcpState.SYN_SENT:
                conn.close()
                del s.conns[c]
        if self.server_stream is not None:
            self.server_stream.close()
            self.server_stream = None
        self._ensure_listener()

    def _connect_all(self, s: PunchSession):
        for c in s.candidates:
            self._attempt(s, c)

    def _attempt(self, s: PunchSession, c: Endpoint):
        if s.state is not PunchState.PUNCHING:
            return
        existing = s.conns.get(c)
        if existing is not None and existing.state is not TcpState.CLOSED:
            return
        try:
            conn = self.host.tcp_open(
                self.port, c, on_established=self._on_p2p_established,
                on_failed=lambda conn, why: self._on_attempt_failed(s, c, why))
        except AddressInUse:
            return  # an accepted stream already owns this 4-tuple
        s.conns[c] = conn
        s.attempts[c] = s.attempts.get(c, 0) + 1

    def _on_attempt_failed(self, s: PunchSession, c: Endpoint, why: Failure):
        if s.state is not PunchState.PUNCHING:
            return
        if s.doomed:
            if all(conn.state is TcpState.CLOSED for conn in s.conns.values()):
                self._doomed_over(s)
            return
        if self.net.now + self.connect_retry >= s.deadline:
            return
        s.retries_used += 1
        s._timers.append(self.net.schedule(self.connect_retry, self._attempt, s, c))

    def _punching_tcp(self):
        return [s for s in self.sessions.values()
                if s.transport is Transport.TCP and s.state is PunchState.PUNCHING and s.nonce]

    def _on_p2p_established(self, conn: TcpConn):
        self._buffers[conn] = LineBuffer()
        self._hello_sent[conn] = set()
        conn.on_data = self._on_p2p_data
        conn.on_closed = self._on_p2p_closed
        for s in self._punching_tcp():
            self._send_stream_hello(conn, s)

    def _send_stream_hello(self, conn: TcpConn, s: PunchSession):
        sent = self._hello_sent.setdefault(conn, set())
        if s.nonce in sent:
            return
        sent.add(s.nonce)
        conn.send(encode_message(Hello(self.id, s.nonce), stream=True))

    def _on_p2p_data(self, conn: TcpConn, data: bytes):
        buf = self._buffers.setdefault(conn, LineBuffer())
        for line in buf.feed(data):
            try:
                msg = decode_message(line, Transport.TCP)
            except DecodeError:
                continue
            if not isinstance(msg, (Hello, HelloAck)):
                continue
            s = self._by_nonce.get((Transport.TCP, msg.nonce))
            if s is None or msg.sender != s.peer:
                # failed authentication: drop this stream, keep waiting for others
                self._stray(s)
                conn.close()
                return
            if isinstance(msg, Hello):
                conn.send(encode_message(HelloAck(self.id, msg.nonce), stream=True))
                if s.state is PunchState.PUNCHING:
                    self._send_stream_hello(conn, s)
            else:
                if conn not in s.authenticated:
                    s.authenticated.append(conn)
                s.responded.setdefault(conn.key.remote, self.net.now)
                if s.state is PunchState.PUNCHING:
                    self._lock(s, conn.key.remote, conn)

    def _on_p2p_closed(self, conn: TcpConn, reason: str):
        self._buffers.pop(conn, None)
        for s in list(self.sessions.values()):
            if conn in s.authenticated:
                s.authenticated.remove(conn)
            if s.stream is conn and s.state is PunchState.LOCKED:
                # the peer kept a different stream; follow it if we have one
                alive = [c for c in s.authenticated if c.established]
                if alive:
                    s.stream = alive[0]
                    s.locked_remote = alive[0].key.remote
                else:
                    s.stream = None

    def _close_attempts(self, s: PunchSession, keep: Optional[TcpConn]):
        for c, conn in list(s.conns.items()):
            if conn is keep:
                continue
            if conn.state is TcpState.SYN_SENT:
                conn.close()
            elif conn.established and s.role == "requester":
                conn.close()
        if s.role == "requester" and keep is not None:
            for conn in list(s.authenticated):
                if conn is not keep and conn.established:
                    conn.close()
        if self._listener is not None and not self._punching_tcp():
            self._listener.close()
            self._listener = None
