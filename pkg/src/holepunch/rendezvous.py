"""Rendezvous server: registration, connection-request forwarding, relaying.

The request handlers (:meth:`RendezvousServer.handle_register`,
:meth:`~RendezvousServer.handle_connect`, :meth:`~RendezvousServer.relay`)
are plain functions of the registration tables and can be unit tested
without a network.  :meth:`RendezvousServer.start` wires them to a simulated
host on one UDP and one TCP port.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from .core import (Connect, DecodeError, Endpoint, Error, Forward, LineBuffer, Register,
                   RegisterOk, Relay, RelayDeliver, Transport, decode_message, encode_message)
from .natbox import PredictionUnavailable, predict_next_port
from .simnet import SECOND, Host, Packet, TcpConn

log = logging.getLogger(__name__)

DEFAULT_PORT = 1234


class RendezvousError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail

    def reply(self) -> Error:
        return Error(self.code, self.detail)


@dataclass
class RendezvousRecord:
    id: str
    private_ep: Endpoint
    public_ep: Endpoint
    transport: Transport
    last_seen: int
    # (server port, observed public endpoint) per probe, in arrival order
    observations: list = field(default_factory=list)

    @property
    def behind_nat(self) -> bool:
        return self.private_ep != self.public_ep


class RendezvousServer:
    def __init__(self, port: int = DEFAULT_PORT, probe_ports=(), stale_after: float = 300.0,
                 rng: Optional[random.Random] = None):
        self.port = port
        self.probe_ports = tuple(probe_ports)
        self.stale_after = round(stale_after * SECOND)
        self.rng = rng or random.Random(0)
        self.tables: dict[Transport, dict[str, RendezvousRecord]] = {
            Transport.UDP: {}, Transport.TCP: {}}
        self.host: Optional[Host] = None
        self.streams: dict[str, TcpConn] = {}
        # target id -> (requester id, time) for TCP requests awaiting the
        # target's hang-up (sequential punching)
        self.pending: dict[str, tuple[str, int]] = {}
        self.relayed = 0

    # -- request handlers ---------------------------------------------------

    def handle_register(self, msg: Register, observed_src: Endpoint, now: int = 0,
                        server_port: Optional[int] = None) -> RegisterOk:
        table = self.tables[observed_src.transport]
        server_port = self.port if server_port is None else server_port
        private = msg.private_ep.with_transport(observed_src.transport)
        if server_port == self.port:
            table[msg.id] = RendezvousRecord(msg.id, private, observed_src,
                                             observed_src.transport, now,
                                             [(server_port, observed_src)])
        else:
            rec = table.get(msg.id)
            if rec is not None:
                rec.observations.append((server_port, observed_src))
                rec.last_seen = now
        return RegisterOk(observed_src)

    def _live(self, peer: str, transport: Transport, now: int) -> RendezvousRecord:
        rec = self.tables[transport].get(peer)
        if rec is None:
            raise RendezvousError("unknown-peer", peer)
        if now - rec.last_seen > self.stale_after:
            raise RendezvousError("stale-peer", peer)
        return rec

    def predictions(self, rec: RendezvousRecord) -> tuple[Endpoint, ...]:
        if len(rec.observations) < 1 + len(self.probe_ports) or not self.probe_ports:
            return ()
        if len({ep.address for _, ep in rec.observations}) != 1:
            return ()
        try:
            port = predict_next_port([(sp, ep.port) for sp, ep in rec.observations])
        except PredictionUnavailable:
            return ()
        if port == rec.public_ep.port:
            return ()
        return (Endpoint(rec.public_ep.address, port, rec.transport),)

    def handle_connect(self, msg: Connect, transport: Transport, now: int = 0):
        """Return ``(forward_to_requester, forward_to_target)``.

        Both messages carry the same freshly drawn nonce.
        """
        requester = self.tables[transport].get(msg.id)
        if requester is None:
            raise RendezvousError("not-registered", msg.id)
        requester.last_seen = now
        target = self._live(msg.peer, transport, now)
        nonce = self.rng.randbytes(16)
        to_requester = Forward(target.id, target.public_ep, target.private_ep, nonce,
                               self.predictions(target))
        to_target = Forward(requester.id, requester.public_ep, requester.private_ep, nonce,
                            self.predictions(requester))
        return to_requester, to_target

    def relay(self, msg: Relay, sender: str, transport: Transport, now: int = 0) -> RelayDeliver:
        self._live(msg.to, transport, now)
        self.relayed += 1
        return RelayDeliver(sender, msg.payload)

    # -- network glue -------------------------------------------------------

    def start(self, host: Host):
        self.host = host
        for port in (self.port,) + self.probe_ports:
            host.bind_udp(port, self._on_datagram)
        host.tcp_listen(self.port, self._on_accept)
        return self

    def _sender_id(self, src: Endpoint) -> Optional[str]:
        for rec in self.tables[src.transport].values():
            if rec.public_ep == src:
                return rec.id
        return None

    def _send_udp(self, server_port: int, dst: Endpoint, msg):
        self.host.send_datagram(server_port, dst, encode_message(msg))

    def _on_datagram(self, pkt: Packet):
        now = self.host.net.now
        server_port = pkt.dst.port
        try:
            msg = decode_message(pkt.payload, Transport.UDP)
        except DecodeError as exc:
            log.debug("bad datagram from %s: %s", pkt.src, exc)
            return
        try:
            if isinstance(msg, Register):
                self._send_udp(server_port, pkt.src,
                               self.handle_register(msg, pkt.src, now, server_port))
            elif isinstance(msg, Connect):
                fwd_a, fwd_b = self.handle_connect(msg, Transport.UDP, now)
                self._send_udp(self.port, pkt.src, fwd_a)
                self._send_udp(self.port, self.tables[Transport.UDP][msg.peer].public_ep, fwd_b)
            elif isinstance(msg, Relay):
                sender = self._sender_id(pkt.src)
                if sender is None:
                    raise RendezvousError("not-registered", str(pkt.src))
                self.tables[Transport.UDP][sender].last_seen = now
                deliver = self.relay(msg, sender, Transport.UDP, now)
                self._send_udp(self.port, self.tables[Transport.UDP][msg.to].public_ep, deliver)
        except RendezvousError as exc:
            self._send_udp(server_port, pkt.src, exc.reply())

    def _on_accept(self, conn: TcpConn):
        buf = LineBuffer()
        conn.on_data = lambda c, data: self._on_stream_data(c, buf, data)
        conn.on_closed = self._on_stream_closed

    def _stream_id(self, conn: TcpConn) -> Optional[str]:
        for peer, c in self.streams.items():
            if c is conn:
                return peer
        return None

    def _on_stream_data(self, conn: TcpConn, buf: LineBuffer, data: bytes):
        now = self.host.net.now
        for line in buf.feed(data):
            try:
                msg = decode_message(line, Transport.TCP)
            except DecodeError as exc:
                log.debug("bad stream message: %s", exc)
                continue
            try:
                self._on_stream_message(conn, msg, now)
            except RendezvousError as exc:
                conn.send(encode_message(exc.reply(), stream=True))

    def _stream_for(self, peer: str) -> TcpConn:
        conn = self.streams.get(peer)
        if conn is None or not conn.established:
            raise RendezvousError("stale-peer", peer)
        return conn

    def _on_stream_message(self, conn: TcpConn, msg, now: int):
        if isinstance(msg, Register):
            reply = self.handle_register(msg, conn.key.remote, now)
            self.streams[msg.id] = conn
            conn.send(encode_message(reply, stream=True))
        elif isinstance(msg, Connect):
            fwd_a, fwd_b = self.handle_connect(msg, Transport.TCP, now)
            target = self._stream_for(msg.peer)
            conn.send(encode_message(fwd_a, stream=True))
            target.send(encode_message(fwd_b, stream=True))
            self.pending[msg.peer] = (msg.id, now)
        elif isinstance(msg, Relay):
            sender = self._stream_id(conn)
            if sender is None:
                raise RendezvousError("not-registered", str(conn.key.remote))
            self.tables[Transport.TCP][sender].last_seen = now
            deliver = self.relay(msg, sender, Transport.TCP, now)
            self._stream_for(msg.to).send(encode_message(deliver, stream=True))

    def _on_stream_closed(self, conn: TcpConn, reason: str):
        peer = self._stream_id(conn)
        if peer is None:
            return
        del self.streams[peer]
        pending = self.pending.pop(peer, None)
        if pending is None:
            return
        requester, since = pending
        if self.host.net.now - since > 30 * SECOND:
            return
        # the target hung up after its doomed attempt: signal the requester
        other = self.streams.pop(requester, None)
        if other is not None and other.established:
            other.close()
