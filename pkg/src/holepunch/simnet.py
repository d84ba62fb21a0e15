"""Deterministic discrete-event network.

Time is an integer count of virtual nanoseconds.  Every node (host or NAT
interface) attaches to one realm through an egress :class:`Link`; a packet
sent at ``t`` over a link with latency ``L`` is handled at ``t + L``.  Events
with equal fire time run in scheduling order, so a scenario replayed with the
same seed produces the same trace record for record.

Routing inside a realm is by destination address: a host holding the
address, else a NAT whose public side sits in the realm, else the realm's
uplink NAT (its private side), else the packet is dropped.
"""
from __future__ import annotations

import enum
import heapq
import io
import json
import logging
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .core import DecodeError, Endpoint, SessionKey, Transport, decode_message, format_address

log = logging.getLogger(__name__)

SECOND = 1_000_000_000
MS = 1_000_000

GLOBAL = "global"


def seconds(value: float) -> int:
    """Convert seconds to virtual nanoseconds."""
    return round(value * SECOND)


class SimError(RuntimeError):
    pass


class UsageError(SimError):
    pass


class AddressInUse(SimError):
    pass


# -- clock ------------------------------------------------------------------

class Timer:
    __slots__ = ("fire_time", "seq", "action", "args", "cancelled")

    def __init__(self, fire_time, seq, action, args):
        self.fire_time = fire_time
        self.seq = seq
        self.action = action
        self.args = args
        self.cancelled = False

    def cancel(self):
        self.cancelled = True

    def __lt__(self, other):
        return (self.fire_time, self.seq) < (other.fire_time, other.seq)


class VirtualClock:
    """Event queue ordered by (fire_time, seq)."""

    def __init__(self):
        self.now = 0
        self._seq = 0
        self._queue: list[Timer] = []

    def schedule(self, delay: int, action: Callable, *args) -> Timer:
        if delay < 0:
            raise SimError(f"negative delay {delay}")
        self._seq += 1
        timer = Timer(self.now + delay, self._seq, action, args)
        heapq.heappush(self._queue, timer)
        return timer

    def run_until(self, t: int) -> int:
        if t < self.now:
            raise SimError(f"cannot run backwards to {t} (now {self.now})")
        fired = 0
        while self._queue and self._queue[0].fire_time <= t:
            timer = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = timer.fire_time
            timer.action(*timer.args)
            fired += 1
        self.now = t
        return fired

    def pending(self) -> int:
        return sum(1 for t in self._queue if not t.cancelled)


# -- packets ----------------------------------------------------------------

class TcpFlags(enum.IntFlag):
    NONE = 0
    SYN = 1
    ACK = 2
    RST = 4


def flags_text(flags: TcpFlags) -> str:
    return ",".join(name for name, bit in (("SYN", TcpFlags.SYN), ("ACK", TcpFlags.ACK),
                                            ("RST", TcpFlags.RST)) if flags & bit)


@dataclass(frozen=True)
class Packet:
    src: Endpoint
    dst: Endpoint
    realm: str
    transport: Transport = Transport.UDP
    flags: TcpFlags = TcpFlags.NONE
    payload: bytes = b""
    seq: int = 0
    ack: int = 0

    def __post_init__(self):
        if self.transport is Transport.UDP and self.flags:
            raise ValueError("UDP packets carry no TCP flags")
        if self.flags & TcpFlags.RST and self.payload:
            raise ValueError("RST packets carry no payload")

    @property
    def is_syn(self) -> bool:
        return bool(self.flags & TcpFlags.SYN) and not self.flags & TcpFlags.ACK


def summarize(pkt: Packet) -> str:
    if not pkt.payload:
        return ""
    first = pkt.payload.split(b"\n", 1)[0]
    try:
        msg = decode_message(first, pkt.transport)
    except DecodeError:
        return f"{len(pkt.payload)}B"
    return type(msg).__name__.lower()


# -- links ------------------------------------------------------------------

@dataclass
class LinkFault:
    """Drop the first ``count`` packets matching the filter."""

    dst: Optional[Endpoint] = None
    syn_only: bool = False
    count: int = 1

    def matches(self, pkt: Packet) -> bool:
        if self.count <= 0:
            return False
        if self.dst is not None and (pkt.dst.address, pkt.dst.port) != (self.dst.address, self.dst.port):
            return False
        if self.syn_only and not pkt.is_syn:
            return False
        return True


@dataclass
class Link:
    """Egress attachment of one node into one realm."""

    name: str
    realm: str
    latency: int = 10 * MS
    loss: float = 0.0
    faults: list[LinkFault] = field(default_factory=list)
    rng: random.Random = field(default_factory=random.Random, repr=False)


# -- realms -----------------------------------------------------------------

@dataclass
class Realm:
    realm_id: str
    description: str = ""
    hosts: dict = field(default_factory=dict)        # address -> Host
    nat_publics: dict = field(default_factory=dict)  # address -> NatBox (outside side here)
    uplink: object = None                             # NatBox whose inside is this realm


# -- TCP --------------------------------------------------------------------

class TcpState(enum.Enum):
    CLOSED = "CLOSED"
    LISTEN = "LISTEN"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"


class Failure(enum.Enum):
    RESET = "reset"
    TIMEOUT = "timeout"
    UNREACHABLE = "unreachable"


class TcpConn:
    """One side of a simplified RFC 793 connection.

    Callbacks: ``on_established(conn)``, ``on_failed(conn, Failure)``,
    ``on_data(conn, bytes)``, ``on_closed(conn, reason)``.
    """

    def __init__(self, host: "Host", key: SessionKey, syn_tries: int, syn_interval: int):
        self.host = host
        self.key = key
        self.state = TcpState.CLOSED
        self.syn_retries_left = syn_tries - 1
        self.syn_interval = syn_interval
        self.iss = host.rng.randrange(1 << 32)
        self.irs: Optional[int] = None
        self.snd_nxt = self.iss + 1
        self.listener: Optional[Listener] = None
        self.failure: Optional[Failure] = None
        self.on_established: Optional[Callable] = None
        self.on_failed: Optional[Callable] = None
        self.on_data: Optional[Callable] = None
        self.on_closed: Optional[Callable] = None
        self._timer: Optional[Timer] = None
        self.sent_syn = False
        self.syn_acked = False

    def __repr__(self):
        return f"<TcpConn {self.host.name} {self.key} {self.state.name}>"

    @property
    def established(self) -> bool:
        return self.state is TcpState.ESTABLISHED

    # sending
    def _emit(self, flags, payload=b"", seq=None, ack=None):
        self.host._send_tcp(self.key, flags, payload,
                            self.iss if seq is None else seq,
                            0 if ack is None else ack)

    def _send_syn(self):
        self.sent_syn = True
        self._emit(TcpFlags.SYN, seq=self.iss)

    def _send_synack(self):
        self.sent_syn = True
        self._emit(TcpFlags.SYN | TcpFlags.ACK, seq=self.iss, ack=self.irs + 1)

    def _arm(self):
        if self._timer:
            self._timer.cancel()
        self._timer = self.host.net.clock.schedule(self.syn_interval, self._on_timer)

    def _on_timer(self):
        self._timer = None
        if self.state not in (TcpState.SYN_SENT, TcpState.SYN_RCVD):
            return
        if self.syn_retries_left <= 0:
            self._fail(Failure.TIMEOUT)
            return
        self.syn_retries_left -= 1
        if self.state is TcpState.SYN_SENT:
            self._send_syn()
        else:
            self._send_synack()
        self._arm()

    def send(self, data: bytes):
        if self.state is not TcpState.ESTABLISHED:
            raise UsageError(f"send on {self.state.name} connection")
        self._emit(TcpFlags.ACK, data, seq=self.snd_nxt, ack=self.irs + 1)
        self.snd_nxt += len(data)

    def close(self):
        """Abort the connection; an RST is sent unless still in SYN_SENT."""
        if self.state in (TcpState.SYN_RCVD, TcpState.ESTABLISHED):
            self._emit(TcpFlags.RST, seq=self.snd_nxt)
        self._teardown()

    def _teardown(self):
        if self._timer:
            self._timer.cancel()
            self._timer = None
        self.state = TcpState.CLOSED
        if self.host.conns.get(self.key) is self:
            del self.host.conns[self.key]

    def _fail(self, reason: Failure):
        was_listener_child = self.listener is not None
        self.failure = reason
        self._teardown()
        self.host.net.record("tcp", self.host.realm, self.key.local, self.key.remote,
                             info=f"fail:{reason.value}")
        if not was_listener_child and self.on_failed:
            self.on_failed(self, reason)

    def _establish(self):
        if self._timer:
            self._timer.cancel()
            self._timer = None
        self.state = TcpState.ESTABLISHED
        self.host.net.record("tcp", self.host.realm, self.key.local, self.key.remote,
                             info="established")
        if self.listener is not None:
            self.listener._deliver(self)
        elif self.on_established:
            self.on_established(self)

    # receiving
    def _receive(self, pkt: Packet):
        flags = pkt.flags
        if flags & TcpFlags.RST:
            if self.state is TcpState.ESTABLISHED:
                self._teardown()
                if self.on_closed:
                    self.on_closed(self, "reset")
            else:
                self._fail(Failure.RESET)
            return
        if self.state is TcpState.SYN_SENT:
            if flags & TcpFlags.SYN and flags & TcpFlags.ACK:
                if pkt.ack != self.iss + 1:
                    self._emit(TcpFlags.RST, seq=pkt.ack)
                    return
                self.irs = pkt.seq
                self.syn_acked = True
                self._emit(TcpFlags.ACK, seq=self.snd_nxt, ack=self.irs + 1)
                self._establish()
            elif flags & TcpFlags.SYN:
                # simultaneous open: reply SYN-ACK replaying our SYN
                self.irs = pkt.seq
                self.state = TcpState.SYN_RCVD
                self._send_synack()
                self._arm()
            return
        if self.state is TcpState.SYN_RCVD:
            if flags & TcpFlags.ACK and pkt.ack == self.iss + 1:
                self.syn_acked = True
                if flags & TcpFlags.SYN:
                    self._emit(TcpFlags.ACK, seq=self.snd_nxt, ack=self.irs + 1)
                self._establish()
                if pkt.payload and self.on_data:
                    self.on_data(self, pkt.payload)
            elif flags & TcpFlags.SYN:
                self._send_synack()
            return
        if self.state is TcpState.ESTABLISHED:
            if flags & TcpFlags.SYN:
                # peer retransmitted its SYN-ACK; re-acknowledge
                self._emit(TcpFlags.ACK, seq=self.snd_nxt, ack=self.irs + 1)
                return
            if pkt.payload and self.on_data:
                self.on_data(self, pkt.payload)


class Listener:
    def __init__(self, host: "Host", local: Endpoint, on_accept: Callable):
        self.host = host
        self.local = local
        self.on_accept = on_accept
        self.accepted: list[TcpConn] = []
        # sources of every SYN that reached this listener, completed or not
        self.syn_sources: list[Endpoint] = []
        self.closed = False

    def _deliver(self, conn: TcpConn):
        self.accepted.append(conn)
        conn.listener = None
        if self.on_accept:
            self.on_accept(conn)

    def close(self):
        self.closed = True
        if self.host.listeners.get(self.local.port) is self:
            del self.host.listeners[self.local.port]


# -- hosts ------------------------------------------------------------------

class Host:
    """An end host with a UDP demultiplexer and a TCP stack.

    Any number of connections plus one listener may share a local TCP port,
    as with ``SO_REUSEADDR``; only a duplicate session 4-tuple is refused.
    """

    def __init__(self, net: "Network", name: str, realm: str, address: int, link: Link):
        self.net = net
        self.name = name
        self.realm = realm
        self.address = address
        self.link = link
        self.udp: dict[int, Callable] = {}
        self.listeners: dict[int, Listener] = {}
        self.conns: dict[SessionKey, TcpConn] = {}
        self.rng = net.rng(f"host/{name}")

    def __repr__(self):
        return f"<Host {self.name} {format_address(self.address)}@{self.realm}>"

    def endpoint(self, port: int, transport: Transport = Transport.UDP) -> Endpoint:
        return Endpoint(self.address, port, transport)

    # UDP
    def bind_udp(self, port: int, handler: Callable[[Packet], None]) -> Endpoint:
        if port in self.udp:
            raise UsageError(f"{self.name}: UDP port {port} already bound")
        self.udp[port] = handler
        return self.endpoint(port)

    def unbind_udp(self, port: int):
        self.udp.pop(port, None)

    def send_datagram(self, src_port: int, dst: Endpoint, payload: bytes):
        self.net.send_datagram(self, self.endpoint(src_port), dst, payload)

    # TCP
    def tcp_listen(self, port: int, on_accept: Callable[[TcpConn], None]) -> Listener:
        return self.net.tcp_listen(self, self.endpoint(port, Transport.TCP), on_accept)

    def tcp_open(self, port: int, remote: Endpoint, **kw) -> TcpConn:
        return self.net.tcp_open(self, self.endpoint(port, Transport.TCP), remote, **kw)

    def _send_tcp(self, key: SessionKey, flags, payload, seq, ack):
        pkt = Packet(key.local, key.remote, self.realm, Transport.TCP, flags, payload, seq, ack)
        self.net._emit(pkt, self.link)

    def _receive(self, pkt: Packet):
        self.net.record("recv", self.realm, pkt.src, pkt.dst, pkt, info=self.name)
        if pkt.transport is Transport.UDP:
            handler = self.udp.get(pkt.dst.port)
            if handler is None:
                self.net.record("drop", self.realm, pkt.src, pkt.dst, pkt, info="port-unbound")
                return
            handler(pkt)
            return
        key = SessionKey(pkt.dst, pkt.src)
        conn = self.conns.get(key)
        if conn is not None:
            conn._receive(pkt)
            return
        if pkt.flags & TcpFlags.RST:
            return
        listener = self.listeners.get(pkt.dst.port)
        if pkt.is_syn and listener is not None:
            listener.syn_sources.append(pkt.src)
            conn = TcpConn(self, key, self.net.syn_tries, self.net.syn_interval)
            conn.listener = listener
            conn.irs = pkt.seq
            conn.state = TcpState.SYN_RCVD
            self.conns[key] = conn
            conn._send_synack()
            conn._arm()
            return
        # nothing here: reset the sender
        seq = pkt.ack if pkt.flags & TcpFlags.ACK else 0
        self._send_tcp(key, TcpFlags.RST | TcpFlags.ACK, b"", seq, pkt.seq + 1)


# -- network ----------------------------------------------------------------

class Network:
    """Realms, hosts and NATs driven by one :class:`VirtualClock`."""

    def __init__(self, seed: int = 0, syn_tries: int = 4, syn_interval: int = SECOND,
                 default_latency: int = 10 * MS):
        self.seed = seed
        self.clock = VirtualClock()
        self.realms: dict[str, Realm] = {}
        self.hosts: dict[str, Host] = {}
        self.nats: dict[str, object] = {}
        self.syn_tries = syn_tries
        self.syn_interval = syn_interval
        self.default_latency = default_latency
        self.trace: list[str] = []
        self.add_realm(GLOBAL, "global address realm")

    @property
    def now(self) -> int:
        return self.clock.now

    def rng(self, name: str) -> random.Random:
        return random.Random(f"{self.seed}/{name}")

    def schedule(self, delay: int, action: Callable, *args) -> Timer:
        return self.clock.schedule(delay, action, *args)

    def run_until(self, t: int) -> int:
        return self.clock.run_until(t)

    def run_for(self, duration: int) -> int:
        return self.clock.run_until(self.clock.now + duration)

    # topology
    def add_realm(self, realm_id: str, description: str = "") -> Realm:
        if realm_id in self.realms:
            raise UsageError(f"duplicate realm {realm_id!r}")
        realm = Realm(realm_id, description)
        self.realms[realm_id] = realm
        return realm

    def make_link(self, name: str, realm: str, latency: Optional[int] = None,
                  loss: float = 0.0, faults=()) -> Link:
        if realm not in self.realms:
            raise UsageError(f"unknown realm {realm!r}")
        return Link(name, realm, self.default_latency if latency is None else latency,
                    loss, list(faults), self.rng(f"link/{name}"))

    def add_host(self, name: str, realm: str, address: int, latency: Optional[int] = None,
                 loss: float = 0.0, faults=()) -> Host:
        if name in self.hosts:
            raise UsageError(f"duplicate host {name!r}")
        link = self.make_link(name, realm, latency, loss, faults)
        r = self.realms[realm]
        if address in r.hosts or address in r.nat_publics:
            raise UsageError(f"address {format_address(address)} already used in {realm!r}")
        host = Host(self, name, realm, address, link)
        r.hosts[address] = host
        self.hosts[name] = host
        return host

    def attach_nat(self, nat, inside: str, outside: str, inside_latency=None, outside_latency=None):
        """Wire ``nat`` between realms; used by :class:`holepunch.natbox.NatBox`."""
        ri, ro = self.realms[inside], self.realms[outside]
        if ri.uplink is not None:
            raise UsageError(f"realm {inside!r} already has an uplink NAT")
        address = nat.config.public_address
        if address in ro.hosts or address in ro.nat_publics:
            raise UsageError(f"address {format_address(address)} already used in {outside!r}")
        nat.inside_link = self.make_link(f"{nat.name}/in", inside, inside_latency)
        nat.outside_link = self.make_link(f"{nat.name}/out", outside, outside_latency)
        nat.inside_realm, nat.outside_realm = inside, outside
        nat.net = self
        ri.uplink = nat
        ro.nat_publics[address] = nat
        self.nats[nat.name] = nat

    # tracing
    def record(self, ev: str, realm: str, src, dst, pkt: Optional[Packet] = None, info: str = ""):
        rec = {"t": self.clock.now, "ev": ev, "realm": realm, "src": str(src), "dst": str(dst)}
        if pkt is not None:
            rec["proto"] = pkt.transport.value
            if pkt.transport is Transport.TCP:
                rec["flags"] = flags_text(pkt.flags)
            summary = summarize(pkt)
            if summary:
                rec["msg"] = summary
        if info:
            rec["info"] = info
        self.trace.append(json.dumps(rec, separators=(",", ":")))

    def trace_text(self) -> str:
        buf = io.StringIO()
        for line in self.trace:
            buf.write(line)
            buf.write("\n")
        return buf.getvalue()

    # packet transit
    def _emit(self, pkt: Packet, link: Link):
        if pkt.realm != link.realm:
            pkt = replace(pkt, realm=link.realm)
        for fault in link.faults:
            if fault.matches(pkt):
                fault.count -= 1
                self.record("drop", pkt.realm, pkt.src, pkt.dst, pkt, info=f"fault:{link.name}")
                return
        if link.loss and link.rng.random() < link.loss:
            self.record("drop", pkt.realm, pkt.src, pkt.dst, pkt, info=f"loss:{link.name}")
            return
        self.record("send", pkt.realm, pkt.src, pkt.dst, pkt, info=link.name)
        self.clock.schedule(link.latency, self._arrive, pkt)

    def _arrive(self, pkt: Packet):
        realm = self.realms[pkt.realm]
        host = realm.hosts.get(pkt.dst.address)
        if host is not None:
            host._receive(pkt)
            return
        nat = realm.nat_publics.get(pkt.dst.address)
        if nat is not None:
            nat.receive_public(pkt)
            return
        if realm.uplink is not None:
            realm.uplink.receive_private(pkt)
            return
        self.record("drop", pkt.realm, pkt.src, pkt.dst, pkt, info="no-host")

    # spec-level operations
    def send_datagram(self, host: Host, src: Endpoint, dst: Endpoint, payload: bytes):
        if src.address != host.address or src.port not in host.udp:
            raise UsageError(f"{host.name}: source {src} is not bound")
        pkt = Packet(src.with_transport(Transport.UDP), dst.with_transport(Transport.UDP),
                     host.realm, Transport.UDP, TcpFlags.NONE, payload)
        self._emit(pkt, host.link)

    def tcp_listen(self, host: Host, local: Endpoint, on_accept: Callable) -> Listener:
        if local.port in host.listeners:
            raise UsageError(f"{host.name}: already listening on TCP port {local.port}")
        listener = Listener(host, local.with_transport(Transport.TCP), on_accept)
        host.listeners[local.port] = listener
        return listener

    def tcp_open(self, host: Host, local: Endpoint, remote: Endpoint, *,
                 on_established=None, on_failed=None, on_data=None, on_closed=None,
                 syn_tries: Optional[int] = None) -> TcpConn:
        key = SessionKey(local.with_transport(Transport.TCP), remote.with_transport(Transport.TCP))
        if key in host.conns:
            raise AddressInUse(f"{host.name}: session {key} already in use")
        conn = TcpConn(host, key, syn_tries or self.syn_tries, self.syn_interval)
        conn.on_established = on_established
        conn.on_failed = on_failed
        conn.on_data = on_data
        conn.on_closed = on_closed
        conn.state = TcpState.SYN_SENT
        host.conns[key] = conn
        conn._send_syn()
        conn._arm()
        return conn
