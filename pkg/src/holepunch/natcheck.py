"""NAT behavior probing: one client, three servers, four sub-tests.

The client sits behind the NAT under test; servers 1-3 sit at distinct
global addresses.  The sub-tests run one after another on the same
simulated network:

* UDP: the client pings servers 1 and 2 from one local port.  Both report
  the public endpoint they observe.  Server 2 also asks server 3 to answer
  the client's public endpoint from an address the client never contacted.
* UDP hairpin: a second local port sends to the first port's public endpoint.
* TCP: the client listens on its port and connects to servers 1 and 2 from
  it.  Server 2 holds its answer until server 3 has tried to connect
  inbound to the client's public endpoint.  The client then connects out to
  server 3.
* TCP hairpin: a second local port connects to the first port's public
  endpoint.

Every wait is 5 virtual seconds; server 3 keeps its inbound attempt alive
for a further 20 seconds.
"""
from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, fields
from typing import Optional

from .core import (DecodeError, Endpoint, Forward, Hello, LineBuffer, Register, RegisterOk,
                   Transport, decode_message, encode_message)
from .natbox import MappingPolicy, NatConfig, PortAlloc, Unsolicited
from .simnet import SECOND, Failure, Host, Network, Packet, TcpConn

log = logging.getLogger(__name__)

SERVER_PORT = 1234
PROBE_PORT = 1235   # server 3's inbound-attempt / rendezvous port for the TCP test
CONTROL_PORT = 1236  # server-to-server UDP control channel
WAIT = 5 * SECOND
EXTENDED_WAIT = 20 * SECOND
CLIENT_ID = "natcheck"

TESTS = ("udp", "udp_hairpin", "tcp", "tcp_hairpin")


class Observed(enum.Enum):
    DROP = "drop"
    RST = "rst"
    ALLOW = "allow"
    UNKNOWN = "unknown"


@dataclass
class NatProfile:
    """Observed behavior; ``None`` marks a sub-test that did not run or was inconclusive."""

    udp_consistent: Optional[bool] = None
    udp_filters_unsolicited: Optional[bool] = None
    udp_hairpin: Optional[bool] = None
    tcp_consistent: Optional[bool] = None
    tcp_unsolicited_observed: Optional[Observed] = None
    tcp_hairpin: Optional[bool] = None
    nat_detected: Optional[bool] = None
    udp_public: Optional[Endpoint] = None
    tcp_public: Optional[Endpoint] = None

    @property
    def hairpin_applicable(self) -> bool:
        return self.nat_detected is not False

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Observed):
                value = value.value
            elif isinstance(value, Endpoint):
                value = str(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NatProfile":
        from .core import parse_endpoint
        kw = dict(d)
        if kw.get("tcp_unsolicited_observed") is not None:
            kw["tcp_unsolicited_observed"] = Observed(kw["tcp_unsolicited_observed"])
        for name, transport in (("udp_public", Transport.UDP), ("tcp_public", Transport.TCP)):
            if kw.get(name) is not None:
                kw[name] = parse_endpoint(kw[name], transport)
        return cls(**kw)


# -- servers ----------------------------------------------------------------

class NatCheckServer:
    """Server ``role`` (1, 2 or 3).  ``peers`` maps role numbers to hosts."""

    def __init__(self, host: Host, role: int, peers: dict):
        self.host = host
        self.net = host.net
        self.role = role
        self.peers = peers
        self.rng = self.net.rng(f"natcheck/server{role}")
        self.held: dict[bytes, TcpConn] = {}
        self.attempts: dict[bytes, dict] = {}
        host.bind_udp(SERVER_PORT, self._on_datagram)
        host.bind_udp(CONTROL_PORT, self._on_control)
        if role in (1, 2):
            host.tcp_listen(SERVER_PORT, self._on_accept)

    def _peer(self, role: int, port: int) -> Endpoint:
        return self.peers[role].endpoint(port)

    def _on_datagram(self, pkt: Packet):
        try:
            msg = decode_message(pkt.payload)
        except DecodeError:
            return
        if self.role == 3:
            self._on_control(pkt)
            return
        if not isinstance(msg, Register):
            return
        self.host.send_datagram(SERVER_PORT, pkt.src, encode_message(RegisterOk(pkt.src)))
        if self.role == 2:
            fwd = Forward(msg.id, pkt.src, msg.private_ep, self.rng.randbytes(16))
            self.host.send_datagram(CONTROL_PORT, self._peer(3, SERVER_PORT), encode_message(fwd))

    def _on_control(self, pkt: Packet):
        try:
            msg = decode_message(pkt.payload)
        except DecodeError:
            return
        if self.role == 3 and isinstance(msg, Forward):
            if pkt.dst.port == SERVER_PORT:
                # UDP test: answer from an address the client never contacted
                self.host.send_datagram(SERVER_PORT, msg.public_ep,
                                        encode_message(RegisterOk(msg.public_ep)))
            else:
                self._tcp_attempt(msg, pkt.src)
        elif self.role == 2 and isinstance(msg, Hello):
            conn = self.held.pop(msg.nonce, None)
            if conn is not None and conn.established:
                conn.send(encode_message(RegisterOk(conn.key.remote), stream=True))

    def _on_accept(self, conn: TcpConn):
        buf = LineBuffer()

        def data(c, chunk):
            for line in buf.feed(chunk):
                try:
                    msg = decode_message(line, Transport.TCP)
                except DecodeError:
                    continue
                if not isinstance(msg, Register):
                    continue
                if self.role == 1:
                    c.send(encode_message(RegisterOk(c.key.remote), stream=True))
                    continue
                nonce = self.rng.randbytes(16)
                self.held[nonce] = c
                fwd = Forward(msg.id, c.key.remote, msg.private_ep, nonce)
                self.host.send_datagram(CONTROL_PORT, self._peer(3, CONTROL_PORT),
                                        encode_message(fwd))

        conn.on_data = data

    def _tcp_attempt(self, msg: Forward, requester: Endpoint):
        """Try to connect inbound to the client; signal go-ahead after WAIT."""
        state = {"result": None, "listener": None, "conn": None}
        self.attempts[msg.nonce] = state
        listener = self.host.listeners.get(PROBE_PORT)
        state["listener"] = listener or self.host.tcp_listen(PROBE_PORT, lambda c: None)

        def failed(conn, why):
            state["result"] = why
            if why is Failure.RESET:
                # the NAT refused us: give up entirely
                state["listener"].close()

        def established(conn):
            state["result"] = "established"

        tries = (WAIT + EXTENDED_WAIT) // self.net.syn_interval
        state["conn"] = self.host.tcp_open(PROBE_PORT, msg.public_ep.with_transport(Transport.TCP),
                                           on_established=established, on_failed=failed,
                                           syn_tries=tries)
        go = encode_message(Hello(str(self.role), msg.nonce))
        self.net.schedule(WAIT, self.host.send_datagram, CONTROL_PORT, requester, go)
        self.net.schedule(WAIT + EXTENDED_WAIT, self._tcp_done, msg.nonce)

    def _tcp_done(self, nonce: bytes):
        state = self.attempts.pop(nonce, None)
        if state is None:
            return
        state["listener"].close()
        if state["conn"].state.name == "SYN_SENT":
            state["conn"].close()


# -- client -----------------------------------------------------------------

class NatCheckClient:
    def __init__(self, host: Host, servers: dict, port: int = 4321, alt_port: int = 4322):
        self.host = host
        self.net = host.net
        self.servers = servers
        self.port = port
        self.alt_port = alt_port
        self.profile = NatProfile()
        self.rng = self.net.rng("natcheck/client")

    def _server(self, role: int, transport=Transport.UDP, port=SERVER_PORT) -> Endpoint:
        return self.servers[role].endpoint(port, transport)

    def _register(self, transport=Transport.UDP) -> Register:
        return Register(CLIENT_ID, self.host.endpoint(self.port, transport))

    def run(self, tests=TESTS) -> NatProfile:
        for name in TESTS:
            if name in tests:
                getattr(self, f"run_{name}_test")()
        return self.profile

    def run_udp_test(self):
        replies: dict[int, Endpoint] = {}
        s3_seen = []
        addr = {self.servers[r].address: r for r in (1, 2, 3)}

        def handler(pkt: Packet):
            try:
                msg = decode_message(pkt.payload)
            except DecodeError:
                return
            if isinstance(msg, RegisterOk):
                role = addr.get(pkt.src.address)
                if role == 3:
                    s3_seen.append(pkt.src)
                elif role is not None:
                    replies.setdefault(role, msg.public_ep)

        self.host.bind_udp(self.port, handler)
        reg = encode_message(self._register())
        self.host.send_datagram(self.port, self._server(1), reg)
        self.host.send_datagram(self.port, self._server(2), reg)
        self.net.run_for(WAIT)
        p = self.profile
        if len(replies) < 2:
            log.info("UDP test inconclusive: replies from %s", sorted(replies))
            return
        p.udp_public = replies[1]
        p.udp_consistent = replies[1] == replies[2]
        p.udp_filters_unsolicited = not s3_seen
        p.nat_detected = replies[1] != self.host.endpoint(self.port)

    def run_udp_hairpin_test(self):
        p = self.profile
        if p.udp_public is None:
            return
        nonce = self.rng.randbytes(16)
        arrived = []

        def handler(pkt: Packet):
            try:
                msg = decode_message(pkt.payload)
            except DecodeError:
                return
            if isinstance(msg, Hello) and msg.nonce == nonce:
                arrived.append(pkt.src)

        previous = self.host.udp.get(self.port)
        self.host.udp[self.port] = handler
        self.host.bind_udp(self.alt_port, lambda pkt: None)
        self.host.send_datagram(self.alt_port, p.udp_public, encode_message(Hello(CLIENT_ID, nonce)))
        self.net.run_for(WAIT)
        self.host.unbind_udp(self.alt_port)
        if previous is not None:
            self.host.udp[self.port] = previous
        p.udp_hairpin = bool(arrived)

    def run_tcp_test(self):
        p = self.profile
        listener = self.host.tcp_listen(self.port, lambda c: None)
        replies: dict[int, Endpoint] = {}
        order: list[str] = []
        s3 = self.servers[3].address

        def open_to(role):
            buf = LineBuffer()

            def established(conn):
                conn.send(encode_message(self._register(Transport.TCP), stream=True))

            def data(conn, chunk):
                for line in buf.feed(chunk):
                    try:
                        msg = decode_message(line, Transport.TCP)
                    except DecodeError:
                        continue
                    if isinstance(msg, RegisterOk) and role not in replies:
                        replies[role] = msg.public_ep
                        if role == 2:
                            order.append("reply")
                            after_reply()

            self.host.tcp_open(self.port, self._server(role, Transport.TCP),
                               on_established=established, on_data=data,
                               on_failed=lambda c, why: None)

        outcome = {}

        def inbound_seen():
            return any(src.address == s3 for src in listener.syn_sources)

        def after_reply():
            if inbound_seen():
                outcome["inbound"] = True
                return
            self.host.tcp_open(self.port, self._server(3, Transport.TCP, PROBE_PORT),
                               on_established=lambda c: outcome.setdefault("connect", "ok"),
                               on_failed=lambda c, why: outcome.setdefault("connect", why.value))

        open_to(1)
        open_to(2)
        end = self.net.now + 3 * WAIT
        while self.net.now < end and not (outcome.get("inbound") or "connect" in outcome):
            self.net.run_for(100 * 1_000_000)
        if 1 not in replies or 2 not in replies:
            log.info("TCP test inconclusive: replies from %s", sorted(replies))
            listener.close()
            return
        p.tcp_public = replies[1]
        p.tcp_consistent = replies[1] == replies[2]
        if outcome.get("inbound"):
            p.tcp_unsolicited_observed = Observed.ALLOW
        elif outcome.get("connect") == "ok":
            p.tcp_unsolicited_observed = Observed.DROP
        elif outcome.get("connect") == Failure.RESET.value:
            p.tcp_unsolicited_observed = Observed.RST
        else:
            p.tcp_unsolicited_observed = Observed.UNKNOWN
        self._listener = listener

    def run_tcp_hairpin_test(self):
        p = self.profile
        if p.tcp_public is None:
            return
        listener = getattr(self, "_listener", None)
        if listener is None or listener.closed:
            listener = self.host.tcp_listen(self.port, lambda c: None)
        result = {}
        self.host.tcp_open(self.alt_port, p.tcp_public,
                           on_established=lambda c: result.setdefault("ok", True),
                           on_failed=lambda c, why: result.setdefault("ok", False))
        end = self.net.now + WAIT
        while self.net.now < end and "ok" not in result:
            self.net.run_for(100 * 1_000_000)
        p.tcp_hairpin = result.get("ok", False)
        listener.close()


# -- running ----------------------------------------------------------------

def run_natcheck(scn, tests=TESTS, client: str = "C", servers=("S1", "S2", "S3")) -> NatProfile:
    """Run the sub-tests on a built scenario holding the client and servers."""
    net: Network = scn.net
    hosts = {i + 1: net.hosts[name] for i, name in enumerate(servers)}
    for role, host in hosts.items():
        NatCheckServer(host, role, hosts)
    return NatCheckClient(net.hosts[client], hosts).run(tests)


def expected_profile(config: Optional[NatConfig]) -> NatProfile:
    """The profile a correct probe must report for ``config`` (``None`` = no NAT).

    Fields describe effective behavior: a NAT with endpoint-independent
    filtering admits server 3's SYN no matter what it does with truly
    unsolicited SYNs, and a TCP hairpin handshake needs the reply leg to
    come back from the same public endpoint, which only a cone mapping does.
    """
    if config is None:
        return NatProfile(True, False, True, True, Observed.ALLOW, True, False)
    cone = config.is_cone
    open_filter = config.filtering_policy is MappingPolicy.ENDPOINT_INDEPENDENT
    hairpin = config.hairpin and (open_filter or not config.hairpin_filtering)
    unsolicited = Observed.ALLOW if open_filter else Observed(config.tcp_unsolicited.value)
    return NatProfile(
        udp_consistent=cone,
        udp_filters_unsolicited=not open_filter,
        udp_hairpin=hairpin,
        tcp_consistent=cone,
        tcp_unsolicited_observed=unsolicited,
        tcp_hairpin=hairpin and cone,
        nat_detected=True,
    )


def config_grid() -> list[dict]:
    """Every combination of the behavioral NAT knobs, as config dicts (324 of them)."""
    policies = [p.value for p in MappingPolicy]
    grid = itertools.product(policies, policies, [u.value for u in Unsolicited],
                             (False, True), (False, True), [a.value for a in PortAlloc])
    return [{"mapping": m, "filtering": f, "tcp_unsolicited": u, "hairpin": h,
             "hairpin_filtering": hf, "port_alloc": a}
            for m, f, u, h, hf, a in grid]


COMPARED = ("udp_consistent", "udp_filters_unsolicited", "udp_hairpin", "tcp_consistent",
            "tcp_unsolicited_observed", "tcp_hairpin", "nat_detected")


def mismatches(observed: NatProfile, expected: NatProfile) -> dict:
    """Fields (among those the expectation determines) where the two disagree."""
    out = {}
    for name in COMPARED:
        want = getattr(expected, name)
        if want is None:
            continue
        got = getattr(observed, name)
        if got != want:
            out[name] = (got, want)
    return out


# -- verdicts ---------------------------------------------------------------

class TcpRating(enum.Enum):
    FRIENDLY = "friendly"
    SLOWER = "compatible-but-slower"
    INCOMPATIBLE = "incompatible"


@dataclass(frozen=True)
class NatVerdict:
    """Hole-punching verdicts for one NAT.

    ``tcp_punch_friendly`` is the strict rating (consistent mapping and no
    RST to unsolicited SYNs); ``tcp_punch_lenient`` also accepts RST NATs,
    which only slow punching down.  ``None`` means unknown.
    """

    udp_punch_friendly: Optional[bool]
    tcp_punch_friendly: Optional[bool]
    tcp_punch_lenient: Optional[bool]
    tcp_rating: Optional[TcpRating]
    udp_hairpin: Optional[bool]
    tcp_hairpin: Optional[bool]
    tcp_consistent: Optional[bool] = None
    tcp_unsolicited: Optional[Observed] = None

    def to_dict(self) -> dict:
        return {"udp_punch_friendly": self.udp_punch_friendly,
                "tcp_punch_friendly": self.tcp_punch_friendly,
                "tcp_punch_lenient": self.tcp_punch_lenient,
                "tcp_rating": self.tcp_rating.value if self.tcp_rating else None,
                "udp_hairpin": self.udp_hairpin, "tcp_hairpin": self.tcp_hairpin}


def classify(profile: NatProfile) -> NatVerdict:
    consistent = profile.tcp_consistent
    unsolicited = profile.tcp_unsolicited_observed
    if consistent is None:
        strict = lenient = rating = None
    elif not consistent:
        strict = lenient = False
        rating = TcpRating.INCOMPATIBLE
    elif unsolicited in (None, Observed.UNKNOWN):
        strict, lenient, rating = None, True, None
    elif unsolicited is Observed.RST:
        strict, lenient, rating = False, True, TcpRating.SLOWER
    else:
        strict, lenient, rating = True, True, TcpRating.FRIENDLY
    return NatVerdict(profile.udp_consistent, strict, lenient, rating,
                      profile.udp_hairpin, profile.tcp_hairpin, consistent, unsolicited)


@dataclass(frozen=True)
class PairPrediction:
    tcp_success: Optional[bool]
    tcp_without_retries: Optional[bool]


def predict_tcp_pair(a: NatVerdict, b: NatVerdict) -> PairPrediction:
    """Predict parallel TCP punching between peers behind NATs ``a`` and ``b``.

    Two lenient NATs always connect; neither may answer with RST for the
    attempt to need no retries.  One extra case succeeds: if exactly one NAT
    maps inconsistently, the other NAT accepting unsolicited SYNs on its
    mapped port lets the inconsistent side's SYN in (much like a reversed
    connection).  If both accept unsolicited SYNs the two cross-admitted
    handshakes collide on mismatched ports, so success depends on timing
    and is not predicted.
    """
    if a.tcp_consistent is None or b.tcp_consistent is None:
        return PairPrediction(None, None)
    if a.tcp_unsolicited in (None, Observed.UNKNOWN) or b.tcp_unsolicited in (None, Observed.UNKNOWN):
        return PairPrediction(None, None)
    if a.tcp_consistent and b.tcp_consistent:
        success = True
    elif a.tcp_consistent != b.tcp_consistent:
        cone, other = (a, b) if a.tcp_consistent else (b, a)
        success = (cone.tcp_unsolicited is Observed.ALLOW
                   and other.tcp_unsolicited is not Observed.ALLOW)
    else:
        success = False
    no_rst = Observed.RST not in (a.tcp_unsolicited, b.tcp_unsolicited)
    return PairPrediction(success, success and no_rst)
