"""Configurable NAPT middlebox.

Mapping (how a private endpoint is assigned a public one) and filtering
(which remote senders may use an existing mapping) are independent axes, so
a "cone" NAT with per-session filtering and a "symmetric" NAT are distinct
configurations.
"""
from __future__ import annotations

import enum
import logging
import random
import re
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

from .core import Endpoint, Transport, format_address, parse_address
from .simnet import SECOND, Packet, TcpFlags

log = logging.getLogger(__name__)


class MappingPolicy(enum.Enum):
    ENDPOINT_INDEPENDENT = "endpoint_independent"        # cone
    ADDRESS_DEPENDENT = "address_dependent"
    ADDRESS_PORT_DEPENDENT = "address_port_dependent"    # symmetric


FilteringPolicy = MappingPolicy


class Unsolicited(enum.Enum):
    DROP = "drop"
    RST = "rst"
    ALLOW = "allow"


class PortAlloc(enum.Enum):
    PRESERVE_THEN_SEQUENTIAL = "preserve_then_sequential"
    SEQUENTIAL = "sequential"
    RANDOM = "random"


@dataclass(frozen=True)
class NatConfig:
    public_address: int
    mapping_policy: MappingPolicy = MappingPolicy.ENDPOINT_INDEPENDENT
    filtering_policy: MappingPolicy = MappingPolicy.ADDRESS_PORT_DEPENDENT
    hairpin: bool = False
    # apply the inbound filter to hairpinned traffic as well
    hairpin_filtering: bool = False
    tcp_unsolicited: Unsolicited = Unsolicited.DROP
    port_alloc: PortAlloc = PortAlloc.SEQUENTIAL
    port_range: tuple[int, int] = (62000, 62999)
    port_start: Optional[int] = None
    port_step: int = 1
    seed: int = 0
    udp_idle_timeout: float = 120.0
    payload_rewrite: bool = False

    def __post_init__(self):
        if self.udp_idle_timeout <= 0:
            raise ValueError("udp_idle_timeout must be positive")
        lo, hi = self.port_range
        if not 0 < lo <= hi <= 0xFFFF:
            raise ValueError(f"bad port range {self.port_range}")
        if self.port_step < 1:
            raise ValueError("port_step must be >= 1")

    @property
    def is_cone(self) -> bool:
        return self.mapping_policy is MappingPolicy.ENDPOINT_INDEPENDENT

    def to_dict(self) -> dict:
        return {
            "public_address": format_address(self.public_address),
            "mapping": self.mapping_policy.value,
            "filtering": self.filtering_policy.value,
            "hairpin": self.hairpin,
            "hairpin_filtering": self.hairpin_filtering,
            "tcp_unsolicited": self.tcp_unsolicited.value,
            "port_alloc": self.port_alloc.value,
            "port_range": list(self.port_range),
            "port_start": self.port_start,
            "port_step": self.port_step,
            "seed": self.seed,
            "udp_idle_timeout": self.udp_idle_timeout,
            "payload_rewrite": self.payload_rewrite,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NatConfig":
        kw = {}
        names = {"mapping": ("mapping_policy", MappingPolicy),
                 "filtering": ("filtering_policy", MappingPolicy),
                 "tcp_unsolicited": ("tcp_unsolicited", Unsolicited),
                 "port_alloc": ("port_alloc", PortAlloc)}
        for key, value in d.items():
            if key == "public_address":
                kw[key] = parse_address(value) if isinstance(value, str) else int(value)
            elif key in names:
                attr, kind = names[key]
                kw[attr] = kind(value)
            elif key == "port_range":
                kw[key] = tuple(value)
            elif key in ("hairpin", "hairpin_filtering", "port_start", "port_step", "seed",
                         "udp_idle_timeout", "payload_rewrite"):
                kw[key] = value
            else:
                raise ValueError(f"unknown NAT config key {key!r}")
        return cls(**kw)


@dataclass
class MappingEntry:
    key: tuple
    private_ep: Endpoint
    public_ep: Endpoint
    last_activity: int
    # remotes this mapping has sent to; insertion ordered
    seen_remotes: dict = field(default_factory=dict)
    # TCP remotes with a live session through this mapping
    tcp_sessions: dict = field(default_factory=dict)

    @property
    def transport(self) -> Transport:
        return self.private_ep.transport


class Action(enum.Enum):
    FORWARD = "forward"
    DROP = "drop"
    RST = "rst"


class Verdict(NamedTuple):
    action: Action
    packet: Optional[Packet]
    rule: str


class PredictionUnavailable(ValueError):
    pass


def predict_next_port(observed) -> int:
    """Extrapolate the next public port from ``(destination, port)`` pairs.

    Raises :class:`PredictionUnavailable` unless the successive differences
    are all equal.
    """
    ports = [port for _, port in observed]
    if len(ports) < 2:
        raise PredictionUnavailable("need at least two observations")
    strides = {b - a for a, b in zip(ports, ports[1:])}
    if len(strides) != 1:
        raise PredictionUnavailable(f"inconsistent stride in {ports}")
    port = ports[-1] + strides.pop()
    if not 0 < port <= 0xFFFF:
        raise PredictionUnavailable(f"predicted port {port} out of range")
    return port


_DOTTED = re.compile(rb"(?<![0-9.])([0-9]{1,3}(?:\.[0-9]{1,3}){3})(?![0-9.])")


class NatBox:
    """One NAT between an inside (private) and an outside realm.

    Attach with :meth:`holepunch.simnet.Network.attach_nat`; the network then
    calls :meth:`receive_private` / :meth:`receive_public`.  The translation
    methods themselves are pure with respect to the network and can be
    driven directly.
    """

    def __init__(self, name: str, config: NatConfig):
        self.name = name
        self.config = config
        self.net = None
        self.inside_link = None
        self.outside_link = None
        self.inside_realm = None
        self.outside_realm = None
        self.mappings: dict[tuple, MappingEntry] = {}
        self.by_public: dict[tuple, MappingEntry] = {}
        self.exhausted = 0
        self._cursor: dict[Transport, int] = {}
        self._rng = random.Random(f"nat/{name}/{config.seed}")

    def __repr__(self):
        return f"<NatBox {self.name} {format_address(self.config.public_address)}>"

    # -- bookkeeping --------------------------------------------------------

    def _mapping_key(self, private: Endpoint, remote: Endpoint) -> tuple:
        policy = self.config.mapping_policy
        if policy is MappingPolicy.ENDPOINT_INDEPENDENT:
            return (private,)
        if policy is MappingPolicy.ADDRESS_DEPENDENT:
            return (private, remote.address)
        return (private, remote.address, remote.port)

    def _port_free(self, transport: Transport, port: int) -> bool:
        return (transport, port) not in self.by_public

    def _allocate(self, transport: Transport, private: Endpoint) -> Optional[int]:
        cfg = self.config
        lo, hi = cfg.port_range
        if cfg.port_alloc is PortAlloc.PRESERVE_THEN_SEQUENTIAL and self._port_free(transport, private.port):
            return private.port
        if cfg.port_alloc is PortAlloc.RANDOM:
            free = [p for p in range(lo, hi + 1) if self._port_free(transport, p)]
            return self._rng.choice(free) if free else None
        size = hi - lo + 1
        cursor = self._cursor.get(transport, cfg.port_start if cfg.port_start is not None else lo)
        for _ in range(size):
            port = lo + (cursor - lo) % size
            cursor = port + cfg.port_step
            if self._port_free(transport, port):
                self._cursor[transport] = cursor
                return port
        return None

    def _remove(self, entry: MappingEntry):
        self.mappings.pop((entry.transport,) + entry.key, None)
        self.by_public.pop((entry.transport, entry.public_ep.port), None)

    def reset(self):
        """Flush all mappings (e.g. a reboot); the allocation cursor survives."""
        self.mappings.clear()
        self.by_public.clear()

    def expire_mappings(self, now: int) -> int:
        """Drop UDP entries idle for at least ``udp_idle_timeout``."""
        limit = round(self.config.udp_idle_timeout * SECOND)
        stale = [e for e in self.mappings.values()
                 if e.transport is Transport.UDP and now - e.last_activity >= limit]
        for entry in stale:
            self._remove(entry)
            self._note("expire", entry.private_ep, entry.public_ep)
        return len(stale)

    def lookup_public(self, ep: Endpoint) -> Optional[MappingEntry]:
        return self.by_public.get((ep.transport, ep.port))

    def _admits(self, entry: MappingEntry, sender: Endpoint) -> bool:
        policy = self.config.filtering_policy
        if policy is MappingPolicy.ENDPOINT_INDEPENDENT:
            return True
        if policy is MappingPolicy.ADDRESS_DEPENDENT:
            return any(r.address == sender.address for r in entry.seen_remotes)
        return sender in entry.seen_remotes

    def _note(self, rule, src, dst, pkt=None):
        if self.net is not None:
            self.net.record("nat", self.name, src, dst, pkt, info=rule)

    def _rewrite_payload(self, payload: bytes) -> bytes:
        """Blindly replace mapped private addresses found in the payload.

        Both the raw 4-byte form (aligned windows) and the dotted-quad text
        form are rewritten to the public address.
        """
        private = {e.private_ep.address for e in self.mappings.values()}
        if not private or not payload:
            return payload
        public = self.config.public_address
        data = bytearray(payload)
        for off in range(0, len(data) - 3, 4):
            (word,) = struct.unpack_from(">I", data, off)
            if word in private:
                struct.pack_into(">I", data, off, public)
        text = bytes(data)

        def sub(m):
            try:
                addr = parse_address(m.group(1).decode())
            except ValueError:
                return m.group(0)
            return format_address(public).encode() if addr in private else m.group(0)

        return _DOTTED.sub(sub, text)

    # -- translation --------------------------------------------------------

    def _outbound_entry(self, pkt: Packet, now: int) -> Optional[MappingEntry]:
        key = self._mapping_key(pkt.src, pkt.dst)
        full = (pkt.transport,) + key
        entry = self.mappings.get(full)
        if entry is None:
            port = self._allocate(pkt.transport, pkt.src)
            if port is None:
                self.exhausted += 1
                return None
            entry = MappingEntry(key, pkt.src,
                                 Endpoint(self.config.public_address, port, pkt.transport), now)
            self.mappings[full] = entry
            self.by_public[(pkt.transport, port)] = entry
            self._note("map-new", pkt.src, entry.public_ep, pkt)
        entry.last_activity = now
        entry.seen_remotes[pkt.dst] = True
        if pkt.transport is Transport.TCP:
            if pkt.flags & TcpFlags.RST:
                entry.tcp_sessions.pop(pkt.dst, None)
            else:
                entry.tcp_sessions[pkt.dst] = True
        return entry

    def translate_outbound(self, pkt: Packet, now: int) -> Verdict:
        self.expire_mappings(now)
        entry = self._outbound_entry(pkt, now)
        if entry is None:
            return Verdict(Action.DROP, None, "exhausted")
        payload = pkt.payload
        if self.config.payload_rewrite and pkt.transport is Transport.UDP:
            payload = self._rewrite_payload(payload)
        out = replace(pkt, src=entry.public_ep, payload=payload)
        if (pkt.transport is Transport.TCP and pkt.flags & TcpFlags.RST
                and not entry.tcp_sessions):
            # last TCP session through this mapping torn down
            self._remove(entry)
            return Verdict(Action.FORWARD, out, "map-release")
        return Verdict(Action.FORWARD, out, "map")

    def translate_inbound(self, pkt: Packet, now: int) -> Verdict:
        self.expire_mappings(now)
        entry = self.lookup_public(pkt.dst) if pkt.dst.address == self.config.public_address else None
        if entry is not None and self._admits(entry, pkt.src):
            entry.last_activity = now
            return Verdict(Action.FORWARD, replace(pkt, dst=entry.private_ep), "in")
        if pkt.transport is Transport.UDP:
            return Verdict(Action.DROP, None, "filter" if entry else "no-mapping")
        if not pkt.is_syn:
            return Verdict(Action.DROP, None, "filter" if entry else "no-mapping")
        policy = self.config.tcp_unsolicited
        if policy is Unsolicited.RST:
            rst = Packet(pkt.dst, pkt.src, pkt.realm, Transport.TCP,
                         TcpFlags.RST | TcpFlags.ACK, b"", 0, pkt.seq + 1)
            return Verdict(Action.RST, rst, "unsolicited-rst")
        if policy is Unsolicited.ALLOW and entry is not None:
            return Verdict(Action.FORWARD, replace(pkt, dst=entry.private_ep), "unsolicited-allow")
        return Verdict(Action.DROP, None, "unsolicited-drop")

    def hairpin_translate(self, pkt: Packet, now: int) -> Verdict:
        self.expire_mappings(now)
        if not self.config.hairpin:
            return Verdict(Action.DROP, None, "hairpin-off")
        target = self.lookup_public(pkt.dst)
        if target is None:
            return Verdict(Action.DROP, None, "hairpin-no-mapping")
        source = self._outbound_entry(pkt, now)
        if source is None:
            return Verdict(Action.DROP, None, "exhausted")
        if self.config.hairpin_filtering and not self._admits(target, source.public_ep):
            return Verdict(Action.DROP, None, "hairpin-filter")
        target.last_activity = now
        return Verdict(Action.FORWARD, replace(pkt, src=source.public_ep, dst=target.private_ep),
                       "hairpin")

    # -- network glue -------------------------------------------------------

    def receive_private(self, pkt: Packet):
        now = self.net.now
        if pkt.dst.address == self.config.public_address:
            verdict = self.hairpin_translate(pkt, now)
            link = self.inside_link
        else:
            verdict = self.translate_outbound(pkt, now)
            link = self.outside_link
        self._dispatch(pkt, verdict, link)

    def receive_public(self, pkt: Packet):
        verdict = self.translate_inbound(pkt, self.net.now)
        if verdict.action is Action.RST:
            self._note(verdict.rule, pkt.src, pkt.dst, pkt)
            self.net._emit(verdict.packet, self.outside_link)
            return
        self._dispatch(pkt, verdict, self.inside_link)

    def _dispatch(self, pkt, verdict: Verdict, link):
        self._note(verdict.rule, pkt.src, pkt.dst, pkt)
        if verdict.action is Action.FORWARD:
            self.net._emit(verdict.packet, link)
