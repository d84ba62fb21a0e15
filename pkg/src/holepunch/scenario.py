"""Scenario documents: topology, clients and an optional action script.

A scenario is a JSON object::

    {"name": "two-nats", "seed": 1,
     "realms": [{"id": "A"}, {"id": "B"}],
     "nats": [{"id": "natA", "inside": "A", "outside": "global",
               "config": {"public_address": "155.99.25.11"}}],
     "hosts": [{"id": "S", "realm": "global", "address": "18.181.0.31"}],
     "rendezvous": {"host": "S", "port": 1234, "probe_ports": []},
     "peers": [{"id": "A", "host": "A", "port": 4321}],
     "script": [{"at": 1.0, "do": "punch", "peer": "A", "target": "B",
                 "transport": "udp"}]}

The ``global`` realm always exists.  Times in documents are seconds.
:func:`build` turns a document into a live :class:`Scenario`.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from .core import Endpoint, Transport, parse_address, parse_endpoint
from .natbox import NatBox, NatConfig
from .puncher import PeerClient, PunchOutcome, PunchSession
from .rendezvous import RendezvousServer
from .simnet import GLOBAL, MS, SECOND, LinkFault, Network, UsageError, seconds

log = logging.getLogger(__name__)

SERVER_ADDRESS = "18.181.0.31"
CLIENT_PORT = 4321

_PEER_OPTIONS = {"port", "hello_interval", "connect_retry", "deadline", "connect_delay",
                 "tcp_sequential", "doomed_wait", "predict"}
_DURATIONS = {"hello_interval", "connect_retry", "deadline", "connect_delay", "doomed_wait"}


@dataclass
class Scenario:
    name: str
    net: Network
    doc: dict
    nats: dict = field(default_factory=dict)
    clients: dict = field(default_factory=dict)
    server: Optional[RendezvousServer] = None

    @property
    def hosts(self):
        return self.net.hosts

    def register(self, transport: Transport = Transport.UDP, peers=None):
        for pid in peers or self.clients:
            client = self.clients[pid]
            if transport is Transport.UDP:
                client.register_udp()
            else:
                client.register_tcp()

    def run_script(self):
        for step in self.doc.get("script", []):
            self.net.schedule(max(0, seconds(step["at"]) - self.net.now), self._do, step)

    def _do(self, step: dict):
        kind = step["do"]
        transport = Transport(step.get("transport", "udp"))
        if kind == "register":
            self.register(transport, [step["peer"]] if "peer" in step else None)
        elif kind == "punch":
            client = self.clients[step["peer"]]
            if transport is Transport.UDP:
                client.punch_udp(step["target"], predictive=step.get("predict", False))
            elif step.get("sequential"):
                client.punch_tcp_sequential(step["target"])
            else:
                client.punch_tcp(step["target"])
        elif kind == "reverse":
            self.clients[step["peer"]].connection_reversal(step["target"])
        elif kind == "relay":
            self.clients[step["peer"]].relay(step["target"], step["payload"].encode(), transport)
        elif kind == "nat_reset":
            self.nats[step["nat"]].reset()
        elif kind == "keepalive":
            self.clients[step["peer"]].maintain_udp(step["target"])
        else:
            raise UsageError(f"unknown script action {kind!r}")


def _duration(value) -> int:
    return seconds(value) if isinstance(value, (int, float)) else int(value)


def build(doc: dict, seed: Optional[int] = None) -> Scenario:
    """Construct the network, NATs, server and clients described by ``doc``."""
    doc = copy.deepcopy(doc)
    net_opts = doc.get("network", {})
    net = Network(seed=doc.get("seed", 0) if seed is None else seed,
                  syn_tries=net_opts.get("syn_tries", 4),
                  default_latency=round(net_opts.get("latency_ms", 10) * MS))
    scn = Scenario(doc.get("name", "scenario"), net, doc)
    for realm in doc.get("realms", []):
        net.add_realm(realm["id"], realm.get("description", ""))
    for spec in doc.get("nats", []):
        nat = NatBox(spec["id"], NatConfig.from_dict(spec["config"]))
        net.attach_nat(nat, spec["inside"], spec.get("outside", GLOBAL),
                       _latency(spec.get("inside_latency_ms")),
                       _latency(spec.get("outside_latency_ms")))
        scn.nats[spec["id"]] = nat
    for spec in doc.get("hosts", []):
        faults = [LinkFault(parse_endpoint(f["dst"]) if f.get("dst") else None,
                            f.get("syn_only", False), f.get("count", 1))
                  for f in spec.get("faults", [])]
        net.add_host(spec["id"], spec.get("realm", GLOBAL), parse_address(spec["address"]),
                     _latency(spec.get("latency_ms")), spec.get("loss", 0.0), faults)
    rv = doc.get("rendezvous")
    server_ep = None
    if rv:
        host = net.hosts[rv["host"]]
        scn.server = RendezvousServer(rv.get("port", 1234), rv.get("probe_ports", ()),
                                      rv.get("stale_after", 300.0), net.rng("rendezvous"))
        scn.server.start(host)
        server_ep = host.endpoint(scn.server.port)
    for spec in doc.get("peers", []):
        if server_ep is None:
            raise UsageError("peers need a rendezvous server")
        opts = {k: (_duration(v) if k in _DURATIONS else v)
                for k, v in spec.items() if k in _PEER_OPTIONS}
        probe = scn.server.probe_ports if scn.server else ()
        scn.clients[spec["id"]] = PeerClient(net.hosts[spec.get("host", spec["id"])], spec["id"],
                                             server_ep, probe_ports=probe, **opts)
    return scn


def _latency(ms) -> Optional[int]:
    return None if ms is None else round(ms * MS)


def load(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# -- reference topologies ---------------------------------------------------

def _nat(nid, inside, public, outside=GLOBAL, **config) -> dict:
    return {"id": nid, "inside": inside, "outside": outside,
            "config": {"public_address": public, **config}}


def _server_and_peers(peers=("A", "B"), probe_ports=(), **peer_opts) -> dict:
    return {"rendezvous": {"host": "S", "port": 1234, "probe_ports": list(probe_ports)},
            "peers": [{"id": p, "host": p, "port": CLIENT_PORT, **peer_opts.get(p, {})}
                      for p in peers]}


def two_nats(nat_a: Optional[dict] = None, nat_b: Optional[dict] = None, *, seed: int = 1,
             probe_ports=(), peer_opts: Optional[dict] = None, faults: Optional[dict] = None) -> dict:
    """Peers A (10.0.0.1) and B (10.1.1.3), each behind its own NAT.

    NAT A is 155.99.25.11 allocating from 62000, NAT B is 138.76.29.7
    allocating from 31000.  ``nat_a``/``nat_b`` override config fields.
    """
    faults = faults or {}
    doc = {
        "name": "two-nats", "seed": seed,
        "realms": [{"id": "A", "description": "behind NAT A"},
                   {"id": "B", "description": "behind NAT B"}],
        "nats": [_nat("natA", "A", "155.99.25.11", **{"port_range": [62000, 62999], **(nat_a or {})}),
                 _nat("natB", "B", "138.76.29.7", **{"port_range": [31000, 31999], **(nat_b or {})})],
        "hosts": [{"id": "S", "realm": GLOBAL, "address": SERVER_ADDRESS},
                  {"id": "A", "realm": "A", "address": "10.0.0.1", "faults": faults.get("A", [])},
                  {"id": "B", "realm": "B", "address": "10.1.1.3", "faults": faults.get("B", [])}],
    }
    doc.update(_server_and_peers(probe_ports=probe_ports, **(peer_opts or {})))
    return doc


def common_nat(hairpin: bool = False, *, seed: int = 1, nat: Optional[dict] = None) -> dict:
    """Peers A and B behind one NAT (155.99.25.11, stride 5: 62000 and 62005)."""
    doc = {
        "name": "common-nat", "seed": seed,
        "realms": [{"id": "lan", "description": "shared private network"}],
        "nats": [_nat("nat", "lan", "155.99.25.11", hairpin=hairpin, port_step=5, **(nat or {}))],
        "hosts": [{"id": "S", "realm": GLOBAL, "address": SERVER_ADDRESS},
                  {"id": "A", "realm": "lan", "address": "10.0.0.1"},
                  {"id": "B", "realm": "lan", "address": "10.1.1.3"}],
    }
    doc.update(_server_and_peers())
    return doc


def nested_nats(hairpin_outer: bool = True, *, seed: int = 1) -> dict:
    """Two consumer NATs A and B inside an ISP realm behind outer NAT C."""
    doc = {
        "name": "nested-nats", "seed": seed,
        "realms": [{"id": "isp", "description": "ISP private realm"},
                   {"id": "A", "description": "behind NAT A"},
                   {"id": "B", "description": "behind NAT B"}],
        "nats": [_nat("natC", "isp", "155.99.25.11", hairpin=hairpin_outer, port_step=5),
                 _nat("natA", "A", "10.0.1.1", outside="isp", port_range=[45000, 45999]),
                 _nat("natB", "B", "10.0.1.2", outside="isp", port_range=[55000, 55999])],
        "hosts": [{"id": "S", "realm": GLOBAL, "address": SERVER_ADDRESS},
                  {"id": "A", "realm": "A", "address": "10.0.0.1"},
                  {"id": "B", "realm": "B", "address": "10.1.1.3"}],
    }
    doc.update(_server_and_peers())
    return doc


LIBRARY = {"two-nats": two_nats, "common-nat": common_nat, "nested-nats": nested_nats}


# -- runners ----------------------------------------------------------------

@dataclass
class PunchResult:
    requester: Optional[PunchOutcome]
    responder: Optional[PunchOutcome]
    trace: list

    @property
    def success(self) -> bool:
        return bool(self.requester and self.requester.success
                    and self.responder and self.responder.success)

    @property
    def retries(self) -> int:
        return sum(o.retries_used for o in (self.requester, self.responder) if o)


def run_until_done(scn: Scenario, sessions, limit: int, step: int = 100 * MS):
    """Advance the clock until every session in ``sessions()`` is done."""
    end = scn.net.now + limit
    while scn.net.now < end:
        current = sessions()
        if current and all(s is not None and s.done for s in current):
            return
        scn.net.run_until(min(end, scn.net.now + step))


def run_punch(scn: Scenario, transport: Transport = Transport.UDP, *, requester: str = "A",
              responder: str = "B", sequential: bool = False, predict: bool = False,
              reversal: bool = False, start: float = 1.0, limit: float = 40.0) -> PunchResult:
    """Register both peers at t=0, start the punch at ``start``, run to completion.

    ``sequential`` also switches the responder into sequential mode;
    ``predict`` turns on port prediction for both peers.
    """
    if sequential:
        scn.clients[responder].tcp_sequential = True
    if predict:
        for pid in (requester, responder):
            scn.clients[pid].predict = True
    scn.register(transport)
    scn.net.run_until(seconds(start))
    client = scn.clients[requester]
    if transport is Transport.UDP:
        mine = client.punch_udp(responder, predictive=predict)
    elif reversal:
        mine = client.connection_reversal(responder)
    elif sequential:
        mine = client.punch_tcp_sequential(responder)
    else:
        mine = client.punch_tcp(responder)

    def theirs() -> Optional[PunchSession]:
        return scn.clients[responder].sessions.get((transport, requester))

    run_until_done(scn, lambda: [mine, theirs()], seconds(limit))
    other = theirs()
    return PunchResult(mine.outcome, other.outcome if other else None, scn.net.trace)


NATCHECK_SERVERS = {"S1": "192.0.2.10", "S2": "198.51.100.20", "S3": "203.0.113.30"}


def natcheck_bed(nat: Optional[dict] = None, *, seed: int = 1) -> dict:
    """Probe client C (10.0.0.1) behind one NAT at 155.99.25.11, plus servers S1-S3.

    With ``nat=None`` the client sits directly in the global realm.
    """
    hosts = [{"id": sid, "realm": GLOBAL, "address": addr} for sid, addr in NATCHECK_SERVERS.items()]
    doc = {"name": "natcheck", "seed": seed, "realms": [], "nats": [], "hosts": hosts,
           "natcheck": {"client": "C", "servers": list(NATCHECK_SERVERS)}}
    if nat is None:
        hosts.append({"id": "C", "realm": GLOBAL, "address": "155.99.25.20"})
    else:
        doc["realms"].append({"id": "lan", "description": "network behind the NAT under test"})
        doc["nats"].append(_nat("nat", "lan", "155.99.25.11", **nat))
        hosts.append({"id": "C", "realm": "lan", "address": "10.0.0.1"})
    return doc


LIBRARY["natcheck"] = lambda seed=1: natcheck_bed({}, seed=seed)
LIBRARY["natcheck-open"] = natcheck_bed
