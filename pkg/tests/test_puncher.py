import json

import pytest

from holepunch.core import Hello, Transport, parse_endpoint
from holepunch.puncher import DEFAULT_DEADLINE, NotApplicable, Path, PunchState
from holepunch.scenario import build, common_nat, nested_nats, run_punch, run_until_done, two_nats
from holepunch.simnet import GLOBAL, SECOND, UsageError

UDP, TCP = Transport.UDP, Transport.TCP
SYM = {"mapping": "address_port_dependent"}


def punch(doc, transport=UDP, **kw):
    scn = build(doc)
    return scn, run_punch(scn, transport, **kw)


@pytest.mark.parametrize("transport", [UDP, TCP])
def test_public_path_between_two_cone_nats(transport):
    _, r = punch(two_nats(), transport)
    assert r.success
    assert r.requester.path is r.responder.path is Path.PUBLIC
    assert r.requester.locked_remote == parse_endpoint("138.76.29.7:31000", transport)
    assert r.responder.locked_remote == parse_endpoint("155.99.25.11:62000", transport)
    assert r.retries == 0


@pytest.mark.parametrize("hairpin", [False, True])
def test_common_nat_prefers_private_path(hairpin):
    _, r = punch(common_nat(hairpin))
    assert r.success and r.requester.path is Path.PRIVATE
    assert r.requester.locked_remote == parse_endpoint("10.1.1.3:4321")


def test_nested_nats_lock_hairpin_endpoints():
    _, r = punch(nested_nats(True))
    assert r.success and r.requester.path is Path.HAIRPIN
    assert str(r.requester.locked_remote) == "155.99.25.11:62005"
    assert str(r.responder.locked_remote) == "155.99.25.11:62000"


def test_nested_nats_without_hairpin_fail():
    _, r = punch(nested_nats(False))
    assert not r.success


@pytest.mark.parametrize("transport", [UDP, TCP])
@pytest.mark.parametrize("a, b", [(SYM, None), (None, SYM)])
def test_symmetric_nat_fails_at_deadline(transport, a, b):
    _, r = punch(two_nats(a, b), transport)
    assert not r.success and r.requester.path is None
    assert r.requester.elapsed == DEFAULT_DEADLINE


@pytest.mark.parametrize("transport", [UDP, TCP])
def test_transport_symmetry(transport):
    # swapping requester and responder changes nothing but the direction
    _, fwd = punch(two_nats(), transport)
    _, rev = punch(two_nats(), transport, requester="B", responder="A")
    assert fwd.success and rev.success
    assert fwd.requester.locked_remote == rev.responder.locked_remote


def test_stray_hellos_never_lock():
    doc = two_nats()
    doc["hosts"].append({"id": "X", "realm": "A", "address": "10.0.0.9"})
    scn = build(doc)
    x = scn.hosts["X"]
    x.bind_udp(4321, lambda pkt: None)
    scn.register()
    scn.net.run_until(SECOND)
    s = scn.clients["A"].punch_udp("B")
    # a wrong nonce, then a right-looking sender id with a wrong nonce
    scn.net.schedule(35 * SECOND // 1000, x.send_datagram, 4321, parse_endpoint("10.0.0.1:4321"),
                     json.dumps({"t": "hello", "from": "B", "nonce": "11" * 16}).encode())
    run_until_done(scn, lambda: [s], 40 * SECOND)
    assert s.state is PunchState.LOCKED and s.locked_remote.address != x.address
    assert scn.clients["A"].strays >= 1


def test_lock_is_unique_and_final():
    scn, r = punch(common_nat(True))
    a = scn.clients["A"]
    s = a.sessions[(UDP, "B")]
    scn.net.run_for(5 * SECOND)
    assert s.state is PunchState.LOCKED and s.locked_remote == r.requester.locked_remote
    assert len([x for x in a.history if x.peer == "B"]) == 1


def test_relay_fallback_delivers_payload():
    scn, r = punch(two_nats(SYM, SYM))
    assert not r.success
    scn.clients["A"].relay("B", b"over the server")
    scn.net.run_for(SECOND)
    assert scn.clients["B"].inbox == [("A", b"over the server")]


def test_relay_to_unknown_peer_reports_error():
    scn = build(two_nats())
    scn.register()
    scn.net.run_for(SECOND)
    scn.clients["A"].relay("nobody", b"x")
    scn.net.run_for(SECOND)
    assert [e.code for e in scn.clients["A"].errors] == ["unknown-peer"]


def public_requester_doc():
    doc = two_nats()
    doc["nats"] = [n for n in doc["nats"] if n["id"] != "natA"]
    for h in doc["hosts"]:
        if h["id"] == "A":
            h.update(realm=GLOBAL, address="155.99.25.50")
    return doc


def test_connection_reversal_reaches_public_requester():
    _, r = punch(public_requester_doc(), TCP, reversal=True)
    assert r.success and r.requester.path is Path.REVERSAL
    assert r.requester.locked_remote == parse_endpoint("138.76.29.7:31000", TCP)


def test_connection_reversal_needs_public_requester():
    scn = build(two_nats())
    scn.register(TCP)
    scn.net.run_for(SECOND)
    with pytest.raises(NotApplicable):
        scn.clients["A"].connection_reversal("B")


def test_reversal_before_registration_is_a_usage_error():
    scn = build(public_requester_doc())
    with pytest.raises(UsageError):
        scn.clients["A"].connection_reversal("B")


def test_sequential_tcp_succeeds_but_slower():
    _, par = punch(two_nats(), TCP)
    _, seq = punch(two_nats(), TCP, sequential=True)
    assert seq.success and seq.requester.path is Path.PUBLIC
    assert seq.requester.elapsed > par.requester.elapsed + SECOND


LOST_SYN = {"B": [{"dst": "155.99.25.11:62000", "syn_only": True, "count": 1}]}


@pytest.mark.parametrize("doomed_wait, ok", [(0, False), (2.0, True)])
def test_sequential_needs_time_for_the_doomed_attempt(doomed_wait, ok):
    doc = two_nats(faults=LOST_SYN, peer_opts={"B": {"doomed_wait": doomed_wait}})
    _, r = punch(doc, TCP, sequential=True)
    assert r.success is ok


def test_sequential_with_rst_nats():
    rst = {"tcp_unsolicited": "rst"}
    _, r = punch(two_nats(rst, rst), TCP, sequential=True)
    assert r.success


def test_predictive_punch_through_one_symmetric_nat():
    doc = two_nats(SYM, None, probe_ports=(1235, 1236))
    assert punch(doc, predict=True)[1].success
    assert not punch(doc)[1].success


@pytest.mark.parametrize("a, b", [
    (SYM, SYM),
    ({**SYM, "port_alloc": "random"}, None),
])
def test_prediction_limits(a, b):
    _, r = punch(two_nats(a, b, probe_ports=(1235, 1236)), predict=True)
    assert not r.success


def test_interfering_host_spoils_prediction():
    doc = two_nats(SYM, None, probe_ports=(1235, 1236))
    doc["hosts"].append({"id": "X", "realm": "A", "address": "10.0.0.9"})
    scn = build(doc)
    x = scn.hosts["X"]
    x.bind_udp(5000, lambda pkt: None)
    scn.net.schedule(SECOND // 2, x.send_datagram, 5000, parse_endpoint("9.9.9.9:9"), b"noise")
    assert not run_punch(scn, UDP, predict=True).success


def test_payload_rewrite_keeps_private_endpoint():
    scn, r = punch(two_nats({"payload_rewrite": True}))
    assert r.success
    assert str(scn.server.tables[UDP]["A"].private_ep) == "10.0.0.1:4321"


KEEPALIVE_NATS = ({"udp_idle_timeout": 20}, {"udp_idle_timeout": 20})


def keepalive_bed(maintain):
    scn, r = punch(two_nats(*KEEPALIVE_NATS))
    assert r.success
    if maintain:
        scn.clients["A"].maintain_udp("B")
        scn.clients["B"].maintain_udp("A")
    return scn


def ping_reaches_a(scn, at):
    scn.net.run_until(at * SECOND)
    b = scn.clients["B"]
    s = b.sessions[(UDP, "A")]
    mark = len(scn.net.trace)
    b._send_udp(s.locked_remote, Hello("B", s.nonce))
    scn.net.run_for(SECOND)
    events = [json.loads(line) for line in scn.net.trace[mark:]]
    return any(e["ev"] == "recv" and e["realm"] == "A" for e in events)


def test_keepalives_hold_mapping_open():
    assert ping_reaches_a(keepalive_bed(True), 120)


def test_idle_mapping_expires_without_keepalives():
    assert not ping_reaches_a(keepalive_bed(False), 25)


def test_keepalive_repunches_after_nat_reset():
    scn = keepalive_bed(True)
    scn.net.run_until(40 * SECOND)
    scn.nats["natA"].reset()
    scn.net.run_until(150 * SECOND)
    a = scn.clients["A"]
    assert a.keepalives["B"].repunches >= 1
    latest = a.sessions[(UDP, "B")]
    assert latest.state is PunchState.LOCKED and latest.outcome.elapsed < DEFAULT_DEADLINE
    assert len(a.history) >= 2


def test_keepalive_requires_locked_session():
    scn = build(two_nats())
    with pytest.raises(UsageError):
        scn.clients["A"].maintain_udp("B")


def test_requests_to_unknown_peer_fail_fast():
    scn = build(two_nats())
    scn.register()
    scn.net.run_for(SECOND)
    s = scn.clients["A"].punch_udp("ghost")
    scn.net.run_for(SECOND)
    assert s.state is PunchState.FAILED and s.outcome.elapsed < SECOND
