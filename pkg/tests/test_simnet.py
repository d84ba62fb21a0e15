import json

import pytest

from holepunch.core import Transport, parse_address, parse_endpoint
from holepunch.natbox import NatBox, NatConfig
from holepunch.simnet import (
    GLOBAL, MS, SECOND, AddressInUse, Failure, LinkFault, Network, SimError, TcpState,
    UsageError, VirtualClock,
)

S_ADDR = parse_address("18.181.0.31")


def test_equal_times_fire_in_schedule_order():
    clock, fired = VirtualClock(), []
    clock.schedule(0, fired.append, "a")
    clock.schedule(0, fired.append, "b")
    clock.schedule(5, fired.append, "c")
    assert clock.run_until(5) == 3
    assert fired == ["a", "b", "c"]


def test_run_until_stops_short_and_cancel():
    clock, fired = VirtualClock(), []
    clock.schedule(SECOND, fired.append, "late")
    handle = clock.schedule(10, fired.append, "cancelled")
    handle.cancel()
    assert clock.run_until(SECOND // 2) == 0
    assert fired == [] and clock.now == SECOND // 2
    clock.run_until(SECOND)
    assert fired == ["late"]


def test_empty_queue_advances_and_past_is_an_error():
    clock = VirtualClock()
    assert clock.run_until(7) == 0 and clock.now == 7
    with pytest.raises(SimError):
        clock.run_until(3)
    with pytest.raises(SimError):
        clock.schedule(-1, print)


def two_hosts(**kw):
    net = Network(seed=3, **kw)
    a = net.add_host("a", GLOBAL, parse_address("1.0.0.1"))
    b = net.add_host("b", GLOBAL, parse_address("1.0.0.2"))
    return net, a, b


def test_datagram_latency_and_unbound_source():
    net, a, b = two_hosts()
    got = []
    b.bind_udp(9, lambda pkt: got.append((net.now, pkt.payload)))
    a.bind_udp(8, lambda pkt: None)
    a.send_datagram(8, b.endpoint(9), b"x")
    net.run_for(SECOND)
    assert got == [(10 * MS, b"x")]
    with pytest.raises(UsageError):
        a.send_datagram(7, b.endpoint(9), b"x")


def test_datagram_to_nowhere_is_dropped_silently():
    net, a, _ = two_hosts()
    a.bind_udp(8, lambda pkt: None)
    a.send_datagram(8, parse_endpoint("9.9.9.9:1"), b"x")
    net.run_for(SECOND)
    assert json.loads(net.trace[-1])["info"] == "no-host"


def fig5_net():
    net = Network(seed=1)
    net.add_realm("A")
    net.add_realm("B")
    net.attach_nat(NatBox("natA", NatConfig(parse_address("155.99.25.11"))), "A", GLOBAL)
    net.attach_nat(NatBox("natB", NatConfig(parse_address("138.76.29.7"), port_range=(31000, 31999))),
                   "B", GLOBAL)
    s = net.add_host("S", GLOBAL, S_ADDR)
    a = net.add_host("A", "A", parse_address("10.0.0.1"))
    b = net.add_host("B", "B", parse_address("10.1.1.3"))
    return net, s, a, b


def test_datagram_through_nat_shows_public_source():
    net, s, a, b = fig5_net()
    seen = []
    s.bind_udp(1234, lambda pkt: seen.append(pkt.src))
    a.bind_udp(4321, lambda pkt: None)
    a.send_datagram(4321, s.endpoint(1234), b"hi")
    net.run_for(SECOND)
    assert seen == [parse_endpoint("155.99.25.11:62000")]


def test_private_address_from_another_realm_never_reaches_b():
    net, s, a, b = fig5_net()
    got = []
    b.bind_udp(4321, got.append)
    a.bind_udp(4321, lambda pkt: None)
    a.send_datagram(4321, parse_endpoint("10.1.1.3:4321"), b"hi")
    net.run_for(SECOND)
    assert got == []


def test_same_seed_same_trace():
    def run(seed):
        net = Network(seed=seed)
        a = net.add_host("a", GLOBAL, 1, loss=0.5)
        b = net.add_host("b", GLOBAL, 2)
        a.bind_udp(1, lambda p: None)
        b.bind_udp(1, lambda p: None)
        for i in range(50):
            net.schedule(i * MS, a.send_datagram, 1, b.endpoint(1), bytes([i]))
        net.run_for(SECOND)
        return net.trace_text()

    assert run(4) == run(4)
    assert run(4) != run(5)


# -- TCP --------------------------------------------------------------------

def flags_seen(net, host_realm=GLOBAL):
    return [(r["src"], r.get("flags")) for r in map(json.loads, net.trace)
            if r["ev"] == "send" and r.get("proto") == "tcp"]


def test_three_way_handshake_via_listener():
    net, a, b = two_hosts()
    accepted, done = [], []
    b.tcp_listen(80, accepted.append)
    conn = a.tcp_open(5000, b.endpoint(80, Transport.TCP), on_established=done.append)
    net.run_for(SECOND)
    assert done == [conn] and conn.state is TcpState.ESTABLISHED
    assert len(accepted) == 1 and accepted[0].established
    assert [f for _, f in flags_seen(net)] == ["SYN", "SYN,ACK", "ACK"]


def test_simultaneous_open_resolves_on_outgoing_handles():
    net, a, b = two_hosts()
    accepted = []
    a.tcp_listen(5000, accepted.append)
    b.tcp_listen(6000, accepted.append)
    ca = a.tcp_open(5000, b.endpoint(6000, Transport.TCP))
    cb = b.tcp_open(6000, a.endpoint(5000, Transport.TCP))
    net.run_for(SECOND)
    assert ca.established and cb.established
    assert accepted == []
    flags = [f for _, f in flags_seen(net)]
    assert flags[:2] == ["SYN", "SYN"] and flags[2:4] == ["SYN,ACK", "SYN,ACK"]


def test_reset_and_timeout_failures():
    net, a, b = two_hosts()
    failures = []
    a.tcp_open(5000, b.endpoint(81, Transport.TCP), on_failed=lambda c, why: failures.append(why))
    a.tcp_open(5000, parse_endpoint("9.9.9.9:80", Transport.TCP),
               on_failed=lambda c, why: failures.append((net.now, why)))
    net.run_for(10 * SECOND)
    assert failures[0] is Failure.RESET
    # four SYNs one second apart, then give up one interval after the last
    assert failures[1] == (4 * SECOND, Failure.TIMEOUT)


def test_duplicate_session_and_double_listen():
    net, a, b = two_hosts()
    a.tcp_open(5000, b.endpoint(80, Transport.TCP))
    with pytest.raises(AddressInUse):
        a.tcp_open(5000, b.endpoint(80, Transport.TCP))
    a.tcp_open(5000, b.endpoint(81, Transport.TCP))  # port reuse is fine
    a.tcp_listen(5000, None)
    with pytest.raises(UsageError):
        a.tcp_listen(5000, None)


def test_close_sends_rst_only_after_syn_exchange():
    net, a, b = two_hosts()
    b.tcp_listen(80, None)
    half = a.tcp_open(5000, b.endpoint(81, Transport.TCP))
    half.close()
    full = a.tcp_open(5001, b.endpoint(80, Transport.TCP))
    net.run_for(SECOND)
    full.close()
    net.run_for(SECOND)
    sent = flags_seen(net)
    assert ("1.0.0.1:5000", "SYN") in sent and not any(
        src == "1.0.0.1:5000" and "RST" in f for src, f in sent)
    assert ("1.0.0.1:5001", "RST") in sent


def test_established_requires_acknowledged_syns():
    net, a, b = two_hosts()
    b.tcp_listen(80, None)
    ca = a.tcp_open(5000, b.endpoint(80, Transport.TCP))
    net.run_for(SECOND)
    cb = b.conns[ca.key.reversed()]
    assert ca.sent_syn and ca.syn_acked and cb.sent_syn and cb.syn_acked


def test_link_fault_drops_first_matching_syn_only():
    net = Network(seed=1)
    dst = parse_endpoint("1.0.0.2:80", Transport.TCP)
    a = net.add_host("a", GLOBAL, parse_address("1.0.0.1"), faults=[LinkFault(dst, True, 1)])
    b = net.add_host("b", GLOBAL, parse_address("1.0.0.2"))
    b.tcp_listen(80, None)
    conn = a.tcp_open(5000, dst)
    net.run_for(3 * SECOND)
    assert conn.established and net.now >= SECOND
    drops = [json.loads(r) for r in net.trace if '"drop"' in r]
    assert len(drops) == 1 and drops[0]["info"].startswith("fault")
