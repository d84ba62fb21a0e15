"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are pinned here: scenario runs under 1s wall clock each, the
full classifier sweep under 60s, zero mismatches everywhere else.
"""
import itertools
import json
import time

import pytest

from holepunch.core import Hello, Transport
from holepunch.natbox import NatConfig
from holepunch.natcheck import (classify, config_grid, expected_profile, mismatches,
                                predict_tcp_pair, run_natcheck)
from holepunch.puncher import DEFAULT_DEADLINE, Path, PunchState
from holepunch.report import Fraction, aggregate, render_report, survey_fleet, sweep
from holepunch.scenario import build, common_nat, natcheck_bed, nested_nats, run_punch, two_nats
from holepunch.simnet import SECOND

UDP, TCP = Transport.UDP, Transport.TCP
SCENARIO_WALL_LIMIT = 1.0
SWEEP_WALL_LIMIT = 60.0
SYM = {"mapping": "address_port_dependent"}
A_FIRST = {"B": {"connect_delay": 0.1}}
B_FIRST = {"A": {"connect_delay": 0.1}}


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail
    return emit


def timed_punch(doc, transport=UDP, **kw):
    start = time.perf_counter()
    scn = build(doc)
    result = run_punch(scn, transport, **kw)
    return scn, result, time.perf_counter() - start


def test_criterion_1_scenario_truth_table(verdict):
    checks = []
    for transport in (UDP, TCP):
        _, r, wall = timed_punch(two_nats(), transport)
        checks.append((f"two cone NATs {transport.value} public",
                       r.success and r.requester.path is Path.PUBLIC
                       and r.responder.path is Path.PUBLIC, wall))
    _, r, wall = timed_punch(common_nat(False))
    checks.append(("common NAT private", r.success and r.requester.path is Path.PRIVATE, wall))
    _, r, wall = timed_punch(common_nat(True))
    checks.append(("common NAT with hairpin locks one path",
                   r.success and r.requester.path in (Path.PRIVATE, Path.HAIRPIN), wall))
    _, r, wall = timed_punch(nested_nats(True))
    remotes = (str(r.requester.locked_remote), str(r.responder.locked_remote)) if r.success else ()
    checks.append(("nested NATs with hairpin",
                   r.success and sorted(remotes) == ["155.99.25.11:62000", "155.99.25.11:62005"], wall))
    _, r, wall = timed_punch(nested_nats(False))
    checks.append(("nested NATs without hairpin fail", not r.success, wall))
    for a, b in ((SYM, None), (None, SYM)):
        for transport in (UDP, TCP):
            _, r, wall = timed_punch(two_nats(a, b), transport)
            checks.append((f"symmetric NAT {transport.value} fails",
                           not r.success and r.requester.elapsed <= DEFAULT_DEADLINE, wall))
    bad = [name for name, ok, wall in checks if not ok or wall >= SCENARIO_WALL_LIMIT]
    slowest = max(wall for _, _, wall in checks)
    verdict(1, not bad, f"{len(checks) - len(bad)}/{len(checks)} scenarios as expected, "
                        f"slowest {slowest:.3f}s (limit {SCENARIO_WALL_LIMIT}s); failing: {bad}")


def test_criterion_2_classifier_oracle_equivalence(verdict):
    start = time.perf_counter()
    grid = config_grid()
    bad = []
    for config in grid:
        doc = natcheck_bed(config)
        expected = expected_profile(NatConfig.from_dict(doc["nats"][0]["config"]))
        diff = mismatches(run_natcheck(build(doc)), expected)
        if diff:
            bad.append((config, diff))
    wall = time.perf_counter() - start
    verdict(2, len(grid) == 324 and not bad and wall < SWEEP_WALL_LIMIT,
            f"{len(grid)} configs, {len(bad)} mismatches, {wall:.1f}s (limit {SWEEP_WALL_LIMIT}s)")


def test_criterion_3_prediction_from_classifier(verdict):
    mappings = ("endpoint_independent", "address_port_dependent")
    configs = [{"mapping": m, "tcp_unsolicited": u} for m in mappings for u in ("drop", "rst", "allow")]
    verdicts = [classify(run_natcheck(build(natcheck_bed(c)))) for c in configs]
    mismatched, naive_misses = [], 0
    for (i, a), (j, b) in itertools.product(enumerate(configs), repeat=2):
        runs = [run_punch(build(two_nats(a, b, peer_opts=order)), TCP)
                for order in ({}, A_FIRST, B_FIRST)]
        success = all(r.success for r in runs)
        clean = success and all(r.retries == 0 for r in runs)
        predicted = predict_tcp_pair(verdicts[i], verdicts[j])
        if (predicted.tcp_success, predicted.tcp_without_retries) != (success, clean):
            mismatched.append((a, b))
        naive = verdicts[i].tcp_punch_lenient and verdicts[j].tcp_punch_lenient
        naive_misses += naive != success
    verdict(3, not mismatched,
            f"36 NAT pairs x 3 SYN orderings, {len(mismatched)} mismatches "
            f"(a per-NAT AND of lenient verdicts would miss {naive_misses})")


def test_criterion_4_rst_tolerance(verdict):
    rst, drop = {"tcp_unsolicited": "rst"}, {"tcp_unsolicited": "drop"}
    rows = []
    for order in (A_FIRST, B_FIRST):
        r_rst = run_punch(build(two_nats(rst, rst, peer_opts=order)), TCP)
        r_drop = run_punch(build(two_nats(drop, drop, peer_opts=order)), TCP)
        rows.append((r_rst.success and r_rst.retries >= 1 and r_drop.success
                     and r_drop.retries <= r_rst.retries, r_rst.retries, r_drop.retries))
    verdict(4, all(ok for ok, _, _ in rows),
            "retries (RST, DROP) per ordering: " + ", ".join(f"({a}, {b})" for _, a, b in rows))


def test_criterion_5_simultaneous_open(verdict):
    scn, r, _ = timed_punch(two_nats(), TCP)
    outgoing = []
    for pid, peer in (("A", "B"), ("B", "A")):
        s = scn.clients[pid].sessions[(TCP, peer)]
        outgoing.append(s.stream is not None and s.stream.established
                        and s.stream in s.conns.values())
    peers = {"138.76.29.7:31000", "155.99.25.11:62000"}
    flags = [(e["src"], e["flags"]) for e in map(json.loads, scn.net.trace)
             if e["ev"] == "send" and e["realm"] in ("A", "B") and e.get("proto") == "tcp"
             and e["dst"] in peers]
    seq = [f for _, f in flags]
    handshake = seq[:2] == ["SYN", "SYN"] and seq[2:4] == ["SYN,ACK", "SYN,ACK"] and "ACK" in seq[4:]
    verdict(5, r.success and all(outgoing) and handshake,
            f"both ends established on their own outgoing handle: {all(outgoing)}; "
            f"peer-to-peer flags {seq[:6]}")


def keepalive_scenario(maintain):
    scn = build(two_nats({"udp_idle_timeout": 20}, {"udp_idle_timeout": 20}))
    assert run_punch(scn, UDP).success
    if maintain:
        scn.clients["A"].maintain_udp("B")
        scn.clients["B"].maintain_udp("A")
    return scn


def ping_arrives(scn, at):
    scn.net.run_until(at * SECOND)
    b = scn.clients["B"]
    s = b.sessions[(UDP, "A")]
    mark = len(scn.net.trace)
    b._send_udp(s.locked_remote, Hello("B", s.nonce))
    scn.net.run_for(SECOND)
    return any(e["ev"] == "recv" and e["realm"] == "A"
               for e in map(json.loads, scn.net.trace[mark:]))


def test_criterion_6_keepalive(verdict):
    alive = ping_arrives(keepalive_scenario(True), 120)
    dropped = not ping_arrives(keepalive_scenario(False), 25)
    scn = keepalive_scenario(True)
    scn.net.run_until(40 * SECOND)
    scn.nats["natA"].reset()
    scn.net.run_until(200 * SECOND)
    s = scn.clients["A"].sessions[(UDP, "B")]
    restored = (scn.clients["A"].keepalives["B"].repunches >= 1 and s.state is PunchState.LOCKED
                and s.outcome.elapsed < DEFAULT_DEADLINE)
    elapsed = s.outcome.elapsed / SECOND if s.outcome else float("nan")
    verdict(6, alive and dropped and restored,
            f"alive at 120s: {alive}; dropped at 25s without keep-alives: {dropped}; "
            f"re-punch after NAT reset locked in {elapsed:.2f}s (deadline {DEFAULT_DEADLINE / SECOND:.0f}s)")


def test_criterion_7_payload_rewrite(verdict):
    scn, r, _ = timed_punch(two_nats({"payload_rewrite": True}))
    stored = scn.server.tables[UDP]["A"].private_ep
    true_private = scn.clients["A"].private
    verdict(7, r.success and stored == true_private,
            f"punch success {r.success}; server stored {stored}, client private {true_private}")


def test_criterion_8_table_rendering(verdict):
    rows = aggregate(sweep(survey_fleet()))
    text, _ = render_report(rows)
    totals = text.splitlines()[-1]
    wanted = ["310/380 (82%)", "80/335 (24%)", "184/286 (64%)", "37/286 (13%)"]
    cells = {(1, 8): "13%", (5, 42): "12%", (16, 21): "76%", (11, 21): "52%", (45, 46): "98%",
             (3, 35): "9%", (2, 7): "29%"}
    cell_ok = all(f"({pct})" in str(Fraction(*nd)) for nd, pct in cells.items())
    verdict(8, all(w in totals for w in wanted) and cell_ok,
            f"totals row {totals.split(None, 1)[1]!r}; {len(cells)} rounding cells ok: {cell_ok}")


def all_scenario_artifacts():
    out = []
    for doc, transport, kw in [
        (two_nats(), UDP, {}), (two_nats(), TCP, {}), (common_nat(False), UDP, {}),
        (common_nat(True), UDP, {}), (nested_nats(True), UDP, {}), (nested_nats(False), UDP, {}),
        (two_nats(SYM), TCP, {}), (two_nats({"tcp_unsolicited": "rst"}, {"tcp_unsolicited": "rst"},
                                            peer_opts=A_FIRST), TCP, {}),
        (two_nats({"payload_rewrite": True}), UDP, {}),
        (two_nats(), TCP, {"sequential": True}),
        (two_nats(SYM, probe_ports=(1235, 1236)), UDP, {"predict": True}),
    ]:
        scn = build(doc)
        run_punch(scn, transport, **kw)
        out.append(scn.net.trace_text())
    scn = keepalive_scenario(True)
    scn.net.run_until(40 * SECOND)
    scn.nats["natA"].reset()
    scn.net.run_until(150 * SECOND)
    out.append(scn.net.trace_text())
    scn = build(natcheck_bed({"tcp_unsolicited": "rst", "hairpin": True}))
    out.append(json.dumps(run_natcheck(scn).to_dict(), sort_keys=True) + scn.net.trace_text())
    out.append(render_report(aggregate(sweep(survey_fleet())))[1])
    return out


def test_criterion_9_determinism(verdict):
    first, second = all_scenario_artifacts(), all_scenario_artifacts()
    same = [a == b for a, b in zip(first, second)]
    verdict(9, all(same) and len(first) == len(second),
            f"{sum(same)}/{len(same)} traces and reports byte-identical across two runs")
