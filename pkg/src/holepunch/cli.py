"""Command-line entry point.

Exit codes: 0 success, 2 punch failure, 3 inconclusive probe, 1 usage errors.
A ``--scenario`` argument is a JSON file or the name of a built-in topology
(``two-nats``, ``common-nat``, ``nested-nats``, ``natcheck``, ``natcheck-open``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import Transport
from .natcheck import TESTS, classify, run_natcheck
from .report import aggregate, load_fleet, render_report, sweep, survey_fleet
from .scenario import LIBRARY, build, load, run_punch
from .simnet import SECOND

EXIT_OK = 0
EXIT_PUNCH_FAILED = 2
EXIT_INCONCLUSIVE = 3


def _scenario_doc(ref: str) -> dict:
    if ref in LIBRARY and not Path(ref).exists():
        return LIBRARY[ref]()
    return load(ref)


def cmd_sweep(args) -> int:
    fleet = survey_fleet() if args.fleet == "survey" else load_fleet(args.fleet)
    results = sweep(fleet, seed=args.seed or 0, workers=args.workers)
    text, doc = render_report(aggregate(results))
    if args.out:
        Path(args.out).write_text(doc)
    sys.stdout.write(text)
    errors = [r for r in results if r.error]
    for r in errors:
        print(f"error: {r.label} #{r.index}: {r.error}", file=sys.stderr)
    return EXIT_INCONCLUSIVE if errors else EXIT_OK


def cmd_punch(args) -> int:
    scn = build(_scenario_doc(args.scenario), seed=args.seed)
    transport = Transport(args.transport)
    result = run_punch(scn, transport, requester=args.requester, responder=args.responder,
                       sequential=args.sequential, predict=args.predict)
    out = {"requester": result.requester.to_dict() if result.requester else None,
           "responder": result.responder.to_dict() if result.responder else None,
           "success": result.success}
    print(json.dumps(out, indent=2))
    if args.trace:
        Path(args.trace).write_text(scn.net.trace_text())
    return EXIT_OK if result.success else EXIT_PUNCH_FAILED


def cmd_natcheck(args) -> int:
    doc = _scenario_doc(args.scenario)
    scn = build(doc, seed=args.seed)
    roles = doc.get("natcheck", {})
    tests = tuple(args.tests.split(",")) if args.tests else TESTS
    profile = run_natcheck(scn, tests, roles.get("client", "C"),
                           tuple(roles.get("servers", ("S1", "S2", "S3"))))
    verdict = classify(profile)
    print(json.dumps({"profile": profile.to_dict(), "verdict": verdict.to_dict()}, indent=2))
    wanted = {"udp": ("udp_consistent",), "udp_hairpin": ("udp_hairpin",),
              "tcp": ("tcp_consistent", "tcp_unsolicited_observed"), "tcp_hairpin": ("tcp_hairpin",)}
    missing = [f for t in tests for f in wanted[t] if getattr(profile, f) is None]
    return EXIT_INCONCLUSIVE if missing else EXIT_OK


def cmd_trace(args) -> int:
    doc = _scenario_doc(args.scenario)
    scn = build(doc, seed=args.seed)
    if doc.get("script"):
        scn.run_script()
        last = max(step["at"] for step in doc["script"])
        scn.net.run_until(round((last + args.extra) * SECOND))
    elif scn.clients:
        run_punch(scn, Transport(args.transport))
    sys.stdout.write(scn.net.trace_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="holepunch",
                                     description="NAT traversal over a simulated network")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    p = sub.add_parser("sweep", help="probe a fleet of NATs and print the support table")
    p.add_argument("--fleet", required=True, help="fleet JSON file, or 'survey'")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("punch", help="run one hole-punching attempt")
    p.add_argument("--scenario", required=True)
    p.add_argument("--transport", choices=["udp", "tcp"], default="udp")
    p.add_argument("--sequential", action="store_true")
    p.add_argument("--predict", action="store_true")
    p.add_argument("--requester", default="A")
    p.add_argument("--responder", default="B")
    p.add_argument("--trace", help="write the packet trace here")
    common(p)
    p.set_defaults(func=cmd_punch)

    p = sub.add_parser("natcheck", help="probe the NAT in a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--tests", help=f"comma-separated subset of {','.join(TESTS)}")
    common(p)
    p.set_defaults(func=cmd_natcheck)

    p = sub.add_parser("trace", help="run a scenario and print its packet trace")
    p.add_argument("--scenario", required=True)
    p.add_argument("--transport", choices=["udp", "tcp"], default="udp")
    p.add_argument("--extra", type=float, default=40.0,
                   help="seconds to keep running after the last scripted action")
    common(p)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which would read as a punch failure
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
