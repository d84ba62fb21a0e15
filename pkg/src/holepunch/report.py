"""Fleet sweeps and the per-label support table.

A fleet is a list of NAT configurations with multiplicities.  :func:`sweep`
probes every member with the natcheck suite; :func:`aggregate` counts, per
label and in total, how many probed NATs support UDP punching, UDP
hairpinning, TCP punching (strict rating) and TCP hairpinning.  A column's
denominator only counts NATs whose corresponding sub-test produced a result.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .natbox import NatConfig
from .natcheck import TESTS, NatProfile, classify, run_natcheck
from .scenario import build, natcheck_bed

log = logging.getLogger(__name__)

COLUMNS = ("udp_punch", "udp_hairpin", "tcp_punch", "tcp_hairpin")
HEADERS = ("UDP punch", "UDP hairpin", "TCP punch", "TCP hairpin")
TOTAL_LABEL = "All"
DASH = "–"


@dataclass
class FleetEntry:
    label: str
    config: dict
    count: int
    # sub-tests this group was probed with; older probe versions ran fewer
    tests: tuple = TESTS

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError(f"fleet entry {self.label!r}: count must be positive")
        unknown = set(self.tests) - set(TESTS)
        if unknown:
            raise ValueError(f"fleet entry {self.label!r}: unknown tests {sorted(unknown)}")
        self.tests = tuple(t for t in TESTS if t in self.tests)


@dataclass
class FleetSpec:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        labels = [e.label for e in self.entries]
        if len(labels) != len(set(labels)):
            raise ValueError("fleet labels must be unique")

    @property
    def size(self) -> int:
        return sum(e.count for e in self.entries)

    @classmethod
    def from_dict(cls, doc: dict) -> "FleetSpec":
        entries = []
        for e in doc.get("entries", []):
            entries.append(FleetEntry(e["label"], dict(e.get("config", {})), int(e["count"]),
                                      tuple(e.get("tests", TESTS))))
        return cls(entries)

    def to_dict(self) -> dict:
        return {"entries": [{"label": e.label, "config": e.config, "count": e.count,
                             "tests": list(e.tests)} for e in self.entries]}


def load_fleet(path) -> FleetSpec:
    with open(path) as fh:
        return FleetSpec.from_dict(json.load(fh))


def survey_fleet() -> FleetSpec:
    """A synthetic fleet mixed to give fixed reference totals.

    Groups probed with all four sub-tests (286 NATs), with the UDP tests only
    (49) and with the UDP punching test only (45).
    """
    cone = {"mapping": "endpoint_independent"}
    sym = {"mapping": "address_port_dependent"}
    udp_only = ("udp",)
    udp_both = ("udp", "udp_hairpin")
    return FleetSpec([
        FleetEntry("cone, hairpin", {**cone, "hairpin": True}, 37),
        FleetEntry("cone", dict(cone), 147),
        FleetEntry("cone, RST", {**cone, "tcp_unsolicited": "rst"}, 40),
        FleetEntry("symmetric", dict(sym), 62),
        FleetEntry("cone, hairpin (UDP tests)", {**cone, "hairpin": True}, 43, udp_both),
        FleetEntry("cone (UDP tests)", dict(cone), 6, udp_both),
        FleetEntry("cone (UDP punch test)", dict(cone), 37, udp_only),
        FleetEntry("symmetric (UDP punch test)", dict(sym), 8, udp_only),
    ])


# -- sweeping ---------------------------------------------------------------

@dataclass
class SweepResult:
    label: str
    index: int
    profile: Optional[NatProfile]
    error: Optional[str] = None


def entry_seed(label: str, index: int, base: int = 0) -> int:
    digest = hashlib.sha256(f"{base}/{label}/{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _probe(job) -> SweepResult:
    label, index, config, tests, seed = job
    try:
        scn = build(natcheck_bed(config), seed=seed)
        return SweepResult(label, index, run_natcheck(scn, tests))
    except Exception as exc:  # one bad entry must not abort the sweep
        log.warning("fleet entry %s #%d failed: %s", label, index, exc)
        return SweepResult(label, index, None, f"{type(exc).__name__}: {exc}")


def sweep(fleet: FleetSpec, seed: int = 0, workers: int = 1) -> list[SweepResult]:
    jobs = [(e.label, i, e.config, e.tests, entry_seed(e.label, i, seed))
            for e in fleet.entries for i in range(e.count)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_probe, jobs, chunksize=16))
    return [_probe(job) for job in jobs]


# -- aggregation ------------------------------------------------------------

@dataclass(frozen=True)
class Fraction:
    num: int
    den: int

    @property
    def percent(self) -> Optional[int]:
        if not self.den:
            return None
        return (200 * self.num + self.den) // (2 * self.den)  # round half up

    def __str__(self):
        if not self.den:
            return DASH
        return f"{self.num}/{self.den} ({self.percent}%)"

    def __add__(self, other: "Fraction") -> "Fraction":
        return Fraction(self.num + other.num, self.den + other.den)


@dataclass(frozen=True)
class AggregateRow:
    label: str
    udp_punch: Fraction
    udp_hairpin: Fraction
    tcp_punch: Fraction
    tcp_hairpin: Fraction

    def cells(self) -> list[str]:
        return [str(getattr(self, c)) for c in COLUMNS]

    def to_dict(self) -> dict:
        out = {"label": self.label}
        for c in COLUMNS:
            f = getattr(self, c)
            out[c] = [f.num, f.den, f.percent]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateRow":
        return cls(d["label"], *(Fraction(d[c][0], d[c][1]) for c in COLUMNS))


def _counts(profile: NatProfile) -> dict:
    v = classify(profile)
    out = {}
    for col, value in (("udp_punch", v.udp_punch_friendly), ("udp_hairpin", v.udp_hairpin),
                       ("tcp_punch", v.tcp_punch_friendly), ("tcp_hairpin", v.tcp_hairpin)):
        out[col] = Fraction(int(value is True), int(value is not None))
    return out


def aggregate(results) -> list[AggregateRow]:
    """Per-label rows in first-seen label order, then the totals row."""
    zero = Fraction(0, 0)
    by_label: dict[str, dict] = {}
    for r in results:
        row = by_label.setdefault(r.label, {c: zero for c in COLUMNS})
        if r.profile is None:
            continue
        for col, frac in _counts(r.profile).items():
            row[col] = row[col] + frac
    rows = [AggregateRow(label, *(counts[c] for c in COLUMNS)) for label, counts in by_label.items()]
    total = {c: sum((getattr(r, c) for r in rows), zero) for c in COLUMNS}
    rows.append(AggregateRow(TOTAL_LABEL, *(total[c] for c in COLUMNS)))
    return rows


def render_table(rows) -> str:
    header = ["NAT"] + list(HEADERS)
    body = [[r.label] + r.cells() for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]

    def fmt(line):
        first = line[0].ljust(widths[0])
        rest = [cell.rjust(w) for cell, w in zip(line[1:], widths[1:])]
        return "  ".join([first] + rest).rstrip()

    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(line) for line in body)
    return "\n".join(lines) + "\n"


def render_report(rows) -> tuple[str, str]:
    """Return ``(text_table, json_document)`` carrying the same numbers."""
    doc = {"columns": list(COLUMNS), "rows": [r.to_dict() for r in rows]}
    return render_table(rows), json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_report(text: str) -> list[AggregateRow]:
    return [AggregateRow.from_dict(d) for d in json.loads(text)["rows"]]
