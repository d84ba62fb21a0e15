import pytest
from hypothesis import given, settings, strategies as st

from holepunch.natbox import NatConfig
from holepunch.natcheck import (
    COMPARED, TESTS, NatProfile, Observed, TcpRating, classify, config_grid, expected_profile,
    mismatches, predict_tcp_pair, run_natcheck,
)
from holepunch.scenario import build, natcheck_bed

CONE = {"mapping": "endpoint_independent", "filtering": "address_port_dependent"}
SYM = {"mapping": "address_port_dependent", "filtering": "address_port_dependent"}


def probe(nat, tests=TESTS, seed=1):
    doc = natcheck_bed(nat, seed=seed)
    profile = run_natcheck(build(doc), tests)
    cfg = NatConfig.from_dict(doc["nats"][0]["config"]) if doc["nats"] else None
    return profile, expected_profile(cfg)


def test_grid_size():
    grid = config_grid()
    assert len(grid) == 324
    assert len({tuple(sorted(c.items())) for c in grid}) == 324


@pytest.mark.parametrize("index", range(0, 324, 3))
def test_profile_matches_ground_truth(index):
    observed, expected = probe(config_grid()[index])
    assert mismatches(observed, expected) == {}


@pytest.mark.parametrize("unsolicited", ["drop", "rst", "allow"])
def test_tcp_unsolicited_observed(unsolicited):
    observed, _ = probe({**CONE, "tcp_unsolicited": unsolicited})
    assert observed.tcp_unsolicited_observed is Observed(unsolicited)
    assert observed.tcp_consistent is True


def test_endpoint_independent_filter_looks_like_allow():
    observed, _ = probe({"filtering": "endpoint_independent", "tcp_unsolicited": "rst"})
    assert observed.tcp_unsolicited_observed is Observed.ALLOW
    assert observed.udp_filters_unsolicited is False


def test_symmetric_is_inconsistent():
    observed, _ = probe(SYM)
    assert observed.udp_consistent is False and observed.tcp_consistent is False


def test_hairpin_reported():
    assert probe({**CONE, "hairpin": True})[0].udp_hairpin is True
    assert probe({**CONE, "hairpin": True})[0].tcp_hairpin is True
    assert probe(CONE)[0].udp_hairpin is False


def test_hairpin_filtering_blocks_hairpin_behind_filtering_nat():
    observed, _ = probe({**CONE, "hairpin": True, "hairpin_filtering": True})
    assert observed.udp_hairpin is False and observed.tcp_hairpin is False


def test_no_nat():
    observed, expected = probe(None)
    assert observed.nat_detected is False
    assert mismatches(observed, expected) == {}


def test_subset_of_tests_leaves_others_unknown():
    observed, _ = probe(CONE, ("udp",))
    assert observed.udp_consistent is True
    assert observed.udp_hairpin is None and observed.tcp_consistent is None


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 323), st.integers(0, 2**32))
def test_probe_is_seed_independent(index, seed):
    observed, expected = probe(config_grid()[index], seed=seed)
    assert mismatches(observed, expected) == {}


def test_profile_dict_round_trip():
    observed, _ = probe(CONE)
    assert NatProfile.from_dict(observed.to_dict()) == observed


def profile(consistent, unsolicited):
    return NatProfile(consistent, True, False, consistent, unsolicited, False, True)


@pytest.mark.parametrize("consistent, unsolicited, strict, lenient, rating", [
    (True, Observed.DROP, True, True, TcpRating.FRIENDLY),
    (True, Observed.ALLOW, True, True, TcpRating.FRIENDLY),
    (True, Observed.RST, False, True, TcpRating.SLOWER),
    (False, Observed.DROP, False, False, TcpRating.INCOMPATIBLE),
    (True, Observed.UNKNOWN, None, True, None),
    (None, None, None, None, None),
])
def test_classify(consistent, unsolicited, strict, lenient, rating):
    v = classify(profile(consistent, unsolicited))
    assert (v.tcp_punch_friendly, v.tcp_punch_lenient, v.tcp_rating) == (strict, lenient, rating)


def test_classify_udp_follows_consistency():
    assert classify(profile(True, Observed.DROP)).udp_punch_friendly is True
    assert classify(profile(False, Observed.DROP)).udp_punch_friendly is False


@pytest.mark.parametrize("a, b, success, clean", [
    ((True, Observed.DROP), (True, Observed.DROP), True, True),
    ((True, Observed.RST), (True, Observed.DROP), True, False),
    ((True, Observed.ALLOW), (False, Observed.DROP), True, True),
    ((True, Observed.ALLOW), (False, Observed.RST), True, False),
    ((True, Observed.ALLOW), (False, Observed.ALLOW), False, False),
    ((True, Observed.DROP), (False, Observed.ALLOW), False, False),
    ((False, Observed.DROP), (False, Observed.DROP), False, False),
])
def test_pair_prediction(a, b, success, clean):
    va, vb = classify(profile(*a)), classify(profile(*b))
    for x, y in ((va, vb), (vb, va)):
        p = predict_tcp_pair(x, y)
        assert (p.tcp_success, p.tcp_without_retries) == (success, clean)


def test_pair_prediction_unknown():
    assert predict_tcp_pair(classify(NatProfile()), classify(profile(True, Observed.DROP))).tcp_success is None


def test_expected_profile_fields_are_compared():
    assert set(COMPARED) <= {f for f in NatProfile.__dataclass_fields__}
