import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enhperc import config, enhance, lattice
from enhperc.config import SiteField
from enhperc.enhance import Clause, EnhancementRule
from enhperc.lattice import Adjacency, Boundary, ContractError, Kind, LatticeModel, Window

from conftest import random_field

RULES = ["tri-m2", "tri-m3", "tri-m6", "sq-NEW-L", "sq-NEW-star", "sq-m3-star", "hex-m2-L"]


def sitewise(field, rule, active=None):
    """Full or stochastic enhancement evaluated one site at a time."""
    w = field.window
    out = field.bits.copy()
    for x in w.sites():
        if active is not None and not active[w.index(x)]:
            continue
        for y in rule.output_at(field, x):
            if w.contains(y):
                out[w.index(y)] = True
    return out


def test_catalog_has_the_named_rules():
    names = set(enhance.builtin_rules())
    for n in ["tri-m1", "tri-m6", "sq-NEW-L", "sq-NEW-star", "hex-m3-star"]:
        assert n in names
    assert enhance.get_rule("sq-NEW-*").name == "sq-NEW-star"
    assert enhance.get_rule("sq-NEW").name == "sq-NEW-L"
    with pytest.raises(KeyError):
        enhance.get_rule("tri-m9")
    with pytest.raises(ValueError):
        enhance.m_of_neighbors(Kind.SQUARE, 5)


def test_rule_offsets_must_fit_the_ball():
    with pytest.raises(ContractError):
        EnhancementRule("bad", Kind.SQUARE, Adjacency.L, 1.0, (Clause(((2, 0),), (), ((0, 0),)),))


@pytest.mark.parametrize("name", RULES)
def test_array_enhancement_matches_sitewise_evaluation(name, rng):
    rule = enhance.get_rule(name)
    for _ in range(15):
        f = random_field(rule.kind, (9, 10), rng.uniform(0.2, 0.8), rng, origin=(-3, 4))
        assert np.array_equal(enhance.full_enhancement(f, rule).bits, sitewise(f, rule))
        alpha = config.ActivationField(f.window, rng.random(f.window.array_shape) < 0.5, 0.5, 0)
        assert np.array_equal(enhance.apply_enhancement(f, alpha, rule).bits, sitewise(f, rule, alpha.bits))


@pytest.mark.parametrize("kind", list(Kind))
@pytest.mark.parametrize("boundary", list(Boundary))
def test_gather_reads_the_shifted_state(kind, boundary, rng):
    w = Window(kind, (6, 7), (1, -2), boundary)
    bits = rng.random(w.array_shape) < 0.5
    f = SiteField(w, bits, 0.5, 0)
    model = LatticeModel(kind)
    for o in model.ball(model.origin(), 2.0):
        g = enhance.gather(bits, w, o)
        for x in w.sites():
            assert g[w.index(x)] == f.is_open(model.translate(x, o))


def test_monotone_checker():
    for name in RULES:
        assert enhance.check_monotone(enhance.get_rule(name)).monotone is True
    bad = enhance.isolated_site_rule(Kind.TRIANGULAR)
    res = enhance.check_monotone(bad)
    assert res.monotone is False
    small, big = res.counterexample
    assert small < big
    with pytest.raises(ContractError):
        enhance.check_essential(bad)


def test_monotone_checker_sampling_mode():
    rule = enhance.get_rule("tri-m3")
    with pytest.raises(enhance.CapabilityError):
        enhance.check_monotone(rule, cap=3)
    assert enhance.check_monotone(rule, cap=3, samples=200).monotone is None
    bad = enhance.isolated_site_rule(Kind.SQUARE)
    assert enhance.check_monotone(bad, cap=2, samples=5000).monotone is False


@pytest.mark.parametrize("name", RULES)
def test_point_rule_range_and_agreement(name, rng):
    rule = enhance.get_rule(name)
    point = enhance.reduce_to_point(rule)
    assert point.radius <= point.nominal_radius + 1e-9
    assert point.nominal_radius == 2 * rule.radius
    assert enhance.protected_radius(rule) == point.nominal_radius
    assert enhance.protected_radius(rule, tight=True) == point.radius
    model = rule.model
    for _ in range(10):
        f = random_field(rule.kind, (12, 12), rng.uniform(0.3, 0.8), rng)
        a = enhance.full_enhancement(f, rule).bits
        b = enhance.full_enhancement(f, point).bits
        w = f.window
        for x in w.sites():
            if all(w.contains(y) for y in model.ball(x, point.nominal_radius)):
                assert a[w.index(x)] == b[w.index(x)]


@pytest.mark.parametrize("name", RULES)
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.floats(0.05, 0.9), dp=st.floats(0.0, 0.1))
def test_full_enhancement_is_monotone_in_the_configuration(name, seed, p, dp):
    rule = enhance.get_rule(name)
    w = Window.centered(rule.kind, 10)
    a = config.sample_field(w, p, seed)
    b = config.sample_field(w, p + dp, seed)
    ea = enhance.full_enhancement(a, rule).bits
    eb = enhance.full_enhancement(b, rule).bits
    assert not (ea & ~eb).any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), p=st.floats(0.05, 0.95), s=st.floats(0, 1), t=st.floats(0, 1))
def test_sandwich_and_activation_monotonicity(seed, p, s, t):
    rule = enhance.get_rule("tri-m3")
    w = Window.centered(rule.kind, 12)
    eta = config.sample_field(w, p, seed)
    lo, hi = sorted((s, t))
    a1 = enhance.apply_enhancement(eta, config.sample_activation(w, lo, seed), rule).bits
    a2 = enhance.apply_enhancement(eta, config.sample_activation(w, hi, seed), rule).bits
    full = enhance.full_enhancement(eta, rule).bits
    assert not (eta.bits & ~a1).any()
    assert not (a1 & ~a2).any()
    assert not (a2 & ~full).any()


def test_mismatched_inputs_raise():
    rule = enhance.get_rule("tri-m3")
    f = config.sample_field(Window.centered(Kind.SQUARE, 5), 0.5, 0)
    with pytest.raises(ContractError):
        enhance.full_enhancement(f, rule)
    g = config.sample_field(Window.centered(Kind.TRIANGULAR, 5), 0.5, 0)
    a = config.sample_activation(Window.centered(Kind.TRIANGULAR, 6), 0.5, 0)
    with pytest.raises(ContractError):
        enhance.apply_enhancement(g, a, rule)


def _closed_line_opened(rule, path):
    """Whether the full enhancement opens a site of a closed path in an open sea."""
    w = Window.centered(rule.kind, 31)
    bits = np.ones(w.array_shape, dtype=bool)
    for x in path:
        bits[w.index(x)] = False
    out = enhance.full_enhancement(SiteField(w, bits, 1.0, 0), rule).bits
    return any(out[w.index(x)] for x in path if max(abs(x[0]), abs(x[1])) <= 6)


@pytest.mark.parametrize("m", range(1, 7))
def test_triangular_verdict_matches_straight_and_zigzag_lines(m):
    rule = enhance.get_rule(f"tri-m{m}")
    straight = [(k, 0) for k in range(-15, 16)]
    zigzag = [(k // 2 + k % 2, k // 2) for k in range(-30, 30)]
    assert lattice.is_self_repelling(rule.model, zigzag)
    opened = _closed_line_opened(rule, straight) or _closed_line_opened(rule, zigzag)
    assert opened == (m <= 4)
    assert enhance.check_essential(rule).essential == (m <= 4)


def test_square_rules_on_lines():
    diag = [(k, k) for k in range(-15, 16)]
    # a diagonal closed *-path is opened by NEW, so the L version is essential
    assert _closed_line_opened(enhance.get_rule("sq-NEW-L"), diag)
    horiz = [(k, 0) for k in range(-15, 16)]
    vert = [(0, k) for k in range(-15, 16)]
    stairs = [(k // 2 + k % 2, k // 2) for k in range(-30, 30)]
    for path in (horiz, vert, stairs):
        assert not _closed_line_opened(enhance.get_rule("sq-NEW-star"), path)


@pytest.mark.parametrize("name", sorted(enhance.builtin_rules()))
def test_positive_verdicts_replay(name):
    rule = enhance.get_rule(name)
    v = enhance.check_essential(rule)
    if v.essential:
        assert enhance.replay_witness(rule, v)
        d = v.as_dict()
        assert d["essential"] and d["witness"]
    else:
        assert not enhance.replay_witness(rule, v)


def test_verdicts_are_deterministic():
    rule = enhance.get_rule("tri-m3")
    assert enhance.check_essential(rule) == enhance.check_essential(rule)


def test_enumeration_cap_is_an_error():
    with pytest.raises(enhance.CapabilityError):
        enhance.check_essential(enhance.get_rule("tri-m6"), cap=5)


def test_rule_file_round_trip(tmp_path):
    rule = enhance.get_rule("sq-NEW-L")
    enhance.dump_rule(rule, tmp_path / "r.yaml")
    back = enhance.load_rule(tmp_path / "r.yaml")
    assert back.clauses == rule.clauses and back.kind is rule.kind and back.monotone == "yes"


def test_rule_from_table_and_builtin():
    model = LatticeModel(Kind.SQUARE)
    ball = model.ball(model.origin(), 1.0)
    rows = []
    for bits in range(1 << len(ball)):
        on = [ball[i] for i in range(len(ball)) if bits >> i & 1]
        if {(0, 1), (1, 0), (-1, 0)} <= set(on):
            rows.append({"open": "".join("1" if bits >> i & 1 else "0" for i in range(len(ball))),
                         "adds": [[0, 0]]})
    table = enhance.rule_from_dict({"kind": "square", "radius": 1.0, "table": rows, "name": "tabled"})
    assert table.monotone == "yes"
    rng = np.random.default_rng(1)
    ref = enhance.get_rule("sq-NEW-L")
    for _ in range(10):
        f = random_field(Kind.SQUARE, (8, 8), 0.6, rng)
        assert np.array_equal(enhance.full_enhancement(f, table).bits, enhance.full_enhancement(f, ref).bits)
    assert enhance.rule_from_dict({"builtin": "tri-m3"}).name == "tri-m3"
    r = enhance.rule_from_dict({"builtin": {"name": "m-of-neighbors", "m": 2}, "kind": "hexagonal",
                                "adjacency": "star"})
    assert r.name == "hex-m2-star"
    with pytest.raises(ContractError):
        enhance.rule_from_dict({"kind": "square", "radius": 1.0, "table": [{"open": "101", "adds": [[0, 0]]}]})
    nonmono = enhance.rule_from_dict({"kind": "square", "radius": 1.0,
                                      "clauses": [{"closed": [[1, 0]], "adds": [[0, 0]]}]})
    assert nonmono.monotone == "no"
