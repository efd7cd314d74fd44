"""Finite-range enhancement rules, their point reduction, and the essentiality test.

A rule is a list of clauses.  A clause fires at site ``x`` when every site
``x + o`` for ``o`` in ``need_open`` is open and every ``x + c`` for ``c`` in
``need_closed`` is closed; it then adds the sites ``x + a`` for ``a`` in
``adds``.  Offsets are sites relative to the origin (see
``LatticeModel.translate``).  Rules without ``need_closed`` literals are
monotone by construction; ``check_monotone`` decides it for any rule.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import yaml

from .config import ActivationField, SiteField
from .lattice import Adjacency, Boundary, ContractError, Kind, LatticeModel, Window, is_self_repelling


class CapabilityError(RuntimeError):
    """The requested exact computation exceeds a configured cap."""


@dataclass(frozen=True)
class Clause:
    need_open: tuple = ()
    need_closed: tuple = ()
    adds: tuple = ()


def _dist(model, offset) -> float:
    return model.distance(model.origin(), offset)


@dataclass(frozen=True)
class EnhancementRule:
    name: str
    kind: Kind
    adjacency: Adjacency
    radius: float
    clauses: tuple
    monotone: str = "unchecked"
    params: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "adjacency", Adjacency(self.adjacency))
        model = self.model
        for c in self.clauses:
            for o in (*c.need_open, *c.need_closed, *c.adds):
                if _dist(model, o) > self.radius + 1e-9:
                    raise ContractError(f"offset {o} lies outside the rule's ball")

    @property
    def model(self) -> LatticeModel:
        return LatticeModel(self.kind)

    def ball(self) -> list:
        return self.model.ball(self.model.origin(), self.radius)

    def local(self, open_offsets: Iterable) -> frozenset:
        """Sites added at the origin given the open sites of its ball."""
        on = set(open_offsets)
        out = set()
        for c in self.clauses:
            if all(o in on for o in c.need_open) and not any(o in on for o in c.need_closed):
                out.update(c.adds)
        return frozenset(out)

    def output_at(self, field: SiteField, x) -> frozenset:
        """The set added by the rule placed at site ``x`` of ``field``."""
        model = self.model
        out = set()
        for c in self.clauses:
            if all(field.is_open(model.translate(x, o)) for o in c.need_open) and \
                    not any(field.is_open(model.translate(x, o)) for o in c.need_closed):
                out.update(model.translate(x, a) for a in c.adds)
        return frozenset(out)


@dataclass(frozen=True)
class PointRule:
    """A rule that can only ever add its own site."""
    source: str
    kind: Kind
    adjacency: Adjacency
    radius: float
    nominal_radius: float
    clauses: tuple

    @property
    def model(self) -> LatticeModel:
        return LatticeModel(self.kind)

    def ball(self) -> list:
        return self.model.ball(self.model.origin(), self.radius)

    def fires(self, open_offsets: Iterable) -> bool:
        on = set(open_offsets)
        return any(all(o in on for o in c.need_open) and not any(o in on for o in c.need_closed)
                   for c in self.clauses)


def _neighbor_offsets(kind: Kind) -> list:
    model = LatticeModel(kind)
    return model.neighbors(model.origin())


def m_of_neighbors(kind, m: int, adjacency=Adjacency.L) -> EnhancementRule:
    """Open the origin when at least ``m`` of its L-neighbours are open."""
    kind = Kind(kind)
    model = LatticeModel(kind)
    nb = _neighbor_offsets(kind)
    if not 0 <= m <= len(nb):
        raise ValueError(f"m must lie in [0, {len(nb)}]")
    o = model.origin()
    clauses = tuple(Clause(tuple(c), (), (o,)) for c in itertools.combinations(nb, m))
    prefix = {Kind.SQUARE: "sq", Kind.TRIANGULAR: "tri", Kind.HEXAGONAL: "hex"}[kind]
    adjacency = Adjacency(adjacency)
    name = f"{prefix}-m{m}" if kind is Kind.TRIANGULAR else f"{prefix}-m{m}-{adjacency.value}"
    return EnhancementRule(name, kind, adjacency, model.bond_length, clauses, "yes", (("m", m),))


def north_east_west(adjacency=Adjacency.L) -> EnhancementRule:
    adjacency = Adjacency(adjacency)
    clause = Clause(((0, 1), (1, 0), (-1, 0)), (), ((0, 0),))
    return EnhancementRule(f"sq-NEW-{adjacency.value}", Kind.SQUARE, adjacency, 1.0, (clause,), "yes")


def isolated_site_rule(kind) -> EnhancementRule:
    """Open a closed site whose neighbours are all closed (not monotone)."""
    kind = Kind(kind)
    model = LatticeModel(kind)
    o = model.origin()
    clause = Clause((), tuple(_neighbor_offsets(kind)), (o,))
    return EnhancementRule(f"isolated-{kind.value}", kind, Adjacency.L, model.bond_length, (clause,), "no")


def null_rule(kind) -> EnhancementRule:
    kind = Kind(kind)
    return EnhancementRule(f"null-{kind.value}", kind, Adjacency.L, LatticeModel(kind).bond_length, (), "yes")


def builtin_rules() -> dict:
    rules = {}
    for m in range(7):
        r = m_of_neighbors(Kind.TRIANGULAR, m)
        rules[r.name] = r
    for adj in (Adjacency.L, Adjacency.STAR):
        for m in range(5):
            r = m_of_neighbors(Kind.SQUARE, m, adj)
            rules[r.name] = r
        for m in range(4):
            r = m_of_neighbors(Kind.HEXAGONAL, m, adj)
            rules[r.name] = r
        r = north_east_west(adj)
        rules[r.name] = r
    return rules


def get_rule(name: str) -> EnhancementRule:
    aliases = {"sq-NEW": "sq-NEW-L", "sq-NEW-*": "sq-NEW-star"}
    name = aliases.get(name, name).replace("-*", "-star")
    rules = builtin_rules()
    if name.startswith("tri-m") and name.endswith(("-L", "-star")):
        name = name.rsplit("-", 1)[0]
    if name not in rules:
        raise KeyError(f"unknown rule {name!r}")
    return rules[name]


@dataclass(frozen=True)
class MonotoneResult:
    monotone: bool | None
    counterexample: tuple | None = None
    exhaustive: bool = True


def check_monotone(rule: EnhancementRule, cap: int = 16, samples: int | None = None,
                   rng: np.random.Generator | None = None) -> MonotoneResult:
    """Search single-site flips ``w -> w + {y}`` for ``phi(w)`` not inside ``phi(w + {y})``.

    Exhaustive when the ball has at most ``cap`` sites.  Otherwise pass
    ``samples`` to test random pairs; that mode can only report ``None``
    (no counterexample found) or a counterexample.
    """
    ball = rule.ball()
    n = len(ball)
    index = {s: i for i, s in enumerate(ball)}

    def mask(sites):
        return sum(1 << index[s] for s in sites)

    compiled = [(mask(c.need_open), mask(c.need_closed), mask(c.adds)) for c in rule.clauses]

    def phi(w):
        out = 0
        for op, cl, ad in compiled:
            if w & op == op and not w & cl:
                out |= ad
        return out

    def unpack(w):
        return frozenset(ball[i] for i in range(n) if w >> i & 1)

    if n <= cap:
        order = sorted(range(1 << n), key=lambda w: (bin(w).count("1"), w))
        for w in order:
            out = phi(w)
            for i in range(n):
                if not w >> i & 1:
                    w2 = w | 1 << i
                    if out & ~phi(w2):
                        return MonotoneResult(False, (unpack(w), unpack(w2)))
        return MonotoneResult(True)
    if samples is None:
        raise CapabilityError(f"ball of {n} sites exceeds the exhaustive cap {cap}")
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(samples):
        w = int(sum(1 << i for i in range(n) if rng.random() < 0.5))
        i = int(rng.integers(n))
        w &= ~(1 << i)
        if phi(w) & ~phi(w | 1 << i):
            return MonotoneResult(False, (unpack(w), unpack(w | 1 << i)), False)
    return MonotoneResult(None, None, False)


def _anchor(model: LatticeModel, a):
    """The site x with ``translate(x, a) == origin``."""
    if model.kind is not Kind.HEXAGONAL:
        return (-a[0], -a[1])
    return (-a[0], -a[1], 0) if a[2] == 0 else (a[0], a[1], 1)


def reduce_to_point(rule: EnhancementRule) -> PointRule:
    """Point rule adding the origin iff the origin is added by the rule at some ball site.

    The recorded ``radius`` is the farthest offset the point rule actually
    reads; it never exceeds twice the source radius (``nominal_radius``).
    """
    model = rule.model
    clauses = []
    seen = set()
    for c in rule.clauses:
        for a in c.adds:
            x = _anchor(model, a)
            op = tuple(sorted({model.translate(x, o) for o in c.need_open}))
            cl = tuple(sorted({model.translate(x, o) for o in c.need_closed}))
            if (op, cl) not in seen:
                seen.add((op, cl))
                clauses.append(Clause(op, cl, (model.origin(),)))
    reach = [_dist(model, o) for c in clauses for o in (*c.need_open, *c.need_closed)]
    radius = max(reach, default=0.0)
    return PointRule(rule.name, rule.kind, rule.adjacency, radius, 2 * rule.radius, tuple(clauses))


# Array application -------------------------------------------------------

def _shift2d(a, dq, dr, fill, wrap):
    """``out[q, r] = a[q + dq, r + dr]``, with out-of-range reads resolved."""
    if wrap:
        return np.roll(a, (-dq, -dr), axis=(0, 1))
    n0, n1 = a.shape
    out = np.full_like(a, fill)
    q0, q1 = max(0, -dq), min(n0, n0 - dq)
    r0, r1 = max(0, -dr), min(n1, n1 - dr)
    if q0 < q1 and r0 < r1:
        out[q0:q1, r0:r1] = a[q0 + dq:q1 + dq, r0 + dr:r1 + dr]
    return out


def _policy(window: Window):
    return window.boundary is Boundary.OPEN, window.boundary is Boundary.TORUS


def gather(bits, window: Window, offset, fill=None):
    """Array whose value at ``x`` is the state of ``x + offset``."""
    default, wrap = _policy(window)
    fill = default if fill is None else fill
    if window.kind is not Kind.HEXAGONAL:
        return _shift2d(bits, offset[0], offset[1], fill, wrap)
    dq, dr, p = offset
    out = np.empty_like(bits)
    out[..., 0] = _shift2d(bits[..., p], dq, dr, fill, wrap)
    out[..., 1] = _shift2d(bits[..., 1 - p], -dq, -dr, fill, wrap)
    return out


def _scatter(trig, window: Window, offset):
    """Array marking ``x + offset`` for every marked ``x`` of ``trig``."""
    wrap = window.boundary is Boundary.TORUS
    if window.kind is not Kind.HEXAGONAL:
        return _shift2d(trig, -offset[0], -offset[1], False, wrap)
    dq, dr, p = offset
    out = np.zeros_like(trig)
    out[..., p] |= _shift2d(trig[..., 0], -dq, -dr, False, wrap)
    out[..., 1 - p] |= _shift2d(trig[..., 1], dq, dr, False, wrap)
    return out


def apply_clauses(bits: np.ndarray, active: np.ndarray | None, clauses, window: Window) -> np.ndarray:
    """``bits`` united with every clause output at the active sites, read from ``bits`` only."""
    bits = np.asarray(bits, dtype=bool)
    out = bits.copy()
    cache = {}

    def at(o, want_open):
        key = (o, want_open)
        if key not in cache:
            g = gather(bits, window, o)
            cache[key] = g if want_open else ~g
        return cache[key]

    for c in clauses:
        trig = np.ones_like(bits) if active is None else np.asarray(active, dtype=bool).copy()
        for o in c.need_open:
            trig &= at(o, True)
        for o in c.need_closed:
            trig &= at(o, False)
        if not trig.any():
            continue
        for a in c.adds:
            out |= _scatter(trig, window, a)
    return out


def apply_enhancement(eta: SiteField, alpha: ActivationField, rule) -> SiteField:
    """Stochastic enhancement: the rule acts at activated sites, reading the original field."""
    if eta.window != alpha.window:
        raise ContractError("site and activation fields live on different windows")
    if eta.window.kind is not rule.kind:
        raise ContractError("rule and field lattices differ")
    return eta.with_bits(apply_clauses(eta.bits, alpha.bits, rule.clauses, eta.window))


def full_enhancement(eta: SiteField, rule) -> SiteField:
    if eta.window.kind is not rule.kind:
        raise ContractError("rule and field lattices differ")
    return eta.with_bits(apply_clauses(eta.bits, None, rule.clauses, eta.window))


# Essentiality ------------------------------------------------------------

@dataclass(frozen=True)
class EssentialityVerdict:
    rule: str
    essential: bool
    witness: tuple | None
    exits: tuple | None
    closed_in_ball: tuple | None
    method: str = "exhaustive"
    radius: float = 0.0
    arms: int = 0
    configurations: int = 0

    def as_dict(self) -> dict:
        return {
            "rule": self.rule,
            "essential": self.essential,
            "method": self.method,
            "radius": self.radius,
            "arms": self.arms,
            "configurations": self.configurations,
            "witness": None if self.witness is None else [list(s) for s in self.witness],
            "exits": None if self.exits is None else [list(s) for s in self.exits],
            "closed_in_ball": None if self.closed_in_ball is None else [list(s) for s in self.closed_in_ball],
        }


def _arm_adjacency(rule) -> Adjacency:
    return Adjacency.STAR if rule.adjacency is Adjacency.L else Adjacency.L


def enumerate_arms(model: LatticeModel, ball: list, adjacency: Adjacency, cap: int) -> list:
    """Induced paths from the origin whose last site is the first one outside ``ball``."""
    inside = set(ball)
    o = model.origin()
    arms = []

    def extend(path, forbidden):
        cur = path[-1]
        for v in model.adjacent_sites(cur, adjacency):
            if v in forbidden:
                continue
            if v not in inside:
                arms.append(tuple(path) + (v,))
                if len(arms) > cap:
                    raise CapabilityError(f"more than {cap} arms")
                continue
            path.append(v)
            # once cur stops being the tip, nothing later may touch it
            extend(path, forbidden | {v} | set(model.adjacent_sites(cur, adjacency)))
            path.pop()

    extend([o], {o})
    return arms


def check_essential(rule: EnhancementRule, cap: int = 200_000) -> EssentialityVerdict:
    """Decide essentiality by closing self-repelling two-armed paths through the origin.

    Every arm pair is tried with the rest of the point rule's ball open; the
    rule is essential iff the point rule then opens the origin.  Witnesses
    are searched shortest first, ties broken lexicographically.
    """
    mono = check_monotone(rule)
    if mono.monotone is not True:
        raise ContractError(f"rule {rule.name} is not monotone")
    point = reduce_to_point(rule)
    model = rule.model
    ball = point.ball()
    adjacency = _arm_adjacency(rule)
    arms = enumerate_arms(model, ball, adjacency, cap)
    sites = sorted({s for a in arms for s in a})
    index = {s: i for i, s in enumerate(sites)}
    ball_mask = sum(1 << index[s] for s in ball if s in index)
    o = model.origin()
    info = []
    for a in arms:
        body = sum(1 << index[s] for s in a[1:])
        hood = body
        for s in a[1:]:
            for y in model.adjacent_sites(s, adjacency):
                if y in index:
                    hood |= 1 << index[y]
        info.append((len(a), a, body, hood & ~(1 << index[o])))
    info.sort(key=lambda t: (t[0], t[1]))
    tried = {}
    pairs = sorted(((i, j) for i in range(len(info)) for j in range(i + 1, len(info))),
                   key=lambda ij: info[ij[0]][0] + info[ij[1]][0])
    for i, j in pairs:
        _, a1, b1, h1 = info[i]
        _, a2, b2, h2 = info[j]
        if h1 & b2 or h2 & b1:
            continue
        closed = ((b1 | b2) & ball_mask) | (1 << index[o])
        closed_sites = tuple(s for s in ball if s in index and closed >> index[s] & 1)
        if closed not in tried:
            tried[closed] = point.fires(s for s in ball if s not in closed_sites)
        if tried[closed]:
            sigma = tuple(reversed(a1)) + a2[1:]
            return EssentialityVerdict(rule.name, True, sigma, (a1[-1], a2[-1]), closed_sites,
                                       radius=point.radius, arms=len(arms), configurations=len(tried))
    return EssentialityVerdict(rule.name, False, None, None, None,
                               radius=point.radius, arms=len(arms), configurations=len(tried))


def replay_witness(rule: EnhancementRule, verdict: EssentialityVerdict) -> bool:
    """Re-check a positive verdict: the path repels itself, exits the ball, and fires."""
    if not verdict.essential:
        return False
    point = reduce_to_point(rule)
    model = rule.model
    sigma = verdict.witness
    ball = set(point.ball())
    o = model.origin()
    if o not in sigma or not is_self_repelling(model, sigma, _arm_adjacency(rule)):
        return False
    if sigma[0] in ball or sigma[-1] in ball or any(s not in ball for s in sigma[1:-1]):
        return False
    open_sites = [s for s in ball if s not in set(sigma)]
    return point.fires(open_sites)


def protected_radius(rule: EnhancementRule, tight: bool = False) -> float:
    """Range R of the point rule, twice the rule's radius; protection looks at
    balls of radius 2R.  With ``tight`` the farthest offset actually read."""
    point = reduce_to_point(rule)
    return point.radius if tight else point.nominal_radius



# Rule files ----------------------------------------------------------------
#
# YAML mapping with ``kind``, ``adjacency`` and ``radius`` plus exactly one of
#   builtin: a catalog name, or {name: m-of-neighbors | north-east-west, m: ...}
#   clauses: list of {open: [...], closed: [...], adds: [...]} offset lists
#   table:   list of {open: "0110...", adds: [...]}, one bit per ball site in
#            the order of ``EnhancementRule.ball()`` (by distance, then angle
#            from +x); an entry fires on exactly that ball configuration.

def _offsets_of(items) -> tuple:
    return tuple(tuple(int(v) for v in o) for o in items or ())


def rule_from_dict(d: dict) -> EnhancementRule:
    builtin = d.get("builtin")
    if builtin is not None:
        if isinstance(builtin, str):
            return get_rule(builtin)
        name = builtin["name"]
        if name == "m-of-neighbors":
            return m_of_neighbors(d.get("kind", builtin.get("kind")), int(builtin["m"]), d.get("adjacency", "L"))
        if name == "north-east-west":
            return north_east_west(d.get("adjacency", "L"))
        raise KeyError(f"unknown builtin {name!r}")
    kind = Kind(d["kind"])
    adjacency = Adjacency(d.get("adjacency", "L"))
    radius = float(d["radius"])
    name = d.get("name", "custom")
    if "clauses" in d:
        clauses = tuple(Clause(_offsets_of(c.get("open")), _offsets_of(c.get("closed")), _offsets_of(c.get("adds")))
                        for c in d["clauses"])
    elif "table" in d:
        model = LatticeModel(kind)
        ball = model.ball(model.origin(), radius)
        clauses = []
        for row in d["table"]:
            bits = str(row["open"])
            if len(bits) != len(ball):
                raise ContractError(f"table row has {len(bits)} bits for a ball of {len(ball)} sites")
            on = tuple(s for s, b in zip(ball, bits) if b == "1")
            off = tuple(s for s, b in zip(ball, bits) if b != "1")
            clauses.append(Clause(on, off, _offsets_of(row.get("adds"))))
        clauses = tuple(clauses)
    else:
        raise ContractError("rule needs one of builtin, clauses or table")
    rule = EnhancementRule(name, kind, adjacency, radius, clauses)
    mono = check_monotone(rule, samples=10_000)
    state = {True: "yes", False: "no", None: "unchecked"}[mono.monotone]
    return EnhancementRule(name, kind, adjacency, radius, clauses, state)


def rule_to_dict(rule: EnhancementRule) -> dict:
    return {
        "name": rule.name,
        "kind": rule.kind.value,
        "adjacency": rule.adjacency.value,
        "radius": rule.radius,
        "clauses": [{"open": [list(o) for o in c.need_open],
                     "closed": [list(o) for o in c.need_closed],
                     "adds": [list(o) for o in c.adds]} for c in rule.clauses],
    }


def load_rule(path) -> EnhancementRule:
    with open(path) as fh:
        return rule_from_dict(yaml.safe_load(fh))


def dump_rule(rule: EnhancementRule, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(rule_to_dict(rule), fh, sort_keys=False)
