"""Named experiments, result records, reports and the ``enhperc`` command line."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from importlib import metadata
from pathlib import Path

import click
import jsonschema
import numpy as np
import yaml
from scipy.stats import binom

from . import cluster, config, enhance, interfaces, lattice
from .lattice import Kind, LatticeModel, Window

SEED_ENV = "ENHPERC_SEED"
CSV_COLUMNS = ("quantity", "p", "s", "rule", "L", "delta", "rho", "estimate", "SE", "n", "seed")


class ExperimentKind(str, Enum):
    ESSENTIALITY = "EssentialityReport"
    SANDWICH = "CouplingSandwich"
    CARDY = "CrossingVsCardy"
    INVARIANCE = "EnhancementInvariance"
    SHIFT = "ShiftDetection"
    EXPONENTS = "ExponentComparison"
    INTERFACES = "InterfaceConvergence"
    GEOMETRY = "GeometrySuite"
    STABILITY = "StabilitySuite"
    DECAY = "ExplorationDecay"


@dataclass
class ExperimentSpec:
    kind: ExperimentKind
    lattice: str = "triangular"
    rule: str | None = None
    p: list = field(default_factory=lambda: [0.5])
    s: float = 1.0
    L: int = 64
    mesh: list = field(default_factory=list)
    rho: list = field(default_factory=lambda: [1.0])
    n_samples: int = 100
    seed: int = 0
    out: str | None = None
    band: float = 3.0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = ExperimentKind(self.kind)
        self.lattice = Kind(self.lattice).value
        self.p = [float(v) for v in np.atleast_1d(self.p)]
        self.mesh = [float(v) for v in np.atleast_1d(self.mesh)] if self.mesh is not None else []
        self.rho = [float(v) for v in np.atleast_1d(self.rho)]
        self.s, self.band = float(self.s), float(self.band)
        self.L, self.n_samples, self.seed = int(self.L), int(self.n_samples), int(self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class Gate:
    name: str
    value: float
    op: str
    threshold: float
    passed: bool = False

    def __post_init__(self):
        self.passed = check_gate(self.value, self.op, self.threshold)


_OPS = {
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
}


def check_gate(value, op, threshold) -> bool:
    return bool(_OPS[op](float(value), float(threshold)))


@dataclass
class ResultRecord:
    spec: dict
    spec_hash: str
    rows: list
    gates: list
    runtime: float
    versions: dict

    @property
    def passed(self) -> bool:
        return all(g["passed"] for g in self.gates)

    def recheck(self) -> bool:
        """Re-evaluate every gate from its stored value and threshold."""
        return all(check_gate(g["value"], g["op"], g["threshold"]) == g["passed"] for g in self.gates)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(**d)

    def same_results(self, other: "ResultRecord") -> bool:
        return (self.spec_hash, self.rows, self.gates) == (other.spec_hash, other.rows, other.gates)


RECORD_SCHEMA = {
    "type": "object",
    "required": ["spec", "spec_hash", "rows", "gates", "runtime", "versions"],
    "properties": {
        "spec": {"type": "object", "required": ["kind", "seed", "n_samples"]},
        "spec_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "rows": {
            "type": "array",
            "items": {"type": "object", "required": list(CSV_COLUMNS),
                      "additionalProperties": False,
                      "properties": {c: {} for c in CSV_COLUMNS}},
        },
        "gates": {
            "type": "array",
            "items": {"type": "object", "required": ["name", "value", "op", "threshold", "passed"],
                      "properties": {"name": {"type": "string"}, "value": {"type": "number"},
                                     "op": {"enum": list(_OPS)}, "threshold": {"type": "number"},
                                     "passed": {"type": "boolean"}}},
        },
        "runtime": {"type": "number", "minimum": 0},
        "versions": {"type": "object"},
    },
}


def validate_record(d: dict) -> None:
    jsonschema.validate(d, RECORD_SCHEMA)


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"enhperc": own, "numpy": np.__version__, "python": platform.python_version()}


def _row(quantity, spec, *, p=None, s=None, rule=None, L=None, delta=None, rho=None,
         estimate=None, se=None, n=None) -> dict:
    def num(v):
        if v is None:
            return None
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return {"quantity": quantity, "p": num(p), "s": num(s), "rule": rule,
            "L": None if L is None else int(L), "delta": num(delta), "rho": num(rho),
            "estimate": num(estimate), "SE": num(se), "n": None if n is None else int(n),
            "seed": spec.seed}


def _rule_for(spec, default=None):
    name = spec.rule or default
    if name is None:
        return None
    if name.endswith((".yaml", ".yml")):
        rule = enhance.load_rule(name)
    else:
        rule = enhance.get_rule(name)
    if rule.kind.value != spec.lattice:
        raise ValueError(f"rule {rule.name} lives on the {rule.kind.value} lattice, not {spec.lattice}")
    return rule


def _pc(spec) -> float:
    if "pc" in spec.options:
        return float(spec.options["pc"])
    if spec.lattice == Kind.TRIANGULAR.value:
        return 0.5
    raise ValueError("site critical point must be supplied as options.pc on this lattice")


# Experiments ---------------------------------------------------------------

def _essentiality(spec):
    rows, gates = [], []
    catalog = enhance.builtin_rules()
    names = spec.options.get("rules") or ([spec.rule] if spec.rule else list(catalog))
    verdicts = {}
    t0 = time.perf_counter()
    for name in names:
        rule = enhance.get_rule(name)
        v = enhance.check_essential(rule)
        verdicts[rule.name] = v
        rows.append(_row("essential", spec, rule=rule.name, estimate=int(v.essential), n=v.configurations))
        if v.essential:
            gates.append(asdict(Gate(f"witness replays: {rule.name}", int(enhance.replay_witness(rule, v)), "==", 1)))
    elapsed = time.perf_counter() - t0
    expected = {**{f"tri-m{m}": True for m in range(1, 5)}, "tri-m5": False, "tri-m6": False,
                "sq-NEW-L": True, "sq-NEW-star": False}
    for name, want in expected.items():
        if name in verdicts:
            gates.append(asdict(Gate(f"classification: {name}", int(verdicts[name].essential), "==", int(want))))
    gates.append(asdict(Gate("runtime seconds", elapsed, "<", spec.options.get("time_limit", 120))))
    return rows, gates, {"verdicts": {k: v.as_dict() for k, v in verdicts.items()}}


def _sandwich(spec):
    model = LatticeModel(Kind(spec.lattice))
    rule = _rule_for(spec, "tri-m6" if spec.lattice == "triangular" else None)
    rows, gates = [], []
    window = Window.centered(model.kind, spec.L)
    for p in spec.p:
        bad = 0
        for i in range(spec.n_samples):
            eta = config.sample_field(window, p, spec.seed, i)
            alpha = config.sample_activation(window, spec.s, spec.seed, i)
            hat = enhance.apply_enhancement(eta, alpha, rule).bits
            tilde = enhance.full_enhancement(eta, rule).bits
            bad += int(np.sum(eta.bits & ~hat)) + int(np.sum(hat & ~tilde))
        obs = cluster.simulate_observables(model, p, spec.s, rule, spec.L, spec.n_samples, spec.seed)
        common = dict(p=p, s=spec.s, rule=rule.name, L=spec.L, n=spec.n_samples)
        for q, (m, se) in (("theta_L", obs.theta_L), ("theta_L_enh", obs.theta_L_enh),
                           ("chi", obs.chi_hat), ("chi_enh", obs.chi_hat_enh)):
            rows.append(_row(q, spec, estimate=m, se=se, **common))
        rows.append(_row("sandwich_violations", spec, estimate=bad, **common))
        gates.append(asdict(Gate(f"sandwich p={p}", bad, "==", 0)))
        gates.append(asdict(Gate(f"per-sample inequalities p={p}", obs.coupling_violations(), "==", 0)))
    return rows, gates, {}


def _crossing_cells(spec):
    meshes = spec.mesh or [1.0 / spec.L]
    for delta in meshes:
        for rho in spec.rho:
            yield delta, rho


def _cardy(spec):
    model = LatticeModel(Kind(spec.lattice))
    tol = spec.options.get("tolerance")
    rows, gates = [], []
    for p in spec.p:
        for delta, rho in _crossing_cells(spec):
            est = cluster.crossing_probability(model, p, 0.0, None, cluster.CrossingSpec.from_rho(rho, delta),
                                               spec.n_samples, spec.seed)
            F = cluster.cardy_F(rho)
            common = dict(p=p, s=0.0, delta=delta, rho=rho, n=spec.n_samples)
            rows.append(_row("phi", spec, estimate=est.phi, se=est.se, **common))
            rows.append(_row("cardy_F", spec, estimate=F, se=0.0, **common))
            limit = float(tol) if tol is not None else spec.band * est.se
            gates.append(asdict(Gate(f"|phi - F| rho={rho} delta={delta}", abs(est.phi - F), "<=", limit)))
    for rho in spec.rho:
        gates.append(asdict(Gate(f"F(rho) + F(1/rho) - 1 rho={rho}",
                                 abs(cluster.cardy_F(rho) + cluster.cardy_F(1 / rho) - 1), "<=", 1e-10)))
    return rows, gates, {}


def _paired_crossings(spec, rule):
    model = LatticeModel(Kind(spec.lattice))
    for p in spec.p:
        for delta, rho in _crossing_cells(spec):
            est = cluster.crossing_probability(model, p, spec.s, rule, cluster.CrossingSpec.from_rho(rho, delta),
                                               spec.n_samples, spec.seed)
            yield p, delta, rho, est


def _invariance(spec):
    rule = _rule_for(spec, "tri-m6")
    rows, gates = [], []
    for p, delta, rho, est in _paired_crossings(spec, rule):
        common = dict(p=p, s=spec.s, rule=rule.name, delta=delta, rho=rho, n=spec.n_samples)
        rows.append(_row("phi", spec, estimate=est.phi, se=est.se, **common))
        rows.append(_row("phi_enh", spec, estimate=est.phi_enh, se=est.se_enh, **common))
        rows.append(_row("phi_enh - phi", spec, estimate=est.diff, se=est.se_diff, **common))
        gates.append(asdict(Gate(f"|paired difference| rho={rho} delta={delta}", abs(est.diff), "<=",
                                 spec.band * est.se_diff)))
        gates.append(asdict(Gate(f"coupling violations rho={rho} delta={delta}", est.coupling_violations(), "==", 0)))
    return rows, gates, {}


def _shift(spec):
    rule = _rule_for(spec, "tri-m3")
    need = float(spec.options.get("uplift_se", 5.0))
    margin = float(spec.options.get("margin", 0.0))
    rows, gates = [], []
    model = LatticeModel(Kind(spec.lattice))
    for p, delta, rho, est in _paired_crossings(spec, rule):
        common = dict(p=p, s=spec.s, rule=rule.name, delta=delta, rho=rho, n=spec.n_samples)
        rows.append(_row("phi", spec, estimate=est.phi, se=est.se, **common))
        rows.append(_row("phi_enh", spec, estimate=est.phi_enh, se=est.se_enh, **common))
        rows.append(_row("uplift", spec, estimate=est.diff, se=est.se_diff, **common))
        # exact sign test on discordant pairs: under no uplift each is equally likely either way
        up = int(np.sum(est.enhanced & ~est.plain))
        down = int(np.sum(est.plain & ~est.enhanced))
        pval = float(binom.sf(up - 1, up + down, 0.5)) if up + down else 1.0
        rows.append(_row("sign test p-value", spec, estimate=pval, n=up + down, **{k: v for k, v in common.items() if k != "n"}))
        gates.append(asdict(Gate(f"uplift - {need} SE rho={rho}", est.diff - need * est.se_diff, ">=", 0.0)))
        gates.append(asdict(Gate(f"uplift rho={rho}", est.diff, ">=", margin)))
        grid = spec.options.get("shift_grid")
        if grid:
            bound = 0.0
            for q in sorted(float(v) for v in grid):
                ref = cluster.crossing_probability(model, q, 0.0, None, cluster.CrossingSpec.from_rho(rho, delta),
                                                   spec.n_samples, spec.seed + 1)
                if ref.phi + spec.band * math.hypot(ref.se, est.se_enh) < est.phi_enh:
                    bound = max(bound, q - p)
            rows.append(_row("empirical lower bound on shift", spec, estimate=bound, **common))
    return rows, gates, {}


def _weighted_slope(x, y, se):
    x, y, se = (np.asarray(v, dtype=float) for v in (x, y, se))
    se = np.where(se > 0, se, np.min(se[se > 0]) if np.any(se > 0) else 1.0)
    coef, cov = np.polyfit(x, y, 1, w=1 / se, cov="unscaled")
    return float(coef[0]), float(math.sqrt(cov[0, 0]))


def _exponents(spec):
    model = LatticeModel(Kind(spec.lattice))
    rule = _rule_for(spec, "tri-m6")
    pc = _pc(spec)
    above = spec.options.get("p_above", [0.52, 0.54, 0.56, 0.58, 0.60])
    below = spec.options.get("p_below", [0.35, 0.40, 0.45])
    # the xi fit window scales with L, so each density gets a window where tau is still measurable
    L_xi = [int(v) for v in np.broadcast_to(spec.options.get("L_xi", [20, 30, 48]), (len(below),))]
    n_xi = int(spec.options.get("n_xi", 10 * spec.n_samples))
    rows, gates = [], []
    th, th_se, te, te_se, violations = [], [], [], [], 0
    for i, p in enumerate(above):
        obs = cluster.simulate_observables(model, p, spec.s, rule, spec.L, spec.n_samples, spec.seed + i)
        (a, sa), (b, sb) = obs.theta_L, obs.theta_L_enh
        th.append(a), th_se.append(sa), te.append(b), te_se.append(sb)
        violations += obs.coupling_violations()
        common = dict(p=p, s=spec.s, rule=rule.name, L=spec.L, n=spec.n_samples)
        rows.append(_row("theta_L", spec, estimate=a, se=sa, **common))
        rows.append(_row("theta_L_enh", spec, estimate=b, se=sb, **common))
    x = np.log(np.asarray(above) - pc)
    b1, s1 = _weighted_slope(x, np.log(th), np.asarray(th_se) / np.asarray(th))
    b2, s2 = _weighted_slope(x, np.log(te), np.asarray(te_se) / np.asarray(te))
    rows.append(_row("theta slope", spec, s=0.0, rule=rule.name, L=spec.L, estimate=b1, se=s1))
    rows.append(_row("theta slope enh", spec, s=spec.s, rule=rule.name, L=spec.L, estimate=b2, se=s2))
    gates.append(asdict(Gate("|theta slope difference| / joint SE", abs(b1 - b2) / math.hypot(s1, s2), "<=", spec.band)))
    for i, (p, Lx) in enumerate(zip(below, L_xi)):
        disp = cluster.axis_displacements(model, Lx)
        dist = [model.distance(model.origin(), d) for d in disp]
        obs = cluster.simulate_observables(model, p, spec.s, rule, Lx, n_xi, spec.seed + 100 + i, disp)
        violations += obs.coupling_violations()
        (t1, e1), (t2, e2) = obs.tau_hat, obs.tau_hat_enh
        f1 = cluster.fit_xi(dist, t1, e1)
        f2 = cluster.fit_xi(dist, t2, e2)
        common = dict(p=p, rule=rule.name, L=Lx, n=n_xi)
        rows.append(_row("xi", spec, s=0.0, estimate=f1.xi, se=f1.se, **common))
        rows.append(_row("xi_enh", spec, s=spec.s, estimate=f2.xi, se=f2.se, **common))
        gates.append(asdict(Gate(f"|xi difference| / joint SE p={p}", abs(f1.xi - f2.xi) / math.hypot(f1.se, f2.se),
                                 "<=", spec.band)))
    gates.append(asdict(Gate("per-sample inequality violations", violations, "==", 0)))
    return rows, gates, {}


def interface_sample(delta: float, p: float, s: float, rule, seed: int, replica: int):
    """Plain and enhanced curve families for one coupled sample on the unit window."""
    n = int(round(1 / delta))
    window = Window.centered(Kind.TRIANGULAR, n)
    eta, hat = cluster.coupled_bits(window, p, s, rule, seed, replica)
    f0 = config.SiteField(window, eta, p, seed, replica)
    f1 = config.SiteField(window, hat, p, seed, replica)
    F = interfaces.trace_loops(interfaces.unsatisfied(f0, delta), "plain")
    G = interfaces.trace_loops(interfaces.unsatisfied(f1, delta), "enhanced")
    return F, G


def _family_distance(F, G) -> float:
    if not len(F) and not len(G):
        return 0.0
    if not len(F) or not len(G):
        return math.inf
    return interfaces.hausdorff(F, G)


def _interfaces(spec):
    rule = _rule_for(spec, "tri-m6")
    meshes = spec.mesh or [1 / 16, 1 / 32, 1 / 64]
    R = float(spec.options.get("R", enhance.protected_radius(rule)))
    rows, gates = [], []
    medians = []
    dump = spec.options.get("curve_dump")
    for delta in meshes:
        dists, checked, bad = [], 0, 0
        for i in range(spec.n_samples):
            F, G = interface_sample(delta, spec.p[0], spec.s, rule, spec.seed, i)
            if dump:
                interfaces.dump_curves([F, G], dump, sample=i)
            dists.append(_family_distance(F.complete(), G.complete()))
            rep = interfaces.ancestor_check(F, G, R)
            checked += rep.checked
            bad += len(rep.violations)
        med = statistics.median(dists)
        medians.append(med)
        common = dict(p=spec.p[0], s=spec.s, rule=rule.name, delta=delta, n=spec.n_samples)
        rows.append(_row("median hausdorff", spec, estimate=med, **common))
        rows.append(_row("ancestor loops checked", spec, estimate=checked, **common))
        rows.append(_row("ancestor violations", spec, estimate=bad, **common))
        gates.append(asdict(Gate(f"ancestor violations delta={delta}", bad, "==", 0)))
    for (d0, m0), (d1, m1) in zip(zip(meshes, medians), zip(meshes[1:], medians[1:])):
        gates.append(asdict(Gate(f"median(delta={d1}) - median(delta={d0})", m1 - m0, "<", 0.0)))
    return rows, gates, {"medians": medians}


def geometry_suite(kind: Kind, n: int, seed: int) -> dict:
    """Violation counts of the boundary and loop properties over ``n`` random instances."""
    model = LatticeModel(kind)
    rng = np.random.default_rng([seed, list(Kind).index(kind)])
    bad = dict.fromkeys(("boundary", "self-repelling", "marked inside", "neighbors", "partition",
                         "faces", "jordan split"), 0)
    for _ in range(n):
        loop, cl, marked = lattice.random_self_repelling_loop(model, rng)
        if lattice.check_boundary(model, cl, lattice.external_boundary(model, cl)):
            bad["boundary"] += 1
        if not lattice.is_self_repelling(model, loop):
            bad["self-repelling"] += 1
            continue
        w = lattice.loop_window(model, loop)
        sites = w.sites()
        inn, out = lattice.jordan_split(model, loop, sites)
        if len(inn) + len(out) + len(loop) != len(sites) or set(inn) & set(out):
            bad["jordan split"] += 1
        bad["marked inside"] += marked not in inn
        bad["neighbors"] += not lattice.check_neighbors(model, loop, inn, out)
        bad["partition"] += not lattice.check_partition(model, inn, out)
        bad["faces"] += not lattice.check_faces(model, loop)
    return bad


def partition_violations(kind: Kind, level: int, side: int = 64) -> int:
    """Sites assigned inconsistently or cells that are not translates of one shape."""
    model = LatticeModel(kind)
    part = lattice.cell_partition(model, level)
    w = Window.centered(kind, side)
    bad = 0
    shapes = set()
    for x in w.sites():
        c = part.cell_of(x)
        members = part.members(c)
        if x not in members:
            bad += 1
        base = members[0]
        shapes.add(tuple(sorted((m[0] - base[0], m[1] - base[1], *m[2:]) for m in members)))
    return bad + len(shapes) - 1


def _geometry(spec):
    kinds = [Kind(k) for k in spec.options.get("lattices", [k.value for k in Kind])]
    rows, gates = [], []
    t0 = time.perf_counter()
    for kind in kinds:
        bad = geometry_suite(kind, spec.n_samples, spec.seed)
        bad["cell partition"] = partition_violations(kind, int(spec.options.get("level", 0)))
        for name, count in bad.items():
            rows.append(_row(f"{kind.value} {name} violations", spec, estimate=count, n=spec.n_samples))
            gates.append(asdict(Gate(f"{kind.value} {name}", count, "==", 0)))
    gates.append(asdict(Gate("runtime seconds", time.perf_counter() - t0, "<", spec.options.get("time_limit", 300))))
    return rows, gates, {}


def stability_counts(rule, p: float, n: int, seed: int, L: int = 24, sample: int = 12) -> dict:
    """Violations of the stability properties for ``rule`` over ``n`` random fields.

    Every site the full enhancement opens is checked for protection at the
    nominal and the tight radius.  A random subset of closed sites supplies
    protected sites for the stable-edge and protected-pair checks.
    """
    model = LatticeModel(rule.kind)
    adj = enhance._arm_adjacency(rule)
    R = enhance.protected_radius(rule)
    R_tight = enhance.protected_radius(rule, tight=True)
    window = Window.centered(rule.kind, L)

    def interior(x):
        return all(window.contains(z) for y in model.ball(x, 2 * R) for z in model.star_neighbors(y))

    inner = [x for x in window.sites() if interior(x)]
    inner_set = set(inner)
    out = dict.fromkeys(("protected opened", "tight-protected opened", "stable edge lost",
                         "protected pair disconnected", "opened sites checked", "stable edges tested",
                         "pairs tested"), 0)
    rng = np.random.default_rng([seed, round(p * 1000), 7])
    for i in range(n):
        f = config.sample_field(window, p, seed, i)
        tilde = enhance.full_enhancement(f, rule).bits
        for idx in np.argwhere(tilde & ~f.bits):
            x = window.site(tuple(int(v) for v in idx))
            if x not in inner_set:
                continue
            out["opened sites checked"] += 1
            out["protected opened"] += interfaces.is_protected(f, x, R, adj)
            out["tight-protected opened"] += interfaces.is_protected(f, x, R_tight, adj)
        closed = [x for x in inner if not f.bits[window.index(x)]]
        if not closed:
            continue
        picks = rng.choice(len(closed), size=min(len(closed), sample), replace=False)
        prot = [closed[k] for k in sorted(picks) if interfaces.is_protected(f, closed[k], R, adj)]
        for x in prot:
            for y in model.neighbors(x):
                if window.contains(y) and f.bits[window.index(y)]:
                    out["stable edges tested"] += 1
                    if tilde[window.index(x)] or not tilde[window.index(y)]:
                        out["stable edge lost"] += 1
        if len(prot) < 2:
            continue
        lab0, _ = cluster.label_bits(~f.bits, window, adj)
        lab1, _ = cluster.label_bits(~tilde, window, adj)
        for a in range(len(prot)):
            for b in range(a + 1, len(prot)):
                x, y = prot[a], prot[b]
                if model.distance(x, y) < 4 * R or lab0[window.index(x)] != lab0[window.index(y)]:
                    continue
                out["pairs tested"] += 1
                out["protected pair disconnected"] += lab1[window.index(x)] != lab1[window.index(y)]
    return out


def _stability(spec):
    names = spec.options.get("rules", ["tri-m6", "sq-NEW-star"])
    L = int(spec.options.get("window", 24))
    rows, gates = [], []
    for name in names:
        rule = enhance.get_rule(name)
        for p in spec.p:
            counts = stability_counts(rule, p, spec.n_samples, spec.seed, L)
            for q, v in counts.items():
                rows.append(_row(q, spec, p=p, rule=rule.name, L=L, estimate=v, n=spec.n_samples))
            for q in ("protected opened", "tight-protected opened", "protected pair disconnected",
                      "stable edge lost"):
                gates.append(asdict(Gate(f"{rule.name} p={p} {q}", counts[q], "==", 0)))
    return rows, gates, {}


def _decay(spec):
    rule = _rule_for(spec, "tri-m6")
    R = float(spec.options.get("R", enhance.protected_radius(rule)))
    Ms = tuple(spec.options.get("Ms", (8, 16, 24, 32)))
    fit = interfaces.exploration_decay(spec.p[0], R, Ms, spec.n_samples, spec.seed, spec.L)
    rows = [_row(f"frequency M={M}", spec, p=spec.p[0], rule=rule.name, L=spec.L,
                 estimate=k / n, se=math.sqrt(k * (n - k) / n) / n if n else None, n=n)
            for M, k, n in zip(fit.Ms, fit.counts, fit.trials)]
    rows.append(_row("log-frequency slope", spec, p=spec.p[0], rule=rule.name, L=spec.L, estimate=fit.slope))
    rows.append(_row("slope 95% CI upper", spec, p=spec.p[0], rule=rule.name, L=spec.L, estimate=fit.ci[1]))
    slope = fit.slope if not math.isnan(fit.slope) else math.inf
    gates = [asdict(Gate("slope", max(slope, -1e300), "<", 0.0)),
             asdict(Gate("slope 95% CI upper bound", fit.ci[1] if math.isfinite(fit.ci[1]) else 1e300, "<", 0.0))]
    return rows, gates, {"R": R}


_RUNNERS = {
    ExperimentKind.ESSENTIALITY: _essentiality,
    ExperimentKind.SANDWICH: _sandwich,
    ExperimentKind.CARDY: _cardy,
    ExperimentKind.INVARIANCE: _invariance,
    ExperimentKind.SHIFT: _shift,
    ExperimentKind.EXPONENTS: _exponents,
    ExperimentKind.INTERFACES: _interfaces,
    ExperimentKind.GEOMETRY: _geometry,
    ExperimentKind.STABILITY: _stability,
    ExperimentKind.DECAY: _decay,
}


def run(spec: ExperimentSpec) -> ResultRecord:
    """Run a named experiment; identical specs give identical rows and gates."""
    t0 = time.perf_counter()
    rows, gates, _extra = _RUNNERS[spec.kind](spec)
    return ResultRecord(spec.to_dict(), spec.digest(), rows, gates, time.perf_counter() - t0, _versions())


# Reports -------------------------------------------------------------------

def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def record_to_json(record: ResultRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, indent=2) + "\n"


def summary(record: ResultRecord) -> str:
    lines = [f"experiment {record.spec['kind']}  spec {record.spec_hash[:12]}  seed {record.spec['seed']}"]
    for r in record.rows:
        est = r["estimate"]
        se = "" if r["SE"] is None else f" +- {r['SE']:.4g}" if isinstance(r["SE"], float) else f" +- {r['SE']}"
        tag = " ".join(f"{k}={r[k]}" for k in ("p", "s", "rule", "L", "delta", "rho") if r[k] is not None)
        lines.append(f"  {r['quantity']:<32} {est!s:<22}{se}  {tag}")
    for g in record.gates:
        mark = "PASS" if g["passed"] else "FAIL"
        lines.append(f"  [{mark}] {g['name']}: {g['value']:.6g} {g['op']} {g['threshold']:.6g}")
    lines.append(f"  overall: {'PASS' if record.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def report(record: ResultRecord, out: str | os.PathLike | None = None, fmt: str = "csv") -> str:
    """Human-readable summary; with ``out`` also writes ``out.csv`` or ``out.json``."""
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            out.with_suffix(".csv").write_text(rows_to_csv(record.rows))
            out.with_suffix(".json").write_text(record_to_json(record))
        elif fmt == "json":
            out.with_suffix(".json").write_text(record_to_json(record))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    return summary(record)


def load_record(path) -> ResultRecord:
    d = json.loads(Path(path).read_text())
    validate_record(d)
    return ResultRecord.from_dict(d)


# Command line --------------------------------------------------------------

def _floats(text):
    if text is None:
        return None
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if "/" in part:
            a, b = part.split("/")
            out.append(float(a) / float(b))
        elif part:
            out.append(float(part))
    return out


def _build_spec(kind, config_path, **flags) -> ExperimentSpec:
    base = {}
    if config_path:
        base = yaml.safe_load(Path(config_path).read_text()) or {}
    options = dict(base.pop("options", {}) or {})
    options.update(flags.pop("options", {}) or {})
    base.update({k: v for k, v in flags.items() if v is not None})
    base["kind"] = kind
    base["options"] = options
    if "seed" not in base:
        base["seed"] = int(os.environ.get(SEED_ENV, "0"))
    return ExperimentSpec.from_dict(base)


def _finish(spec: ExperimentSpec, fmt: str):
    record = run(spec)
    click.echo(report(record, spec.out, fmt), nl=False)
    raise SystemExit(0 if record.passed else 1)


def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="YAML file with ExperimentSpec fields; flags override it."),
        click.option("--lattice", type=click.Choice([k.value for k in Kind])),
        click.option("--rule", help="Builtin rule name or a YAML rule file."),
        click.option("--p", "p", help="Comma-separated densities."),
        click.option("--s", "s", type=float, help="Activation density."),
        click.option("--size", "L", type=int, help="Window side L."),
        click.option("--mesh", help="Comma-separated mesh sizes, fractions allowed (1/128)."),
        click.option("--rho", help="Comma-separated aspect ratios b/h."),
        click.option("--samples", "n_samples", type=int),
        click.option("--seed", type=int, help=f"Master seed (default ${SEED_ENV} or 0)."),
        click.option("--out", type=click.Path(dir_okay=False), help="Output path stem."),
        click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _flags(p, mesh, rho, **kw):
    out = dict(kw)
    out["p"] = _floats(p)
    out["mesh"] = _floats(mesh)
    out["rho"] = _floats(rho)
    return out


@click.group()
def main():
    """Enhancement percolation experiments."""


@main.command("essential-check")
@_common
def essential_check(config_path, fmt, p, mesh, rho, **kw):
    """Classify rules as essential or not (default: the builtin catalog)."""
    _finish(_build_spec(ExperimentKind.ESSENTIALITY, config_path, **_flags(p, mesh, rho, **kw)), fmt)


@main.command()
@_common
def simulate(config_path, fmt, p, mesh, rho, **kw):
    """Coupled plain/enhanced observables and the sitewise sandwich."""
    _finish(_build_spec(ExperimentKind.SANDWICH, config_path, **_flags(p, mesh, rho, **kw)), fmt)


@main.command()
@_common
@click.option("--experiment", type=click.Choice(["cardy", "invariance", "shift"]), default="cardy", show_default=True)
@click.option("--margin", type=float, help="Minimum uplift for the shift experiment.")
def crossing(config_path, fmt, p, mesh, rho, experiment, margin, **kw):
    """Rectangle crossings against Cardy's formula, or plain against enhanced."""
    kind = {"cardy": ExperimentKind.CARDY, "invariance": ExperimentKind.INVARIANCE,
            "shift": ExperimentKind.SHIFT}[experiment]
    options = {} if margin is None else {"margin": margin}
    _finish(_build_spec(kind, config_path, options=options, **_flags(p, mesh, rho, **kw)), fmt)


@main.command()
@_common
def exponents(config_path, fmt, p, mesh, rho, **kw):
    """Compare theta slopes and correlation lengths between the two arms."""
    _finish(_build_spec(ExperimentKind.EXPONENTS, config_path, **_flags(p, mesh, rho, **kw)), fmt)


@main.command("interfaces")
@_common
@click.option("--experiment", type=click.Choice(["convergence", "stability", "decay"]), default="convergence",
              show_default=True)
def interfaces_cmd(config_path, fmt, p, mesh, rho, experiment, **kw):
    """Interface families, stability checks and exploration decay."""
    kind = {"convergence": ExperimentKind.INTERFACES, "stability": ExperimentKind.STABILITY,
            "decay": ExperimentKind.DECAY}[experiment]
    _finish(_build_spec(kind, config_path, **_flags(p, mesh, rho, **kw)), fmt)


@main.command("geometry-suite")
@_common
def geometry_cmd(config_path, fmt, p, mesh, rho, **kw):
    """Random loops and clusters checked against the lattice geometry properties."""
    _finish(_build_spec(ExperimentKind.GEOMETRY, config_path, **_flags(p, mesh, rho, **kw)), fmt)


@main.command("report")
@click.argument("record_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
def report_cmd(record_path, out, fmt):
    """Re-render a stored result record and re-check its gates."""
    record = load_record(record_path)
    if not record.recheck():
        raise click.ClickException("stored gate outcomes disagree with their values")
    click.echo(report(record, out, fmt), nl=False)
    raise SystemExit(0 if record.passed else 1)


if __name__ == "__main__":
    main()
