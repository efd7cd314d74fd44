"""Open/closed interfaces of triangular-lattice site configurations.

Interfaces live on the hexagonal dual: each triangle of the triangular
lattice is a hexagonal vertex, and a dual edge is unsatisfied when the
triangular edge it crosses joins an open and a closed site.  Every triangle
with mixed colours has exactly two unsatisfied sides, so the unsatisfied
edges split into vertex-disjoint paths and loops with no tie-breaking.
Dual edges are oriented with the open site on their left.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numba
import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial import ConvexHull, QhullError
from scipy.stats import chi2

from .config import SiteField, sample_field
from .lattice import Adjacency, CellPartition, ContractError, Kind, LatticeModel, Window

_HEX = LatticeModel(Kind.HEXAGONAL)
_TRI = LatticeModel(Kind.TRIANGULAR)
_EPS = 1e-9


def triangle(h):
    """Corners of the triangle at hexagonal vertex ``h`` in ccw order, and the
    dual vertex across each side ``(v[i], v[i+1])``."""
    q, r, p = h
    if p == 0:
        return ((q, r), (q + 1, r), (q, r + 1)), ((q, r - 1, 1), (q, r, 1), (q - 1, r, 1))
    return ((q + 1, r), (q + 1, r + 1), (q, r + 1)), ((q + 1, r, 0), (q, r + 1, 0), (q, r, 0))


# direction of a triangular edge x -> x + d, and the dual vertices on its
# left and right as offsets from x
_EDGE_DIRS = (
    ((1, 0), (0, 0, 0), (0, -1, 1)),
    ((0, 1), (-1, 0, 1), (0, 0, 0)),
    ((-1, 1), (-1, 0, 0), (-1, 0, 1)),
)


@dataclass(frozen=True, eq=False)
class DualEdgeSet:
    """Unsatisfied dual edges of a configuration.

    ``arcs`` maps each oriented dual edge ``(tail, head)`` to the
    triangular edge ``(open site, closed site)`` it crosses.
    """
    window: Window
    mesh: float
    arcs: dict

    @property
    def edges(self) -> frozenset:
        return frozenset(self.arcs)

    def __len__(self):
        return len(self.arcs)

    def __contains__(self, arc):
        return arc in self.arcs

    def crossed_pairs(self) -> set:
        return {frozenset(v) for v in self.arcs.values()}


def _require_triangular(f: SiteField):
    if f.kind is not Kind.TRIANGULAR:
        raise ContractError("interfaces are implemented for the triangular lattice only")


def unsatisfied(field: SiteField, mesh: float = 1.0) -> DualEdgeSet:
    _require_triangular(field)
    w = field.window
    bits = field.bits
    n0, n1 = w.shape
    arcs = {}
    for (dq, dr), lo, ro in _EDGE_DIRS:
        a = bits[max(0, -dq):n0 + min(0, -dq), max(0, -dr):n1 + min(0, -dr)]
        b = bits[max(0, dq):n0 + min(0, dq), max(0, dr):n1 + min(0, dr)]
        for i, j in np.argwhere(a != b):
            q = int(i) + max(0, -dq) + w.origin[0]
            r = int(j) + max(0, -dr) + w.origin[1]
            x, y = (q, r), (q + dq, r + dr)
            left = (q + lo[0], r + lo[1], lo[2])
            right = (q + ro[0], r + ro[1], ro[2])
            if bits[w.index(x)]:
                arcs[(right, left)] = (x, y)
            else:
                arcs[(left, right)] = (y, x)
    return DualEdgeSet(w, mesh, arcs)


@dataclass(frozen=True)
class BLoop:
    """Oriented self-avoiding dual path; ``closed`` loops omit the repeated start."""
    vertices: tuple
    closed: bool
    truncated: bool = False
    oriented: bool = True

    @property
    def edges(self) -> list:
        v = self.vertices
        n = len(v)
        m = n if self.closed else n - 1
        return [(v[i], v[(i + 1) % n]) for i in range(m)]

    def points(self, mesh: float = 1.0) -> np.ndarray:
        return mesh * np.array([_HEX.embed(h) for h in self.vertices], dtype=float)

    def canonical(self) -> tuple:
        """Vertex sequence with loops rotated to start at their smallest vertex."""
        if not self.closed:
            return self.vertices
        k = self.vertices.index(min(self.vertices))
        return self.vertices[k:] + self.vertices[:k]

    def diameter(self, mesh: float = 1.0) -> float:
        return _diameter(self.points(mesh))


def _diameter(pts: np.ndarray) -> float:
    if len(pts) > 8:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max()) if len(pts) else 0.0


@dataclass
class CurveFamily:
    curves: tuple
    mesh: float
    provenance: str = "plain"

    def polylines(self) -> list:
        return [c.points(self.mesh) for c in self.curves]

    def complete(self) -> "CurveFamily":
        return CurveFamily(tuple(c for c in self.curves if not c.truncated), self.mesh, self.provenance)

    def __len__(self):
        return len(self.curves)

    @cached_property
    def _keys(self) -> dict:
        return {c.canonical(): c for c in self.curves}


def trace_loops(edges: DualEdgeSet, provenance: str = "plain") -> CurveFamily:
    """Split the unsatisfied edges into b-loops and window-truncated b-paths."""
    succ = {t: h for t, h in edges.arcs}
    heads = set(succ.values())
    curves = []
    used = set()
    for start in sorted(t for t in succ if t not in heads):
        path = [start]
        while path[-1] in succ:
            path.append(succ[path[-1]])
        used.update(path)
        curves.append(BLoop(tuple(path), closed=False, truncated=True))
    for start in sorted(succ):
        if start in used:
            continue
        path = [start]
        used.add(start)
        nxt = succ[start]
        while nxt != start:
            path.append(nxt)
            used.add(nxt)
            nxt = succ[nxt]
        curves.append(BLoop(tuple(path), closed=True))
    return CurveFamily(tuple(curves), edges.mesh, provenance)


# Protected sites and stable edges ------------------------------------------

def _star(model: LatticeModel, adjacency: Adjacency):
    cache = {}

    def nbrs(x):
        got = cache.get(x)
        if got is None:
            got = cache[x] = model.adjacent_sites(x, adjacency)
        return got
    return nbrs


def protection_arms(field: SiteField, x, R: float, adjacency=Adjacency.STAR):
    """Two closed arms from ``x`` leaving the open ball of radius ``2R``,
    disjoint and nonadjacent away from ``x``, or ``None``.

    The first arm ranges over induced paths (any arm can be shortcut to one
    on a subset of its sites); for each, the second is found by a
    breadth-first search that avoids the first arm and its neighbours.
    """
    model = LatticeModel(field.kind)
    x = model.validate(x)
    if field.is_open(x):
        return None
    radius = 2 * R
    ball = model.ball(x, radius)
    if any(not field.window.contains(y) for y in ball):
        raise ContractError(f"ball of radius {radius} around {x} is clipped by the window")
    inside = {y for y in ball if model.distance(x, y) < radius - _EPS}
    nbrs = _star(model, Adjacency(adjacency))
    closed = {}

    def is_closed(y):
        c = closed.get(y)
        if c is None:
            c = closed[y] = not field.is_open(y)
        return c

    def second_arm(arm):
        banned = set(arm[1:])
        for a in arm[1:]:
            banned.update(nbrs(a))
        banned.discard(x)
        prev = {x: None}
        queue = deque([x])
        while queue:
            c = queue.popleft()
            for y in nbrs(c):
                if y in prev or y in banned or not is_closed(y):
                    continue
                prev[y] = c
                if y not in inside:
                    out = [y]
                    while prev[out[-1]] is not None:
                        out.append(prev[out[-1]])
                    return out[::-1]
                queue.append(y)
        return None

    def extend(path, blocked):
        cur = path[-1]
        for y in nbrs(cur):
            if y in blocked or not is_closed(y):
                continue
            arm = path + [y]
            if y not in inside:
                other = second_arm(arm)
                if other is not None:
                    return arm, other
                continue
            found = extend(arm, blocked | set(nbrs(cur)) | {cur})
            if found:
                return found
        return None

    return extend([x], {x})


def is_protected(field: SiteField, x, R: float, adjacency=Adjacency.STAR) -> bool:
    return protection_arms(field, x, R, adjacency) is not None


def is_stable(field: SiteField, edge, R: float, adjacency=Adjacency.STAR) -> bool:
    """Whether the interface edge between sites ``edge = (a, b)`` is stable:
    one endpoint open and the other protected."""
    a, b = edge
    oa, ob = field.is_open(a), field.is_open(b)
    if oa == ob:
        return False
    return is_protected(field, b if oa else a, R, adjacency)


# Exploration ---------------------------------------------------------------

@dataclass
class Exploration:
    loop: BLoop
    reveals: list
    revealed: dict = field(repr=False, default_factory=dict)


def explore(field: SiteField, start, cells: CellPartition) -> Exploration:
    """Trace the interface through ``start`` revealing whole cells on demand.

    ``start`` is an oriented dual edge ``(tail, head)`` or the pair of
    triangular sites it separates.  Each query of a site in an unseen cell
    reveals every window site of that cell; ``reveals`` lists the cells in
    the order they were opened.
    """
    _require_triangular(field)
    w = field.window
    revealed = {}
    log = []

    def state(v):
        if v not in revealed:
            c = cells.cell_of(v)
            log.append(c)
            for y in cells.members(c):
                if w.contains(y):
                    revealed[y] = bool(field.bits[w.index(y)])
        return revealed[v]

    if len(start[0]) == 2:
        a, b = start
        if not (w.contains(a) and w.contains(b)) or b not in _TRI.neighbors(a):
            raise ContractError("start must be an edge inside the window")
        o, c = (a, b) if field.is_open(a) else (b, a)
        for t in ({*_TRI.face_keys(a)} & {*_TRI.face_keys(b)}):
            verts, across = triangle(t)
            for i, h in enumerate(across):
                if {verts[i], verts[(i + 1) % 3]} == {o, c}:
                    start = (t, h) if verts[i] == c else (h, t)
                    break
            break
    tail, head = start
    verts, across = triangle(tail)
    i = across.index(head) if head in across else None
    if i is None or not all(w.contains(v) for v in (verts[i], verts[(i + 1) % 3])):
        raise ContractError("start is not a dual edge inside the window")
    if state(verts[i]) or not state(verts[(i + 1) % 3]):
        raise ContractError("start edge is not unsatisfied with the open site on its left")

    def step(h, forward):
        verts, across = triangle(h)
        if not all(w.contains(v) for v in verts):
            return None
        s = [state(v) for v in verts]
        for k in range(3):
            if forward and not s[k] and s[(k + 1) % 3]:
                return across[k]
            if not forward and s[k] and not s[(k + 1) % 3]:
                return across[k]
        raise AssertionError("mixed triangle without a crossing side")

    fwd = [tail, head]
    closed = False
    while True:
        nxt = step(fwd[-1], True)
        if nxt is None:
            break
        if nxt == tail:
            closed = True
            break
        fwd.append(nxt)
    if closed:
        return Exploration(BLoop(tuple(fwd), closed=True), log, revealed)
    back = []
    cur = tail
    while True:
        prv = step(cur, False)
        if prv is None:
            break
        back.append(prv)
        cur = prv
    return Exploration(BLoop(tuple(back[::-1] + fwd), closed=False, truncated=True), log, revealed)


# Metric and curve distances ------------------------------------------------

INF = None


def point_metric(u, v) -> float:
    """Distance for the conformal factor ``1/(1 + |z|^2)`` on the plane plus a
    point at infinity (``None``).

    Stereographic projection carries this metric to half the round metric
    on the unit sphere, whence ``d(u, v) = atan(|u - v| / |1 + conj(u) v|)``.
    """
    if u is None and v is None:
        return 0.0
    if u is None or v is None:
        z = complex(*v) if u is None else complex(*u)
        return math.atan2(1.0, abs(z))
    a, b = complex(*u), complex(*v)
    return math.atan2(abs(a - b), abs(1 + a.conjugate() * b))


@numba.njit(cache=True)
def _pm(ax, ay, bx, by):
    num = math.hypot(ax - bx, ay - by)
    den = math.hypot(1.0 + ax * bx + ay * by, ax * by - ay * bx)
    return math.atan2(num, den)


@numba.njit(cache=True)
def _frechet(p, q):
    n, m = p.shape[0], q.shape[0]
    row = np.empty(m)
    row[0] = _pm(p[0, 0], p[0, 1], q[0, 0], q[0, 1])
    for j in range(1, m):
        row[j] = max(row[j - 1], _pm(p[0, 0], p[0, 1], q[j, 0], q[j, 1]))
    for i in range(1, n):
        diag = row[0]
        row[0] = max(row[0], _pm(p[i, 0], p[i, 1], q[0, 0], q[0, 1]))
        for j in range(1, m):
            d = _pm(p[i, 0], p[i, 1], q[j, 0], q[j, 1])
            best = min(row[j], row[j - 1], diag)
            diag = row[j]
            row[j] = max(best, d)
    return row[m - 1]


def _as_curve(c, mesh):
    if isinstance(c, BLoop):
        return c.points(mesh), c.closed
    pts = np.asarray(c, dtype=float)
    closed = len(pts) > 2 and bool((pts[0] == pts[-1]).all())
    return (pts[:-1] if closed else pts), closed


def curve_distance(c1, c2, mesh: float = 1.0) -> float:
    """Discrete Frechet distance under ``point_metric``, over both orientations.

    Curves are BLoops (scaled by ``mesh``) or ``(n, 2)`` arrays; an array
    whose last point repeats its first is read as a loop.  A loop is
    traversed from its lexicographically smallest vertex and the other loop
    from its vertex nearest that point, so for loops the value is an upper
    bound over starting points.
    """
    p, pc = _as_curve(c1, mesh)
    q, qc = _as_curve(c2, mesh)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("empty curve")
    if pc:
        k = int(np.lexsort((p[:, 1], p[:, 0]))[0])
        p = np.roll(p, -k, axis=0)
        p = np.vstack([p, p[:1]])
    if qc:
        k = int(np.argmin(((q - p[0]) ** 2).sum(1)))
        q = np.roll(q, -k, axis=0)
        q = np.vstack([q, q[:1]])
    p = np.ascontiguousarray(p)
    fwd = _frechet(p, np.ascontiguousarray(q))
    rev = _frechet(p, np.ascontiguousarray(q[::-1]))
    return float(min(fwd, rev))


def _bbox(pts):
    return pts.min(0), pts.max(0)


def _directed(F: CurveFamily, G: CurveFamily) -> float:
    gkeys = G._keys
    gpts = [c.points(G.mesh) for c in G.curves]
    gbox = np.array([np.concatenate(_bbox(p)) for p in gpts])
    gnorm = np.array([np.sqrt((p ** 2).sum(1)).max() for p in gpts])
    worst = 0.0
    for c in F.curves:
        if c.canonical() in gkeys:
            continue
        pts = c.points(F.mesh)
        lo, hi = _bbox(pts)
        gap = np.hypot(np.maximum(0, np.maximum(gbox[:, 0] - hi[0], lo[0] - gbox[:, 2])),
                       np.maximum(0, np.maximum(gbox[:, 1] - hi[1], lo[1] - gbox[:, 3])))
        rmax = np.sqrt((pts ** 2).sum(1)).max()
        # |1 + conj(a) b| <= 1 + |a||b| gives a lower bound on every pointwise distance
        lb = np.arctan2(gap, 1 + rmax * gnorm)
        best = math.inf
        for k in np.argsort(lb, kind="stable"):
            if lb[k] >= best:
                break
            best = min(best, curve_distance(c, G.curves[k], F.mesh))
        worst = max(worst, best)
    return worst


def hausdorff(F: CurveFamily, G: CurveFamily) -> float:
    """Hausdorff distance between curve families induced by ``curve_distance``."""
    if not len(F) or not len(G):
        raise ValueError("empty curve family")
    return max(_directed(F, G), _directed(G, F))


@dataclass
class AncestorReport:
    checked: int
    matched: int
    violations: list
    threshold: float

    @property
    def ok(self) -> bool:
        return not self.violations


def ancestor_check(plain: CurveFamily, enhanced: CurveFamily, R: float) -> AncestorReport:
    """Match each large enhanced loop to its nearest plain loop and check that
    the parent is at most ``4R`` (scaled) smaller in diameter."""
    mesh = plain.mesh
    big = 6 * R * mesh
    pl = [c for c in plain.curves if c.closed and not c.truncated]
    pkeys = {c.canonical(): c for c in pl}
    ppts = [c.points(mesh) for c in pl]
    pbox = [_bbox(p) for p in ppts]
    pdiam = {}
    checked = matched = 0
    bad = []
    for child in enhanced.curves:
        if not child.closed or child.truncated:
            continue
        cd = child.diameter(mesh)
        if cd < big:
            continue
        checked += 1
        if child.canonical() in pkeys:
            matched += 1
            continue
        pts = child.points(mesh)
        lo, hi = _bbox(pts)
        best, arg = math.inf, None
        for k, (a, b) in enumerate(pbox):
            if np.any(a > hi + 4 * R * mesh) or np.any(lo > b + 4 * R * mesh):
                continue
            d = curve_distance(child, pl[k], mesh)
            if d < best:
                best, arg = d, k
        if arg is None:
            bad.append({"child_diameter": cd, "parent_diameter": None})
            continue
        matched += 1
        pd = pdiam.setdefault(arg, pl[arg].diameter(mesh))
        if pd < cd - 4 * R * mesh - _EPS:
            bad.append({"child_diameter": cd, "parent_diameter": pd, "distance": best})
    return AncestorReport(checked, matched, bad, big)


def dump_curves(families, target, sample: int = 0) -> None:
    """Append one JSON line per curve: sample, provenance, mesh, vertices, truncation."""
    with open(target, "a") as fh:
        for fam in families:
            for c in fam.curves:
                fh.write(json.dumps({
                    "sample": sample,
                    "provenance": fam.provenance,
                    "mesh": fam.mesh,
                    "closed": c.closed,
                    "truncated": c.truncated,
                    "vertices": c.points(fam.mesh).round(12).tolist(),
                }) + "\n")


# Exploration decay ---------------------------------------------------------

def loop_has_stable_edge(field: SiteField, loop: BLoop, R: float) -> bool:
    """Whether some edge of ``loop`` is stable; edges whose ball is clipped count as unstable."""
    for tail, head in loop.edges:
        verts, across = triangle(tail)
        k = across.index(head)
        try:
            if is_protected(field, verts[k], R, Adjacency.L):
                return True
        except ContractError:
            continue
    return False


@dataclass
class DecayFit:
    """Binomial fit of ``log P(M) = a + b M`` with a profile-likelihood interval for ``b``."""
    Ms: tuple
    counts: tuple
    trials: tuple
    slope: float
    ci: tuple

    @property
    def frequencies(self) -> tuple:
        return tuple(k / n for k, n in zip(self.counts, self.trials))


def _profile_loglik(b, Ms, k, n):
    Ms, k, n = (np.asarray(v, dtype=float) for v in (Ms, k, n))
    amax = -np.max(b * Ms)

    def negll(a):
        eta = a + b * Ms
        pr = np.exp(eta)
        with np.errstate(divide="ignore"):
            return -(np.sum(k * eta) + np.sum((n - k) * np.log1p(-np.minimum(pr, 1 - 1e-300))))
    lo = amax - 60.0
    res = minimize_scalar(negll, bounds=(lo, amax - 1e-12), method="bounded",
                          options={"xatol": 1e-10})
    return -float(res.fun)


def fit_log_decay(Ms, counts, trials, level: float = 0.95) -> DecayFit:
    """Slope of log-frequency against M from independent binomial counts.

    Zero counts are handled by the likelihood, where a least-squares fit on
    log-frequencies would be undefined.  The slope estimate may be ``-inf``
    when only the smallest M shows events; the interval is then one-sided.
    """
    Ms = tuple(float(m) for m in Ms)
    if not any(counts):
        return DecayFit(Ms, tuple(counts), tuple(trials), math.nan, (-math.inf, math.inf))
    crit = chi2.ppf(level, 1) / 2
    grid = np.concatenate([[-60.0, -30.0], np.linspace(-10, 10, 801)])
    prof = np.array([_profile_loglik(b, Ms, counts, trials) for b in grid])
    top = int(np.argmax(prof))
    best = prof[top]
    if prof[0] >= best - 1e-9:
        slope = -math.inf
    else:
        res = minimize_scalar(lambda b: -_profile_loglik(b, Ms, counts, trials),
                              bounds=(grid[top - 1], grid[min(top + 1, len(grid) - 1)]), method="bounded",
                              options={"xatol": 1e-9})
        slope, best = float(res.x), max(best, -float(res.fun))

    def g(b):
        return _profile_loglik(b, Ms, counts, trials) - (best - crit)

    def bound(centre, steps):
        prev = centre
        for b in steps:
            if g(b) < 0:
                return brentq(g, min(prev, b), max(prev, b))
            prev = b
        return math.copysign(math.inf, steps[-1] - centre) if len(steps) else centre

    centre = slope if math.isfinite(slope) else float(grid[top])
    hi = bound(centre, [b for b in grid if b > centre])
    lo = -math.inf if not math.isfinite(slope) else bound(centre, [b for b in grid[::-1] if b < centre])
    return DecayFit(Ms, tuple(int(c) for c in counts), tuple(int(t) for t in trials), slope, (lo, hi))


def exploration_decay(p: float, R: float, Ms=(8, 16, 24, 32), n_per_block: int = 2500,
                      seed: int = 0, L: int = 96, level: int = 0) -> DecayFit:
    """Frequency of {interface through a fixed edge has diameter >= M and no stable edge}.

    Each M gets its own block of replicas so the counts are independent.
    The interface is found by the cell-revealing exploration from the edge
    between the origin and its +x neighbour.
    """
    w = Window.centered(Kind.TRIANGULAR, L)
    cells = CellPartition(_TRI, level)
    start = ((0, 0), (1, 0))
    counts = []
    for j, M in enumerate(Ms):
        k = 0
        for i in range(j * n_per_block, (j + 1) * n_per_block):
            f = sample_field(w, p, seed, i)
            if f.is_open(start[0]) == f.is_open(start[1]):
                continue
            ex = explore(f, start, cells)
            if ex.loop.diameter() >= M and not loop_has_stable_edge(f, ex.loop, R):
                k += 1
        counts.append(k)
    return fit_log_decay(Ms, counts, [n_per_block] * len(Ms))
