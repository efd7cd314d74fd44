"""Square, triangular and hexagonal lattices with their matching and dual graphs.

Coordinates
-----------
square       ``(i, j)``         embedded at ``(i, j)``
triangular   ``(q, r)`` axial   embedded at ``(q + r/2, r*sqrt(3)/2)``
hexagonal    ``(q, r, p)``      the centre of the up (``p=0``) or down (``p=1``)
                                triangle of the triangular cell ``(q, r)``

The hexagonal lattice is embedded as the dual of the unit triangular lattice,
so its bond length is ``1/sqrt(3)``.  Neighbour lists are ordered
counterclockwise by angle, starting from the +x axis.

Faces are keyed by the dual site sitting inside them: a square face by its
lower-left corner, a triangle by the hexagonal site at its centre, and a
hexagon by the triangular site at its centre.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

SQRT3 = math.sqrt(3.0)
_EPS = 1e-9


class Kind(str, Enum):
    SQUARE = "square"
    TRIANGULAR = "triangular"
    HEXAGONAL = "hexagonal"


class Adjacency(str, Enum):
    L = "L"
    STAR = "star"
    DUAL = "dual"


class Boundary(str, Enum):
    FREE = "free"
    CLOSED = "closed"
    OPEN = "open"
    TORUS = "torus"


class CoordinateError(ValueError):
    pass


class ContractError(ValueError):
    """Raised when an input violates an operation's precondition."""


def _angle(v):
    a = math.atan2(v[1], v[0])
    return a + 2 * math.pi if a < -_EPS else max(a, 0.0)


def _embed(kind: Kind, x) -> tuple[float, float]:
    if kind is Kind.SQUARE:
        return float(x[0]), float(x[1])
    if kind is Kind.TRIANGULAR:
        return x[0] + 0.5 * x[1], 0.5 * SQRT3 * x[1]
    s = (1 + x[2]) / 3.0
    q, r = x[0] + s, x[1] + s
    return q + 0.5 * r, 0.5 * SQRT3 * r


def _face_vertices(kind: Kind, f) -> tuple:
    if kind is Kind.SQUARE:
        i, j = f
        return ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1))
    if kind is Kind.TRIANGULAR:
        q, r, p = f
        if p == 0:
            return ((q, r), (q + 1, r), (q, r + 1))
        return ((q + 1, r), (q + 1, r + 1), (q, r + 1))
    a, b = f
    return ((a, b, 0), (a - 1, b, 1), (a - 1, b, 0),
            (a - 1, b - 1, 1), (a, b - 1, 0), (a, b - 1, 1))


def _incident_faces(kind: Kind, x) -> tuple:
    if kind is Kind.SQUARE:
        i, j = x
        return ((i, j), (i - 1, j), (i - 1, j - 1), (i, j - 1))
    if kind is Kind.TRIANGULAR:
        q, r = x
        return ((q, r, 0), (q - 1, r, 1), (q - 1, r, 0),
                (q - 1, r - 1, 1), (q, r - 1, 0), (q, r - 1, 1))
    q, r, p = x
    if p == 0:
        return ((q, r), (q + 1, r), (q, r + 1))
    return ((q + 1, r), (q + 1, r + 1), (q, r + 1))


def _dual_position(kind: Kind, f) -> tuple[float, float]:
    if kind is Kind.SQUARE:
        return f[0] + 0.5, f[1] + 0.5
    if kind is Kind.TRIANGULAR:
        return _embed(Kind.HEXAGONAL, f)
    return _embed(Kind.TRIANGULAR, f)


def _raw_neighbors(kind: Kind, x) -> tuple:
    if kind is Kind.SQUARE:
        i, j = x
        return ((i + 1, j), (i, j + 1), (i - 1, j), (i, j - 1))
    if kind is Kind.TRIANGULAR:
        q, r = x
        return ((q + 1, r), (q, r + 1), (q - 1, r + 1),
                (q - 1, r), (q, r - 1), (q + 1, r - 1))
    q, r, p = x
    if p == 0:
        return ((q, r, 1), (q - 1, r, 1), (q, r - 1, 1))
    return ((q, r + 1, 0), (q, r, 0), (q + 1, r, 0))


def _sorted_ccw(kind: Kind, x, sites) -> tuple:
    ox, oy = _embed(kind, x)

    def key(y):
        px, py = _embed(kind, y)
        return _angle((px - ox, py - oy))
    return tuple(sorted(sites, key=key))


@lru_cache(maxsize=None)
def _offsets(kind: Kind, parity: int, star: bool) -> tuple:
    """Neighbour offsets of a site of the given parity, in ccw order."""
    base = (0, 0, parity) if kind is Kind.HEXAGONAL else (0, 0)
    if not star:
        nb = _sorted_ccw(kind, base, _raw_neighbors(kind, base))
    else:
        found = {v for f in _incident_faces(kind, base)
                 for v in _face_vertices(kind, f) if v != base}
        nb = _sorted_ccw(kind, base, found)
    if kind is Kind.HEXAGONAL:
        return tuple((y[0], y[1], y[2]) for y in nb)
    return nb


@dataclass(frozen=True)
class LatticeModel:
    kind: Kind
    mesh: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.mesh > 0:
            raise ValueError("mesh must be positive")

    @property
    def degree(self) -> int:
        return {Kind.SQUARE: 4, Kind.TRIANGULAR: 6, Kind.HEXAGONAL: 3}[self.kind]

    @property
    def bond_length(self) -> float:
        return 1 / SQRT3 if self.kind is Kind.HEXAGONAL else 1.0

    def validate(self, x) -> tuple:
        n = 3 if self.kind is Kind.HEXAGONAL else 2
        try:
            ok = len(x) == n and all(isinstance(c, (int, np.integer)) for c in x)
        except TypeError:
            ok = False
        if not ok or (n == 3 and x[2] not in (0, 1)):
            raise CoordinateError(f"invalid {self.kind.value} site {x!r}")
        return tuple(int(c) for c in x)

    def embed(self, x) -> tuple[float, float]:
        return _embed(self.kind, x)

    def position(self, x) -> tuple[float, float]:
        px, py = _embed(self.kind, x)
        return self.mesh * px, self.mesh * py

    def _shifted(self, x, offs):
        if self.kind is Kind.HEXAGONAL:
            return [(x[0] + d[0], x[1] + d[1], d[2]) for d in offs]
        return [(x[0] + d[0], x[1] + d[1]) for d in offs]

    def neighbors(self, x) -> list:
        x = self.validate(x)
        p = x[2] if self.kind is Kind.HEXAGONAL else 0
        return self._shifted(x, _offsets(self.kind, p, False))

    def star_neighbors(self, x) -> list:
        x = self.validate(x)
        p = x[2] if self.kind is Kind.HEXAGONAL else 0
        return self._shifted(x, _offsets(self.kind, p, True))

    def adjacent_sites(self, x, adjacency: Adjacency = Adjacency.L) -> list:
        if Adjacency(adjacency) is Adjacency.STAR:
            return self.star_neighbors(x)
        return self.neighbors(x)

    def next_ccw(self, v, u):
        """The L-neighbour of ``v`` that follows ``u`` counterclockwise."""
        nb = self.neighbors(v)
        return nb[(nb.index(tuple(u)) + 1) % len(nb)]

    def faces(self, x) -> list:
        """Faces incident to ``x`` as tuples of vertices in ccw order."""
        return [_face_vertices(self.kind, f) for f in _incident_faces(self.kind, self.validate(x))]

    def face_keys(self, x) -> tuple:
        return _incident_faces(self.kind, self.validate(x))

    def face_vertices(self, f) -> tuple:
        return _face_vertices(self.kind, f)

    def face_center(self, f) -> tuple[float, float]:
        px, py = _dual_position(self.kind, f)
        return self.mesh * px, self.mesh * py

    def ball(self, center, radius: float) -> list:
        """Sites within Euclidean distance ``radius`` (unit lattice) of ``center``."""
        center = self.validate(center)
        cx, cy = self.embed(center)
        seen = {center}
        queue = deque([center])
        out = []
        while queue:
            y = queue.popleft()
            px, py = self.embed(y)
            d = math.hypot(px - cx, py - cy)
            if d <= radius + _EPS:
                out.append((d, _angle((px - cx, py - cy)), y))
            if d <= radius + 2.0:
                for z in self.star_neighbors(y):
                    if z not in seen:
                        seen.add(z)
                        queue.append(z)
        out.sort(key=lambda t: (round(t[0], 9), round(t[1], 9)))
        return [t[2] for t in out]

    def distance(self, x, y) -> float:
        ax, ay = self.embed(x)
        bx, by = self.embed(y)
        return math.hypot(ax - bx, ay - by)

    def translate(self, x, offset):
        """Site ``x + offset`` where ``offset`` is a site relative to the origin.

        On the hexagonal lattice parity-1 sites use the point reflection of
        the offset, so rules stay covariant under the full symmetry group.
        """
        if self.kind is not Kind.HEXAGONAL:
            return (x[0] + offset[0], x[1] + offset[1])
        if x[2] == 0:
            return (x[0] + offset[0], x[1] + offset[1], offset[2])
        return (x[0] - offset[0], x[1] - offset[1], 1 - offset[2])

    def origin(self):
        return (0, 0, 0) if self.kind is Kind.HEXAGONAL else (0, 0)


def neighbors(model: LatticeModel, x) -> list:
    return model.neighbors(x)


def star_neighbors(model: LatticeModel, x) -> list:
    return model.star_neighbors(x)


@dataclass(frozen=True)
class DualEdge:
    """Dual edge between the faces left and right of the directed edge x->y."""
    left: tuple
    right: tuple


def dual_edge(model: LatticeModel, x, y) -> DualEdge:
    x, y = model.validate(x), model.validate(y)
    if y not in model.neighbors(x):
        raise ContractError(f"{x} and {y} do not form an edge")
    left = right = None
    for f in model.face_keys(x):
        verts = model.face_vertices(f)
        i = verts.index(x)
        if verts[(i + 1) % len(verts)] == y:
            left = f
        elif verts[i - 1] == y:
            right = f
    return DualEdge(left, right)


@dataclass(frozen=True)
class Path:
    """Ordered sites; a loop is stored without repeating its first site."""
    sites: tuple
    adjacency: Adjacency = Adjacency.L
    closed: bool = False

    def __len__(self):
        return len(self.sites)

    def edges(self):
        s = self.sites
        n = len(s)
        m = n if self.closed and n > 2 else n - 1
        return [(s[i], s[(i + 1) % n]) for i in range(m)]

    def is_valid(self, model: LatticeModel) -> bool:
        return all(b in model.adjacent_sites(a, self.adjacency) for a, b in self.edges())

    def is_self_avoiding(self) -> bool:
        return len(set(self.sites)) == len(self.sites)


def is_self_repelling(model: LatticeModel, path, adjacency=None, closed=None) -> bool:
    """True iff no path site is adjacent to, or equal to, a non-consecutive one."""
    if isinstance(path, Path):
        adjacency = path.adjacency if adjacency is None else adjacency
        closed = path.closed if closed is None else closed
        sites = path.sites
    else:
        sites = tuple(path)
    adjacency = Adjacency.L if adjacency is None else Adjacency(adjacency)
    n = len(sites)
    if n <= 1:
        return True
    pos = {}
    for i, s in enumerate(sites):
        if s in pos:
            return False
        pos[s] = i

    def consecutive(i, j):
        d = abs(i - j)
        return d == 1 or (closed and n > 2 and d == n - 1)

    for i, s in enumerate(sites):
        for y in model.adjacent_sites(s, adjacency):
            j = pos.get(y)
            if j is not None and not consecutive(i, j):
                return False
    return True


def _reduce_open(model, sites, adjacency):
    sites = list(sites)
    n = len(sites)
    where: dict = {}
    for i, s in enumerate(sites):
        where.setdefault(s, []).append(i)
    out = [sites[0]]
    i = 0
    while i < n - 1:
        cur = sites[i]
        best = i + 1
        for y in [cur, *model.adjacent_sites(cur, adjacency)]:
            for j in where.get(y, ()):
                if j > best:
                    best = j
        if sites[best] == cur:
            i = best
            continue
        out.append(sites[best])
        i = best
    return out


def winding_numbers(polygon, points) -> np.ndarray:
    """Winding number of a closed polygon around each point."""
    poly = np.asarray(polygon, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x0, y0 = poly[:, 0], poly[:, 1]
    nxt = np.roll(poly, -1, axis=0)
    x1, y1 = nxt[:, 0], nxt[:, 1]
    px, py = pts[:, 0, None], pts[:, 1, None]
    cross = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
    up = (y0 <= py) & (y1 > py) & (cross > 0)
    down = (y0 > py) & (y1 <= py) & (cross < 0)
    return up.sum(axis=1) - down.sum(axis=1)


def even_odd_inside(polygon, points) -> np.ndarray:
    """Even-odd ray casting towards +x; True for points inside."""
    poly = np.asarray(polygon, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    x0, y0 = poly[:, 0], poly[:, 1]
    nxt = np.roll(poly, -1, axis=0)
    x1, y1 = nxt[:, 0], nxt[:, 1]
    px, py = pts[:, 0, None], pts[:, 1, None]
    cross = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
    up = (y0 <= py) & (y1 > py) & (cross > 0)
    down = (y0 > py) & (y1 <= py) & (cross < 0)
    return ((up.sum(axis=1) + down.sum(axis=1)) % 2).astype(bool)


def _reduce_loop(model, sites, adjacency, marked):
    sites = list(sites)
    if len(set(sites)) != len(sites):
        raise ContractError("loop is not self-avoiding")
    target = None if marked is None else model.embed(marked)

    def score(piece):
        poly = [model.embed(s) for s in piece]
        if target is None:
            x, y = np.asarray(poly).T
            return abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        w = abs(int(winding_numbers(poly, [target])[0]))
        return 2 if w == 1 else (1 if w else 0)

    while len(sites) > 3:
        n = len(sites)
        pos = {s: i for i, s in enumerate(sites)}
        chord = None
        for i, s in enumerate(sites):
            for y in model.adjacent_sites(s, adjacency):
                j = pos.get(y)
                if j is not None and abs(i - j) not in (1, n - 1):
                    chord = (min(i, j), max(i, j))
                    break
            if chord:
                break
        if chord is None:
            break
        i, j = chord
        a = sites[i:j + 1]
        b = sites[j:] + sites[:i + 1]
        sa, sb = score(a), score(b)
        if sa != sb:
            sites = a if sa > sb else b
        else:
            sites = min(a, b, key=len) if target is not None else a
    return sites


def self_repelling_reduction(model: LatticeModel, path: Path, marked=None) -> Path:
    """Self-repelling subpath (or subloop) of ``path`` with the same endpoints.

    Open paths jump greedily to the farthest later site adjacent to the
    current one.  Loops are cut along a chord and the piece winding around
    ``marked`` is kept; without a marked point the larger piece survives.
    """
    if len(path.sites) <= 1:
        return path
    if path.closed:
        out = _reduce_loop(model, path.sites, path.adjacency, marked)
    else:
        out = _reduce_open(model, path.sites, path.adjacency)
    return Path(tuple(out), path.adjacency, path.closed)


def _l_connected(model, sites: set) -> bool:
    start = next(iter(sites))
    seen = {start}
    queue = deque([start])
    while queue:
        y = queue.popleft()
        for z in model.neighbors(y):
            if z in sites and z not in seen:
                seen.add(z)
                queue.append(z)
    return len(seen) == len(sites)


def loop_erase(seq: Sequence) -> list:
    out: list = []
    where: dict = {}
    for s in seq:
        if s in where:
            k = where[s]
            for t in out[k + 1:]:
                del where[t]
            del out[k + 1:]
        else:
            where[s] = len(out)
            out.append(s)
    return out


def external_boundary(model: LatticeModel, cluster: Iterable) -> Path:
    """The outer *-loop of sites L-adjacent to an L-connected finite cluster.

    Walks the interface counterclockwise around the cluster, cutting every
    face corner between separate runs of cluster sites, then erases the
    excursions into fjords so the result is self-avoiding.
    """
    C = {model.validate(c) for c in cluster}
    if not C:
        raise ContractError("cluster is empty")
    if not _l_connected(model, C):
        raise ContractError("cluster is not L-connected")
    c0 = max(C, key=lambda s: model.embed(s))
    y0 = max(model.neighbors(c0), key=lambda y: model.embed(y)[0])
    start = (c0, y0)
    state = start
    seq = [y0]
    while True:
        c, y = state
        y2 = model.next_ccw(c, y)
        if y2 not in C:
            state = (c, y2)
        else:
            prev, cur = c, y2
            nxt = model.next_ccw(cur, prev)
            while nxt in C:
                prev, cur = cur, nxt
                nxt = model.next_ccw(cur, prev)
            state = (cur, nxt)
        if state == start:
            break
        seq.append(state[1])
    return Path(tuple(loop_erase(seq)), Adjacency.STAR, closed=True)


def jordan_split(model: LatticeModel, loop: Path, sites: Iterable) -> tuple[list, list]:
    """Split ``sites`` not on ``loop`` into interior and exterior lists."""
    if not loop.is_self_avoiding():
        raise ContractError("loop is not self-avoiding")
    on = set(loop.sites)
    rest = [s for s in sites if s not in on]
    if not rest:
        return [], []
    inside = even_odd_inside([model.embed(s) for s in loop.sites],
                             [model.embed(s) for s in rest])
    interior = [s for s, k in zip(rest, inside) if k]
    exterior = [s for s, k in zip(rest, inside) if not k]
    return interior, exterior


@dataclass(frozen=True)
class Window:
    """Rectangle of lattice coordinates ``origin + [0, shape)``.

    Hexagonal windows hold both sublattices, so their arrays carry a
    trailing axis of length two.
    """
    kind: Kind
    shape: tuple
    origin: tuple = (0, 0)
    boundary: Boundary = Boundary.FREE

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "origin", tuple(int(n) for n in self.origin))
        if len(self.shape) != 2 or min(self.shape) < 1:
            raise ValueError("window shape must be two positive integers")

    @classmethod
    def centered(cls, kind, n0, n1=None, boundary=Boundary.FREE):
        n1 = n0 if n1 is None else n1
        return cls(kind, (n0, n1), (-(n0 // 2), -(n1 // 2)), boundary)

    @property
    def array_shape(self) -> tuple:
        if self.kind is Kind.HEXAGONAL:
            return (*self.shape, 2)
        return self.shape

    @property
    def size(self) -> int:
        return int(np.prod(self.array_shape))

    def sites(self) -> list:
        o0, o1 = self.origin
        n0, n1 = self.shape
        if self.kind is Kind.HEXAGONAL:
            return [(o0 + i, o1 + j, p) for i in range(n0) for j in range(n1) for p in (0, 1)]
        return [(o0 + i, o1 + j) for i in range(n0) for j in range(n1)]

    def contains(self, x) -> bool:
        return (0 <= x[0] - self.origin[0] < self.shape[0]
                and 0 <= x[1] - self.origin[1] < self.shape[1])

    def index(self, x) -> tuple:
        i, j = x[0] - self.origin[0], x[1] - self.origin[1]
        if self.kind is Kind.HEXAGONAL:
            return (i, j, x[2])
        return (i, j)

    def site(self, idx) -> tuple:
        if self.kind is Kind.HEXAGONAL:
            return (idx[0] + self.origin[0], idx[1] + self.origin[1], int(idx[2]))
        return (idx[0] + self.origin[0], idx[1] + self.origin[1])

    def center(self) -> tuple:
        c = (self.origin[0] + self.shape[0] // 2, self.origin[1] + self.shape[1] // 2)
        return (*c, 0) if self.kind is Kind.HEXAGONAL else c

    def grown(self, margin: int) -> "Window":
        return Window(self.kind, (self.shape[0] + 2 * margin, self.shape[1] + 2 * margin),
                      (self.origin[0] - margin, self.origin[1] - margin), self.boundary)

    def crop_slices(self, inner: "Window") -> tuple:
        a = inner.origin[0] - self.origin[0]
        b = inner.origin[1] - self.origin[1]
        return (slice(a, a + inner.shape[0]), slice(b, b + inner.shape[1]))

    def edge_mask(self) -> np.ndarray:
        """Sites with an L-neighbour outside the window."""
        model = LatticeModel(self.kind)
        mask = np.zeros(self.array_shape, dtype=bool)
        n0, n1 = self.shape
        for i in range(n0):
            for j in range(n1):
                if 1 < i < n0 - 2 and 1 < j < n1 - 2:
                    continue
                for p in ((0, 1) if self.kind is Kind.HEXAGONAL else (None,)):
                    idx = (i, j) if p is None else (i, j, p)
                    x = self.site(idx)
                    if any(not self.contains(y) for y in model.neighbors(x)):
                        mask[idx] = True
        return mask


# Flower of seven triangular sites and the index-7 sublattice it tiles.
_FLOWER = ((0, 0), (1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1))
_FLOWER_BASIS = np.array([[2, -1], [1, 3]])
_FLOWER_INV = np.linalg.inv(_FLOWER_BASIS)


def _flower_center(z):
    w = _FLOWER_INV @ np.asarray(z, dtype=float)
    b0, b1 = math.floor(w[0]), math.floor(w[1])
    for a in (b0 - 1, b0, b0 + 1, b0 + 2):
        for b in (b1 - 1, b1, b1 + 1, b1 + 2):
            c = _FLOWER_BASIS @ (a, b)
            if (z[0] - c[0], z[1] - c[1]) in _FLOWER:
                return (a, b)
    raise AssertionError("flower tiling failed")


@dataclass(frozen=True)
class CellPartition:
    """Hierarchical partition into translated copies of one cell.

    Square cells are ``base * 2**level`` blocks.  Triangular cells are the
    7**(level+1)-site islands built by grouping seven hexagonal tiles
    (one per triangular site) into a flower, seven flowers into the next
    level, and so on.  Hexagonal sites follow the triangular cell of the
    triangular cell ``(q, r)`` holding them.
    """
    model: LatticeModel
    level: int
    base: int = 4
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def side(self) -> int:
        return self.base * 2 ** self.level

    def cell_of(self, x):
        kind = self.model.kind
        if kind is Kind.SQUARE:
            return (x[0] // self.side, x[1] // self.side)
        z = (x[0], x[1])
        for _ in range(self.level + 1):
            z = _flower_center(z)
        return z

    def members(self, cell) -> list:
        got = self._cache.get(cell)
        if got is not None:
            return got
        kind = self.model.kind
        if kind is Kind.SQUARE:
            s = self.side
            out = [(cell[0] * s + i, cell[1] * s + j) for i in range(s) for j in range(s)]
        else:
            zs = [tuple(cell)]
            for _ in range(self.level + 1):
                nxt = []
                for z in zs:
                    c = _FLOWER_BASIS @ z
                    nxt.extend((int(c[0]) + d[0], int(c[1]) + d[1]) for d in _FLOWER)
                zs = nxt
            out = zs if kind is Kind.TRIANGULAR else [(q, r, p) for q, r in zs for p in (0, 1)]
        self._cache[cell] = out
        return out

    def assign(self, window: Window) -> dict:
        return {x: self.cell_of(x) for x in window.sites()}


def cell_partition(model: LatticeModel, level: int, base: int = 4) -> CellPartition:
    if level < 0:
        raise ValueError("level must be nonnegative")
    return CellPartition(model, level, base)


# Random instances and geometric checks -------------------------------------

def random_cluster(model: LatticeModel, rng: np.random.Generator, max_side: int = 24) -> set:
    """Open cluster of a random site in a small random percolation field."""
    while True:
        n0, n1 = (int(v) for v in rng.integers(3, max_side + 1, size=2))
        w = Window(model.kind, (n0, n1), (-(n0 // 2), -(n1 // 2)))
        p = rng.uniform(0.45, 0.75)
        bits = rng.random(w.array_shape) < p
        opens = np.argwhere(bits)
        if not len(opens):
            continue
        start = w.site(tuple(int(v) for v in opens[rng.integers(len(opens))]))
        seen = {start}
        queue = deque([start])
        while queue:
            y = queue.popleft()
            for z in model.neighbors(y):
                if z not in seen and w.contains(z) and bits[w.index(z)]:
                    seen.add(z)
                    queue.append(z)
        return seen


def random_self_repelling_loop(model: LatticeModel, rng: np.random.Generator, max_side: int = 24):
    """A self-repelling *-loop with nonempty L-interior, the cluster it came from,
    and a marked cluster site inside it."""
    cluster = random_cluster(model, rng, max_side)
    boundary = external_boundary(model, cluster)
    marked = sorted(cluster)[int(rng.integers(len(cluster)))]
    return self_repelling_reduction(model, boundary, marked), cluster, marked


def loop_window(model: LatticeModel, loop: Path, margin: int = 2) -> Window:
    q = [s[0] for s in loop.sites]
    r = [s[1] for s in loop.sites]
    return Window(model.kind, (max(q) - min(q) + 1 + 2 * margin, max(r) - min(r) + 1 + 2 * margin),
                  (min(q) - margin, min(r) - margin))


def check_boundary(model: LatticeModel, cluster: set, loop: Path) -> list:
    """Problems with ``loop`` as the external boundary of ``cluster``."""
    bad = []
    if not loop.is_self_avoiding():
        bad.append("not self-avoiding")
    if not Path(loop.sites, Adjacency.STAR, True).is_valid(model):
        bad.append("not a *-loop")
    if any(s in cluster for s in loop.sites):
        bad.append("meets the cluster")
    if any(not any(y in cluster for y in model.neighbors(s)) for s in loop.sites):
        bad.append("site not adjacent to the cluster")
    poly = [model.embed(s) for s in loop.sites]
    if not even_odd_inside(poly, [model.embed(c) for c in sorted(cluster)]).all():
        bad.append("cluster not inside")
    return bad


def check_neighbors(model: LatticeModel, loop: Path, interior, exterior) -> bool:
    """Every loop site has an L-neighbour on each side."""
    inn, out = set(interior), set(exterior)
    return all(any(y in inn for y in model.neighbors(s)) and any(y in out for y in model.neighbors(s))
               for s in loop.sites)


def check_partition(model: LatticeModel, interior, exterior) -> bool:
    """Interior and exterior are each a single L-connected piece."""
    return bool(interior) and _l_connected(model, set(interior)) and _l_connected(model, set(exterior))


def check_faces(model: LatticeModel, loop: Path, eps: float = 1e-3) -> bool:
    """The two faces at each loop edge (halves of one face for a chord) lie on opposite sides."""
    poly = [model.embed(s) for s in loop.sites]
    probes = []
    for a, b in loop.edges():
        if b in model.neighbors(a):
            e = dual_edge(model, a, b)
            probes += [model.face_center(e.left), model.face_center(e.right)]
        else:
            (ax, ay), (bx, by) = model.embed(a), model.embed(b)
            mx, my = (ax + bx) / 2, (ay + by) / 2
            nx, ny = -(by - ay), bx - ax
            k = eps / math.hypot(nx, ny)
            probes += [(mx + k * nx, my + k * ny), (mx - k * nx, my - k * ny)]
    side = even_odd_inside(poly, probes)
    return bool(np.all(side[0::2] != side[1::2]))
