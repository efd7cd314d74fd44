"""Cluster labelling, finite-window observables, rectangle crossings and Cardy's formula."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components
from scipy.special import gamma, hyp2f1

from .config import SiteField, sample_activation, sample_field
from .enhance import EnhancementRule, apply_clauses, gather, null_rule
from .lattice import Adjacency, Boundary, Kind, LatticeModel, Window, _offsets


@dataclass(frozen=True, eq=False)
class ClusterLabels:
    labels: np.ndarray
    sizes: np.ndarray
    touches_boundary: np.ndarray
    adjacency: Adjacency

    @property
    def count(self) -> int:
        return len(self.sizes) - 1


@lru_cache(maxsize=None)
def _structure(kind: Kind, adjacency: Adjacency):
    if kind is Kind.HEXAGONAL:
        return None
    offs = _offsets(kind, 0, adjacency is Adjacency.STAR)
    st = np.zeros((3, 3), dtype=bool)
    st[1, 1] = True
    for dq, dr in offs:
        st[1 + dq, 1 + dr] = True
    return st


@lru_cache(maxsize=64)
def _edge_mask(window: Window) -> np.ndarray:
    m = window.edge_mask()
    m.setflags(write=False)
    return m


def _graph_labels(bits, window: Window, adjacency: Adjacency):
    flat = np.arange(bits.size).reshape(bits.shape)
    rows, cols = [], []
    for off in _offsets(window.kind, 0, adjacency is Adjacency.STAR):
        nb = gather(flat, window, off, fill=-1)
        sel = bits & (nb >= 0)
        sel[sel] = bits.ravel()[nb[sel]]
        rows.append(flat[sel])
        cols.append(nb[sel])
    r, c = np.concatenate(rows), np.concatenate(cols)
    g = sparse.coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(bits.size, bits.size))
    _, comp = connected_components(g, directed=False)
    comp = comp.reshape(bits.shape)
    # relabel open components 1, 2, ... by first appearance in row-major order
    seen, first = np.unique(comp[bits], return_index=True)
    order = np.argsort(first)
    lut = np.zeros(comp.max() + 1, dtype=np.int64)
    lut[seen[order]] = np.arange(1, len(seen) + 1)
    return np.where(bits, lut[comp], 0), len(seen)


def label_bits(bits: np.ndarray, window: Window, adjacency=Adjacency.L):
    adjacency = Adjacency(adjacency)
    bits = np.asarray(bits, dtype=bool)
    st = _structure(window.kind, adjacency)
    if st is None or window.boundary is Boundary.TORUS:
        return _graph_labels(bits, window, adjacency)
    labels, n = ndimage.label(bits, structure=st)
    return labels, n


def label(field: SiteField, adjacency=Adjacency.L) -> ClusterLabels:
    """Connected components of the open sites; ids follow row-major first appearance."""
    adjacency = Adjacency(adjacency)
    labels, n = label_bits(field.bits, field.window, adjacency)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    touches = np.zeros(n + 1, dtype=bool)
    if field.window.boundary is not Boundary.TORUS:
        touches[np.unique(labels[_edge_mask(field.window)])] = True
    touches[0] = False
    return ClusterLabels(labels, sizes, touches, adjacency)


# Coupled sampling ----------------------------------------------------------

def rule_margin(rule: EnhancementRule | None) -> int:
    if rule is None or not rule.clauses:
        return 0
    return int(math.ceil(2 * rule.radius)) + 1


def coupled_bits(window: Window, p: float, s: float, rule, seed: int, replica: int):
    """Plain and enhanced configurations on ``window`` from one replica.

    The fields are sampled on a window grown by the rule's reach so every
    retained site sees its whole ball.
    """
    margin = rule_margin(rule)
    big = window.grown(margin) if margin else window
    eta = sample_field(big, p, seed, replica).bits
    if rule is None or s == 0 or not rule.clauses:
        enh = eta
    else:
        alpha = None if s >= 1 else sample_activation(big, s, seed, replica).bits
        enh = apply_clauses(eta, alpha, rule.clauses, big)
    if margin:
        sl = big.crop_slices(window)
        return (eta[sl], enh[sl]) if enh is not eta else (eta[sl],) * 2
    return eta, enh


@dataclass
class Observables:
    """Per-replica observables for the plain and enhanced arms."""
    p: float
    s: float
    rule: str
    L: int
    n: int
    seed: int
    theta: np.ndarray
    theta_enh: np.ndarray
    chi: np.ndarray
    chi_enh: np.ndarray
    tau: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    tau_enh: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    displacements: tuple = ()

    @staticmethod
    def _mean_se(a):
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        se = a.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(a.shape[1:])
        return a.mean(axis=0), se

    @property
    def theta_L(self):
        return self._mean_se(self.theta)

    @property
    def theta_L_enh(self):
        return self._mean_se(self.theta_enh)

    @property
    def chi_hat(self):
        return self._mean_se(self.chi)

    @property
    def chi_hat_enh(self):
        return self._mean_se(self.chi_enh)

    @property
    def tau_hat(self):
        return self._mean_se(self.tau)

    @property
    def tau_hat_enh(self):
        return self._mean_se(self.tau_enh)

    def coupling_violations(self) -> int:
        bad = int(np.sum(self.theta > self.theta_enh)) + int(np.sum(self.chi > self.chi_enh))
        if self.tau.size:
            bad += int(np.sum(self.tau > self.tau_enh))
        return bad


def _origin_stats(bits, window, adjacency, disp_idx):
    labels, n = label_bits(bits, window, adjacency)
    c = window.index(window.center())
    lab = labels[c]
    if lab == 0:
        return 0.0, 0.0, np.zeros(len(disp_idx)), 0.0
    comp = labels == lab
    size = float(comp.sum())
    touches = bool(comp[_edge_mask(window)].any())
    tau = np.array([comp[idx] for idx in disp_idx], dtype=float)
    return float(touches), size, tau, size


def simulate_observables(model: LatticeModel, p: float, s: float, rule: EnhancementRule | None,
                         L: int, n_samples: int, seed: int, displacements=(),
                         adjacency=None) -> Observables:
    """Coupled replicas on an L x L window centred on the origin.

    Records, per replica and per arm, whether the origin's cluster touches
    the window edge, its size, and its connection to each displacement.
    """
    if L < 8:
        raise ValueError("L must be at least 8")
    kind = model.kind
    rule = rule if rule is not None else null_rule(kind)
    adjacency = Adjacency(adjacency or rule.adjacency)
    window = Window.centered(kind, L)
    c = window.center()
    disp_idx = []
    for d in displacements:
        x = model.translate(c, d)
        if not window.contains(x):
            raise ValueError(f"displacement {d} leaves the window")
        disp_idx.append(window.index(x))
    k = len(disp_idx)
    th, th2, ch, ch2 = (np.zeros(n_samples) for _ in range(4))
    ta, ta2 = np.zeros((n_samples, k)), np.zeros((n_samples, k))
    for i in range(n_samples):
        eta, enh = coupled_bits(window, p, s, rule, seed, i)
        th[i], ch[i], ta[i], _ = _origin_stats(eta, window, adjacency, disp_idx)
        if enh is eta:
            th2[i], ch2[i], ta2[i] = th[i], ch[i], ta[i]
        else:
            th2[i], ch2[i], ta2[i], _ = _origin_stats(enh, window, adjacency, disp_idx)
    return Observables(p, s, rule.name, L, n_samples, seed, th, th2, ch, ch2, ta, ta2, tuple(displacements))


def estimate_theta(model, p, s, rule, L, n_samples, seed) -> Observables:
    return simulate_observables(model, p, s, rule, L, n_samples, seed)


def estimate_tau(model, p, s, rule, displacements, n_samples, seed, L=None) -> Observables:
    if L is None:
        reach = max((model.distance(model.origin(), d) for d in displacements), default=0.0)
        L = max(8, 2 * int(math.ceil(reach)) + 2 * rule_margin(rule) + 4)
    return simulate_observables(model, p, s, rule, L, n_samples, seed, displacements)


def estimate_chi(model, p, s, rule, L, n_samples, seed) -> Observables:
    return simulate_observables(model, p, s, rule, L, n_samples, seed)


def axis_displacements(model: LatticeModel, L: int, lo: float = 0.2, hi: float = 0.4) -> list:
    """Displacements along the first lattice axis with lo*L <= |x| <= hi*L."""
    start = max(1, int(math.ceil(lo * L)))
    stop = int(math.floor(hi * L))
    if model.kind is Kind.HEXAGONAL:
        return [(k, 0, 0) for k in range(start, stop + 1)]
    return [(k, 0) for k in range(start, stop + 1)]


@dataclass(frozen=True)
class XiFit:
    xi: float
    se: float
    slope: float
    slope_se: float
    intercept: float
    n_points: int


def fit_xi(distances, tau, tau_se=None, window: tuple | None = None) -> XiFit:
    """Correlation length from the slope of -log tau against distance.

    ``window`` optionally restricts the fit to ``lo <= |x| <= hi``.  With
    standard errors supplied the fit is weighted by the delta-method error
    of ``log tau``.
    """
    d = np.asarray(distances, dtype=float)
    t = np.asarray(tau, dtype=float)
    keep = t > 0
    if window is not None:
        keep &= (d >= window[0]) & (d <= window[1])
    if keep.sum() < 4:
        raise ValueError("undefined fit: fewer than four positive tau values")
    y = -np.log(t[keep])
    x = d[keep]
    if tau_se is not None:
        se = np.asarray(tau_se, dtype=float)[keep] / t[keep]
        se = np.where(se > 0, se, np.min(se[se > 0]) if np.any(se > 0) else 1.0)
        coef, cov = np.polyfit(x, y, 1, w=1 / se, cov="unscaled")
    else:
        coef, cov = np.polyfit(x, y, 1, cov=True) if keep.sum() > 4 else (np.polyfit(x, y, 1), np.zeros((2, 2)))
    slope, intercept = coef
    slope_se = float(math.sqrt(max(cov[0, 0], 0.0)))
    if slope <= 0:
        raise ValueError("undefined fit: tau does not decay")
    xi = 1.0 / slope
    return XiFit(float(xi), float(slope_se / slope ** 2), float(slope), slope_se, float(intercept), int(keep.sum()))


# Rectangle crossings -----------------------------------------------------

@dataclass(frozen=True)
class CrossingSpec:
    """Rectangle ``(-b/2, b/2) x (-h/2, h/2)`` crossed vertically on the lattice scaled by ``mesh``."""
    b: float
    h: float
    mesh: float

    @property
    def rho(self) -> float:
        return self.b / self.h

    @classmethod
    def from_rho(cls, rho: float, mesh: float, h: float = 1.0):
        return cls(rho * h, h, mesh)


@dataclass(frozen=True, eq=False)
class CrossingGeometry:
    window: Window
    inside: np.ndarray
    top: tuple
    bottom: tuple
    offsets: tuple


def _positions(window: Window, mesh: float):
    idx = np.indices(window.array_shape)
    q = idx[0] + window.origin[0]
    r = idx[1] + window.origin[1]
    if window.kind is Kind.SQUARE:
        return mesh * q.astype(float), mesh * r.astype(float)
    if window.kind is Kind.TRIANGULAR:
        return mesh * (q + 0.5 * r), mesh * (0.5 * math.sqrt(3) * r)
    s = (1 + idx[2]) / 3.0
    qq, rr = q + s, r + s
    return mesh * (qq + 0.5 * rr), mesh * (0.5 * math.sqrt(3) * rr)


@lru_cache(maxsize=32)
def crossing_geometry(kind: Kind, spec: CrossingSpec, pad: int = 3) -> CrossingGeometry:
    """Window covering the rectangle plus ``pad`` lattice rings, and the end-segment masks."""
    kind = Kind(kind)
    d = spec.mesh
    hb, hh = spec.b / 2, spec.h / 2
    ext = pad + 1
    rmax = int(math.ceil((hh / d + ext) / (0.5 * math.sqrt(3) if kind is not Kind.SQUARE else 1.0))) + 1
    qmax = int(math.ceil(hb / d + ext + (0.5 * rmax if kind is not Kind.SQUARE else 0))) + 1
    probe = Window(kind, (2 * qmax + 1, 2 * rmax + 1), (-qmax, -rmax))
    x, y = _positions(probe, d)
    need = (np.abs(x) <= hb + pad * d) & (np.abs(y) <= hh + pad * d)
    if kind is Kind.HEXAGONAL:
        need2 = need.any(axis=2)
    else:
        need2 = need
    qi = np.flatnonzero(need2.any(axis=1))
    ri = np.flatnonzero(need2.any(axis=0))
    window = Window(kind, (qi[-1] - qi[0] + 1, ri[-1] - ri[0] + 1),
                    (probe.origin[0] + qi[0], probe.origin[1] + ri[0]), Boundary.FREE)
    x, y = _positions(window, d)
    tol = 1e-9 * d
    inside = (np.abs(x) < hb - tol) & (np.abs(y) < hh - tol)
    tops, bottoms, offs = [], [], []
    # parity-0 offsets cover every bond: gather reflects them at parity-1 sites
    for off in _offsets(kind, 0, False):
        x0 = gather(x, window, off, fill=np.nan)
        y0 = gather(y, window, off, fill=np.nan)
        with np.errstate(invalid="ignore", divide="ignore"):
            xt = x + (hh - y) / (y0 - y) * (x0 - x)
            xb = x + (-hh - y) / (y0 - y) * (x0 - x)
            top = inside & (y0 >= hh - tol) & (np.abs(xt) <= hb + tol)
            bot = inside & (y0 <= -hh + tol) & (np.abs(xb) <= hb + tol)
        if top.any() or bot.any():
            offs.append(off)
            tops.append(top)
            bottoms.append(bot)
    return CrossingGeometry(window, inside, tuple(tops), tuple(bottoms), tuple(offs))


def crossing_bits(bits: np.ndarray, geom: CrossingGeometry, adjacency=Adjacency.L) -> bool:
    s = bits & geom.inside
    top = np.zeros_like(s)
    bot = np.zeros_like(s)
    for off, tm, bm in zip(geom.offsets, geom.top, geom.bottom):
        nb = gather(bits, geom.window, off, fill=False)
        top |= tm & nb
        bot |= bm & nb
    top &= s
    bot &= s
    if not top.any() or not bot.any():
        return False
    labels, _ = label_bits(s, geom.window, adjacency)
    return bool(np.intersect1d(labels[top], labels[bot]).size)


def vertical_crossing(field: SiteField, spec: CrossingSpec, adjacency=Adjacency.L) -> bool:
    """Open vertical crossing of the rectangle by an L-path (x0, ..., x_{m+1}).

    Sites x1..xm lie strictly inside the rectangle and the first and last
    steps cross, or end on, the top and bottom sides.
    """
    geom = crossing_geometry(field.kind, spec)
    w = geom.window
    fw = field.window
    if not (fw.contains(w.origin) and fw.contains((w.origin[0] + w.shape[0] - 1, w.origin[1] + w.shape[1] - 1))):
        raise ValueError("rectangle exceeds the field's window")
    a = w.origin[0] - fw.origin[0]
    b = w.origin[1] - fw.origin[1]
    bits = field.bits[a:a + w.shape[0], b:b + w.shape[1]]
    return crossing_bits(bits, geom, adjacency)


@dataclass
class CrossingEstimate:
    rho: float
    mesh: float
    n: int
    plain: np.ndarray
    enhanced: np.ndarray

    @property
    def phi(self):
        return float(self.plain.mean())

    @property
    def phi_enh(self):
        return float(self.enhanced.mean())

    @property
    def se(self):
        return float(self.plain.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else 0.0

    @property
    def se_enh(self):
        return float(self.enhanced.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else 0.0

    @property
    def diff(self):
        return float((self.enhanced.astype(float) - self.plain).mean())

    @property
    def se_diff(self):
        d = self.enhanced.astype(float) - self.plain
        return float(d.std(ddof=1) / math.sqrt(self.n)) if self.n > 1 else 0.0

    def coupling_violations(self) -> int:
        return int(np.sum(self.plain & ~self.enhanced))


def crossing_probability(model: LatticeModel, p: float, s: float, rule, spec: CrossingSpec,
                         n_samples: int, seed: int, start: int = 0) -> CrossingEstimate:
    """Paired plain/enhanced vertical-crossing frequencies from coupled replicas."""
    kind = model.kind
    rule = rule if rule is not None else null_rule(kind)
    margin = rule_margin(rule)
    geom = crossing_geometry(kind, spec, pad=max(3, margin + 2))
    plain = np.zeros(n_samples, dtype=bool)
    enh = np.zeros(n_samples, dtype=bool)
    for i in range(n_samples):
        eta, hat = coupled_bits(geom.window, p, s, rule, seed, start + i)
        plain[i] = crossing_bits(eta, geom, rule.adjacency)
        enh[i] = plain[i] if hat is eta else crossing_bits(hat, geom, rule.adjacency)
    return CrossingEstimate(spec.rho, spec.mesh, n_samples, plain, enh)


# Cardy's formula ---------------------------------------------------------

_CARDY_C = 3 * gamma(2 / 3) / gamma(1 / 3) ** 2


def _modular_lambda(r: float) -> float:
    """Squared elliptic modulus whose period ratio K'/K equals ``r``."""
    if r < 1:
        return 1.0 - _modular_lambda(1.0 / r)
    q = math.exp(-math.pi * r)
    t2 = 2 * sum(q ** ((n + 0.5) ** 2) for n in range(12))
    t3 = 1 + 2 * sum(q ** (n * n) for n in range(1, 12))
    return (t2 / t3) ** 4


# Gauss connection coefficients taking 2F1(1/3, 2/3; 4/3; z) to series in 1 - z
_CONN_A = gamma(4 / 3) * gamma(1 / 3) / (gamma(1.0) * gamma(2 / 3))
_CONN_B = gamma(4 / 3) * gamma(-1 / 3) / (gamma(1 / 3) * gamma(2 / 3))


def _cardy_hyp(z: float, w: float) -> float:
    """``2F1(1/3, 2/3; 4/3; z)`` given both ``z`` and ``w = 1 - z``."""
    if z <= 0.5:
        return hyp2f1(1 / 3, 2 / 3, 4 / 3, z)
    return _CONN_A * hyp2f1(1 / 3, 2 / 3, 2 / 3, w) + _CONN_B * w ** (1 / 3) * hyp2f1(1.0, 2 / 3, 4 / 3, w)


def cardy_F(rho: float) -> float:
    """Scaling limit of the vertical crossing probability of a b x h rectangle, rho = b/h.

    Cardy's formula ``C * eta**(1/3) * 2F1(1/3, 2/3; 4/3; eta)`` where
    ``eta`` is the cross-ratio of the four corners' preimages in the upper
    half-plane.  For a rectangle the cross-ratio is the elliptic lambda
    function of the period ratio (distance between the sides to join over
    their length, here ``1/rho``), evaluated by theta-function series.
    Near ``eta = 1`` the complement comes from the dual period ratio so no
    precision is lost to cancellation.
    """
    if not rho > 0:
        raise ValueError("rho must be positive")
    if rho > 1:
        w = _modular_lambda(rho)
        eta = 1.0 - w
    else:
        eta = _modular_lambda(1.0 / rho)
        w = 1.0 - eta
    return float(_CARDY_C * eta ** (1 / 3) * _cardy_hyp(eta, w))
