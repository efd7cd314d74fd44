"""Site configurations and activation fields on finite windows.

Randomness is drawn from Philox, a counter-based generator.  Each
(master seed, stream tag, replica) triple gets its own key, and a field's
value at a site is the k-th draw of that stream, k being the site's
row-major index in the window.  ``UniformField.value_at`` recomputes a
single value from the key alone by advancing the counter.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np

from .lattice import Boundary, Kind, Window

STREAM_TAGS = {"eta": 1, "alpha": 2, "aux": 3}


def stream_key(seed: int, tag: str, replica: int = 0) -> np.ndarray:
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAM_TAGS[tag], int(replica)))
    return ss.generate_state(2, np.uint64)


def generator(seed: int, tag: str, replica: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag, replica)))


@dataclass(frozen=True, eq=False)
class UniformField:
    window: Window
    values: np.ndarray
    seed: int
    replica: int = 0
    tag: str = "eta"

    def value_at(self, x) -> float:
        """Recompute the value at ``x`` straight from the counter."""
        k = int(np.ravel_multi_index(self.window.index(x), self.window.array_shape))
        bg = np.random.Philox(key=stream_key(self.seed, self.tag, self.replica))
        bg.advance(k // 4)
        return float(np.random.Generator(bg).random(k % 4 + 1)[-1])


@dataclass(frozen=True, eq=False)
class SiteField:
    window: Window
    bits: np.ndarray
    density: float
    seed: int
    replica: int = 0

    @property
    def kind(self) -> Kind:
        return self.window.kind

    def is_open(self, x) -> bool:
        """State of ``x``, falling back to the window's boundary policy."""
        w = self.window
        if w.contains(x):
            return bool(self.bits[w.index(x)])
        if w.boundary is Boundary.TORUS:
            y = list(x)
            y[0] = w.origin[0] + (x[0] - w.origin[0]) % w.shape[0]
            y[1] = w.origin[1] + (x[1] - w.origin[1]) % w.shape[1]
            return bool(self.bits[w.index(tuple(y))])
        return w.boundary is Boundary.OPEN

    def open_sites(self) -> set:
        return {self.window.site(tuple(int(c) for c in idx)) for idx in np.argwhere(self.bits)}

    def with_bits(self, bits) -> "SiteField":
        return SiteField(self.window, np.asarray(bits, dtype=bool), self.density, self.seed, self.replica)


@dataclass(frozen=True, eq=False)
class ActivationField:
    window: Window
    bits: np.ndarray
    density: float
    seed: int
    replica: int = 0


def sample_uniform(window: Window, seed: int, replica: int = 0, tag: str = "eta") -> UniformField:
    values = generator(seed, tag, replica).random(window.size).reshape(window.array_shape)
    return UniformField(window, values, int(seed), int(replica), tag)


def threshold(u: UniformField, p: float) -> SiteField:
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return SiteField(u.window, u.values < p, float(p), u.seed, u.replica)


def sample_field(window: Window, p: float, seed: int, replica: int = 0) -> SiteField:
    return threshold(sample_uniform(window, seed, replica, "eta"), p)


def sample_activation(window: Window, s: float, seed: int, replica: int = 0) -> ActivationField:
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    u = sample_uniform(window, seed, replica, "alpha")
    return ActivationField(window, u.values < s, float(s), int(seed), int(replica))


def coupled_sample(window: Window, p: float, s: float, seed: int, replica: int):
    """One replica of the product space: a site field and an independent activation field."""
    return sample_field(window, p, seed, replica), sample_activation(window, s, seed, replica)


# Dump format: "key=value" header lines, a line "bits", then one line of
# 0/1 characters per first-axis index (hexagonal rows interleave parities).

def dump_field(field, target) -> None:
    w = field.window
    kind = "activation" if isinstance(field, ActivationField) else "site"
    lines = [
        "# enhperc field v1",
        f"field={kind}",
        f"kind={w.kind.value}",
        f"shape={w.shape[0]},{w.shape[1]}",
        f"origin={w.origin[0]},{w.origin[1]}",
        f"boundary={w.boundary.value}",
        f"density={field.density!r}",
        f"seed={field.seed}",
        f"replica={field.replica}",
        "bits",
    ]
    flat = field.bits.reshape(w.shape[0], -1).astype(np.uint8)
    lines.extend("".join(map(str, row)) for row in flat)
    text = "\n".join(lines) + "\n"
    if isinstance(target, io.TextIOBase):
        target.write(text)
    else:
        FsPath(target).write_text(text)


def load_field(source):
    text = source.read() if isinstance(source, io.TextIOBase) else FsPath(source).read_text()
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    split = lines.index("bits")
    meta = dict(ln.split("=", 1) for ln in lines[:split])
    shape = tuple(int(v) for v in meta["shape"].split(","))
    origin = tuple(int(v) for v in meta["origin"].split(","))
    window = Window(Kind(meta["kind"]), shape, origin, Boundary(meta["boundary"]))
    rows = lines[split + 1:split + 1 + shape[0]]
    bits = np.array([[c == "1" for c in row] for row in rows], dtype=bool).reshape(window.array_shape)
    cls = ActivationField if meta["field"] == "activation" else SiteField
    return cls(window, bits, float(meta["density"]), int(meta["seed"]), int(meta["replica"]))
