"""Voter model on a finite torus through its graphical representation.

A :class:`GraphicalRecord` is the time-sorted list of resampling events
``(x, y, s)``: at time ``s`` site ``x`` adopts the value of ``y``.  The same
record drives forward evolution and the backward (dual) walks, so the identity
``xi_t(x) = xi_0(X^{x,t}(t))`` holds exactly, realization by realization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .graphical import LazyEnvironment
from .kernels import Kernel, sample_steps
from .parallel import run_chunked
from .rng import stream

__all__ = [
    "Torus",
    "Configuration",
    "GraphicalRecord",
    "DualWalk",
    "EventBudgetError",
    "sample_initial",
    "build_record",
    "evolve",
    "query_dual",
    "dual_walk",
    "two_point_estimate",
    "marginal_estimate",
    "coalescence_probability",
    "record_from_environment",
    "torus_side_for",
]

RECORD_MAGIC = b"PVGR"
CONFIG_MAGIC = b"PVCF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIdQ")
_CFG_HEADER = struct.Struct("<4sHHIQ")
_EVENT = np.dtype([("site", "<u4"), ("source", "<u4"), ("time", "<f8")])


class EventBudgetError(RuntimeError):
    """A simulation would exceed its configured event cap."""


class FormatError(ValueError):
    """Malformed binary dump."""


@dataclass(frozen=True)
class Torus:
    """``(Z / L Z)^d``; sites are indexed row-major, last axis fastest."""

    dimension: int
    side: int

    def __post_init__(self):
        if self.dimension < 1 or self.side < 2:
            raise ValueError("torus needs dimension >= 1 and side >= 2")

    @property
    def n_sites(self) -> int:
        return self.side ** self.dimension

    def index(self, coords: Sequence[int]) -> int:
        i = 0
        for c in coords:
            i = i * self.side + int(c) % self.side
        return i

    def coords(self, index: int) -> tuple:
        out = []
        for _ in range(self.dimension):
            index, r = divmod(index, self.side)
            out.append(r)
        return tuple(reversed(out))

    def all_coords(self) -> np.ndarray:
        grids = np.indices((self.side,) * self.dimension).reshape(self.dimension, -1)
        return grids.T.astype(np.int64)

    def shift(self, index: np.ndarray, disp: np.ndarray) -> np.ndarray:
        """Vectorized ``index + disp`` with wrap-around."""
        index = np.asarray(index, dtype=np.int64)
        disp = np.asarray(disp, dtype=np.int64).reshape(-1, self.dimension)
        out = np.zeros(np.broadcast(index, disp[:, 0]).shape, dtype=np.int64)
        rem = index.copy()
        scale = 1
        for axis in range(self.dimension - 1, -1, -1):
            c = rem % self.side
            rem = rem // self.side
            out += ((c + disp[:, axis]) % self.side) * scale
            scale *= self.side
        return out


def torus_side_for(rate: float, horizon: float) -> int:
    """Smallest even side with ``6 * sqrt(rate * horizon) < side / 2``."""
    L = int(math.floor(12.0 * math.sqrt(rate * horizon))) + 1
    return L + (L % 2)


@dataclass(frozen=True, eq=False)
class Configuration:
    torus: Torus
    bits: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if b.shape != (self.torus.n_sites,) or np.any(b > 1):
            raise ValueError("configuration needs one 0/1 value per site")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    def __eq__(self, other):
        return (isinstance(other, Configuration) and self.torus == other.torus
                and np.array_equal(self.bits, other.bits))

    @property
    def density(self) -> float:
        return float(self.bits.sum()) / self.torus.n_sites

    def to_bytes(self) -> bytes:
        head = _CFG_HEADER.pack(CONFIG_MAGIC, FORMAT_VERSION, self.torus.dimension,
                                self.torus.side, self.torus.n_sites)
        return head + np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Configuration":
        magic, ver, d, L, n = _CFG_HEADER.unpack_from(data)
        if magic != CONFIG_MAGIC or ver != FORMAT_VERSION:
            raise FormatError("not a configuration dump")
        torus = Torus(d, L)
        if n != torus.n_sites:
            raise FormatError("site count does not match header")
        packed = np.frombuffer(data, dtype=np.uint8, offset=_CFG_HEADER.size)
        return cls(torus, np.unpackbits(packed, count=n))


@dataclass(frozen=True, eq=False)
class GraphicalRecord:
    """Resampling events on ``[0, horizon]`` as parallel arrays."""

    torus: Torus
    horizon: float
    sites: np.ndarray
    sources: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        sites = np.ascontiguousarray(self.sites, dtype=np.int64)
        sources = np.ascontiguousarray(self.sources, dtype=np.int64)
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        if not (sites.shape == sources.shape == times.shape and sites.ndim == 1):
            raise ValueError("event arrays must be 1-d and of equal length")
        if len(times) and (np.any(np.diff(times) <= 0) or times[0] <= 0
                           or times[-1] > self.horizon):
            raise ValueError("event times must be strictly increasing in (0, horizon]")
        for a in (sites, sources, times):
            a.setflags(write=False)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        return (isinstance(other, GraphicalRecord) and self.torus == other.torus
                and self.horizon == other.horizon
                and np.array_equal(self.sites, other.sites)
                and np.array_equal(self.sources, other.sources)
                and np.array_equal(self.times, other.times))

    @property
    def events(self):
        return list(zip(self.sites.tolist(), self.sources.tolist(), self.times.tolist()))

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(RECORD_MAGIC, FORMAT_VERSION, self.torus.dimension,
                            self.torus.side, self.horizon, len(self))
        ev = np.empty(len(self), dtype=_EVENT)
        ev["site"] = self.sites
        ev["source"] = self.sources
        ev["time"] = self.times
        return head + ev.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GraphicalRecord":
        magic, ver, d, L, horizon, n = _HEADER.unpack_from(data)
        if magic != RECORD_MAGIC or ver != FORMAT_VERSION:
            raise FormatError("not a graphical-record dump")
        if len(data) != _HEADER.size + n * _EVENT.itemsize:
            raise FormatError("truncated graphical-record dump")
        ev = np.frombuffer(data, dtype=_EVENT, offset=_HEADER.size, count=n)
        return cls(Torus(d, L), horizon, ev["site"].astype(np.int64),
                   ev["source"].astype(np.int64), ev["time"].copy())


@dataclass(frozen=True)
class DualWalk:
    """Backward walk from ``(start, t)``.

    ``jump_times`` are decreasing record times; ``positions[k]`` is the site
    occupied after the ``k``-th backward jump (``positions[0] == start``).
    """

    start: int
    t: float
    jump_times: tuple
    positions: tuple

    @property
    def endpoint(self) -> int:
        return self.positions[-1]

    def position(self, s: float) -> int:
        """Site ``X^{x,t}(t - s)``, i.e. after running backward to time ``s``."""
        k = 0
        for tj in self.jump_times:
            if tj < s:
                break
            k += 1
        return self.positions[k]


def sample_initial(torus: Torus, rho: float, rng: np.random.Generator) -> Configuration:
    """I.i.d. Bernoulli(``rho``) configuration."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    bits = (rng.random(torus.n_sites) < rho).astype(np.uint8)
    return Configuration(torus, bits)


def build_record(torus: Torus, kernel: Kernel, horizon: float, rng: np.random.Generator,
                 max_events: int = 20_000_000) -> GraphicalRecord:
    """Sample the resampling events of every site on ``(0, horizon]``."""
    if kernel.dimension != torus.dimension:
        raise ValueError("kernel and torus dimensions differ")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    mean = kernel.jump_rate * horizon * torus.n_sites
    n = int(rng.poisson(mean)) if mean > 0 else 0
    if n > max_events:
        raise EventBudgetError(f"{n} events exceed the cap of {max_events}")
    while True:
        times = np.sort(horizon * (1.0 - rng.random(n)))
        if n < 2 or np.all(np.diff(times) > 0):
            break
    sites = rng.integers(0, torus.n_sites, n)
    sources = torus.shift(sites, sample_steps(kernel, rng, n)) if n else sites.copy()
    return GraphicalRecord(torus, float(horizon), sites, sources, times)


@njit(cache=True)
def _apply(bits, sites, sources, stop):
    for i in range(stop):
        bits[sites[i]] = bits[sources[i]]


@njit(cache=True)
def _dual_scan(pos, sites, sources, times, top, out_t, out_p):
    n = 0
    for i in range(top - 1, -1, -1):
        if sites[i] == pos:
            pos = sources[i]
            if out_t.shape[0]:
                out_t[n] = times[i]
                out_p[n] = pos
            n += 1
    return pos, n


def _check_time(record: GraphicalRecord, t: float):
    if t < 0 or t > record.horizon:
        raise ValueError(f"time {t} outside [0, {record.horizon}]")


def evolve(initial: Configuration, record: GraphicalRecord, t: float) -> Configuration:
    """Configuration at time ``t`` (events at times ``<= t`` applied)."""
    _check_time(record, t)
    if initial.torus != record.torus:
        raise ValueError("configuration and record live on different tori")
    bits = initial.bits.copy()
    stop = int(np.searchsorted(record.times, t, side="right"))
    _apply(bits, record.sites, record.sources, stop)
    return Configuration(initial.torus, bits)


def query_dual(x: int, t: float, record: GraphicalRecord, initial: Configuration) -> int:
    """``xi_t(x)`` read off the backward walk through ``record``."""
    _check_time(record, t)
    top = int(np.searchsorted(record.times, t, side="right"))
    empty_t = np.empty(0)
    empty_p = np.empty(0, dtype=np.int64)
    end, _ = _dual_scan(int(x), record.sites, record.sources, record.times, top,
                        empty_t, empty_p)
    return int(initial.bits[end])


def dual_walk(x: int, t: float, record: GraphicalRecord) -> DualWalk:
    _check_time(record, t)
    top = int(np.searchsorted(record.times, t, side="right"))
    out_t = np.empty(top)
    out_p = np.empty(top, dtype=np.int64)
    _, n = _dual_scan(int(x), record.sites, record.sources, record.times, top, out_t, out_p)
    return DualWalk(int(x), float(t), tuple(out_t[:n].tolist()),
                    (int(x),) + tuple(out_p[:n].tolist()))


def record_from_environment(env: LazyEnvironment, horizon: float) -> GraphicalRecord:
    """Materialize a lazily generated torus environment as an explicit record."""
    if env.side < 2:
        raise ValueError("only torus environments can be materialized")
    torus = Torus(env.kernel.dimension, env.side)
    rows = []
    for idx, c in enumerate(torus.all_coords()):
        for s, disp in env.arrows(c, 0.0, np.nextafter(horizon, np.inf)):
            rows.append((s, idx, torus.index(np.add(c, disp))))
    rows.sort()
    times = np.array([r[0] for r in rows], dtype=float)
    sites = np.array([r[1] for r in rows], dtype=np.int64)
    sources = np.array([r[2] for r in rows], dtype=np.int64)
    return GraphicalRecord(torus, float(horizon), sites, sources, times)


def environment_initial(env: LazyEnvironment) -> Configuration:
    torus = Torus(env.kernel.dimension, env.side)
    bits = np.array([env.initial(c) for c in torus.all_coords()], dtype=np.uint8)
    return Configuration(torus, bits)


# --- Monte Carlo over records --------------------------------------------------


def _as_seed(rng_or_seed) -> int:
    if isinstance(rng_or_seed, np.random.Generator):
        return int(rng_or_seed.integers(0, 2**63))
    return int(rng_or_seed)


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan


def two_point_estimate(x: int, y: int, t: float, rho: float, kernel: Kernel, torus: Torus,
                       replicas: int, rng_stream, workers: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate of ``P(xi_t(x) = xi_t(y) = 1)`` with its standard error.

    Replica ``r`` uses the stream ``(seed, r)`` where ``seed`` is drawn from
    ``rng_stream`` (or is ``rng_stream`` itself when an int is passed).
    """
    if replicas < 2:
        raise ValueError("need at least two replicas")
    seed = _as_seed(rng_stream)
    out = np.empty(replicas)

    def work(a, b):
        for r in range(a, b):
            g = stream(seed, r)
            init = sample_initial(torus, rho, g)
            rec = build_record(torus, kernel, t, g)
            out[r] = query_dual(x, t, rec, init) * query_dual(y, t, rec, init)

    run_chunked(work, replicas, workers)
    return _mean_se(out)


def marginal_estimate(x: int, t: float, rho: float, kernel: Kernel, torus: Torus,
                      replicas: int, rng_stream, workers: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate of ``P(xi_t(x) = 1)`` with its standard error."""
    seed = _as_seed(rng_stream)
    out = np.empty(replicas)

    def work(a, b):
        for r in range(a, b):
            g = stream(seed, r)
            init = sample_initial(torus, rho, g)
            rec = build_record(torus, kernel, t, g)
            out[r] = query_dual(x, t, rec, init)

    run_chunked(work, replicas, workers)
    return _mean_se(out)


def coalescence_probability(x: int, y: int, t: float, kernel: Kernel, torus: Torus,
                            replicas: int, rng_stream) -> tuple[float, float]:
    """Probability that two independent walks from ``x`` and ``y`` meet by time ``t``.

    Standalone two-walker simulation on the torus, independent of any record.
    """
    seed = _as_seed(rng_stream)
    hits = np.zeros(replicas)
    disp, cum = kernel.table()
    for r in range(replicas):
        g = stream(seed, r)
        a, b = torus.index(torus.coords(x)), torus.index(torus.coords(y))
        s = 0.0
        while a != b:
            s += g.exponential(1.0 / (2.0 * kernel.jump_rate))
            if s > t:
                break
            step = disp[int(np.searchsorted(cum, g.random(), side="right"))]
            if g.random() < 0.5:
                a = int(torus.shift(a, step)[0])
            else:
                b = int(torus.shift(b, step)[0])
        hits[r] = a == b
    return _mean_se(hits)
