"""Coalescing random walks born at the origin, labels, chi(t) and survivor densities.

Walkers are born at the origin at the points of a Poisson process on a window
``[-s, 0)`` and move as independent continuous-time walks with the given
kernel.  Two walkers on the same site at the same time coalesce and move
together from then on.  Since positions only change at jump times, meetings
are detected exactly after every jump or birth.

Labels follow the rules of the label-death scheme: each walker starts with its
own label, co-located walkers share one label, and at a first meeting one of
the two labels survives with probability 1/2, drawn from a dedicated stream.
The number of live labels at any time equals the number of clusters.

``chi(t)`` is computed in the graphical frame: walks are started at an
independent Poisson set of times on ``{0} x [0, t]`` and run backward through
one lazily generated arrow field, so the count of distinct walks is
nondecreasing in ``t`` along a single realization.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import asdict, dataclass
from typing import Protocol, Sequence

import numpy as np
from numba import njit, types
from numba.typed import Dict
from scipy import integrate

from .graphical import MAX_PER_BIN, latest_before, search_cum, site_hash
from .kernels import Kernel, return_probability, symmetrize
from .parallel import run_chunked
from .rng import combine, key_from_generator, next_exponential, next_uniform, root_key, stream

__all__ = [
    "CoalescingSystem",
    "LabelHistory",
    "DensityEstimate",
    "ChiEstimate",
    "EventBudgetError",
    "KernelLaw",
    "DivergentDriftLaw",
    "build_coalescing",
    "simulate_reference",
    "run_labels",
    "survival_density",
    "chi_path",
    "chi_estimate",
    "chi_curve",
    "pair_meeting_check",
    "interval_hit_bounds_check",
    "tail_integral",
]

DEFAULT_MAX_EVENTS = 50_000_000

_OK = 0
_BUDGET = -1
_RANGE = -2
_LOG_FULL = -3


class EventBudgetError(RuntimeError):
    """A coalescing simulation would exceed its event cap."""


# --- forward engine -------------------------------------------------------------------


@njit(cache=True, inline="always")
def _encode(pos, bits, off):
    code = 0
    for i in range(pos.shape[0]):
        c = pos[i] + off
        if c < 0 or c >= 2 * off:
            return -1
        code = (code << bits) | c
    return code


@njit(cache=True, nogil=True)
def _coalesce(births, t_end, key, disp, cum, rate, max_events, m_time, m_from, m_into,
              j_time, j_cl, j_pos, pos, active):
    """Event-driven coalescing walks.

    Returns ``(status, n_merges, n_jumps, n_clusters, n_events)``.  Cluster ``c``
    is named after its founding walker; ``active[:n_clusters]`` are the clusters
    alive at ``t_end`` and ``pos[c]`` their positions.
    """
    n = births.shape[0]
    d = disp.shape[1]
    bits = 62 // d
    off = np.int64(1) << (bits - 1)
    occ = Dict.empty(key_type=types.int64, value_type=types.int64)
    state = np.empty(1, dtype=np.uint64)
    state[0] = key
    origin = np.zeros(d, dtype=np.int64)
    code0 = _encode(origin, bits, off)
    log_jumps = j_time.shape[0] > 0
    m = 0
    nb = 0
    nm = 0
    nj = 0
    events = 0
    t = 0.0
    while True:
        tb = births[nb] if nb < n else np.inf
        tj = t + next_exponential(state, rate * m) if m > 0 else np.inf
        if tb <= tj:
            if tb > t_end:
                break
            t = tb
            i = nb
            nb += 1
            for q in range(d):
                pos[i, q] = 0
            if code0 in occ:
                m_time[nm] = t
                m_from[nm] = i
                m_into[nm] = occ[code0]
                nm += 1
            else:
                occ[code0] = i
                active[m] = i
                m += 1
            continue
        if tj > t_end:
            break
        t = tj
        events += 1
        if events > max_events:
            return _BUDGET, nm, nj, m, events
        k = min(int(next_uniform(state) * m), m - 1)
        c = active[k]
        old = _encode(pos[c], bits, off)
        step = search_cum(cum, next_uniform(state))
        for q in range(d):
            pos[c, q] += disp[step, q]
        new = _encode(pos[c], bits, off)
        if new < 0:
            return _RANGE, nm, nj, m, events
        del occ[old]
        if log_jumps:
            if nj >= j_time.shape[0]:
                return _LOG_FULL, nm, nj, m, events
            j_time[nj] = t
            j_cl[nj] = c
            for q in range(d):
                j_pos[nj, q] = pos[c, q]
            nj += 1
        if new in occ:
            m_time[nm] = t
            m_from[nm] = c
            m_into[nm] = occ[new]
            nm += 1
            last = active[m - 1]
            active[k] = last
            m -= 1
        else:
            occ[new] = c
    return _OK, nm, nj, m, events


_MERGE = np.dtype([("time", "f8"), ("absorbed", "i8"), ("into", "i8")])


@dataclass(frozen=True, eq=False)
class CoalescingSystem:
    """One realization of coalescing walks born at the origin.

    Times are absolute: births lie in ``[-window, 0)`` (or are forced), and the
    system is observed up to ``run_until``.  ``merges`` lists first meetings of
    clusters as ``(time, absorbed, into)``; clusters are named after their
    founding walker.  ``jumps`` (when recorded) lists ``(time, cluster, position)``.
    """

    kernel: object
    birth_rate: float
    window: float
    run_until: float
    births: np.ndarray
    merges: np.ndarray
    alive: tuple
    positions: dict
    label_key: int
    events: int = 0
    jumps: tuple | None = None

    @property
    def n_walkers(self) -> int:
        return len(self.births)

    @property
    def n_clusters(self) -> int:
        return len(self.alive)

    def cluster_of(self, walker: int, time: float) -> int:
        """Cluster containing ``walker`` at ``time`` (merges at ``time`` included)."""
        c = int(walker)
        for tm, a, b in self.merges:
            if tm > time:
                break
            if a == c:
                c = int(b)
        return c

    def clusters_at(self, time: float) -> dict:
        """Map walker index to cluster for every walker born by ``time``."""
        return {w: self.cluster_of(w, time) for w in range(self.n_walkers)
                if self.births[w] <= time}

    def position(self, walker: int, time: float) -> tuple:
        """Position of ``walker`` at ``time``; needs a system built with ``record_jumps``."""
        if self.jumps is None:
            raise ValueError("system was built without a jump log")
        if time < self.births[walker]:
            raise ValueError("walker not yet born")
        c = self.cluster_of(walker, time)
        jt, jc, jp = self.jumps
        sel = np.nonzero((jc == c) & (jt <= time))[0]
        d = jp.shape[1]
        return tuple(int(v) for v in jp[sel[-1]]) if sel.size else (0,) * d


def _poisson_times(rng: np.random.Generator, rate: float, a: float, b: float) -> np.ndarray:
    n = int(rng.poisson(rate * (b - a))) if rate > 0 and b > a else 0
    return np.sort(a + (b - a) * rng.random(n))


def build_coalescing(kernel: Kernel, birth_rate: float, window: float, run_until: float,
                     rng_stream, forced_births: Sequence[float] | None = None,
                     record_jumps: bool = False,
                     max_events: int = DEFAULT_MAX_EVENTS) -> CoalescingSystem:
    """Simulate walkers born at the origin on ``[-window, 0)`` up to time ``run_until``.

    ``rng_stream`` is a ``numpy`` generator (or an int seed).  When
    ``forced_births`` is given it replaces the Poisson births (absolute times,
    possibly repeated, all ``<= run_until``).
    """
    if window <= 0 and forced_births is None:
        raise ValueError("window must be positive")
    if run_until < 0 and forced_births is None:
        raise ValueError("run_until must be nonnegative")
    rng = rng_stream if isinstance(rng_stream, np.random.Generator) else stream(int(rng_stream))
    if forced_births is None:
        births = _poisson_times(rng, birth_rate, -float(window), 0.0)
    else:
        births = np.sort(np.asarray(forced_births, dtype=float))
        if births.size and births[-1] > run_until:
            raise ValueError("forced births after run_until")
    walk_key = key_from_generator(rng)
    label_key = int(key_from_generator(rng))
    n = len(births)
    d = kernel.dimension
    disp, cum = kernel.table()
    origin = births[0] if n else 0.0
    rel = births - origin
    t_end = float(run_until) - origin
    cap = max(n, 1)
    m_time = np.empty(cap)
    m_from = np.empty(cap, dtype=np.int64)
    m_into = np.empty(cap, dtype=np.int64)
    pos = np.zeros((cap, d), dtype=np.int64)
    active = np.empty(cap, dtype=np.int64)
    j_cap = 4096 if record_jumps else 0
    while True:
        j_time = np.empty(j_cap)
        j_cl = np.empty(j_cap, dtype=np.int64)
        j_pos = np.empty((j_cap, d), dtype=np.int64)
        status, nm, nj, m, events = _coalesce(rel, t_end, walk_key, disp, cum,
                                              float(kernel.jump_rate), int(max_events),
                                              m_time, m_from, m_into, j_time, j_cl, j_pos,
                                              pos, active)
        if status != _LOG_FULL:
            break
        j_cap *= 4
    if status == _BUDGET:
        raise EventBudgetError(f"more than {max_events} jump events")
    if status == _RANGE:
        raise EventBudgetError("walker left the encodable coordinate range")
    merges = np.empty(nm, dtype=_MERGE)
    merges["time"] = m_time[:nm] + origin
    merges["absorbed"] = m_from[:nm]
    merges["into"] = m_into[:nm]
    alive = tuple(sorted(int(c) for c in active[:m]))
    positions = {c: tuple(int(v) for v in pos[c]) for c in alive}
    jumps = None
    if record_jumps:
        jumps = (j_time[:nj] + origin, j_cl[:nj].copy(), j_pos[:nj].copy())
    return CoalescingSystem(kernel, float(birth_rate), float(window), float(run_until),
                            births, merges, alive, positions, label_key, int(events), jumps)


# --- reference simulator --------------------------------------------------------------


class WalkLaw(Protocol):
    dimension: int

    def next_jump(self, walker: int, age: float, rng: np.random.Generator) -> tuple:
        """Holding time and displacement of the next jump of ``walker``."""


@dataclass(frozen=True)
class KernelLaw:
    """Every walker moves with the same kernel."""

    kernel: Kernel

    @property
    def dimension(self) -> int:
        return self.kernel.dimension

    def next_jump(self, walker, age, rng):
        disp, cum = self.kernel.table()
        j = int(np.searchsorted(cum, rng.random(), side="right"))
        return rng.exponential(1.0 / self.kernel.jump_rate), tuple(int(v) for v in disp[j])


@dataclass(frozen=True)
class DivergentDriftLaw:
    """Walker ``i`` moves deterministically along ``(1, i)``; paths meet only at the origin.

    The first holding time is ``first_hold`` so that a newborn leaves the origin
    before the next birth with probability ``1 - O(first_hold)``.
    """

    rate: float = 1.0
    first_hold: float = 1e-12
    dimension: int = 2

    def next_jump(self, walker, age, rng):
        dt = self.first_hold if age == 0.0 else rng.exponential(1.0 / self.rate)
        return dt, (1, int(walker))


def simulate_reference(law: WalkLaw, births: Sequence[float], t_end: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, tuple, dict]:
    """Plain-Python coalescing simulation for an arbitrary per-walker law.

    Clusters move with the law of their founding walker.  Returns
    ``(merges, alive, positions)`` in the format of :class:`CoalescingSystem`.
    """
    births = np.sort(np.asarray(births, dtype=float))
    origin = (0,) * law.dimension
    pos: dict[int, tuple] = {}
    born: dict[int, float] = {}
    step_of: dict[int, tuple] = {}
    occ: dict[tuple, int] = {}
    merges = []
    # (time, kind, walker): kind 0 is a birth, 1 a scheduled jump
    heap = [(float(b), 0, i) for i, b in enumerate(births)]
    heapq.heapify(heap)

    def schedule(c, t):
        dt, step = law.next_jump(c, t - born[c], rng)
        step_of[c] = tuple(int(v) for v in step)
        heapq.heappush(heap, (t + dt, 1, c))

    while heap:
        t, kind, c = heapq.heappop(heap)
        if t > t_end:
            break
        if kind == 0:
            if origin in occ:
                merges.append((t, c, occ[origin]))
                continue
            occ[origin] = c
            pos[c] = origin
            born[c] = t
            schedule(c, t)
            continue
        if c not in pos:
            continue
        del occ[pos[c]]
        new = tuple(a + b for a, b in zip(pos[c], step_of[c]))
        if new in occ:
            merges.append((t, c, occ[new]))
            del pos[c]
            continue
        occ[new] = c
        pos[c] = new
        schedule(c, t)
    out = np.array(merges, dtype=_MERGE) if merges else np.empty(0, dtype=_MERGE)
    return out, tuple(sorted(pos)), dict(pos)


# --- labels -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabelHistory:
    """Label trajectories: ``changes[w]`` lists ``(time, label)`` from birth on.

    Labels are walker indices; walker ``w`` starts with label ``w``.
    """

    births: np.ndarray
    changes: tuple
    death_times: np.ndarray

    def label(self, walker: int, time: float) -> int:
        lab = walker
        for tm, new in self.changes[walker]:
            if tm > time:
                break
            lab = new
        return lab

    def alive(self, time: float) -> np.ndarray:
        """Walkers born by ``time`` that still carry their own label."""
        born = self.births <= time
        return np.nonzero(born & (self.death_times > time))[0]

    def alive_count(self, time: float) -> int:
        return int(len(self.alive(time)))


def run_labels(system: CoalescingSystem, rng: np.random.Generator | None = None) -> LabelHistory:
    """Replay the merges of ``system`` and pick surviving labels with fair coins.

    The coins come from the system's dedicated label stream unless ``rng`` is
    given, so replays with fresh streams resample only the label choices.
    """
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(system.label_key))
    n = system.n_walkers
    members = {c: [c] for c in range(n)}
    label = {c: c for c in range(n)}
    changes = [[] for _ in range(n)]
    death = np.full(n, np.inf)
    for tm, a, b in system.merges:
        a, b = int(a), int(b)
        winner = label[a] if rng.random() < 0.5 else label[b]
        for c in (a, b):
            if label[c] != winner:
                for w in members[c]:
                    changes[w].append((float(tm), winner))
                    if death[w] == np.inf:
                        death[w] = float(tm)
        label[b] = winner
        members[b].extend(members.pop(a))
        del label[a]
    return LabelHistory(system.births.copy(), tuple(tuple(c) for c in changes), death)


# --- survivor density -----------------------------------------------------------------


@dataclass(frozen=True)
class DensityEstimate:
    """Surviving labels per unit window length, averaged over independent systems."""

    kernel: str
    s: float
    birth_rate: float
    alive_count: float
    births: float
    density: float
    se: float
    replicas: int
    seed: int

    def row(self) -> dict:
        return {"kernel": self.kernel, "s_or_t": self.s, "mean": self.density, "se": self.se,
                "replicas": self.replicas, "seed": self.seed, "quantity": "density",
                "alive_count": self.alive_count, "births": self.births}


def _as_seed(rng_or_seed) -> int:
    if isinstance(rng_or_seed, np.random.Generator):
        return int(rng_or_seed.integers(0, 2**63))
    return int(rng_or_seed)


def survival_density(kernel: Kernel | WalkLaw, birth_rate: float, s: float, replicas: int,
                     rng_stream, workers: int = 1, cell: int = 0) -> DensityEstimate:
    """Distinct labels at time 0 among walkers born on ``[-s, 0)``, divided by ``s``.

    Replica ``r`` uses the stream ``(seed, cell, r)``.  A non-kernel walk law
    (e.g. :class:`DivergentDriftLaw`) is run through :func:`simulate_reference`.
    """
    if s <= 0 or replicas < 2:
        raise ValueError("need s > 0 and at least two replicas")
    seed = _as_seed(rng_stream)
    alive = np.empty(replicas)
    born = np.empty(replicas)

    def work(a, b):
        for r in range(a, b):
            g = stream(seed, cell, r)
            if isinstance(kernel, Kernel):
                sysm = build_coalescing(kernel, birth_rate, s, 0.0, g)
                alive[r] = sysm.n_clusters
                born[r] = sysm.n_walkers
            else:
                births = _poisson_times(g, birth_rate, -float(s), 0.0)
                alive[r] = len(simulate_reference(kernel, births, 0.0, g)[1])
                born[r] = len(births)

    run_chunked(work, replicas, workers, size=16)
    label = kernel.label if isinstance(kernel, Kernel) else type(kernel).__name__
    return DensityEstimate(label, float(s), float(birth_rate), float(alive.mean()),
                           float(born.mean()), float(alive.mean() / s),
                           float(alive.std(ddof=1) / math.sqrt(replicas) / s), replicas, seed)


# --- chi(t) in the graphical frame ------------------------------------------------------


@njit(cache=True, nogil=True)
def _chi_walks(env, births, new_class):
    """Mark births whose backward walk does not merge into an earlier one."""
    d = env[4].shape[1]
    times = np.empty(MAX_PER_BIN)
    idx = np.empty(MAX_PER_BIN, dtype=np.int64)
    seen = Dict.empty(key_type=types.uint64, value_type=types.int64)
    path = np.empty(64, dtype=np.uint64)
    disp = env[4]
    for b in range(births.shape[0]):
        pos = np.zeros(d, dtype=np.int64)
        s = births[b]
        n = 0
        hit = False
        while True:
            a, j = latest_before(env, pos, s, times, idx)
            sh = site_hash(pos, env[6])
            if j < 0:
                code = combine(sh, np.int64(-1))
            else:
                code = combine(sh, np.int64(a * 1099511627776.0))
            if code in seen:
                hit = True
                break
            if n >= path.shape[0]:
                grown = np.empty(2 * path.shape[0], dtype=np.uint64)
                grown[:n] = path[:n]
                path = grown
            path[n] = code
            n += 1
            if j < 0:
                break
            for i in range(d):
                pos[i] += disp[j, i]
            s = a
        for i in range(n):
            seen[path[i]] = b
        new_class[b] = not hit


def chi_path(kernel: Kernel, t_max: float, seed: int, replica: int = 0,
             birth_rate: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Birth times on ``[0, t_max]`` and the running count of distinct walks.

    ``chi(t)`` is the count at the last birth ``<= t``; it is nondecreasing in
    ``t`` and never exceeds the number of births.
    """
    from .graphical import LazyEnvironment

    births = _poisson_times(stream(seed, replica, 0), birth_rate, 0.0, float(t_max))
    env = LazyEnvironment(kernel, 0.5, int(root_key(seed, replica, 1)),
                          int(root_key(seed, replica, 2)))
    new = np.zeros(len(births), dtype=np.bool_)
    _chi_walks(env.as_tuple(), births, new)
    return births, np.cumsum(new)


def _chi_at(births, counts, ts):
    k = np.searchsorted(births, ts, side="right")
    return np.where(k > 0, counts[np.maximum(k - 1, 0)] if len(counts) else 0, 0)


@dataclass(frozen=True)
class ChiEstimate:
    kernel: str
    t: float
    mean: float
    se: float
    replicas: int
    seed: int

    @property
    def per_time(self) -> float:
        return self.mean / self.t

    @property
    def per_time_se(self) -> float:
        return self.se / self.t

    def row(self) -> dict:
        return {"kernel": self.kernel, "s_or_t": self.t, "mean": self.mean, "se": self.se,
                "replicas": self.replicas, "seed": self.seed, "quantity": "chi"}


def chi_samples(kernel: Kernel, ts: Sequence[float], replicas: int, seed: int,
                workers: int = 1, birth_rate: float = 1.0) -> np.ndarray:
    """``chi(t)`` per replica (rows) on the grid ``ts`` (columns), one realization per row."""
    ts = np.asarray(ts, dtype=float)
    if np.any(ts <= 0):
        raise ValueError("times must be positive")
    out = np.zeros((replicas, len(ts)))
    t_max = float(ts.max())

    def work(a, b):
        for r in range(a, b):
            births, counts = chi_path(kernel, t_max, seed, r, birth_rate)
            out[r] = _chi_at(births, counts, ts)

    run_chunked(work, replicas, workers, size=8)
    return out


def chi_curve(kernel: Kernel, ts: Sequence[float], replicas: int, rng_stream,
              workers: int = 1) -> list[ChiEstimate]:
    if replicas < 2:
        raise ValueError("need at least two replicas")
    seed = _as_seed(rng_stream)
    x = chi_samples(kernel, ts, replicas, seed, workers)
    return [ChiEstimate(kernel.label, float(t), float(x[:, i].mean()),
                        float(x[:, i].std(ddof=1) / math.sqrt(replicas)), replicas, seed)
            for i, t in enumerate(ts)]


def chi_estimate(kernel: Kernel, t: float, replicas: int, rng_stream,
                 workers: int = 1) -> tuple[float, float]:
    """Mean and standard error of ``chi(t)``."""
    if t <= 0:
        raise ValueError("t must be positive")
    est = chi_curve(kernel, [t], replicas, rng_stream, workers)[0]
    return est.mean, est.se


# --- hitting bounds ------------------------------------------------------------------


def tail_integral(kernel: Kernel, a: float, horizon: float = 1e5) -> float:
    """``int_a^inf p_t(0,0) dt``.

    Integrated numerically up to ``horizon`` and closed with the local limit
    tail ``p_H H / (d/2 - 1)``; infinite for ``d <= 2``.
    """
    d = kernel.dimension
    if d <= 2 and np.allclose(kernel.mean(), 0.0):
        return math.inf
    edges = [float(a)]
    e = max(float(a), 1.0 / kernel.jump_rate)
    while e * 10 < horizon:
        e *= 10
        edges.append(e)
    edges.append(float(horizon))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi > lo:
            total += integrate.quad(lambda s: return_probability(kernel, s), lo, hi,
                                    epsabs=0.0, epsrel=1e-9, limit=200)[0]
    if d > 2:
        total += return_probability(kernel, horizon) * horizon / (d / 2.0 - 1.0)
    return total


def interval_integral(kernel: Kernel, a: float, b: float) -> float:
    return integrate.quad(lambda s: return_probability(kernel, s), a, b,
                          epsabs=0.0, epsrel=1e-10, limit=200)[0]


def pair_meeting_check(kernel: Kernel, deltas: Sequence[float], replicas: int, rng_stream,
                       horizon: float = 1000.0, workers: int = 1) -> list[dict]:
    """Meeting probability of two walkers born at the origin ``delta`` apart.

    Meetings are observed for ``horizon`` time units after the second birth; the
    bound ``int_delta^inf p_t dt`` is compared against the truncated estimate
    (truncation can only lower it) and the unobserved tail is reported.
    """
    seed = _as_seed(rng_stream)
    rows = []
    for i, delta in enumerate(deltas):
        met = np.zeros(replicas)

        def work(a, b):
            for r in range(a, b):
                sysm = build_coalescing(kernel, 1.0, 0.0, delta + horizon,
                                        stream(seed, i, r), forced_births=[0.0, delta])
                met[r] = len(sysm.merges) > 0

        run_chunked(work, replicas, workers, size=64)
        p = float(met.mean())
        se = float(math.sqrt(max(p * (1 - p), 1.0 / replicas) / replicas))
        bound = tail_integral(kernel, delta)
        rows.append({"kernel": kernel.label, "delta": float(delta), "estimate": p, "se": se,
                     "bound": bound, "truncation_horizon": float(horizon),
                     "truncation_tail": tail_integral(kernel, delta + 2 * horizon),
                     "replicas": replicas, "seed": seed, "ok": bool(p <= bound + 3 * se)})
    return rows


@njit(cache=True, nogil=True)
def _hits(key, disp, cum, rate, a, b, out):
    d = disp.shape[1]
    state = np.empty(1, dtype=np.uint64)
    pos = np.zeros(d, dtype=np.int64)
    for r in range(out.shape[0]):
        state[0] = combine(key, r)
        for i in range(d):
            pos[i] = 0
        t = 0.0
        hit = False
        while True:
            t_next = t + next_exponential(state, rate)
            at0 = True
            for i in range(d):
                if pos[i] != 0:
                    at0 = False
            if at0 and t_next > a and t <= b:
                hit = True
                break
            if t_next > b:
                break
            j = search_cum(cum, next_uniform(state))
            for i in range(d):
                pos[i] += disp[j, i]
            t = t_next
        out[r] = hit


@dataclass(frozen=True)
class HitReport:
    kernel: str
    intervals: tuple
    estimates: tuple
    ses: tuple
    integrals: tuple
    ratios: tuple
    constant: float
    bound: float
    replicas: int
    seed: int

    @property
    def ok(self) -> bool:
        return bool(self.constant <= self.bound)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


def interval_hit_bounds_check(kernel: Kernel, intervals: Sequence[tuple], replicas: int,
                              rng_stream, bound: float = 2 * math.e) -> HitReport:
    """``P(X(t) = 0 for some t in I)`` against ``int_I p_t(0,0) dt`` over a family of ``I``.

    The fitted constant is the smallest ``c`` with every ratio in ``[1/c, c]``
    (ratios with fewer than one expected hit are reported as NaN and skipped).
    """
    seed = _as_seed(rng_stream)
    disp, cum = kernel.table()
    est, ses, ints, ratios = [], [], [], []
    for i, (a, b) in enumerate(intervals):
        if not (1.0 < a and b - a >= 1.0):
            raise ValueError("intervals must lie in (1, inf) and have length >= 1")
        out = np.zeros(replicas, dtype=np.bool_)
        _hits(root_key(seed, i), disp, cum, float(kernel.jump_rate), float(a), float(b), out)
        p = float(out.mean())
        integral = interval_integral(kernel, a, b)
        est.append(p)
        ses.append(float(math.sqrt(p * (1 - p) / replicas)))
        ints.append(integral)
        # fewer than one expected hit: the ratio is not resolvable at this replica count
        ratios.append(p / integral if integral * replicas >= 1.0 else math.nan)
    finite = [r for r in ratios if math.isfinite(r) and r > 0]
    const = max(max(r, 1.0 / r) for r in finite) if finite else 1.0
    if any(math.isfinite(r) and r == 0 for r in ratios):
        const = math.inf
    return HitReport(kernel.label, tuple(tuple(map(float, I)) for I in intervals), tuple(est),
                     tuple(ses), tuple(ints), tuple(ratios), float(const), float(bound),
                     replicas, seed)
