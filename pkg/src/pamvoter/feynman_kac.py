"""Monte Carlo estimation of annealed moments and finite-time Lyapunov functionals.

For ``p`` independent reactant walks ``X_j`` (simple random walk with step rate
``2 d kappa``) in one shared voter environment, the replica weight is

    W = exp(gamma * sum_j int_0^t xi(X_j(s), s') ds)

with ``s' = s`` (``direction="forward"``) or ``s' = t - s``
(``direction="reversed"``).  ``Lambda_p(t) = log E[W] / (p t)``.

The integrals are exact: the integrand is piecewise constant between walker
jumps and resampling arrows at the walker's site, and is integrated segment by
segment.  Weights are kept in the log domain and reduced with a max-shifted
sum so that ``exp(gamma p t)`` never overflows.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from . import __version__
from .graphical import MAX_PER_BIN, arrows_between, xi_before
from .kernels import Kernel, load_kernel
from .parallel import run_chunked
from .rng import combine, derive, next_exponential, next_uniform, root_key, stream
from .voter import (Configuration, GraphicalRecord, Torus, build_record, sample_initial,
                    torus_side_for)

__all__ = [
    "ReactantPath",
    "LyapunovRow",
    "ExperimentPlan",
    "CurveResult",
    "CheckpointError",
    "Interrupted",
    "LogMeanExp",
    "sample_reactant",
    "accumulated_potential",
    "estimate_moment",
    "estimate_moment_reversed",
    "replica_log_weights",
    "lyapunov_curve",
]

DIRECTIONS = ("forward", "reversed")


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or belongs to a different plan."""


class Interrupted(RuntimeError):
    """Raised by the ``stop_after`` test hook of :func:`lyapunov_curve`."""


# --- reactant paths --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReactantPath:
    """Piecewise-constant walk on ``[0, t]`` started at the origin.

    ``positions[k]`` is the site held on ``[jump_times[k-1], jump_times[k])``
    with ``positions[0]`` the origin.
    """

    kappa: float
    dimension: int
    t: float
    jump_times: np.ndarray
    positions: np.ndarray

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def position(self, s: float) -> np.ndarray:
        return self.positions[int(np.searchsorted(self.jump_times, s, side="right"))]


def _unit_moves(d: int) -> np.ndarray:
    moves = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        moves[2 * i, i] = 1
        moves[2 * i + 1, i] = -1
    return moves


def sample_reactant(kappa: float, d: int, t: float, rng: np.random.Generator) -> ReactantPath:
    """Simple random walk with step rate ``2 d kappa`` on ``[0, t]``."""
    if kappa < 0 or t < 0:
        raise ValueError("kappa and t must be nonnegative")
    rate = 2 * d * kappa
    times = []
    if rate > 0:
        s = rng.exponential(1.0 / rate)
        while s <= t:
            times.append(s)
            s += rng.exponential(1.0 / rate)
    n = len(times)
    steps = _unit_moves(d)[rng.integers(0, 2 * d, n)]
    positions = np.vstack([np.zeros((1, d), dtype=np.int64), np.cumsum(steps, axis=0)])
    return ReactantPath(float(kappa), d, float(t), np.array(times, dtype=float), positions)


# --- potential along a path through an explicit record ---------------------------------


@njit(cache=True)
def _potential_record(bits, sites, sources, times, n_ev, jt, pidx, t, rev):
    nj = jt.shape[0]
    acc = 0.0
    run = -1.0
    if not rev:
        i = 0
        j = 0
        cur = 0.0
        pos = pidx[0]
        while True:
            te = times[i] if i < n_ev else np.inf
            tw = jt[j] if j < nj else np.inf
            nxt = min(te, tw, t)
            v = bits[pos]
            if v == 1 and run < 0:
                run = cur
            elif v == 0 and run >= 0:
                acc += cur - run
                run = -1.0
            if nxt >= t:
                break
            if te <= tw:
                bits[sites[i]] = bits[sources[i]]
                i += 1
            else:
                j += 1
                pos = pidx[j]
            cur = nxt
        if run >= 0:
            acc += t - run
        return acc
    # environment time tau = t - s runs forward; the walker is read backward
    i = 0
    j = nj
    cur = 0.0
    pos = pidx[nj]
    while True:
        te = times[i] if i < n_ev else np.inf
        tw = t - jt[j - 1] if j > 0 else np.inf
        nxt = min(te, tw, t)
        v = bits[pos]
        if v == 1 and run < 0:
            run = cur
        elif v == 0 and run >= 0:
            acc += cur - run
            run = -1.0
        if nxt >= t:
            break
        if te <= tw:
            bits[sites[i]] = bits[sources[i]]
            i += 1
        else:
            j -= 1
            pos = pidx[j]
        cur = nxt
    if run >= 0:
        acc += t - run
    return acc


def accumulated_potential(path: ReactantPath, record: GraphicalRecord,
                          initial: Configuration, direction: str = "forward") -> float:
    """Exact ``int_0^t xi(X(s), s') ds`` along ``path`` for an explicit torus record."""
    if path.t > record.horizon:
        raise ValueError("path horizon exceeds record horizon")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    torus = record.torus
    if path.dimension != torus.dimension:
        raise ValueError("path and torus dimensions differ")
    pidx = np.array([torus.index(c) for c in path.positions], dtype=np.int64)
    n_ev = int(np.searchsorted(record.times, path.t, side="right"))
    return float(_potential_record(initial.bits.copy(), record.sites, record.sources,
                                   record.times, n_ev, path.jump_times, pidx, path.t,
                                   direction == "reversed"))


# --- lazy-environment replica engine ------------------------------------------------


@njit(cache=True)
def _walker_potential(env, wstate, rate, d, t, rev, buf_t, buf_j, times, idx):
    pos = np.zeros(d, dtype=np.int64)
    a = 0.0
    acc = 0.0
    run = -1.0
    while True:
        b = a + next_exponential(wstate, rate) if rate > 0 else np.inf
        bb = min(b, t)
        if rev:
            lo_env = t - bb
            hi_env = t - a
        else:
            lo_env = a
            hi_env = bb
        n = arrows_between(env, pos, lo_env, hi_env, buf_t, buf_j, times, idx)
        while n < 0:
            buf_t = np.empty(2 * buf_t.shape[0])
            buf_j = np.empty(2 * buf_j.shape[0], dtype=np.int64)
            n = arrows_between(env, pos, lo_env, hi_env, buf_t, buf_j, times, idx)
        for k in range(n + 1):
            if rev:
                # pieces in walker time, newest environment arrow first
                w = a if k == 0 else t - buf_t[n - k]
                q = hi_env if k == 0 else buf_t[n - k]
            else:
                w = a if k == 0 else buf_t[k - 1]
                q = buf_t[k] if k < n else hi_env
            v = xi_before(env, pos, q, times, idx)
            if v == 1 and run < 0:
                run = w
            elif v == 0 and run >= 0:
                acc += w - run
                run = -1.0
        if b >= t:
            break
        m = int(next_uniform(wstate) * 2 * d)
        if m % 2 == 0:
            pos[m // 2] += 1
        else:
            pos[m // 2] -= 1
        if env[6] > 0:
            pos[m // 2] = pos[m // 2] % env[6]
        a = b
    if run >= 0:
        acc += t - run
    return acc


@njit(cache=True, nogil=True)
def _replica_batch(root, cell, r0, r1, p, kappa, d, t, gamma, rev, rho, bw, disp, cum,
                   side, out):
    times = np.empty(MAX_PER_BIN)
    idx = np.empty(MAX_PER_BIN, dtype=np.int64)
    buf_t = np.empty(256)
    buf_j = np.empty(256, dtype=np.int64)
    wstate = np.empty(1, dtype=np.uint64)
    rate = 2.0 * d * kappa
    for r in range(r0, r1):
        key = derive(root, cell, r)
        env = (combine(key, 1), combine(key, 2), rho, bw, disp, cum, side)
        total = 0.0
        for j in range(p):
            wstate[0] = combine(key, 1000 + j)
            total += _walker_potential(env, wstate, rate, d, t, rev, buf_t, buf_j, times, idx)
        out[r - r0] = gamma * total


def replica_log_weights(kernel: Kernel, p: int, kappa: float, t: float, gamma: float,
                        rho: float, seed: int, cell: int = 0, start: int = 0,
                        stop: int = 1000, direction: str = "forward", side: int = 0,
                        workers: int = 1) -> np.ndarray:
    """Log Feynman-Kac weights of replicas ``start..stop-1`` on the lazy environment.

    Replica ``r`` of cell ``cell`` is a pure function of ``(seed, cell, r)``.
    ``side == 0`` puts the catalyst on Z^d.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    if t < 0 or kappa < 0 or gamma < 0 or p < 1:
        raise ValueError("bad moment parameters")
    out = np.empty(stop - start)
    disp, cum = kernel.table()
    root = root_key(seed)

    def work(a, b):
        _replica_batch(root, np.int64(cell), np.int64(start + a), np.int64(start + b),
                       p, float(kappa), kernel.dimension, float(t), float(gamma),
                       direction == "reversed", float(rho), 1.0 / kernel.jump_rate,
                       disp, cum, np.int64(side), out[a:b])

    run_chunked(work, stop - start, workers)
    return out


def record_log_weights(kernel: Kernel, side: int, p: int, kappa: float, t: float,
                       gamma: float, rho: float, seed: int, cell: int = 0, start: int = 0,
                       stop: int = 1000, direction: str = "forward") -> np.ndarray:
    """Same as :func:`replica_log_weights` but with explicit torus records."""
    torus = Torus(kernel.dimension, side)
    out = np.empty(stop - start)
    for r in range(start, stop):
        g = stream(seed, cell, r)
        init = sample_initial(torus, rho, g)
        rec = build_record(torus, kernel, t, g)
        pot = [accumulated_potential(sample_reactant(kappa, kernel.dimension, t, g),
                                     rec, init, direction) for _ in range(p)]
        out[r - start] = gamma * sum(pot)
    return out


# --- aggregation -------------------------------------------------------------------


@dataclass
class LogMeanExp:
    """Running ``sum exp(x)`` and ``sum exp(2x)`` stored relative to the running max."""

    count: int = 0
    shift: float = -math.inf
    s1: float = 0.0
    s2: float = 0.0

    def update(self, logw: np.ndarray) -> None:
        logw = np.asarray(logw, dtype=float)
        if logw.size == 0:
            return
        if np.isnan(logw).any():
            raise FloatingPointError("NaN log-weight")
        m = float(logw.max())
        b1 = math.fsum(np.exp(logw - m).tolist())
        b2 = math.fsum(np.exp(2.0 * (logw - m)).tolist())
        if m > self.shift:
            f = math.exp(self.shift - m) if self.count else 0.0
            self.s1 = self.s1 * f + b1
            self.s2 = self.s2 * f * f + b2
            self.shift = m
        else:
            f = math.exp(m - self.shift)
            self.s1 += b1 * f
            self.s2 += b2 * f * f
        self.count += int(logw.size)

    @property
    def log_mean(self) -> float:
        return self.shift + math.log(self.s1 / self.count)

    @property
    def rel_var(self) -> float:
        """Sample variance of ``W`` divided by the squared mean."""
        n = self.count
        if n < 2:
            return math.nan
        m1 = self.s1 / n
        m2 = self.s2 / n
        return max(m2 / (m1 * m1) - 1.0, 0.0) * n / (n - 1)

    @property
    def se_log_mean(self) -> float:
        return math.sqrt(self.rel_var / self.count)

    @property
    def mean(self) -> float:
        return math.exp(self.log_mean)

    @property
    def se_mean(self) -> float:
        return self.mean * self.se_log_mean

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LogMeanExp":
        return cls(int(d["count"]), float(d["shift"]), float(d["s1"]), float(d["s2"]))


@dataclass(frozen=True)
class LyapunovRow:
    p: int
    kappa: float
    gamma: float
    rho: float
    t: float
    mean_log_estimate: float
    lambda_hat: float
    se: float
    replicas: int
    direction: str
    se_log_mean: float = math.nan
    max_log_weight: float = math.nan
    seed: int = 0
    cell: int = 0

    @property
    def mean(self) -> float:
        return math.exp(self.mean_log_estimate)

    @property
    def se_mean(self) -> float:
        return self.mean * self.se_log_mean


def _row_from(agg: LogMeanExp, p, kappa, gamma, rho, t, direction, seed, cell) -> LyapunovRow:
    pt = p * t
    lam = agg.log_mean / pt if pt > 0 else 0.0
    se = agg.se_log_mean / pt if pt > 0 else 0.0
    return LyapunovRow(p, float(kappa), float(gamma), float(rho), float(t), agg.log_mean, lam,
                       se, agg.count, direction, agg.se_log_mean, agg.shift, int(seed), int(cell))


def _check_upper(logw: np.ndarray, gamma: float, p: int, t: float) -> None:
    cap = gamma * p * t
    if logw.size and float(logw.max()) > cap + 1e-12 * max(1.0, cap):
        raise AssertionError(f"weight exceeds exp(gamma p t): {logw.max()} > {cap}")


def _as_seed(rng_or_seed) -> int:
    if isinstance(rng_or_seed, np.random.Generator):
        return int(rng_or_seed.integers(0, 2**63))
    return int(rng_or_seed)


def estimate_moment(p: int, kappa: float, t: float, gamma: float, rho: float, replicas: int,
                    rng_stream, kernel: Kernel | None = None, side: int = 0,
                    direction: str = "forward", engine: str = "lazy", workers: int = 1,
                    cell: int = 0) -> LyapunovRow:
    """Monte Carlo estimate of ``E[W]`` and ``Lambda_p(t)`` for one ``(p, kappa, t)`` cell.

    Each replica draws a fresh environment shared by its ``p`` walkers.
    ``engine="lazy"`` samples the environment on demand (Z^d when ``side`` is 0);
    ``engine="record"`` builds an explicit torus record per replica.
    """
    from .kernels import simple

    kernel = kernel or simple(1)
    if replicas < 2:
        raise ValueError("need at least two replicas")
    seed = _as_seed(rng_stream)
    if engine == "lazy":
        logw = replica_log_weights(kernel, p, kappa, t, gamma, rho, seed, cell, 0, replicas,
                                   direction, side, workers)
    elif engine == "record":
        if side < 2:
            raise ValueError("the record engine needs a torus side >= 2")
        logw = record_log_weights(kernel, side, p, kappa, t, gamma, rho, seed, cell, 0,
                                  replicas, direction)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    _check_upper(logw, gamma, p, t)
    agg = LogMeanExp()
    agg.update(logw)
    return _row_from(agg, p, kappa, gamma, rho, t, direction, seed, cell)


def estimate_moment_reversed(p, kappa, t, gamma, rho, replicas, rng_stream, **kw) -> LyapunovRow:
    """:func:`estimate_moment` with the environment read at time ``t - s``."""
    return estimate_moment(p, kappa, t, gamma, rho, replicas, rng_stream,
                           direction="reversed", **kw)


# --- experiment plans and curves ----------------------------------------------------


@dataclass(frozen=True)
class ExperimentPlan:
    catalyst: str
    kappas: tuple
    ps: tuple
    gamma: float
    rho: float
    ts: tuple
    replicas: int
    seed: int
    side: int = 0
    directions: tuple = ("forward",)
    batch_size: int = 1000
    engine: str = "lazy"

    def __post_init__(self):
        for name in ("kappas", "ps", "ts", "directions"):
            v = tuple(getattr(self, name))
            if not v:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, v)
        if self.replicas < 2:
            raise ValueError("replicas must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for dname in self.directions:
            if dname not in DIRECTIONS:
                raise ValueError(f"unknown direction {dname!r}")
        if self.engine not in ("lazy", "record"):
            raise ValueError(f"unknown engine {self.engine!r}")

    @property
    def kernel(self) -> Kernel:
        return load_kernel(self.catalyst)

    def resolved_side(self) -> int:
        if self.side == -1:
            return torus_side_for(self.kernel.jump_rate, max(self.ts))
        return int(self.side)

    def cells(self) -> list[tuple]:
        return [(p, k, t, dname) for p in self.ps for k in self.kappas for t in self.ts
                for dname in self.directions]

    def canonical(self) -> dict:
        d = asdict(self)
        d["catalyst"] = self.catalyst.strip()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class CurveResult:
    rows: list
    fits: list
    metadata: dict = field(default_factory=dict)


def _write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_checkpoint(path: Path, plan: ExperimentPlan) -> dict:
    try:
        data = json.loads(Path(path).read_text())
        header = data["header"]
        cells = {int(k): v for k, v in data["cells"].items()}
        for v in cells.values():
            LogMeanExp.from_dict(v["agg"])
            int(v["batches"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("plan_hash") != plan.digest() or header.get("seed") != plan.seed:
        raise CheckpointError(f"checkpoint {path} belongs to a different plan")
    return cells


def _save_checkpoint(path: Path, plan: ExperimentPlan, cells: dict) -> None:
    data = {"header": {"plan_hash": plan.digest(), "seed": plan.seed, "version": __version__},
            "cells": {str(k): v for k, v in sorted(cells.items())}}
    _write_atomic(Path(path), json.dumps(data, sort_keys=True))


def fit_inverse_t(ts, lams, ses) -> dict:
    """Weighted fit ``Lambda(t) = lam + c / t`` with residual diagnostics."""
    ts = np.asarray(ts, float)
    lams = np.asarray(lams, float)
    ses = np.asarray(ses, float)
    out = {"n_points": int(len(ts)), "intercept": math.nan, "slope": math.nan,
           "residual_rms": math.nan, "curvature_warning": False}
    if len(ts) < 2:
        return out
    w = 1.0 / np.where(ses > 0, ses, np.nan)
    if not np.all(np.isfinite(w)):
        w = np.ones_like(ts)
    X = np.column_stack([np.ones_like(ts), 1.0 / ts])
    coef, *_ = np.linalg.lstsq(X * w[:, None], lams * w, rcond=None)
    resid = lams - X @ coef
    out.update(intercept=float(coef[0]), slope=float(coef[1]),
               residual_rms=float(np.sqrt(np.mean(resid ** 2))))
    if len(ts) >= 3:
        chi2 = float(np.sum((resid * w) ** 2) / (len(ts) - 2))
        out["curvature_warning"] = bool(chi2 > 4.0)
    return out


def lyapunov_curve(plan: ExperimentPlan, checkpoint: str | Path | None = None,
                   workers: int = 1, stop_after: int | None = None,
                   progress=None) -> CurveResult:
    """Run every ``(p, kappa, t, direction)`` cell of ``plan`` in replica batches.

    After each batch the per-cell aggregates are written to ``checkpoint``; a
    rerun resumes from it and produces bit-identical results.  ``stop_after``
    raises :class:`Interrupted` after that many batches (used to test resume).
    """
    kernel = plan.kernel
    side = plan.resolved_side()
    cells = plan.cells()
    state: dict = {}
    if checkpoint is not None and Path(checkpoint).exists():
        state = load_checkpoint(Path(checkpoint), plan)
    n_batches = math.ceil(plan.replicas / plan.batch_size)
    done = 0
    for ci, (p, kappa, t, dname) in enumerate(cells):
        entry = state.setdefault(ci, {"batches": 0, "agg": LogMeanExp().to_dict()})
        agg = LogMeanExp.from_dict(entry["agg"])
        for b in range(int(entry["batches"]), n_batches):
            if stop_after is not None and done >= stop_after:
                raise Interrupted(f"stopped after {done} batches")
            lo = b * plan.batch_size
            hi = min(lo + plan.batch_size, plan.replicas)
            if plan.engine == "lazy":
                logw = replica_log_weights(kernel, p, kappa, t, plan.gamma, plan.rho, plan.seed,
                                           ci, lo, hi, dname, side, workers)
            else:
                logw = record_log_weights(kernel, side, p, kappa, t, plan.gamma, plan.rho,
                                          plan.seed, ci, lo, hi, dname)
            _check_upper(logw, plan.gamma, p, t)
            agg.update(logw)
            entry["batches"] = b + 1
            entry["agg"] = agg.to_dict()
            done += 1
            if checkpoint is not None:
                _save_checkpoint(Path(checkpoint), plan, state)
            if progress is not None:
                progress(ci, b + 1, n_batches)
    rows = []
    for ci, (p, kappa, t, dname) in enumerate(cells):
        agg = LogMeanExp.from_dict(state[ci]["agg"])
        rows.append(_row_from(agg, p, kappa, plan.gamma, plan.rho, t, dname, plan.seed, ci))
    fits = []
    for p in plan.ps:
        for kappa in plan.kappas:
            for dname in plan.directions:
                sel = [r for r in rows if r.p == p and r.kappa == kappa and r.direction == dname]
                fit = fit_inverse_t([r.t for r in sel], [r.lambda_hat for r in sel],
                                    [r.se for r in sel])
                fits.append({"p": p, "kappa": kappa, "direction": dname,
                             "label": "extrapolated 1/t intercept (not a limit)", **fit})
    meta = {"plan": plan.canonical(), "plan_hash": plan.digest(), "side": side,
            "lattice": "Z^d" if side == 0 else f"torus side {side} (wrap-around bias possible)",
            "version": __version__}
    return CurveResult(rows, fits, meta)
