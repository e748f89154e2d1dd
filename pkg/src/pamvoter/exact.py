"""Exact moments on tiny tori.

The pair (voter configuration, positions of ``p`` reactant walkers) is a
finite Markov chain.  Adding ``gamma * sum_j xi(x_j)`` to the diagonal of its
generator turns the annealed Feynman-Kac moment into a matrix exponential
applied to a vector, which is evaluated by two unrelated methods: an adaptive
Dormand-Prince integrator and a uniformization series.

Joint states are enumerated configuration-major: ``index = c * n**p + w`` with
``c`` the configuration bitmask (bit ``x`` is site ``x``) and
``w = sum_j x_j * n**(p-1-j)`` the walker tuple in lexicographic order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.stats import poisson

from .kernels import Kernel, format_kernel, simple
from .voter import Torus

__all__ = [
    "StateSpaceTooLarge",
    "ToleranceNotMet",
    "BoundsViolation",
    "GeneratorMatrix",
    "build_generator",
    "initial_distribution",
    "exact_moment",
    "exact_lambda_bounds",
    "oracle_fixture",
]

DEFAULT_STATE_CAP = 2**20
DEFAULT_NNZ_CAP = 10**6
ODE_RTOL = 1e-12


class StateSpaceTooLarge(ValueError):
    pass


class ToleranceNotMet(RuntimeError):
    pass


class BoundsViolation(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class GeneratorMatrix:
    torus: Torus
    kernel: Kernel
    p: int
    kappa: float
    gamma: float
    rate: sparse.csr_matrix
    potential: np.ndarray

    @property
    def n_states(self) -> int:
        return self.rate.shape[0]

    @property
    def n_walker_tuples(self) -> int:
        return self.torus.n_sites ** self.p

    @property
    def matrix(self) -> sparse.csr_matrix:
        return (self.rate + sparse.diags(self.potential)).tocsr()

    def state(self, config: int, walkers) -> int:
        n = self.torus.n_sites
        w = 0
        for x in walkers:
            w = w * n + int(x)
        return config * self.n_walker_tuples + w


def _reactant_moves(torus: Torus):
    """Site-index shifts of the 2d nearest-neighbour moves."""
    d = torus.dimension
    moves = []
    for i in range(d):
        for sgn in (1, -1):
            e = np.zeros(d, dtype=np.int64)
            e[i] = sgn
            moves.append(torus.shift(np.arange(torus.n_sites), e))
    return moves


def state_count(torus: Torus, p: int) -> int:
    return 2 ** torus.n_sites * torus.n_sites ** p


def build_generator(torus: Torus, kernel: Kernel, p: int, kappa: float, gamma: float,
                    state_cap: int = DEFAULT_STATE_CAP,
                    nnz_cap: int = DEFAULT_NNZ_CAP) -> GeneratorMatrix:
    """Generator of (voter configuration, ``p`` walkers) plus the diagonal potential.

    The voter part flips site ``x`` to the value of ``x + v`` at rate
    ``jump_rate * w(v)``; each walker jumps to each nearest neighbour at rate
    ``kappa``; the potential is ``gamma * sum_j xi(x_j)``.
    """
    if kernel.dimension != torus.dimension:
        raise ValueError("kernel and torus dimensions differ")
    if p < 1 or kappa < 0 or gamma < 0:
        raise ValueError("need p >= 1, kappa >= 0, gamma >= 0")
    n = torus.n_sites
    n_conf = 2 ** n if n < 63 else None
    total = state_count(torus, p)
    if n_conf is None or total > state_cap:
        raise StateSpaceTooLarge(
            f"{total} joint states exceed the cap of {state_cap}; "
            f"shrink the torus side or p (2^{n} configurations x {n}^{p} walker tuples)")
    nw = n ** p
    conf = np.arange(n_conf, dtype=np.int64)
    bits = (conf[:, None] >> np.arange(n)) & 1
    walk = np.arange(nw, dtype=np.int64)
    pos = np.stack([(walk // n ** (p - 1 - j)) % n for j in range(p)])
    rows, cols, vals = [], [], []

    for x in range(n):
        for disp, w in kernel.steps:
            y = int(torus.shift(x, np.array(disp))[0])
            if y == x:
                continue
            c_src = conf[bits[:, x] != bits[:, y]]
            c_dst = c_src ^ (1 << x)
            r = (c_src[:, None] * nw + walk[None, :]).ravel()
            c = (c_dst[:, None] * nw + walk[None, :]).ravel()
            rows.append(r)
            cols.append(c)
            vals.append(np.full(r.size, kernel.jump_rate * w))

    if kappa > 0:
        for mv in _reactant_moves(torus):
            for j in range(p):
                new_pos = pos.copy()
                new_pos[j] = mv[pos[j]]
                w_dst = np.zeros(nw, dtype=np.int64)
                for jj in range(p):
                    w_dst = w_dst * n + new_pos[jj]
                r = (conf[:, None] * nw + walk[None, :]).ravel()
                c = (conf[:, None] * nw + w_dst[None, :]).ravel()
                rows.append(r)
                cols.append(c)
                vals.append(np.full(r.size, float(kappa)))

    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        keep = r != c
        off = sparse.coo_matrix((v[keep], (r[keep], c[keep])), shape=(total, total)).tocsr()
    else:
        off = sparse.csr_matrix((total, total))
    if off.nnz + total > nnz_cap:
        raise StateSpaceTooLarge(f"{off.nnz + total} nonzeros exceed the cap of {nnz_cap}")
    out_rate = np.asarray(off.sum(axis=1)).ravel()
    rate = (off - sparse.diags(out_rate)).tocsr()
    occupied = np.zeros((n_conf, nw))
    for j in range(p):
        occupied += bits[:, pos[j]]
    potential = gamma * occupied.ravel()
    return GeneratorMatrix(torus, kernel, p, float(kappa), float(gamma), rate, potential)


def configuration_weights(torus: Torus, rho: float) -> np.ndarray:
    """Bernoulli product measure over configuration bitmasks."""
    n = torus.n_sites
    ones = np.array([bin(c).count("1") for c in range(2 ** n)])
    if rho <= 0.0:
        return (ones == 0).astype(float)
    if rho >= 1.0:
        return (ones == n).astype(float)
    return np.exp(ones * math.log(rho) + (n - ones) * math.log1p(-rho))


def initial_distribution(gen: GeneratorMatrix, rho: float) -> np.ndarray:
    """Product-measure configuration with every walker at site 0."""
    pi = np.zeros(gen.n_states)
    pi[:: gen.n_walker_tuples] = configuration_weights(gen.torus, rho)
    return pi


def _expm_ode(A, v0, t):
    if t == 0:
        return v0.copy()
    sol = solve_ivp(lambda _s, v: A @ v, (0.0, t), v0, method="DOP853",
                    rtol=ODE_RTOL, atol=1e-18)
    if not sol.success:
        raise ToleranceNotMet(sol.message)
    return sol.y[:, -1]


def _expm_uniformization(gen: GeneratorMatrix, v0, t, tol=1e-15, max_terms=100_000):
    if t == 0:
        return v0.copy()
    diag = gen.rate.diagonal()
    lam = max(float(-diag.min()), 1e-300) if diag.size else 1.0
    if lam <= 1e-300:
        lam = 1.0
    P = (sparse.identity(gen.n_states) + gen.matrix / lam).tocsr()
    growth = 1.0 + float(gen.potential.max(initial=0.0)) / lam
    lt = lam * t
    out = np.zeros_like(v0)
    term = v0.copy()
    scale = float(np.abs(v0).max())
    for k in range(max_terms):
        out += poisson.pmf(k, lt) * term
        if k > lt:
            # Remaining mass bounded through ||P^j v|| <= growth^j ||v||.
            tail = math.exp((growth - 1.0) * lt) * poisson.sf(k, growth * lt) * scale
            if tail <= tol * float(np.abs(out).max()):
                return out
        term = P @ term
    raise ToleranceNotMet("uniformization series did not converge")


def exact_moment(gen: GeneratorMatrix, rho: float, t: float, method: str = "ode",
                 direction: str = "forward") -> float:
    """``E[exp(gamma sum_j int_0^t xi(X_j(s), s') ds)]`` on the torus.

    ``direction="forward"`` reads the environment at ``s' = s``;
    ``"reversed"`` at ``s' = t - s``.  The reversed value is computed by running
    the walkers backward from the origin, which relies on the nearest-neighbour
    walk being symmetric.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if direction == "forward":
        v0 = np.ones(gen.n_states)
        weights = initial_distribution(gen, rho)
    elif direction == "reversed":
        v0 = np.zeros(gen.n_states)
        v0[:: gen.n_walker_tuples] = 1.0
        weights = np.repeat(configuration_weights(gen.torus, rho), gen.n_walker_tuples)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if method == "ode":
        v = _expm_ode(gen.matrix, v0, float(t))
    elif method == "uniformization":
        v = _expm_uniformization(gen, v0, float(t))
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(weights @ v)


def exact_lambda_bounds(gen: GeneratorMatrix, rho: float, t_grid, rtol: float = 1e-12) -> list[dict]:
    """Check ``exp(rho gamma p t) <= E[u^p](t) <= exp(gamma p t)`` on a grid.

    Returns one row per ``t`` with the value and both margins; raises
    :class:`BoundsViolation` if either bound fails beyond ``rtol``.
    """
    t_grid = list(t_grid)
    if not t_grid:
        raise ValueError("empty t grid")
    rows = []
    for t in t_grid:
        val = exact_moment(gen, rho, t)
        lo = math.exp(rho * gen.gamma * gen.p * t)
        hi = math.exp(gen.gamma * gen.p * t)
        row = {"t": float(t), "value": val, "lower": lo, "upper": hi,
               "lower_margin": val - lo, "upper_margin": hi - val,
               "normalized_log": math.log(val) / (gen.p * t) if t > 0 else math.nan}
        if val < lo * (1 - rtol) or val > hi * (1 + rtol):
            raise BoundsViolation(f"moment {val} outside [{lo}, {hi}] at t={t}")
        rows.append(row)
    return rows


def oracle_fixture(side: int, p: int, kappa: float, gamma: float, rho: float, t: float,
                   kernel: Kernel | None = None, dimension: int = 1,
                   tolerance: float = 1e-8) -> dict:
    """Oracle value from both methods, refusing to certify if they disagree."""
    kernel = kernel or simple(dimension)
    torus = Torus(kernel.dimension, side)
    gen = build_generator(torus, kernel, p, kappa, gamma)
    a = exact_moment(gen, rho, t, method="ode")
    b = exact_moment(gen, rho, t, method="uniformization")
    if abs(a - b) > tolerance * abs(b):
        raise ToleranceNotMet(f"methods disagree: {a} vs {b}")
    return {
        "torus": {"dimension": torus.dimension, "side": side},
        "kernel": format_kernel(kernel),
        "p": p, "kappa": kappa, "gamma": gamma, "rho": rho, "t": t,
        "value": b, "value_ode": a, "tolerance": tolerance,
        "reversed": exact_moment(gen, rho, t, method="uniformization", direction="reversed"),
    }


def fixtures_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2, sort_keys=True)
