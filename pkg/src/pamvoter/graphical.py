"""Lazily generated graphical representation of the voter model.

Resampling arrows at site ``x`` form a Poisson process of rate ``jump_rate``.
Time is cut into bins of width ``1/jump_rate``; the arrows of bin ``k`` at
``x`` are a pure function of ``(key, x, k)``, so the environment can be read
at any space-time point without simulating the rest of the lattice.  The
initial configuration is an i.i.d. Bernoulli field generated the same way.

Site values are read through the dual: ``xi_s(x) = xi_0(X^{x,s}(s))`` where
the backward walk follows arrows from target to source.

An environment is passed to the kernels as the tuple
``(arrow_key, init_key, rho, bin_width, disp, cum, side)``; ``side == 0``
means Z^d, otherwise coordinates wrap modulo ``side``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .kernels import Kernel
from .rng import combine, mix64, root_key, to_unit

MAX_PER_BIN = 64
_SITE_SEED = np.uint64(0x243F6A8885A308D3)


@njit(cache=True)
def wrap_inplace(coords, side):
    if side > 0:
        for i in range(coords.shape[0]):
            coords[i] = coords[i] % side


@njit(cache=True)
def site_hash(coords, side):
    h = _SITE_SEED
    for i in range(coords.shape[0]):
        c = coords[i]
        if side > 0:
            c = c % side
        h = combine(h, c)
    return h


@njit(cache=True)
def search_cum(cum, u):
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def bin_arrows(env, sh, k, times, idx):
    """Fill ``times``/``idx`` with the arrows of bin ``k`` at a site, sorted."""
    base = combine(combine(env[0], sh), k)
    u = to_unit(mix64(base))
    p = np.exp(-1.0)
    f = p
    c = 0
    while u > f and c < MAX_PER_BIN - 1:
        c += 1
        p *= 1.0 / c
        f += p
    bw = env[3]
    cum = env[5]
    for j in range(c):
        tj = (k + to_unit(combine(base, 2 * j + 1))) * bw
        sj = search_cum(cum, to_unit(combine(base, 2 * j + 2)))
        m = j
        while m > 0 and times[m - 1] > tj:
            times[m] = times[m - 1]
            idx[m] = idx[m - 1]
            m -= 1
        times[m] = tj
        idx[m] = sj
    return c


@njit(cache=True)
def latest_before(env, coords, tau, times, idx):
    """Latest arrow at ``coords`` strictly before ``tau``: (time, step) or (-1, -1)."""
    if tau <= 0.0:
        return -1.0, -1
    sh = site_hash(coords, env[6])
    k = int(tau / env[3])
    while k >= 0:
        c = bin_arrows(env, sh, k, times, idx)
        for j in range(c - 1, -1, -1):
            if times[j] < tau:
                return times[j], idx[j]
        k -= 1
    return -1.0, -1


@njit(cache=True)
def dual_endpoint(env, coords, tau, times, idx):
    """Endpoint at time 0 of the backward walk started at ``(coords, tau)``."""
    pos = coords.copy()
    disp = env[4]
    side = env[6]
    s = tau
    while True:
        s, j = latest_before(env, pos, s, times, idx)
        if j < 0:
            return pos
        for i in range(pos.shape[0]):
            pos[i] += disp[j, i]
        wrap_inplace(pos, side)


@njit(cache=True)
def initial_bit(env, coords):
    rho = env[2]
    if rho >= 1.0:
        return 1
    if rho <= 0.0:
        return 0
    u = to_unit(combine(env[1], site_hash(coords, env[6])))
    return 1 if u < rho else 0


@njit(cache=True)
def xi_before(env, coords, tau, times, idx):
    """``xi_{tau-}(coords)``."""
    rho = env[2]
    if rho >= 1.0:
        return 1
    if rho <= 0.0:
        return 0
    return initial_bit(env, dual_endpoint(env, coords, tau, times, idx))


@njit(cache=True)
def arrows_between(env, coords, a, b, out_t, out_j, times, idx):
    """Arrows at ``coords`` with time in ``(a, b)``, ascending; returns count."""
    if b <= a:
        return 0
    sh = site_hash(coords, env[6])
    bw = env[3]
    k0 = int(max(a, 0.0) / bw)
    k1 = int(b / bw)
    n = 0
    for k in range(k0, k1 + 1):
        c = bin_arrows(env, sh, k, times, idx)
        for j in range(c):
            if times[j] > a and times[j] < b:
                if n >= out_t.shape[0]:
                    return -1
                out_t[n] = times[j]
                out_j[n] = idx[j]
                n += 1
    return n


@dataclass(frozen=True)
class LazyEnvironment:
    """Voter environment on Z^d (``side == 0``) or on a torus of side ``side``.

    ``arrow_key`` and ``init_key`` fix the realization; use
    :meth:`from_seed` for seed-derived keys.
    """

    kernel: Kernel
    rho: float
    arrow_key: int
    init_key: int
    side: int = 0

    @classmethod
    def from_seed(cls, kernel, rho, seed, *ids, side=0):
        return cls(kernel, rho, int(root_key(seed, *ids, 0)), int(root_key(seed, *ids, 1)), side)

    def as_tuple(self):
        disp, cum = self.kernel.table()
        return (np.uint64(self.arrow_key), np.uint64(self.init_key), float(self.rho),
                1.0 / self.kernel.jump_rate, disp, cum, np.int64(self.side))

    def _coords(self, x):
        c = np.atleast_1d(np.asarray(x, dtype=np.int64)).copy()
        if c.shape != (self.kernel.dimension,):
            raise ValueError(f"site {x!r} has wrong dimension")
        return c

    def arrows(self, x, a, b):
        """Arrows at ``x`` in ``(a, b)`` as a list of (time, source displacement)."""
        env = self.as_tuple()
        n_max = int(8 * (b - a) * self.kernel.jump_rate + 64)
        out_t = np.empty(n_max)
        out_j = np.empty(n_max, dtype=np.int64)
        n = arrows_between(env, self._coords(x), float(a), float(b), out_t, out_j,
                           np.empty(MAX_PER_BIN), np.empty(MAX_PER_BIN, dtype=np.int64))
        disp = env[4]
        return [(float(out_t[i]), tuple(int(c) for c in disp[out_j[i]])) for i in range(n)]

    def dual(self, x, t):
        env = self.as_tuple()
        end = dual_endpoint(env, self._coords(x), float(t), np.empty(MAX_PER_BIN),
                            np.empty(MAX_PER_BIN, dtype=np.int64))
        return tuple(int(c) for c in end)

    def initial(self, x) -> int:
        return int(initial_bit(self.as_tuple(), self._coords(x)))

    def value_before(self, x, t) -> int:
        """``xi_{t-}(x)``: the value just before any arrow at time ``t``."""
        return int(xi_before(self.as_tuple(), self._coords(x), float(t),
                             np.empty(MAX_PER_BIN), np.empty(MAX_PER_BIN, dtype=np.int64)))

    def value(self, x, t) -> int:
        return self.value_before(x, np.nextafter(float(t), np.inf))
