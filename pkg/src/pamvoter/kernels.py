"""Continuous-time random-walk kernels on Z^d.

A :class:`Kernel` is a finite step law together with a total jump rate.  The
module computes return probabilities ``p_t(0,0)`` from the characteristic
function, symmetrizes kernels and classifies them by (strong) transience from
the decay exponent of ``p_t(0,0)``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, stats

__all__ = [
    "Kernel",
    "KernelSpecError",
    "QuadratureError",
    "TransienceReport",
    "simple",
    "drift4",
    "parse_kernel",
    "load_kernel",
    "format_kernel",
    "symmetrize",
    "return_probability",
    "log_return_probability",
    "transience_report",
    "sample_step",
    "sample_steps",
]

WEIGHT_TOL = 1e-12
QUAD_RTOL = 1e-10
# Finite-horizon slack applied at the two critical tail exponents (1 and 2).
CRITICAL_MARGIN = 0.25


class KernelSpecError(ValueError):
    """Malformed or invalid kernel description."""


class QuadratureError(RuntimeError):
    """Characteristic-function quadrature did not reach its tolerance."""


def _lattice_index_one(vectors: Sequence[Sequence[int]], d: int) -> bool:
    # Integer row reduction; the vectors generate Z^d iff the echelon form has
    # d unit pivots.
    rows = [list(map(int, v)) for v in vectors]
    for col in range(d):
        r0 = col
        while True:
            nz = [i for i in range(r0, len(rows)) if rows[i][col] != 0]
            if not nz:
                return False
            i_min = min(nz, key=lambda i: abs(rows[i][col]))
            rows[r0], rows[i_min] = rows[i_min], rows[r0]
            for i in range(r0 + 1, len(rows)):
                q = rows[i][col] // rows[r0][col]
                rows[i] = [a - q * b for a, b in zip(rows[i], rows[r0])]
            if all(rows[i][col] == 0 for i in range(r0 + 1, len(rows))):
                break
        if abs(rows[r0][col]) != 1:
            return False
    return True


@dataclass(frozen=True)
class Kernel:
    """Step law of a continuous-time random walk.

    Parameters
    ----------
    dimension : int
        Lattice dimension ``d``.
    steps : tuple of (tuple of int, float)
        Displacement vectors with their probabilities.
    jump_rate : float
        Total rate of jumps per unit time.
    name : str
        Label used in reports.
    """

    dimension: int
    steps: tuple
    jump_rate: float = 1.0
    name: str = ""

    def __post_init__(self):
        d = int(self.dimension)
        if d < 1:
            raise KernelSpecError("dimension must be positive")
        if not (self.jump_rate > 0 and math.isfinite(self.jump_rate)):
            raise KernelSpecError("jump_rate must be positive and finite")
        merged: dict[tuple, float] = {}
        for disp, w in self.steps:
            disp = tuple(int(c) for c in disp)
            if len(disp) != d:
                raise KernelSpecError(f"step {disp} has wrong dimension")
            if not any(disp):
                raise KernelSpecError("zero displacement is not a step")
            if not w > 0:
                raise KernelSpecError(f"weight of step {disp} must be positive")
            merged[disp] = merged.get(disp, 0.0) + float(w)
        if not merged:
            raise KernelSpecError("kernel has no steps")
        total = math.fsum(merged.values())
        if abs(total - 1.0) > WEIGHT_TOL:
            raise KernelSpecError(f"weights sum to {total!r}, not 1")
        if not _lattice_index_one(list(merged), d):
            raise KernelSpecError("displacements do not generate Z^d")
        object.__setattr__(self, "dimension", d)
        object.__setattr__(self, "jump_rate", float(self.jump_rate))
        object.__setattr__(self, "steps", tuple(sorted(merged.items())))

    @property
    def displacements(self) -> np.ndarray:
        return np.array([s for s, _ in self.steps], dtype=np.int64)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.steps], dtype=np.float64)

    @property
    def label(self) -> str:
        return self.name or format_kernel(self).replace("\n", ";")

    def table(self) -> tuple[np.ndarray, np.ndarray]:
        """Displacement array and cumulative weights (last entry exactly 1)."""
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        return self.displacements, cum

    def mean(self) -> np.ndarray:
        return self.weights @ self.displacements

    def is_symmetric(self) -> bool:
        w = dict(self.steps)
        return all(math.isclose(w.get(tuple(-c for c in s), 0.0), ws, rel_tol=0, abs_tol=1e-15)
                   for s, ws in self.steps)


def simple(d: int, rate: float = 1.0) -> Kernel:
    """Nearest-neighbour walk on Z^d with total rate ``rate``."""
    steps = []
    for i in range(d):
        for sgn in (1, -1):
            e = [0] * d
            e[i] = sgn
            steps.append((tuple(e), 1.0 / (2 * d)))
    return Kernel(d, tuple(steps), rate, name=f"simple({d})")


def drift4(simple_rate: float = 1.0, drift_rate: float = 1.0) -> Kernel:
    """Simple walk on Z^4 plus an independent Poisson drift along ``e1``.

    The total rate is ``simple_rate + drift_rate``; the raw walk returns to the
    origin with exponentially small probability while its symmetrization is a
    mean-zero walk.
    """
    total = simple_rate + drift_rate
    base = simple(4)
    steps = [(s, w * simple_rate / total) for s, w in base.steps]
    steps.append(((1, 0, 0, 0), drift_rate / total))
    return Kernel(4, tuple(steps), total, name="drift4")


_BUILTIN = re.compile(r"^\s*simple\(\s*(\d+)\s*\)\s*$")


def parse_kernel(text: str) -> Kernel:
    """Parse a builtin name or a key-value kernel document.

    The document holds ``dimension = d``, ``rate = r`` (optional, default 1),
    an optional ``name = ...`` and one step per line written
    ``dx,dy,... : weight``.  Weights may be fractions such as ``1/3``.
    ``#`` starts a comment.
    """
    stripped = text.strip()
    m = _BUILTIN.match(stripped)
    if m:
        return simple(int(m.group(1)))
    if stripped == "drift4":
        return drift4()
    fields: dict[str, str] = {}
    steps = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" in line:
            left, right = line.split(":", 1)
            try:
                disp = tuple(int(c) for c in left.split(","))
                w = float(Fraction(right.strip()))
            except ValueError as exc:
                raise KernelSpecError(f"line {lineno}: bad step {raw!r}") from exc
            steps.append((disp, w))
        elif "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            fields[key.lower()] = value
        else:
            raise KernelSpecError(f"line {lineno}: cannot parse {raw!r}")
    if "dimension" not in fields:
        raise KernelSpecError("kernel document lacks 'dimension'")
    try:
        d = int(fields["dimension"])
        rate = float(Fraction(fields.get("rate", "1")))
    except ValueError as exc:
        raise KernelSpecError("bad dimension or rate") from exc
    return Kernel(d, tuple(steps), rate, name=fields.get("name", ""))


def load_kernel(spec: str) -> Kernel:
    """Builtin name, path to a kernel document, or the document itself."""
    p = Path(spec)
    if "\n" not in spec and p.suffix and p.exists():
        return parse_kernel(p.read_text())
    return parse_kernel(spec)


def format_kernel(k: Kernel) -> str:
    lines = [f"dimension = {k.dimension}", f"rate = {k.jump_rate!r}"]
    if k.name:
        lines.insert(0, f"name = {k.name}")
    lines += [",".join(map(str, s)) + f" : {w!r}" for s, w in k.steps]
    return "\n".join(lines)


def symmetrize(k: Kernel) -> Kernel:
    """Kernel with weights ``(w(v) + w(-v)) / 2`` on ``{v, -v}``."""
    w = dict(k.steps)
    out = {}
    for s in w:
        neg = tuple(-c for c in s)
        out[s] = 0.5 * (w.get(s, 0.0) + w.get(neg, 0.0))
        out[neg] = out[s]
    name = f"sym({k.name})" if k.name and not k.name.startswith("sym(") else k.name
    if k.is_symmetric():
        name = k.name
    return Kernel(k.dimension, tuple(out.items()), k.jump_rate, name=name)


# --- return probabilities -------------------------------------------------


def _axis_rates(k: Kernel):
    """Per-axis jump-rate tables when every step lies on a coordinate axis."""
    axes: list[dict[int, float]] = [dict() for _ in range(k.dimension)]
    for s, w in k.steps:
        nz = [i for i, c in enumerate(s) if c]
        if len(nz) != 1:
            return None
        i = nz[0]
        axes[i][s[i]] = axes[i].get(s[i], 0.0) + w * k.jump_rate
    return tuple(tuple(sorted(a.items())) for a in axes)


def _saddle_1d(m: np.ndarray, r: np.ndarray) -> float:
    # Minimizer of g(eta) = sum r (exp(-eta m) - 1); requires steps of both signs.
    def dg(eta):
        return -np.sum(r * m * np.exp(-eta * m))

    lo, hi = -1.0, 1.0
    while dg(lo) > 0:
        lo *= 2.0
    while dg(hi) < 0:
        hi *= 2.0
    return optimize.brentq(dg, lo, hi, xtol=1e-15, rtol=1e-15)


@lru_cache(maxsize=64)
def _gl(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


@lru_cache(maxsize=100_000)
def _log_axis_return(rates: tuple, t: float, rtol: float) -> float:
    m = np.array([a for a, _ in rates], dtype=float)
    r = np.array([b for _, b in rates], dtype=float)
    if not len(m):
        return 0.0
    if np.all(m > 0) or np.all(m < 0):
        # returns only if no jump happened
        return -t * float(r.sum())
    eta = _saddle_1d(m, r)
    rt = r * np.exp(-eta * m)
    log_pref = t * float(np.sum(rt) - np.sum(r))
    prev = None
    n = 32
    while n <= 2**17:
        x, w = _gl(n)
        th = 0.5 * math.pi * (x + 1.0)
        arg = np.outer(th, m)
        re_part = t * (np.cos(arg) - 1.0) @ rt
        im_part = t * np.sin(arg) @ rt
        val = 0.5 * float(np.sum(w * np.exp(re_part) * np.cos(im_part)))
        if prev is not None and abs(val - prev) <= rtol * abs(val):
            if val <= 0:
                raise QuadratureError(f"non-positive return probability at t={t}")
            return log_pref + math.log(val)
        prev = val
        n *= 2
    raise QuadratureError(f"axis quadrature did not converge at t={t}")


def _log_return_tensor(k: Kernel, t: float, rtol: float, max_nodes: int) -> float:
    v = k.displacements.astype(float)
    r = k.weights * k.jump_rate

    def g(eta):
        e = np.exp(-v @ eta)
        return float(np.sum(r * (e - 1.0))), -(r * e) @ v

    res = optimize.minimize(g, np.zeros(k.dimension), jac=True, method="BFGS")
    eta = res.x if res.success and np.all(np.abs(res.x) < 50) else np.zeros(k.dimension)
    rt = r * np.exp(-v @ eta)
    log_pref = t * float(rt.sum() - r.sum())
    prev = None
    n = 8
    while n ** k.dimension <= max_nodes:
        x, w = _gl(n)
        th1 = math.pi * x
        grids = np.meshgrid(*([th1] * k.dimension), indexing="ij")
        th = np.stack([g_.ravel() for g_ in grids], axis=1)
        wts = np.ones(th.shape[0])
        for g_ in np.meshgrid(*([w] * k.dimension), indexing="ij"):
            wts *= g_.ravel()
        arg = th @ v.T
        re_part = t * (np.cos(arg) - 1.0) @ rt
        im_part = t * np.sin(arg) @ rt
        val = float(np.sum(wts * np.exp(re_part) * np.cos(im_part))) / 2 ** k.dimension
        if prev is not None and abs(val - prev) <= rtol * abs(val):
            if val <= 0:
                raise QuadratureError(f"non-positive return probability at t={t}")
            return log_pref + math.log(val)
        prev = val
        n *= 2
    raise QuadratureError(f"tensor quadrature exceeded {max_nodes} nodes at t={t}")


def log_return_probability(k: Kernel, t: float, rtol: float = QUAD_RTOL,
                           max_nodes: int = 2**22) -> float:
    """``log p_t(0,0)`` via Gauss-Legendre quadrature of the characteristic function.

    The integration contour is shifted to the saddle point of the Laplace
    exponent, so exponentially small return probabilities keep full relative
    accuracy.  Kernels whose steps all lie on coordinate axes factorize into
    one-dimensional integrals; other kernels use a tensor grid capped at
    ``max_nodes`` points.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    axes = _axis_rates(k)
    if axes is not None:
        return sum(_log_axis_return(a, float(t), rtol) for a in axes)
    return _log_return_tensor(k, float(t), rtol, max_nodes)


def return_probability(k: Kernel, t: float, rtol: float = QUAD_RTOL) -> float:
    """``P(X(t) = 0 | X(0) = 0)``."""
    return min(1.0, math.exp(log_return_probability(k, t, rtol)))


# --- transience --------------------------------------------------------------

CLASSES = ("recurrent", "transient_not_strong", "strongly_transient", "inconclusive")


@dataclass(frozen=True)
class TransienceReport:
    kernel: str
    symmetrized: bool
    horizon: float
    green_estimate: float
    strong_estimate: float
    tail_exponent: float
    tail_exponent_se: float
    classification: str
    fit_window: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit_window"] = list(self.fit_window)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def classify_exponent(alpha: float, se: float, margin: float = CRITICAL_MARGIN) -> str:
    """Map a fitted decay exponent with its standard error to a class.

    ``p_t(0,0) ~ t^-alpha`` is recurrent for ``alpha <= 1`` and strongly
    transient for ``alpha > 2``.  Both critical values belong to the lower
    class, and a finite-horizon fit approaches them from above, so each
    threshold is widened by ``margin``.
    """
    lo, hi = alpha - 2 * se, alpha + 2 * se
    if hi < 1.0 + margin:
        return "recurrent"
    if lo > 2.0 + margin:
        return "strongly_transient"
    if lo > 1.0 + margin and hi <= 2.0 + margin:
        return "transient_not_strong"
    return "inconclusive"


def _piecewise_integrals(k: Kernel, horizon: float):
    edges = [0.0]
    e = 1.0 / k.jump_rate
    while e < horizon:
        edges.append(e)
        e *= 10.0
    edges.append(float(horizon))
    g_parts, s_parts = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        g, _ = integrate.quad(lambda s: return_probability(k, s), a, b,
                              epsabs=0.0, epsrel=1e-9, limit=200)
        s, _ = integrate.quad(lambda s: s * return_probability(k, s), a, b,
                              epsabs=0.0, epsrel=1e-9, limit=200)
        g_parts.append(max(g, 0.0))
        s_parts.append(max(s, 0.0))
    return np.array(edges[1:]), np.cumsum(g_parts), np.cumsum(s_parts)


def cumulative_integrals(k: Kernel, horizon: float):
    """Breakpoints with running ``int p_t dt`` and ``int t p_t dt`` (both monotone)."""
    return _piecewise_integrals(k, horizon)


def transience_report(k: Kernel, horizon: float = 1e4, symmetrized: bool = False,
                      n_fit: int = 41) -> TransienceReport:
    """Green and strong-transience integrals plus a tail-exponent classification.

    The exponent is the negative slope of ``log p_t(0,0)`` against ``log t`` on
    ``n_fit`` log-spaced points in ``[horizon/100, horizon]``.
    """
    if horizon < 100.0 / k.jump_rate:
        raise ValueError("horizon must be at least 100 / jump_rate")
    if n_fit < 40:
        raise ValueError("tail fit needs at least 40 points")
    kk = symmetrize(k) if symmetrized else k
    _, green, strong = _piecewise_integrals(kk, horizon)
    ts = np.geomspace(horizon / 100.0, horizon, n_fit)
    logp = np.array([log_return_probability(kk, s) for s in ts])
    fit = stats.linregress(np.log(ts), logp)
    alpha, se = -float(fit.slope), float(fit.stderr)
    return TransienceReport(
        kernel=k.label,
        symmetrized=bool(symmetrized),
        horizon=float(horizon),
        green_estimate=float(green[-1]),
        strong_estimate=float(strong[-1]),
        tail_exponent=alpha,
        tail_exponent_se=se,
        classification=classify_exponent(alpha, se),
        fit_window=(float(ts[0]), float(ts[-1])),
    )


# --- sampling ------------------------------------------------------------------


def sample_steps(k: Kernel, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` displacements drawn from the step law, shape ``(n, d)``."""
    disp, cum = k.table()
    idx = np.searchsorted(cum, rng.random(n), side="right")
    return disp[idx]


def sample_step(k: Kernel, rng: np.random.Generator) -> tuple:
    disp, cum = k.table()
    i = int(np.searchsorted(cum, rng.random(), side="right"))
    return tuple(int(c) for c in disp[i])
