"""Figures for CLI reports, written next to the delimited output."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no timestamps in the file so reruns stay byte-identical
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_lyapunov(rows: list[dict], path: Path) -> Path:
    """``lambda_hat`` against ``kappa`` per ``(p, t, direction)`` with 2-sigma bars."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["p"], r["t"], r["direction"])].append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for (p, t, dname), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["kappa"])
        ax.errorbar([r["kappa"] for r in rs], [r["lambda_hat"] for r in rs],
                    yerr=[2 * r["se"] for r in rs], marker="o", capsize=3,
                    label=f"p={p}, t={t:g}, {dname}")
    if rows:
        gamma = rows[0]["gamma"]
        ax.axhline(gamma, color="0.5", ls="--", lw=1)
        ax.axhline(rows[0]["rho"] * gamma, color="0.5", ls=":", lw=1)
    ax.set_xlabel(r"$\kappa$")
    ax.set_ylabel(r"$\hat\Lambda_p(t)$")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_coalesce(rows: list[dict], path: Path) -> Path:
    """``chi(t)/t`` and survivor density against time on log axes."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["kernel"], r["quantity"])].append(r)
    for (kernel, q), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["s_or_t"])
        x = [r["s_or_t"] for r in rs]
        if q == "chi":
            y = [r["mean"] / r["s_or_t"] for r in rs]
            e = [2 * r["se"] / r["s_or_t"] for r in rs]
            lab = rf"$\chi(t)/t$, {kernel}"
        else:
            y = [r["mean"] for r in rs]
            e = [2 * r["se"] for r in rs]
            lab = f"density, {kernel}"
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=lab)
    ax.set_xscale("log")
    ax.set_xlabel("t or s")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_return_probability(kernel, horizon: float, path: Path, symmetrized: bool = False) -> Path:
    """``p_t(0,0)`` on log-log axes, the quantity behind the classification."""
    import numpy as np

    from .kernels import log_return_probability, symmetrize

    k = symmetrize(kernel) if symmetrized else kernel
    ts = np.geomspace(0.1 / k.jump_rate, horizon, 60)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ts, [log_return_probability(k, t) / np.log(10) for t in ts])
    ax.set_xscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\log_{10} p_t(0,0)$")
    ax.set_title(k.label)
    return _save(fig, path)
