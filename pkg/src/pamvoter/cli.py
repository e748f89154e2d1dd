"""Command-line front end.

Subcommands ``classify``, ``lyapunov``, ``coalesce``, ``voter-check`` and
``exact``.  Experiment parameters come from an INI file (one section per
command) and/or flags; the resolved configuration is echoed into the JSON
output.  Exit codes: 0 ok, 1 usage, 2 numerical failure, 3 checkpoint
corruption, 4 inconclusive classification under ``--strict``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_CHECKPOINT = 3
EXIT_INCONCLUSIVE = 4
EXIT_INTERRUPTED = 130

LYAPUNOV_COLUMNS = ["p", "kappa", "gamma", "rho", "t", "mean_log_estimate", "lambda_hat", "se",
                    "replicas", "direction", "seed", "substream", "version"]
COALESCE_COLUMNS = ["kernel", "quantity", "s_or_t", "mean", "se", "replicas", "seed",
                    "substream", "version"]

LYAPUNOV_DEFAULTS = {"catalyst": "simple(1)", "side": "0", "kappas": "0.5", "ps": "1",
                     "gamma": "1.0", "rho": "0.5", "ts": "1,2", "replicas": "1000",
                     "directions": "forward", "batch_size": "1000", "engine": "lazy"}
COALESCE_DEFAULTS = {"kernel": "simple(2)", "birth_rate": "1.0", "chi_ts": "10,100",
                     "density_ss": "", "replicas": "100"}
EXACT_DEFAULTS = {"kernel": "", "dimension": "1", "sides": "3", "ps": "1", "kappas": "0.5",
                  "gammas": "1.0", "rhos": "0.5", "ts": "1", "tolerance": "1e-8"}
VOTER_DEFAULTS = {"kernel": "simple(1)", "side": "4", "records": "100", "horizon": "3.0",
                  "rho": "0.5", "marginal_side": "16", "marginal_ts": "1,5,25",
                  "marginal_replicas": "2000", "pair_side": "32", "pair_t": "5.0",
                  "pair_replicas": "10000"}


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


# --- config -------------------------------------------------------------------------


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(";", ",").split(",") if v.strip())


def _words(text: str) -> tuple:
    return tuple(v.strip() for v in text.replace(";", ",").split(",") if v.strip())


def read_section(path: str | None, section: str, defaults: dict, overrides: dict) -> dict:
    """Flat key-value settings: defaults, then the INI section, then flags."""
    cfg = dict(defaults)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
        if parser.has_section(section):
            for key, value in parser.items(section):
                if key not in defaults and key != "seed":
                    raise UsageError(f"unknown key {key!r} in [{section}]")
                cfg[key] = value
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = str(value)
    return cfg


def resolve_seed(args, cfg: dict, required: bool = True) -> int | None:
    if args.seed is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg.pop("seed"))
    if required:
        raise UsageError("a master seed is required (--seed or 'seed =' in the config)")
    return None


# --- output -------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return buf.getvalue()


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


class Output:
    """Serialized writer for one command's files."""

    def __init__(self, out: str | None, name: str):
        self.dir = Path(out) if out else None
        self.name = name
        if self.dir is not None:
            try:
                self.dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise UsageError(f"cannot create output directory {out}: {exc}") from exc

    def path(self, suffix: str) -> Path | None:
        return None if self.dir is None else self.dir / f"{self.name}{suffix}"

    def write(self, suffix: str, text: str, echo: bool = False):
        p = self.path(suffix)
        if p is None or echo:
            sys.stdout.write(text)
        if p is not None:
            p.write_text(text)


# --- commands -------------------------------------------------------------------------


def cmd_classify(args) -> int:
    from .kernels import KernelSpecError, load_kernel, transience_report

    try:
        kernel = load_kernel(args.kernel)
    except (KernelSpecError, OSError, ValueError) as exc:
        raise UsageError(f"invalid kernel spec: {exc}") from exc
    if args.horizon < 100.0 / kernel.jump_rate:
        raise UsageError("horizon must be at least 100 / jump_rate")
    raw = transience_report(kernel, args.horizon, symmetrized=False)
    sym = transience_report(kernel, args.horizon, symmetrized=True)
    primary = sym if args.symmetrized else raw
    out = Output(args.out, "classify")
    doc = {"command": "classify", "version": __version__, "kernel": kernel.label,
           "horizon": args.horizon, "selected": "symmetrized" if args.symmetrized else "raw",
           "classification": primary.classification,
           "reports": {"raw": raw.to_dict(), "symmetrized": sym.to_dict()}}
    out.write(".json", dump_json(doc))
    if out.dir is not None:
        print(primary.classification)
    if args.plot and out.dir is not None:
        from .plotting import plot_return_probability

        plot_return_probability(kernel, args.horizon, out.path(".png"), args.symmetrized)
    if args.strict and primary.classification == "inconclusive":
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def lyapunov_plan(cfg: dict, seed: int):
    from .feynman_kac import ExperimentPlan
    from .kernels import KernelSpecError, load_kernel

    try:
        load_kernel(cfg["catalyst"])
    except (KernelSpecError, OSError, ValueError) as exc:
        raise UsageError(f"invalid catalyst kernel: {exc}") from exc
    side = -1 if cfg["side"].strip() == "auto" else int(cfg["side"])
    try:
        return ExperimentPlan(catalyst=cfg["catalyst"], kappas=_floats(cfg["kappas"]),
                              ps=_ints(cfg["ps"]), gamma=float(cfg["gamma"]),
                              rho=float(cfg["rho"]), ts=_floats(cfg["ts"]),
                              replicas=int(cfg["replicas"]), seed=seed, side=side,
                              directions=_words(cfg["directions"]),
                              batch_size=int(cfg["batch_size"]), engine=cfg["engine"].strip())
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_lyapunov(args) -> int:
    from .feynman_kac import CheckpointError, Interrupted, lyapunov_curve

    cfg = read_section(args.config, "lyapunov", LYAPUNOV_DEFAULTS,
                       {"catalyst": args.catalyst, "replicas": args.replicas})
    seed = resolve_seed(args, cfg)
    plan = lyapunov_plan(cfg, seed)
    try:
        res = lyapunov_curve(plan, checkpoint=args.checkpoint, workers=args.workers,
                             stop_after=args.stop_after)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Interrupted as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return EXIT_INTERRUPTED
    except (FloatingPointError, AssertionError) as exc:
        raise NumericalFailure(str(exc)) from exc
    rows = []
    for r in res.rows:
        d = dict(r.__dict__)
        d["substream"] = f"cell={r.cell}"
        d["version"] = __version__
        rows.append(d)
    out = Output(args.out, "lyapunov")
    out.write(".csv", rows_to_csv(rows, LYAPUNOV_COLUMNS))
    doc = {"command": "lyapunov", "version": __version__, "seed": seed, "config": cfg,
           "metadata": res.metadata, "rows": rows, "fits": res.fits}
    if out.dir is not None:
        out.write(".json", dump_json(doc))
        if args.plot:
            from .plotting import plot_lyapunov

            plot_lyapunov(rows, out.path(".png"))
    return EXIT_OK


def cmd_coalesce(args) -> int:
    from .coalescing import EventBudgetError, chi_curve, survival_density
    from .kernels import KernelSpecError, load_kernel

    cfg = read_section(args.config, "coalesce", COALESCE_DEFAULTS,
                       {"kernel": args.kernel, "replicas": args.replicas})
    seed = resolve_seed(args, cfg)
    try:
        kernel = load_kernel(cfg["kernel"])
    except (KernelSpecError, OSError, ValueError) as exc:
        raise UsageError(f"invalid kernel spec: {exc}") from exc
    replicas = int(cfg["replicas"])
    rate = float(cfg["birth_rate"])
    if replicas < 2:
        raise UsageError("replicas must be >= 2")
    rows = []
    try:
        chi_ts = _floats(cfg["chi_ts"])
        if chi_ts:
            for i, e in enumerate(chi_curve(kernel, chi_ts, replicas, seed, args.workers)):
                rows.append({**e.row(), "substream": f"chi;t_index={i}",
                             "per_time": e.per_time, "per_time_se": e.per_time_se})
        for i, s in enumerate(_floats(cfg["density_ss"])):
            e = survival_density(kernel, rate, s, replicas, seed, args.workers, cell=i)
            rows.append({**e.row(), "substream": f"density;cell={i}"})
    except EventBudgetError as exc:
        raise NumericalFailure(str(exc)) from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for r in rows:
        r["version"] = __version__
    out = Output(args.out, "coalesce")
    out.write(".csv", rows_to_csv(rows, COALESCE_COLUMNS))
    if out.dir is not None:
        doc = {"command": "coalesce", "version": __version__, "seed": seed, "config": cfg,
               "metadata": {"window": "one-sided [-s, 0); earlier births ignored",
                            "chi_frame": "graphical (backward walks from independent births)"},
               "rows": rows}
        out.write(".json", dump_json(doc))
        if args.plot:
            from .plotting import plot_coalesce

            plot_coalesce(rows, out.path(".png"))
    return EXIT_OK


def run_voter_checks(cfg: dict, seed: int, workers: int = 1) -> dict:
    """Duality, marginal-stationarity and two-point batteries."""
    from .kernels import load_kernel
    from .rng import stream
    from .voter import (Torus, build_record, coalescence_probability, evolve, marginal_estimate,
                        query_dual, sample_initial, two_point_estimate)

    kernel = load_kernel(cfg["kernel"])
    d = kernel.dimension
    rho = float(cfg["rho"])
    horizon = float(cfg["horizon"])
    torus = Torus(d, int(cfg["side"]))
    checks = []

    mismatches = 0
    n_records = int(cfg["records"])
    grid = np.linspace(0.0, horizon, 13)
    for r in range(n_records):
        g = stream(seed, 0, r)
        init = sample_initial(torus, rho, g)
        rec = build_record(torus, kernel, horizon, g)
        for t in grid:
            fwd = evolve(init, rec, t).bits
            for x in range(torus.n_sites):
                mismatches += int(query_dual(x, t, rec, init) != fwd[x])
    checks.append({"name": "duality", "records": n_records, "sites": torus.n_sites,
                   "times": len(grid), "mismatches": mismatches, "ok": mismatches == 0})

    mtorus = Torus(d, int(cfg["marginal_side"]))
    for i, t in enumerate(_floats(cfg["marginal_ts"])):
        m, se = marginal_estimate(0, t, rho, kernel, mtorus, int(cfg["marginal_replicas"]),
                                  int(stream(seed, 1, i).integers(2**62)), workers)
        checks.append({"name": "marginal", "t": t, "estimate": m, "se": se, "target": rho,
                       "ok": abs(m - rho) <= 4 * se})

    ptorus = Torus(d, int(cfg["pair_side"]))
    pt = float(cfg["pair_t"])
    n = int(cfg["pair_replicas"])
    y = ptorus.index((1,) + (0,) * (d - 1))
    est, se = two_point_estimate(0, y, pt, rho, kernel, ptorus, n,
                                 int(stream(seed, 2, 0).integers(2**62)), workers)
    pc, pse = coalescence_probability(0, y, pt, kernel, ptorus, n,
                                      int(stream(seed, 2, 1).integers(2**62)))
    target = rho * pc + rho * rho * (1 - pc)
    tse = math.sqrt(se ** 2 + (rho - rho * rho) ** 2 * pse ** 2)
    checks.append({"name": "two_point", "t": pt, "estimate": est, "se": se,
                   "coalescence": pc, "coalescence_se": pse, "target": target,
                   "ok": abs(est - target) <= 3 * tse})
    return {"command": "voter-check", "version": __version__, "seed": seed, "config": cfg,
            "checks": checks, "ok": all(c["ok"] for c in checks)}


def cmd_voter_check(args) -> int:
    cfg = read_section(args.config, "voter-check", VOTER_DEFAULTS, {})
    seed = resolve_seed(args, cfg)
    try:
        doc = run_voter_checks(cfg, seed, args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Output(args.out, "voter_check")
    out.write(".json", dump_json(doc))
    if out.dir is not None:
        for c in doc["checks"]:
            print(f"{c['name']}: {'pass' if c['ok'] else 'FAIL'}")
    return EXIT_OK if doc["ok"] else EXIT_NUMERICAL


def cmd_exact(args) -> int:
    from .exact import (StateSpaceTooLarge, ToleranceNotMet, build_generator,
                        exact_lambda_bounds, oracle_fixture)
    from .kernels import load_kernel, simple
    from .voter import Torus

    cfg = read_section(args.config, "exact", EXACT_DEFAULTS, {})
    cfg.pop("seed", None)
    dim = int(cfg["dimension"])
    kernel = load_kernel(cfg["kernel"]) if cfg["kernel"].strip() else simple(dim)
    tol = float(cfg["tolerance"])
    fixtures, bounds = [], []
    try:
        for side in _ints(cfg["sides"]):
            for p in _ints(cfg["ps"]):
                for kappa in _floats(cfg["kappas"]):
                    for gamma in _floats(cfg["gammas"]):
                        for rho in _floats(cfg["rhos"]):
                            for t in _floats(cfg["ts"]):
                                fixtures.append(oracle_fixture(side, p, kappa, gamma, rho, t,
                                                               kernel, tolerance=tol))
                            gen = build_generator(Torus(kernel.dimension, side), kernel, p,
                                                  kappa, gamma)
                            for row in exact_lambda_bounds(gen, rho, _floats(cfg["ts"])):
                                bounds.append({"side": side, "p": p, "kappa": kappa,
                                               "gamma": gamma, "rho": rho, **row})
    except StateSpaceTooLarge as exc:
        raise UsageError(f"state space too large: {exc}") from exc
    except (ToleranceNotMet, AssertionError) as exc:
        raise NumericalFailure(str(exc)) from exc
    doc = {"command": "exact", "version": __version__, "config": cfg, "fixtures": fixtures,
           "bounds": bounds}
    Output(args.out, "exact").write(".json", dump_json(doc))
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (mandatory for Monte Carlo)")
    common.add_argument("--workers", type=_positive_int, default=1)
    common.add_argument("--out", help="output directory (stdout when omitted)")
    common.add_argument("--checkpoint", help="checkpoint file for resumable runs")
    common.add_argument("--strict", action="store_true",
                        help="nonzero exit on inconclusive classifications")
    common.add_argument("--plot", action="store_true",
                        help="also render a PNG figure next to the output files")
    common.add_argument("--config", help="INI file with a section named after the command")

    parser = argparse.ArgumentParser(prog="pamvoter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("classify", parents=[common], help="transience classification")
    p.add_argument("--kernel", required=True, help="simple(d), drift4, or a kernel file")
    p.add_argument("--horizon", type=float, default=1e4)
    p.add_argument("--symmetrized", action="store_true")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("lyapunov", parents=[common], help="finite-time Lyapunov curves")
    p.add_argument("--catalyst")
    p.add_argument("--replicas", type=int)
    p.add_argument("--stop-after", type=int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_lyapunov)

    p = sub.add_parser("coalesce", parents=[common], help="chi(t) and survivor densities")
    p.add_argument("--kernel")
    p.add_argument("--replicas", type=int)
    p.set_defaults(func=cmd_coalesce)

    p = sub.add_parser("voter-check", parents=[common], help="voter duality batteries")
    p.set_defaults(func=cmd_voter_check)

    p = sub.add_parser("exact", parents=[common], help="exact small-torus oracle fixtures")
    p.set_defaults(func=cmd_exact)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
