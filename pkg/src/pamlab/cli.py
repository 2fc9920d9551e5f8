"""Command-line entry point: ``pamlab <subcommand> [options]``.

Settings come from an optional TOML file (``--config``) overridden by flags.
Unknown config keys are errors. Every run writes
``<outdir>/<experiment>/manifest.json`` first and its CSV/JSON results
second. Exit codes: 0 success, 1 failed acceptance, 2 configuration error,
3 numerical failure, 4 I/O error; errors are also reported as JSON on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import _toml
from .errors import ConfigError, NumericalFailure, PamlabError
from .io import build_id, csv_text, json_text, output_dir, write_json

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

# allowed config keys per section; top-level keys live under ""
CONFIG_SCHEMA = {
    "": {"experiment", "outdir", "seed", "workers", "kernel"},
    "grid": {"t", "n_steps", "delta"},
    "rates": {"N", "C", "t"},
    "montecarlo": {"M", "N", "t", "n_steps", "normalized", "m", "splits", "delta", "iterated_n",
                   "eps"},
    "variational": {"n", "L", "d", "restarts", "max_iters", "tol"},
    "field": {"eps", "M_V", "M_B", "M_R", "T", "N", "t", "x", "n_steps"},
    "paths": {"N", "d", "t", "n_steps", "dump"},
    "bochner": {"count", "n_steps"},
}


def load_config(path):
    if path is None:
        return {}
    try:
        cfg = _toml.loads(Path(path).read_text())
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    for key, val in cfg.items():
        if isinstance(val, dict) and key in CONFIG_SCHEMA and key != "":
            extra = set(val) - CONFIG_SCHEMA[key]
            if extra:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(extra)}")
        elif key not in CONFIG_SCHEMA[""]:
            raise ConfigError(f"unknown config key {key!r}")


class Settings:
    """Flag values falling back to config entries."""

    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg

    def get(self, name, section=None, key=None, default=None, required=False):
        val = getattr(self.args, name, None)
        if val is None:
            src = self.cfg.get(section, {}) if section else self.cfg
            val = src.get(key or name)
        if val is None:
            if required:
                raise ConfigError(f"missing required setting {name!r}")
            return default
        return val


# ---------------------------------------------------------------------------
# value parsing


def parse_int_list(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    out = []
    for part in str(v).split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(float(part)))
    return out


def parse_float_list(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).split(",") if x.strip()]


def parse_kv(text):
    """``"n=512,L=20"`` -> ``{"n": 512.0, "L": 20.0}``."""
    out = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        k, _, v = part.partition("=")
        if not _:
            raise ConfigError(f"expected key=value, got {part!r}")
        out[k.strip()] = float(v)
    return out


def resolve_kernel_setting(s):
    from .kernels import kernel_from_dict, parse_kernel

    spec = getattr(s.args, "kernel", None)
    try:
        if spec is not None:
            return parse_kernel(spec)
        if "kernel" in s.cfg:
            return kernel_from_dict(s.cfg["kernel"])
    except (ValueError, KeyError, TypeError, _toml.TOMLDecodeError) as exc:
        raise ConfigError(f"invalid kernel: {exc}") from exc
    raise ConfigError("missing required setting 'kernel'")


# ---------------------------------------------------------------------------
# run bookkeeping


class Run:
    def __init__(self, s, name, config):
        self.settings = s
        self.experiment = s.get("experiment", default=name)
        self.outdir = s.get("outdir")
        self.config = config
        self.start = time.time()
        self.files = []

    @property
    def directory(self):
        # the output directory is the only setting an environment variable may supply
        outdir = self.outdir or os.environ.get("PAMLAB_OUTDIR")
        return output_dir(outdir, self.experiment) if outdir else None

    def manifest(self, extra=None):
        man = {
            "experiment": self.experiment,
            "subcommand": self.settings.args.command,
            "config": self.config,
            "build": build_id(),
            "started": self.start,
        }
        if extra:
            man.update(extra)
        if self.directory is not None:
            write_json(self.directory / "manifest.json", man)
        return man

    def emit_csv(self, table, columns, rows, echo=True):
        text = csv_text(columns, rows)
        if self.directory is not None:
            path = self.directory / f"{table}.csv"
            path.write_text(text)
            self.files.append(str(path))
        if echo:
            sys.stdout.write(text)
        return text

    def emit_json(self, table, obj, echo=True):
        text = json_text(obj)
        if self.directory is not None:
            (self.directory / f"{table}.json").write_text(text)
        if echo:
            sys.stdout.write(text)
        return text


def require_seed(s, section=None):
    seed = s.get("seed")
    if seed is None:
        raise ConfigError("a master seed is required (--seed or seed = ... in the config)")
    return int(seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_rates(s):
    from .rates import RATE_COLUMNS, rate_diagnostics

    Ns = parse_int_list(s.get("N", "rates", required=True))
    C = float(s.get("C", "rates", default=1.0))
    t = float(s.get("t", "rates", default=1.0))
    run = Run(s, "rates", {"N": Ns, "C": C, "t": t})
    run.manifest()
    run.emit_csv("rates", RATE_COLUMNS, rate_diagnostics(Ns, C, t))
    return EXIT_OK


def cmd_kernel_eval(s):
    from .kernels import format_kernel

    k = resolve_kernel_setting(s)
    if s.args.r is not None:
        radii = parse_float_list(s.args.r)
    else:
        radii = list(np.linspace(float(s.args.rmin), float(s.args.rmax), int(s.args.num)))
    pts = np.zeros((len(radii), k.dim))
    pts[:, 0] = radii
    vals = np.asarray(k(pts), dtype=float)
    run = Run(s, "kernel-eval", {"kernel": format_kernel(k), "r": radii})
    run.manifest()
    run.emit_csv("kernel", ("r", "gamma(r)"), [{"r": float(r), "gamma(r)": float(v)} for r, v in zip(radii, vals)])
    return EXIT_OK


def cmd_dalang(s):
    from .kernels import dalang_check, format_kernel

    k = resolve_kernel_setting(s)
    res = dalang_check(k)
    run = Run(s, "dalang", {"kernel": format_kernel(k)})
    run.manifest()
    run.emit_csv("dalang", ("status", "value", "method"),
                 [{"status": res.status, "value": res.value, "method": res.method}])
    return EXIT_OK


def cmd_variational(s):
    from .kernels import format_kernel
    from .variational import GridSpec, SolverOptions, maximize_energy

    k = resolve_kernel_setting(s)
    vcfg = dict(s.cfg.get("variational", {}))
    if s.args.grid:
        vcfg.update(parse_kv(s.args.grid))
    n = int(vcfg.get("n", 512))
    L = float(vcfg.get("L", 20.0))
    d = int(vcfg.get("d", k.dim))
    restarts = int(s.get("restarts", "variational", default=6))
    seed = require_seed(s)
    opts = SolverOptions(
        restarts=restarts, seed=seed, workers=int(s.get("workers", default=1)),
        max_iters=int(vcfg.get("max_iters", 3000)), tol=float(vcfg.get("tol", 1e-10)),
    )
    grid = GridSpec(d, L, n)
    run = Run(s, "variational", {"kernel": format_kernel(k), "n": n, "L": L, "d": d,
                                 "restarts": restarts, "seed": seed})
    run.manifest({"restart_seeds": {"master_seed": seed, "restarts": restarts}})
    res = maximize_energy(k, grid, opts)
    run.emit_csv("energy", ("energy", "potential_term", "kinetic_term", "iterations", "converged",
                            "restarts_used", "restart_index"),
                 [{"energy": res.energy, "potential_term": res.potential_term,
                   "kinetic_term": res.kinetic_term, "iterations": res.iterations,
                   "converged": res.converged, "restarts_used": res.restarts_used,
                   "restart_index": res.restart_index}])
    coords = grid.coords().reshape(-1, d)
    cols = tuple(f"x{i}" for i in range(d)) + ("g",)
    prof = [dict({f"x{i}": float(c[i]) for i in range(d)}, g=float(v))
            for c, v in zip(coords, res.optimizer.values.ravel())]
    run.emit_csv("profile", cols, prof, echo=False)
    return EXIT_OK


def _time_grid(s, section="montecarlo"):
    from .paths import TimeGrid

    t = float(s.get("t", section, required=True))
    n = s.get("n_steps", section) or s.cfg.get("grid", {}).get("n_steps") or 32
    return TimeGrid(t, int(n))


def cmd_moment_mc(s):
    from .kernels import format_kernel
    from .montecarlo import exp_moment, normalized_exp_moment

    k = resolve_kernel_setting(s)
    seed = require_seed(s)
    N = int(s.get("N", "montecarlo", required=True))
    M = int(s.get("M", "montecarlo", required=True))
    grid = _time_grid(s)
    normalized = bool(s.get("normalized", "montecarlo", default=False))
    workers = int(s.get("workers", default=1))
    run = Run(s, "moment-mc", {"kernel": format_kernel(k), "N": N, "M": M, "t": grid.t,
                               "n_steps": grid.n_steps, "normalized": normalized, "seed": seed})
    run.manifest({"seeds": {"master_seed": seed, "stream": 1, "replicas": M, "paths_per_replica": N}})
    fn = normalized_exp_moment if normalized else exp_moment
    est = fn(k, N, grid.t, grid, M, seed, workers=workers)
    run.emit_csv("moment", ("N", "t", "n_steps", "M", "log_value", "stderr", "ess"),
                 [{"N": N, "t": grid.t, "n_steps": grid.n_steps, "M": M, "log_value": est.log_value,
                   "stderr": est.stderr, "ess": est.ess}])
    return EXIT_OK


def cmd_submult(s):
    from .kernels import format_kernel
    from .montecarlo import iterated_submult_check, submult_check
    from .acceptance import VERDICT_COLUMNS

    k = resolve_kernel_setting(s)
    seed = require_seed(s)
    M = int(s.get("M", "montecarlo", required=True))
    ms = parse_int_list(s.get("m", "montecarlo", default="1,2,3"))
    splits_raw = s.get("splits", "montecarlo", default="0.5:0.5,0.25:0.75")
    if isinstance(splits_raw, str):
        splits = [tuple(float(v) for v in p.split(":")) for p in splits_raw.split(",") if p]
    else:
        splits = [tuple(map(float, p)) for p in splits_raw]
    delta = float(s.get("delta", "montecarlo", default=1.0 / 64))
    it_n = s.get("iterated_n", "montecarlo")
    workers = int(s.get("workers", default=1))
    run = Run(s, "submult-test", {"kernel": format_kernel(k), "m": ms, "splits": splits, "M": M,
                                  "delta": delta, "iterated_n": it_n, "seed": seed})
    run.manifest({"seeds": {"master_seed": seed, "stream": 1, "replicas": M}})
    rows = []
    for m in ms:
        for t1, t2 in splits:
            rows.append(submult_check(m, t1, t2, k, delta, M, seed, workers=workers).as_row())
        if it_n:
            t = float(s.get("t", "montecarlo", default=splits[0][0]))
            rows.append(iterated_submult_check(m, int(it_n), t, k, delta, M, seed, workers=workers).as_row())
    run.emit_csv("submult", VERDICT_COLUMNS, rows)
    return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL


def cmd_theorem_table(s):
    from .kernels import format_kernel
    from .montecarlo import THEOREM_COLUMNS, theorem_table

    k = resolve_kernel_setting(s)
    seed = require_seed(s)
    Ns = parse_int_list(s.get("N", "montecarlo", required=True))
    M = int(s.get("M", "montecarlo", required=True))
    grid = _time_grid(s)
    workers = int(s.get("workers", default=1))
    run = Run(s, "theorem-table", {"kernel": format_kernel(k), "N": Ns, "M": M, "t": grid.t,
                                   "n_steps": grid.n_steps, "seed": seed})
    run.manifest({"seeds": {"master_seed": seed, "stream": 1, "replicas": M,
                            "paths_per_replica": {str(N): N for N in Ns}},
                  "mollify_eps": grid.delta})
    import warnings

    from .montecarlo import LowESSWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowESSWarning)
        rows = theorem_table(k, Ns, grid.t, grid, M, seed, workers=workers)
    run.emit_csv("theorem", THEOREM_COLUMNS, rows)
    return EXIT_OK


def cmd_bochner(s):
    from .acceptance import random_atoms
    from .paths import TimeGrid, double_time_functional, sample_ensemble, spectral_functional

    seed = require_seed(s)
    count = int(s.get("count", "bochner", default=10))
    n = int(s.get("n_steps", "bochner", default=64))
    run = Run(s, "bochner-test", {"count": count, "n_steps": n, "seed": seed})
    run.manifest({"seeds": {"master_seed": seed, "stream": 0, "replicas": count}})
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(count):
        d = int(rng.integers(1, 4))
        N = int(rng.integers(1, 5))
        atoms = random_atoms(rng, d)
        ens = sample_ensemble(N, d, TimeGrid(1.0, n), master_seed=seed, replica=i)
        a, b = double_time_functional(ens, atoms), spectral_functional(ens, atoms)
        rows.append({"case": i, "d": d, "N": N, "real": a, "spectral": b,
                     "rel_err": abs(a - b) / max(abs(b), 1e-300)})
    run.emit_csv("bochner", ("case", "d", "N", "real", "spectral", "rel_err"), rows)
    return EXIT_OK if all(r["rel_err"] <= 1e-10 for r in rows) else EXIT_FAIL


def cmd_crosscheck(s):
    from .field import replica_crosscheck
    from .kernels import CovarianceKernel

    seed = require_seed(s)
    g = lambda name, default=None, req=False: s.get(name, "field", required=req, default=default)
    T = float(g("T", 1.0))
    x = parse_float_list(g("x", "0"))
    cov = CovarianceKernel(T, len(x))
    args = dict(eps=float(g("eps", req=True)), N=int(g("N", req=True)), t=float(g("t", req=True)),
                M_V=int(g("M_V", 2000)), M_B=int(g("M_B", 500)), M_R=int(g("M_R", 10000)),
                n_steps=int(g("n_steps", 32)))
    run = Run(s, "pam-crosscheck", dict(args, T=T, x=x, seed=seed))
    run.manifest({"seeds": {"master_seed": seed, "field_stream": 2, "field_path_stream": 3,
                            "replica_stream": 1}})
    rep = replica_crosscheck(cov, args["eps"], args["N"], args["t"], x, args["M_V"], args["M_B"],
                             args["M_R"], seed, n_steps=args["n_steps"],
                             workers=int(s.get("workers", default=1)))
    out = {k: v for k, v in rep.as_dict().items() if k != "seed"}
    run.emit_json("crosscheck", out)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_paths(s):
    from .paths import TimeGrid, dump_ensemble, sample_ensemble

    seed = require_seed(s)
    N = int(s.get("N", "paths", required=True))
    d = int(s.get("d", "paths", default=1))
    t = float(s.get("t", "paths", default=1.0))
    n = int(s.get("n_steps", "paths", default=64))
    dump = s.get("dump", "paths")
    run = Run(s, "paths", {"N": N, "d": d, "t": t, "n_steps": n, "seed": seed, "dump": dump})
    run.manifest({"seeds": {"master_seed": seed, "stream": 0, "paths": N}})
    ens = sample_ensemble(N, d, TimeGrid(t, n), master_seed=seed)
    if dump:
        with open(dump, "wb") as fh:
            dump_ensemble(ens, fh)
    rows = [dict({"path": j}, **{f"end{i}": float(ens.endpoints[j, i]) for i in range(d)}) for j in range(N)]
    run.emit_csv("endpoints", ("path",) + tuple(f"end{i}" for i in range(d)), rows)
    return EXIT_OK


def cmd_accept(s):
    from .acceptance import run_all

    workers = int(s.get("workers", default=1))
    only = parse_int_list(s.args.only) if s.args.only else None
    run = Run(s, "accept", {"workers": workers, "only": only})
    run.manifest()
    results = run_all(workers=workers, numbers=only, report=lambda line: print(line, flush=True))
    for k, res in results.items():
        for name, (cols, rows) in res.tables.items():
            run.emit_csv(f"criterion{k}_{name}", cols, rows, echo=False)
    failed = [k for k, r in results.items() if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_OK if not failed else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="pamlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--outdir", help="output directory (default: no files)")
    common.add_argument("--experiment", help="experiment name (subdirectory of outdir)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker threads (never changes results)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("rates", cmd_rates, "lambda_N and sigma_N diagnostics")
    sp.add_argument("--N")
    sp.add_argument("--C", type=float)
    sp.add_argument("--t", type=float)

    sp = add("kernel-eval", cmd_kernel_eval, "evaluate a kernel along the first axis")
    sp.add_argument("--kernel")
    sp.add_argument("--r", help="comma-separated radii")
    sp.add_argument("--rmin", type=float, default=0.0)
    sp.add_argument("--rmax", type=float, default=2.0)
    sp.add_argument("--num", type=int, default=21)

    sp = add("dalang", cmd_dalang, "integral of (1+|xi|^2)^-1 against the spectral measure")
    sp.add_argument("--kernel")

    sp = add("variational", cmd_variational, "maximise the interaction energy")
    sp.add_argument("--kernel")
    sp.add_argument("--grid", help="e.g. n=512,L=20")
    sp.add_argument("--restarts", type=int)

    for name, fn, help_ in (
        ("moment-mc", cmd_moment_mc, "Monte Carlo exponential moment"),
        ("theorem-table", cmd_theorem_table, "normalised moment diagnostic table"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--kernel")
        sp.add_argument("--N")
        sp.add_argument("--t", type=float)
        sp.add_argument("--n-steps", dest="n_steps", type=int)
        sp.add_argument("--M", type=int)
        if name == "moment-mc":
            sp.add_argument("--normalized", action="store_true", default=None)

    sp = add("submult-test", cmd_submult, "sub-multiplicativity harness")
    sp.add_argument("--kernel")
    sp.add_argument("--m")
    sp.add_argument("--splits", help="e.g. 0.5:0.5,0.25:0.75")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--M", type=int)
    sp.add_argument("--iterated-n", dest="iterated_n", type=int)
    sp.add_argument("--t", type=float, help="block length for the iterated check")

    sp = add("bochner-test", cmd_bochner, "real-space vs spectral functional on random atoms")
    sp.add_argument("--count", type=int)
    sp.add_argument("--n-steps", dest="n_steps", type=int)

    sp = add("pam-crosscheck", cmd_crosscheck, "sampled-field moments vs replica moments")
    for flag in ("N", "t", "eps", "T", "M-V", "M-B", "M-R", "n-steps"):
        sp.add_argument(f"--{flag}", dest=flag.replace("-", "_"))
    sp.add_argument("--x")

    sp = add("paths", cmd_paths, "sample a Brownian ensemble")
    sp.add_argument("--N", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--t", type=float)
    sp.add_argument("--n-steps", dest="n_steps", type=int)
    sp.add_argument("--dump", help="binary dump file")

    sp = add("accept", cmd_accept, "run the acceptance suite")
    sp.add_argument("--only", help="comma-separated criterion numbers")
    return p


def _error(kind, exc, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(Settings(args, cfg))
    except ConfigError as exc:
        return _error("config", exc, EXIT_CONFIG)
    except NumericalFailure as exc:
        return _error(type(exc).__name__, exc, EXIT_NUMERIC)
    except OSError as exc:
        return _error("io", exc, EXIT_IO)
    except PamlabError as exc:
        return _error(type(exc).__name__, exc, EXIT_CONFIG)
    except ValueError as exc:
        return _error("config", exc, EXIT_CONFIG)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
