"""Acceptance criteria as plain functions.

Each ``criterion_k(workers)`` returns a :class:`CriterionResult` holding the
named sub-checks and the CSV tables it produced. The pytest suite and the
``pamlab accept`` subcommand both call these, so the two report the same
numbers. Seeds are frozen here.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import field as fieldmod
from .errors import SolvabilityError
from .io import csv_text
from .kernels import (
    CosineAtoms,
    CovarianceKernel,
    LogPlus,
    Riesz,
    Scaled,
    TruncPower,
    constant_kernel,
    gram_psd_check,
    mollify,
)
from .montecarlo import (
    THEOREM_COLUMNS,
    LowESSWarning,
    iterated_submult_check,
    mollification_ordering_check,
    submult_check,
    theorem_table,
)
from .paths import TimeGrid, double_time_functional, sample_ensemble, spectral_functional
from .rates import RATE_COLUMNS, rate_diagnostics, solve_lambda
from .variational import EnergyModel, GridSpec, SolverOptions, maximize_energy

SEED = 20240611


@dataclass
class CriterionResult:
    number: int
    title: str
    checks: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    elapsed: float = 0.0
    runtime_limit: float = math.inf

    @property
    def passed(self):
        return all(self.checks.values()) and self.elapsed <= self.runtime_limit

    def failed_checks(self):
        out = [k for k, v in self.checks.items() if not v]
        if self.elapsed > self.runtime_limit:
            out.append(f"runtime {self.elapsed:.1f}s > {self.runtime_limit:g}s")
        return out

    def csv(self):
        return {name: csv_text(cols, rows) for name, (cols, rows) in self.tables.items()}

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = "" if self.passed else " [failed: " + "; ".join(self.failed_checks()) + "]"
        return f"[{status}] criterion {self.number}: {self.title} ({self.elapsed:.1f}s){extra}"


VERDICT_COLUMNS = ("label", "lhs_log", "rhs_log", "lhs_stderr", "rhs_stderr", "slack_sigmas",
                   "pathwise_violations", "pass")


def _timed(fn):
    def wrapper(workers=1):
        t0 = time.perf_counter()
        res = fn(workers)
        res.elapsed = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def bisection_oracle(c, lo=math.e, hi=1e4, iters=200):
    """Plain bisection for the root above e of ``log(v)/v = c``; independent of the solver."""
    f = lambda v: math.log(v) / v - c
    while f(hi) > 0:
        hi *= 10
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@_timed
def criterion_1(workers=1):
    """Rate equation against the bisection oracle."""
    res = CriterionResult(1, "rate equation vs bisection oracle", runtime_limit=1.0)
    rows = []
    for N, approx in ((10, 12.72), (100, 282.3), (1000, 4167.0)):
        sol = solve_lambda(N)
        ref = bisection_oracle(2.0 / N)
        rel = abs(sol.value - ref) / ref
        rows.append({"N": N, "lambda": sol.value, "oracle": ref, "rel_err": rel,
                     "residual": sol.residual, "quoted": approx})
        res.checks[f"N={N} oracle 1e-10"] = rel <= 1e-10
        res.checks[f"N={N} residual 1e-12"] = sol.residual <= 1e-12
        res.checks[f"N={N} above e"] = sol.value > math.e
    try:
        solve_lambda(5)
        res.checks["N=5 raises"] = False
    except SolvabilityError:
        res.checks["N=5 raises"] = True
    res.tables["rate_oracle"] = (("N", "lambda", "oracle", "rel_err", "residual", "quoted"), rows)
    return res


@_timed
def criterion_2(workers=1):
    """Rate asymptotics over N = 1e2..1e8 with C = 1, t = 2."""
    res = CriterionResult(2, "rate asymptotics", runtime_limit=1.0)
    Ns = [10**k for k in range(2, 9)]
    rows = rate_diagnostics(Ns, C=1.0, t=2.0)
    ratios = [r["lambda_over_N"] for r in rows]
    res.checks["lambda_N/N strictly increasing"] = all(b > a for a, b in zip(ratios, ratios[1:]))
    top = rows[-1]
    res.checks["lambda_2N/lambda_N in [1.9, 2.1] at 1e8"] = 1.9 <= top["ratio2N"] <= 2.1
    res.checks["sigma_N/lambda_N within 10% of 2 at 1e8"] = abs(top["sigma_over_lambda"] - 2) <= 0.2
    res.tables["rates"] = (RATE_COLUMNS, rows)
    return res


def random_atoms(rng, d):
    k = int(rng.integers(1, 6))
    xi = tuple(tuple(rng.normal(0, 2.0, d)) for _ in range(k))
    w = tuple(rng.uniform(0.1, 1.0, k))
    return CosineAtoms(xi, w, d)


@_timed
def criterion_3(workers=1):
    """Bochner identity for random atomic kernels."""
    res = CriterionResult(3, "Bochner identity", runtime_limit=10.0)
    rng = np.random.default_rng(SEED)
    rows = []
    for i in range(10):
        d = int(rng.integers(1, 4))
        N = int(rng.integers(1, 5))
        atoms = random_atoms(rng, d)
        ens = sample_ensemble(N, d, TimeGrid(1.0, 64), master_seed=SEED, replica=i)
        a = double_time_functional(ens, atoms)
        b = spectral_functional(ens, atoms)
        rel = abs(a - b) / max(abs(b), 1e-300)
        rows.append({"case": i, "d": d, "N": N, "atoms": len(atoms.w), "real": a, "spectral": b, "rel_err": rel})
        res.checks[f"case {i}"] = rel <= 1e-10
    res.tables["bochner"] = (("case", "d", "N", "atoms", "real", "spectral", "rel_err"), rows)
    return res


@_timed
def criterion_4(workers=1):
    """Gram PSD checks for truncated powers at the threshold and mollified singular kernels."""
    res = CriterionResult(4, "positive definiteness", runtime_limit=30.0)
    rows = []
    for d in (1, 2, 3):
        kernels = {
            f"truncpower(l={d // 2 + 1})": TruncPower(d // 2 + 1, 1.0, d),
            "mollified logplus": mollify(LogPlus(1.0, d), 0.1),
            "mollified riesz": mollify(Riesz(0.5, d), 0.1),
        }
        for name, k in kernels.items():
            rng = np.random.default_rng([SEED, d])
            worst = math.inf
            ok = True
            for _ in range(20):
                pts = rng.uniform(-3, 3, (50, d))
                g = gram_psd_check(k, pts)
                worst = min(worst, g.min_eigenvalue / g.trace)
                ok &= g.passed
            rows.append({"kernel": name, "d": d, "sets": 20, "worst_min_eig_over_trace": worst, "pass": ok})
            res.checks[f"{name} d={d}"] = ok
    res.tables["gram"] = (("kernel", "d", "sets", "worst_min_eig_over_trace", "pass"), rows)
    return res


def _verdict_rows(verdicts):
    return [v.as_row() for v in verdicts]


@_timed
def criterion_5(workers=1):
    """Mollification ordering: exact for atoms, 3 sigma for Riesz."""
    res = CriterionResult(5, "mollification ordering", runtime_limit=120.0)
    eps = (0.4, 0.2, 0.1)
    atoms = CosineAtoms(((0.0,), (1.0,), (2.5,), (4.0,)), (0.5, 0.4, 0.3, 0.2), 1)
    va, _, _ = mollification_ordering_check(atoms, eps, 2, 1.0, 32, 5000, SEED, workers=workers)
    vr, ests, _ = mollification_ordering_check(Riesz(0.5), eps, 2, 1.0, 32, 5000, SEED, workers=workers)
    for v in va:
        res.checks[f"atoms {v.label} pathwise"] = v.passed
    for v in vr:
        res.checks[f"riesz {v.label} 3 sigma"] = v.passed
    rows = _verdict_rows(va) + _verdict_rows(vr)
    for r, kind in zip(rows, ["atoms"] * len(va) + ["riesz"] * len(vr)):
        r["label"] = f"{kind}:{r['label']}"
    res.tables["ordering"] = (VERDICT_COLUMNS, rows)
    return res


@_timed
def criterion_6(workers=1):
    """Sub-multiplicativity of the normalised moments."""
    res = CriterionResult(6, "sub-multiplicativity", runtime_limit=300.0)
    tp = TruncPower(2, 1.0, 1)
    delta = 1.0 / 64
    rows = []
    for m in (1, 2, 3):
        for t1, t2 in ((0.5, 0.5), (0.25, 0.75)):
            v = submult_check(m, t1, t2, tp, delta, 5000, SEED + m, workers=workers)
            res.checks[f"truncpower {v.label}"] = v.passed
            rows.append(v.as_row())
    v = iterated_submult_check(2, 3, 0.3, tp, 0.3 / 16, 5000, SEED, workers=workers)
    res.checks[f"iterated truncpower {v.label}"] = v.passed
    rows.append(v.as_row())
    c = constant_kernel(0.8)
    for m in (1, 2, 3):
        for t1, t2 in ((0.5, 0.5), (0.25, 0.75)):
            v = submult_check(m, t1, t2, c, delta, 200, SEED, workers=workers)
            rel = abs(v.lhs_log - v.rhs_log) / max(1.0, abs(v.rhs_log))
            res.checks[f"constant {v.label} equality"] = rel <= 1e-12
            row = v.as_row()
            row["label"] = "constant:" + row["label"]
            rows.append(row)
    v = iterated_submult_check(2, 3, 0.3, c, 0.3 / 16, 200, SEED, workers=workers)
    res.checks[f"constant iterated {v.label} equality"] = (
        abs(v.lhs_log - v.rhs_log) <= 1e-12 * max(1.0, abs(v.rhs_log))
    )
    row = v.as_row()
    row["label"] = "constant:" + row["label"]
    rows.append(row)
    res.tables["submult"] = (VERDICT_COLUMNS, rows)
    return res


TRUNC_M = (1, 2, 4, 8, 16, 32)


def truncpower_grid(M):
    """Box of half-width ``max(16, M)`` so the kernel support always fits."""
    return GridSpec(1, float(max(16, M)), 2048)


def gradient_check(seed=SEED):
    """Worst relative gap between analytic and central-difference directional derivatives."""
    rng = np.random.default_rng(seed)
    cases = [
        (GridSpec(1, 4.0, 64), Riesz(0.5)),
        (GridSpec(1, 6.0, 128), TruncPower(2, 2.0)),
        (GridSpec(2, 3.0, 16), mollify(LogPlus(1.0, 2), 0.05)),
    ]
    worst = 0.0
    for grid, k in cases:
        model = EnergyModel(k, grid)
        g = rng.random(grid.shape) + 0.1
        G = model.raw_gradient(g)
        for _ in range(5):
            v = rng.standard_normal(grid.shape)
            e = 1e-5
            fd = (model.energy(g + e * v) - model.energy(g - e * v)) / (2 * e)
            an = float(np.sum(G * v))
            worst = max(worst, abs(fd - an) / abs(an))
    return worst


@_timed
def criterion_7(workers=1):
    """Variational identities, scaling law, truncated-power family and gradient check."""
    res = CriterionResult(7, "variational identities", runtime_limit=600.0)
    opts = SolverOptions(restarts=6, seed=SEED, workers=workers)
    rows = []
    grid = GridSpec(1, 8.0, 512)
    c = 0.7
    e_const = maximize_energy(constant_kernel(c), grid, opts)
    res.checks["constant kernel E = c/2"] = abs(e_const.energy - c / 2) <= 1e-10
    rows.append({"case": "constant c=0.7", "param": c, "energy": e_const.energy, "target": c / 2})
    alpha = 0.5
    base = maximize_energy(Riesz(alpha), grid, opts)
    rows.append({"case": "riesz beta", "param": 1.0, "energy": base.energy, "target": base.energy})
    for beta in (2.0, 4.0):
        e = maximize_energy(Scaled(beta, Riesz(alpha)), grid, opts)
        target = beta ** (2 / (2 - alpha))
        ratio = e.energy / base.energy
        res.checks[f"riesz scaling beta={beta:g}"] = abs(ratio / target - 1) <= 0.02
        rows.append({"case": "riesz beta", "param": beta, "energy": e.energy, "target": target * base.energy})
    energies = []
    for M in TRUNC_M:
        e = maximize_energy(TruncPower(2, float(M)), truncpower_grid(M), opts)
        energies.append(e.energy)
        rows.append({"case": "truncpower M", "param": float(M), "energy": e.energy, "target": 0.5})
    res.checks["truncpower monotone in M"] = all(b >= a for a, b in zip(energies, energies[1:]))
    res.checks["truncpower E <= 0.5"] = all(e <= 0.5 for e in energies)
    res.checks["truncpower E(M=32) >= 0.45"] = energies[-1] >= 0.45
    worst = gradient_check()
    res.checks["gradient check 1e-6"] = worst <= 1e-6
    rows.append({"case": "gradient rel err", "param": 0.0, "energy": worst, "target": 1e-6})
    res.details["truncpower_energies"] = dict(zip(TRUNC_M, energies))
    res.tables["variational"] = (("case", "param", "energy", "target"), rows)
    return res


CROSS_SEEDS = tuple(SEED + 100 * i for i in range(5))


@_timed
def criterion_8(workers=1):
    """Replica identity at fixed eps across five seed pairs."""
    res = CriterionResult(8, "replica identity", runtime_limit=900.0)
    cov = CovarianceKernel(1.0, 1)
    rows = []
    for s in CROSS_SEEDS:
        r = fieldmod.replica_crosscheck(cov, 0.1, 2, 0.25, [0.0], 2000, 500, 10000, s, workers=workers)
        res.checks[f"seed {s}"] = r.passed
        rows.append(r.as_dict())
    res.tables["crosscheck"] = (("seed", "logA", "stderrA", "logB", "stderrB", "gap_sigmas", "pass"), rows)
    return res


THEOREM_MANIFEST_KEYS = ("kernel", "N_list", "t", "n_steps", "M", "master_seed", "replica_streams")


def theorem_manifest(N_list, t, n_steps, M, seed):
    return {
        "kernel": {"family": "logplus", "T": 1.0, "dim": 2},
        "N_list": list(N_list), "t": t, "n_steps": n_steps, "M": M, "master_seed": seed,
        "replica_streams": {str(N): {"stream": 1, "replicas": M, "paths_per_replica": N} for N in N_list},
        "mollify_eps": t / n_steps,
    }


@_timed
def criterion_9(workers=1):
    """Non-gating diagnostic table for the normalised moments."""
    res = CriterionResult(9, "theorem diagnostic table (non-gating)", runtime_limit=math.inf)
    N_list, t, n, M = list(range(6, 11)), 1.0, 16, 1000
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LowESSWarning)
        rows = theorem_table(LogPlus(1.0, 2), N_list, t, n, M, SEED, workers=workers)
    man = theorem_manifest(N_list, t, n, M, SEED)
    res.checks["table emitted for all N"] = [r["N"] for r in rows] == N_list
    res.checks["target column is t^2/2"] = all(r["target"] == 0.5 for r in rows)
    res.checks["ess column present"] = all("ess" in r for r in rows)
    res.checks["manifest complete"] = all(k in man for k in THEOREM_MANIFEST_KEYS)
    res.details["manifest"] = man
    res.tables["theorem"] = (THEOREM_COLUMNS, rows)
    return res


CRITERIA = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9,
}


def criterion_10(reference=None, workers_a=1, workers_b=8, numbers=None):
    """Byte-identical CSV output of criteria 1-9 under two worker counts.

    ``reference`` may hold already computed results for ``workers_a``.
    """
    t0 = time.perf_counter()
    res = CriterionResult(10, f"determinism across --workers {workers_a} vs {workers_b}")
    reference = dict(reference or {})
    rows = []
    for k in numbers or sorted(CRITERIA):
        a = reference.get(k) or CRITERIA[k](workers_a)
        b = CRITERIA[k](workers_b)
        ca, cb = a.csv(), b.csv()
        for name in sorted(set(ca) | set(cb)):
            same = ca.get(name) == cb.get(name)
            res.checks[f"criterion {k} table {name}"] = same
            rows.append({"criterion": k, "table": name, "identical": same})
    res.tables["determinism"] = (("criterion", "table", "identical"), rows)
    res.elapsed = time.perf_counter() - t0
    return res


def run_all(workers=1, numbers=None, determinism=True, report=print):
    """Run the selected criteria, report one line each, return the results by number."""
    numbers = sorted(numbers or list(CRITERIA) + [10])
    results = {}
    for k in numbers:
        if k == 10:
            continue
        results[k] = CRITERIA[k](workers)
        report(results[k].line())
    if 10 in numbers and determinism:
        other = 8 if workers == 1 else 1
        results[10] = criterion_10(results, workers, other, [k for k in numbers if k != 10])
        report(results[10].line())
    return results
