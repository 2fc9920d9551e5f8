"""Log-domain Monte Carlo estimates of exponential path moments.

Every estimator here has the form ``log E[exp W]`` where ``W`` is a weighted
double-time functional of ``N`` independent Brownian paths. Replica ``m``
draws its paths from the streams ``(seed, STREAM_MOMENT, m, j)``; replicas are
processed in batches whose size depends only on the problem shape, so the
number of worker threads never changes a result.
"""

from __future__ import annotations

import math
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateWeights
from .kernels import mollify
from .paths import STREAM_MOMENT, TimeGrid, functional_from_points, resolve_kernel, sample_paths
from .rates import solve_lambda

MIN_SAMPLES = 100
DEGENERATE_FRACTION = 0.99
ESS_WARN_FRACTION = 0.01
ROUNDING_ULPS = 64
_BATCH_ELEMENTS = 2**21  # kernel evaluations held in memory per batch


class LowESSWarning(UserWarning):
    """Effective sample size fell below 1% of the sample count."""


@dataclass(frozen=True)
class MomentEstimate:
    log_value: float
    stderr: float
    ess: float
    M: int
    seed_record: dict = field(default_factory=dict)
    mean_weight: float = math.nan
    max_weight_fraction: float = math.nan


@dataclass(frozen=True)
class InequalityVerdict:
    """Outcome of checking ``E_lhs <= E_rhs`` in log scale.

    ``pass`` holds iff ``lhs_log <= rhs_log + 3 (lhs_stderr + rhs_stderr)``,
    up to a rounding allowance of ``ROUNDING_ULPS`` units in the last place so
    that deterministic equality cases are not failed by the last bit.
    For pathwise-exact comparisons (``exact=True``) the statistical slack is
    dropped and every sample must respect the ordering.
    """

    lhs_log: float
    rhs_log: float
    lhs_stderr: float
    rhs_stderr: float
    exact: bool = False
    pathwise_violations: int = 0
    label: str = ""

    @property
    def slack_sigmas(self):
        se = self.lhs_stderr + self.rhs_stderr
        gap = self.rhs_log - self.lhs_log
        if se == 0:
            return math.inf if gap >= 0 else -math.inf
        return gap / se

    @property
    def rounding(self):
        return ROUNDING_ULPS * sys.float_info.epsilon * max(1.0, abs(self.lhs_log), abs(self.rhs_log))

    @property
    def passed(self):
        if self.exact:
            return self.pathwise_violations == 0 and self.lhs_log <= self.rhs_log + self.rounding
        return self.lhs_log <= self.rhs_log + 3.0 * (self.lhs_stderr + self.rhs_stderr) + self.rounding

    def as_row(self):
        return {
            "label": self.label,
            "lhs_log": self.lhs_log,
            "rhs_log": self.rhs_log,
            "lhs_stderr": self.lhs_stderr,
            "rhs_stderr": self.rhs_stderr,
            "slack_sigmas": self.slack_sigmas,
            "pathwise_violations": self.pathwise_violations,
            "pass": self.passed,
        }


@dataclass(frozen=True)
class InitialCondition:
    """Initial value ``u0`` with declared bounds ``0 < lower <= u0 <= upper``."""

    fn: Callable
    lower: float
    upper: float

    def __post_init__(self):
        if not (0 < self.lower <= self.upper < math.inf):
            raise ValueError("initial condition needs 0 < lower <= upper < inf")

    @classmethod
    def constant(cls, c):
        c = float(c)
        return cls(lambda x, c=c: np.full(np.shape(x)[:-1], c), c, c)

    def log_values(self, x):
        v = np.asarray(self.fn(x), dtype=float)
        tol = 1e-12 * self.upper
        if np.any(v < self.lower - tol) or np.any(v > self.upper + tol):
            raise ValueError("initial condition left its declared bounds")
        return np.log(v)


# ---------------------------------------------------------------------------
# estimator


def log_mean_exp(W, seed_record=None):
    """Stabilised ``log mean exp(W)`` with a delta-method standard error.

    Raises :class:`DegenerateWeights` when one sample holds more than 99% of
    the total weight and warns when the Kish effective sample size is below
    1% of the sample count.
    """
    W = np.asarray(W, dtype=float)
    M = W.size
    if M < 1:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(W)):
        raise DegenerateWeights("non-finite log weight")
    shift = float(W.max())
    w = np.exp(W - shift)
    total = float(w.sum())
    mean = total / M
    log_value = shift + math.log(mean)
    stderr = float(w.std(ddof=1)) / (math.sqrt(M) * mean) if M > 1 else 0.0
    ess = total * total / float(np.dot(w, w))
    frac = 1.0 / total  # the largest shifted weight is exactly 1
    est = MomentEstimate(log_value, stderr, ess, M, dict(seed_record or {}), mean, frac)
    if M > 1 and frac > DEGENERATE_FRACTION:
        raise DegenerateWeights(
            f"one sample carries {frac:.4f} of the total weight (M={M})", max_weight_fraction=frac
        )
    if ess < ESS_WARN_FRACTION * M:
        warnings.warn(f"effective sample size {ess:.1f} is below 1% of M={M}", LowESSWarning)
    return est


# ---------------------------------------------------------------------------
# replica sampling


def _as_grid(grid, t=None):
    if isinstance(grid, TimeGrid):
        if t is not None and not math.isclose(grid.t, t, rel_tol=1e-12):
            raise ValueError("grid horizon disagrees with t")
        return grid
    if t is None:
        raise ValueError("an integer grid needs the horizon t")
    return TimeGrid(float(t), int(grid))


def batch_size(points_per_replica):
    return int(min(256, max(1, _BATCH_ELEMENTS // max(1, points_per_replica**2))))


def _run_batches(fn, M, B, workers):
    starts = list(range(0, M, B))
    if workers is None or workers <= 1 or len(starts) == 1:
        parts = [fn(s, min(s + B, M)) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=int(workers)) as pool:
            parts = list(pool.map(lambda s: fn(s, min(s + B, M)), starts))
    return parts


def replica_paths(seed, m0, m1, N, d, grid, start=None, stream=STREAM_MOMENT):
    """Nodes ``(R, N, n+1, d)`` and midpoints ``(R, N, n, d)`` for replicas ``m0..m1-1``."""
    n = grid.n_steps
    vals = np.empty((m1 - m0, N, n + 1, d))
    mids = np.empty((m1 - m0, N, n, d))
    for i, m in enumerate(range(m0, m1)):
        vals[i], mids[i] = sample_paths(seed, (stream, m), N, d, grid, start)
    return vals, mids


def _functional_batch(mids, kernel, delta):
    R = mids.shape[0]
    pts = mids.reshape(R, -1, mids.shape[-1])
    return functional_from_points(pts, kernel, delta)


def sample_functionals(kernel, N, grid, M, seed, start=None, mollify_eps="auto", workers=1,
                       u0=None, stream=STREAM_MOMENT):
    """Per-replica double-time functionals ``S_m`` and ``sum_j log u0(B_j(t))``."""
    k = resolve_kernel(kernel, grid.delta, mollify_eps)
    d = kernel.dim
    B = batch_size(N * grid.n_steps)

    def job(m0, m1):
        vals, mids = replica_paths(seed, m0, m1, N, d, grid, start, stream)
        S = _functional_batch(mids, k, grid.delta)
        lu = np.zeros(m1 - m0) if u0 is None else u0.log_values(vals[:, :, -1, :]).sum(axis=1)
        return S, lu

    parts = _run_batches(job, M, B, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _seed_record(seed, M, N, stream=STREAM_MOMENT):
    return {"master_seed": int(seed), "stream": int(stream), "replicas": int(M), "paths_per_replica": int(N)}


def _check_M(M):
    if int(M) < MIN_SAMPLES:
        raise ValueError(f"M must be at least {MIN_SAMPLES}")


def exp_moment(kernel, N, t, grid, M, seed, u0=None, start=None, mollify_eps="auto", workers=1):
    """Estimate ``log E[exp{1/2 sum_{j,k} int int k(B_j, B_k)} prod_j u0(B_j(t))]``.

    ``grid`` is a :class:`TimeGrid` on ``[0, t]`` or a number of steps.
    """
    _check_M(M)
    grid = _as_grid(grid, t)
    S, lu = sample_functionals(kernel, N, grid, M, seed, start, mollify_eps, workers, u0)
    return log_mean_exp(0.5 * S + lu, _seed_record(seed, M, N))


def normalized_exp_moment(kernel, N, t_N, grid, M, seed, start=None, mollify_eps="auto", workers=1):
    """Estimate ``log E exp{(1/(2 N t_N)) sum_{j,k} int int gamma(B_j - B_k)}`` on ``[0, t_N]``."""
    _check_M(M)
    grid = _as_grid(grid, t_N)
    S, _ = sample_functionals(kernel, N, grid, M, seed, start, mollify_eps, workers)
    return log_mean_exp(S / (2.0 * N * grid.t), _seed_record(seed, M, N))


# ---------------------------------------------------------------------------
# inequality harnesses


def _segment_functionals(kernel, m, delta, blocks, M, seed, mollify_eps, workers):
    """Functionals of consecutive time blocks of shared paths, each block restarted at 0.

    ``blocks`` lists block lengths in steps; returns an array ``(M, 1 + len(blocks))``
    whose first column is the functional over the whole horizon.
    """
    total = int(sum(blocks))
    grid = TimeGrid(total * delta, total)
    k = resolve_kernel(kernel, delta, mollify_eps)
    d = kernel.dim
    B = batch_size(m * total)
    edges = np.concatenate([[0], np.cumsum(blocks)]).astype(int)

    def job(m0, m1):
        vals, mids = replica_paths(seed, m0, m1, m, d, grid)
        out = np.empty((m1 - m0, 1 + len(blocks)))
        out[:, 0] = _functional_batch(mids, k, delta)
        for b in range(len(blocks)):
            a, e = edges[b], edges[b + 1]
            seg = mids[:, :, a:e, :] - vals[:, :, a : a + 1, :]
            out[:, 1 + b] = _functional_batch(seg, k, delta)
        return out

    return np.concatenate(_run_batches(job, M, B, workers))


def _steps(t, delta):
    n = round(t / delta)
    if n < 1 or not math.isclose(n * delta, t, rel_tol=1e-9):
        raise ValueError(f"time {t} is not a multiple of the step {delta}")
    return n


def submult_check(m, t1, t2, kernel, delta, M, seed, mollify_eps="auto", workers=1):
    """Check ``E exp{S_{t1+t2}/(t1+t2)} <= E exp{S_{t1}/t1} * E exp{S_{t2}/t2}``.

    ``S_t`` is the double-time functional of ``m`` paths on ``[0, t]``. Both
    sides use the same paths: the right-hand factors come from the two time
    blocks, the second one restarted at the origin, so they are independent.
    """
    _check_M(M)
    n1, n2 = _steps(t1, delta), _steps(t2, delta)
    S = _segment_functionals(kernel, m, delta, (n1, n2), M, seed, mollify_eps, workers)
    rec = _seed_record(seed, M, m)
    lhs = log_mean_exp(S[:, 0] / (t1 + t2), rec)
    r1 = log_mean_exp(S[:, 1] / t1, rec)
    r2 = log_mean_exp(S[:, 2] / t2, rec)
    return InequalityVerdict(
        lhs.log_value, r1.log_value + r2.log_value, lhs.stderr,
        math.hypot(r1.stderr, r2.stderr), label=f"m={m},t1={t1:g},t2={t2:g}",
    )


def iterated_submult_check(m, n, t, kernel, delta, M, seed, mollify_eps="auto", workers=1):
    """Check ``E exp{S_{nt}/n} <= (E exp{S_t})^n`` on shared paths.

    The right-hand moment pools the ``n`` independent restarted blocks of
    length ``t``, giving ``n M`` samples.
    """
    _check_M(M)
    k = _steps(t, delta)
    S = _segment_functionals(kernel, m, delta, (k,) * n, M, seed, mollify_eps, workers)
    rec = _seed_record(seed, M, m)
    lhs = log_mean_exp(S[:, 0] / n, rec)
    pooled = log_mean_exp(S[:, 1:].ravel(), rec)
    return InequalityVerdict(
        lhs.log_value, n * pooled.log_value, lhs.stderr, n * pooled.stderr,
        label=f"m={m},n={n},t={t:g}",
    )


def mollification_ordering_check(kernel, eps_list, m, t, grid, M, seed, workers=1, exact=None,
                                 rel_tol=1e-12):
    """Check that ``E exp{S_eps / (2 m t)}`` does not decrease as ``eps`` shrinks.

    All ``eps`` share the same paths. Since ``S_eps`` is pathwise nonincreasing
    in ``eps`` for kernels with a nonnegative spectral measure, the number of
    samples breaking the pathwise order is reported too. ``exact`` (default:
    atomic kernels) drops the statistical slack.
    """
    _check_M(M)
    grid = _as_grid(grid, t)
    eps_sorted = sorted((float(e) for e in eps_list), reverse=True)
    if exact is None:
        exact = hasattr(kernel, "damped")
    d = kernel.dim
    kernels = [mollify(kernel, e) for e in eps_sorted]
    B = batch_size(m * grid.n_steps)

    def job(m0, m1):
        _, mids = replica_paths(seed, m0, m1, m, d, grid)
        return np.stack([_functional_batch(mids, k, grid.delta) for k in kernels], axis=1)

    S = np.concatenate(_run_batches(job, M, B, workers))
    rec = _seed_record(seed, M, m)
    W = S / (2.0 * m * grid.t)
    ests = [log_mean_exp(W[:, i], rec) for i in range(len(kernels))]
    out = []
    for i in range(len(kernels) - 1):
        viol = int(np.sum(S[:, i] > S[:, i + 1] * (1 + rel_tol) + rel_tol))
        a, b = ests[i], ests[i + 1]
        out.append(
            InequalityVerdict(
                a.log_value, b.log_value, a.stderr, b.stderr, exact=exact,
                pathwise_violations=viol, label=f"eps={eps_sorted[i]:g}>eps={eps_sorted[i + 1]:g}",
            )
        )
    return out, ests, eps_sorted


# ---------------------------------------------------------------------------
# diagnostic table

THEOREM_COLUMNS = (
    "N", "lambda_N", "log_moment", "stderr", "R_N", "R_N_stderr", "target", "ess", "M", "status",
)


def theorem_table(kernel, N_list, t, grid, M, seed, u0=None, mollify_eps="auto", workers=1):
    """Rows ``R_N = log E[u^N] / (N lambda_N)`` next to the limit ``t^2/2``.

    Diagnostic only: the limit is not reachable at these sizes. Degenerate
    weight sets are recorded in the ``status`` column instead of aborting.
    """
    grid = _as_grid(grid, t)
    rows = []
    for N in N_list:
        lam = solve_lambda(N).value
        row = {"N": int(N), "lambda_N": lam, "target": 0.5 * grid.t**2, "M": int(M)}
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", LowESSWarning)
                est = exp_moment(kernel, N, grid.t, grid, M, seed, u0=u0,
                                 mollify_eps=mollify_eps, workers=workers)
            status = "low_ess" if any(issubclass(w.category, LowESSWarning) for w in caught) else "ok"
            row.update(
                log_moment=est.log_value, stderr=est.stderr, R_N=est.log_value / (N * lam),
                R_N_stderr=est.stderr / (N * lam), ess=est.ess, status=status,
            )
        except DegenerateWeights as exc:
            row.update(
                log_moment=math.nan, stderr=math.nan, R_N=math.nan, R_N_stderr=math.nan,
                ess=1.0, status=f"degenerate({exc.max_weight_fraction:.4f})",
            )
        rows.append({c: row[c] for c in THEOREM_COLUMNS})
    return rows
