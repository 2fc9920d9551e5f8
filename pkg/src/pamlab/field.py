"""Sampled mollified log-correlated fields and the replica moment identity.

At a fixed smoothing scale ``eps`` the field ``V_eps = V * p_eps`` is a
finite-dimensional Gaussian vector on a grid with covariance

    k_eps(x, y) = int int p_eps(x - u) p_eps(y - v) k(u, v) du dv,

which for the stationary logarithmic part is ``log_+(T/|.|) * p_{2 eps}``.
Averaging ``u(t, x)^N`` over sampled fields must agree with the replica
expectation of ``exp{1/2 sum_{j,k} int int k_eps(B_j, B_k)}``; both sides use
the same midpoint time quadrature, so the identity holds exactly for the
discretised objects.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, Unsupported
from .kernels import CovarianceKernel, LogPlus, mollify
from .montecarlo import exp_moment, log_mean_exp
from .paths import STREAM_FIELD, STREAM_FIELD_PATHS, TimeGrid, path_rng

MAX_GRID_POINTS = 4096
COVERAGE_LIMIT = 0.01
_HERMITE_NODES = 8
_FIELD_BATCH = 64


@dataclass(frozen=True)
class FieldGrid:
    """Tensor grid with equal spacing ``h`` and ``n`` points per axis centred at ``center``."""

    center: tuple
    half_width: float
    n: int

    @classmethod
    def around(cls, x, t, T, eps):
        """Box of half-width ``4 sqrt(t) + 2T`` with spacing at most ``eps/2``."""
        x = tuple(float(v) for v in np.atleast_1d(x))
        hw = 4.0 * math.sqrt(t) + 2.0 * T
        n = int(math.ceil(2 * hw / (eps / 2))) + 1
        return cls(x, hw, n)

    @property
    def d(self):
        return len(self.center)

    @property
    def h(self):
        return 2 * self.half_width / (self.n - 1)

    def axes(self):
        return [c + np.linspace(-self.half_width, self.half_width, self.n) for c in self.center]

    def points(self):
        ax = self.axes()
        return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, self.d)

    @property
    def size(self):
        return self.n**self.d


@dataclass(frozen=True)
class FieldKernel:
    """``k_eps`` as a kernel object: mollified log part plus Gauss-Hermite smoothed ``g``."""

    cov: CovarianceKernel
    eps: float
    nodes: int = _HERMITE_NODES

    @property
    def dim(self):
        return self.cov.dim

    @property
    def singular(self):
        return False

    @property
    def stationary(self):
        return mollify(LogPlus(self.cov.T, self.cov.dim), 2.0 * self.eps)

    def smoothed_g(self, a, b):
        """``E g(a + sqrt(eps) Z1, b + sqrt(eps) Z2)`` by tensor Gauss-Hermite quadrature."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        d = self.dim
        z, w = np.polynomial.hermite_e.hermegauss(self.nodes)
        w = w / w.sum()
        grid = np.stack(np.meshgrid(*([z] * d), indexing="ij"), axis=-1).reshape(-1, d)
        wd = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=-1).reshape(-1, d), axis=1)
        s = math.sqrt(self.eps)
        out = np.zeros(np.broadcast_shapes(a.shape[:-1], b.shape[:-1]))
        for za, wa in zip(grid, wd):
            for zb, wb in zip(grid, wd):
                out += wa * wb * self.cov.bounded_part(a + s * za, b + s * zb)
        return out

    def pairwise(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        K = self.stationary.pairwise(a, b)
        if self.cov.g is not None:
            K = K + self.smoothed_g(a[..., :, None, :], b[..., None, :, :])
        return K


def smoothed_kernel(cov, eps):
    """Kernel of the mollified field: ``mollify(LogPlus, 2 eps)`` when ``g = 0``."""
    if cov.g is None:
        return mollify(LogPlus(cov.T, cov.dim), 2.0 * eps)
    return FieldKernel(cov, eps)


@dataclass(frozen=True, eq=False)
class MollifiedCovariance:
    cov: CovarianceKernel
    eps: float
    grid: FieldGrid
    matrix: np.ndarray
    min_eigenvalue: float
    jitter: float
    cholesky: np.ndarray

    @property
    def points(self):
        return self.grid.points()

    def manifest(self):
        return {
            "T": self.cov.T, "eps": self.eps, "grid_points": self.grid.size, "grid_h": self.grid.h,
            "half_width": self.grid.half_width, "min_eigenvalue": self.min_eigenvalue,
            "jitter": self.jitter,
        }


def build_mollified_covariance(cov, eps, grid):
    """Covariance matrix of ``V_eps`` on the grid, with an eigenvalue-floor jitter.

    The jitter is ``max(0, -min_eig) + 1e-10 trace``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if grid.d != cov.dim:
        raise ValueError("grid and covariance dimensions differ")
    if grid.size > MAX_GRID_POINTS:
        raise Unsupported(f"field grid of {grid.size} points exceeds the dense limit {MAX_GRID_POINTS}")
    pts = grid.points()
    K = smoothed_kernel(cov, eps).pairwise(pts, pts)
    K = 0.5 * (K + K.T)
    lam = float(np.linalg.eigvalsh(K)[0])
    jitter = max(0.0, -lam) + 1e-10 * float(np.trace(K))
    L = np.linalg.cholesky(K + jitter * np.eye(len(K)))
    return MollifiedCovariance(cov, float(eps), grid, K, lam, jitter, L)


@dataclass(frozen=True, eq=False)
class FieldSample:
    values: np.ndarray
    grid: FieldGrid
    seed: int
    index: int = 0

    @classmethod
    def constant(cls, grid, c=0.0, seed=0):
        return cls(np.full(grid.size, float(c)), grid, seed)


def _field_normals(seed, index, size):
    return path_rng(seed, STREAM_FIELD, index).standard_normal(size)


def sample_field(mc, seed, index=0):
    """``V = L z`` with ``z`` drawn from the stream ``(seed, field, index)``."""
    z = _field_normals(seed, index, mc.grid.size)
    return FieldSample(mc.cholesky @ z, mc.grid, int(seed), int(index))


def sample_fields(mc, seed, indices):
    """Fields for several indices at once, shape ``(len(indices), P)``."""
    Z = np.stack([_field_normals(seed, i, mc.grid.size) for i in indices])
    return Z @ mc.cholesky.T


# ---------------------------------------------------------------------------
# Feynman-Kac in a frozen field


@dataclass(frozen=True)
class FKEstimate:
    u_value: float
    stderr: float
    M_B: int
    log_value: float = math.nan
    log_stderr: float = math.nan
    outside_fraction: float = 0.0


def _interp(values, grid, pts):
    """Multilinear interpolation of grid values at points ``(..., d)``; counts points outside."""
    d, n, h = grid.d, grid.n, grid.h
    V = values.reshape((n,) * d)
    lo = np.array(grid.center) - grid.half_width
    u = (pts - lo) / h
    outside = np.any((u < 0) | (u > n - 1), axis=-1)
    u = np.clip(u, 0, n - 1)
    i0 = np.minimum(np.floor(u).astype(int), n - 2)
    fr = u - i0
    out = np.zeros(pts.shape[:-1])
    for corner in range(2**d):
        idx, wt = [], np.ones(pts.shape[:-1])
        for ax in range(d):
            bit = (corner >> ax) & 1
            idx.append(i0[..., ax] + bit)
            wt = wt * (fr[..., ax] if bit else 1 - fr[..., ax])
        out += wt * V[tuple(idx)]
    return out, int(np.count_nonzero(outside))


def _fk_paths(seed, index, M_B, d, n, delta, x0):
    rng = path_rng(seed, STREAM_FIELD_PATHS, index)
    z = rng.standard_normal((2, M_B, n, d))
    s = math.sqrt(delta)
    nodes = np.zeros((M_B, n + 1, d))
    np.cumsum(s * z[0], axis=1, out=nodes[:, 1:])
    mids = 0.5 * (nodes[:, :-1] + nodes[:, 1:]) + 0.5 * s * z[1]
    x0 = np.asarray(x0, dtype=float).reshape(1, 1, d)
    return nodes + x0, mids + x0


def _log_fk(values, grid, seed, index, M_B, tgrid, x, u0):
    """Per-path log integrand ``int V(B) ds + log u0(B(t))`` and the number of outside points."""
    nodes, mids = _fk_paths(seed, index, M_B, grid.d, tgrid.n_steps, tgrid.delta, x)
    Vm, outside = _interp(values, grid, mids)
    A = tgrid.delta * Vm.sum(axis=1)
    if u0 is not None:
        A = A + u0.log_values(nodes[:, -1, :])
    return A, outside


def fk_solution(field_sample, t, x, M_B, n_steps, u0=None, seed=0, index=None):
    """Path average of ``exp{int_0^t V(B^x(s)) ds} u0(B^x(t))`` in a frozen field.

    Paths come from the stream ``(seed, field paths, index)``; ``index``
    defaults to the field's own index. More than 1% of midpoint evaluations
    outside the field grid raises :class:`CoverageError`.
    """
    tgrid = TimeGrid(float(t), int(n_steps))
    idx = field_sample.index if index is None else index
    A, outside = _log_fk(field_sample.values, field_sample.grid, seed, idx, M_B, tgrid, x, u0)
    frac = outside / (M_B * tgrid.n_steps)
    if frac > COVERAGE_LIMIT:
        raise CoverageError(f"{frac:.2%} of path points left the field grid")
    shift = float(A.max())
    w = np.exp(A - shift)
    mean = float(w.mean())
    log_u = shift + math.log(mean)
    log_se = float(w.std(ddof=1)) / (math.sqrt(M_B) * mean) if M_B > 1 else 0.0
    u = math.exp(log_u)
    return FKEstimate(u, u * log_se, int(M_B), log_u, log_se, frac)


# ---------------------------------------------------------------------------
# replica cross-check


@dataclass(frozen=True)
class CrosscheckReport:
    logA: float
    stderrA: float
    logB: float
    stderrB: float
    seed: int
    outside_fraction: float = 0.0
    manifest: dict = field(default_factory=dict)

    @property
    def combined_stderr(self):
        return math.hypot(self.stderrA, self.stderrB)

    @property
    def gap_sigmas(self):
        se = self.combined_stderr
        gap = abs(self.logA - self.logB)
        if se == 0:
            return 0.0 if gap == 0 else math.inf
        return gap / se

    @property
    def passed(self):
        return abs(self.logA - self.logB) <= 3.0 * self.combined_stderr + 1e-12

    def as_dict(self):
        return {
            "logA": self.logA, "stderrA": self.stderrA, "logB": self.logB, "stderrB": self.stderrB,
            "gap_sigmas": self.gap_sigmas, "pass": self.passed, "seed": self.seed,
        }


def side_A(mc, N, t, x, M_V, M_B, n_steps, seed, u0=None, workers=1, field_offset=0):
    """``log mean_f u_f^N`` over ``M_V`` sampled fields, ``u_f`` from ``M_B`` paths each.

    Returns ``(MomentEstimate, outside_fraction)``.
    """
    tgrid = TimeGrid(float(t), int(n_steps))
    starts = list(range(0, M_V, _FIELD_BATCH))

    def job(s):
        idx = list(range(field_offset + s, field_offset + min(s + _FIELD_BATCH, M_V)))
        fields = sample_fields(mc, seed, idx)
        logu = np.empty(len(idx))
        out = 0
        for r, i in enumerate(idx):
            A, o = _log_fk(fields[r], mc.grid, seed, i, M_B, tgrid, x, u0)
            out += o
            shift = A.max()
            logu[r] = shift + math.log(np.mean(np.exp(A - shift)))
        return logu, out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    logu = np.concatenate([p[0] for p in parts])
    outside = sum(p[1] for p in parts) / (M_V * M_B * tgrid.n_steps)
    if outside > COVERAGE_LIMIT:
        raise CoverageError(f"{outside:.2%} of path points left the field grid")
    rec = {"master_seed": int(seed), "stream": STREAM_FIELD, "fields": int(M_V), "paths_per_field": int(M_B)}
    return log_mean_exp(N * logu, rec), outside


def replica_crosscheck(cov, eps, N, t, x, M_V, M_B, M_R, seed, n_steps=32, u0=None,
                       field_grid=None, workers=1):
    """Compare ``E_V[u^N]`` from sampled fields with the replica moment at the same ``eps``.

    Side A samples fields and Brownian paths from streams of ``seed``; side B
    calls :func:`exp_moment` with the smoothed kernel ``k_eps`` and master
    seed ``seed`` on its own stream, so the two sides are independent.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grid = field_grid or FieldGrid.around(x, t, cov.T, eps)
    mc = build_mollified_covariance(cov, eps, grid)
    estA, outside = side_A(mc, N, t, x, M_V, M_B, n_steps, seed, u0, workers)
    estB = exp_moment(smoothed_kernel(cov, eps), N, t, n_steps, M_R, seed, u0=u0, start=x,
                      mollify_eps=None, workers=workers)
    manifest = {
        "covariance": mc.manifest(), "N": N, "t": t, "x": x.tolist(), "M_V": M_V, "M_B": M_B,
        "M_R": M_R, "n_steps": n_steps, "seedA": estA.seed_record, "seedB": estB.seed_record,
        "essA": estA.ess, "essB": estB.ess,
    }
    return CrosscheckReport(estA.log_value, estA.stderr, estB.log_value, estB.stderr, int(seed),
                            outside, manifest)


def nesting_bias_check(cov, eps, N, t, x, M_V, M_B, n_steps, seed, u0=None, workers=1):
    """Side A with ``M_B`` and ``2 M_B`` inner paths on the same fields.

    Returns ``(shift, stderr_small, stderr_large)``; the inner-loop bias is
    below the noise when ``|shift|`` is under the reported stderr.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mc = build_mollified_covariance(cov, eps, FieldGrid.around(x, t, cov.T, eps))
    a, _ = side_A(mc, N, t, x, M_V, M_B, n_steps, seed, u0, workers)
    b, _ = side_A(mc, N, t, x, M_V, 2 * M_B, n_steps, seed, u0, workers)
    return b.log_value - a.log_value, a.stderr, b.stderr
