"""Brownian ensembles and the double-time interaction functional.

Time integrals use the midpoint rule on a uniform grid: with ``delta = t/n``
and midpoints ``tau_i = (i - 1/2) delta``,

    S = delta^2 * sum_{j,k} sum_{i,i'} gamma(B_j(tau_i) - B_k(tau_i')).

Path ``j`` of replica ``m`` draws from a Philox stream keyed by
``(master_seed, stream, m, j)``, so ensembles do not depend on sampling order
or on how work is split across workers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import SingularityError
from .kernels import CosineAtoms, CovarianceKernel, Mollified, mollify

# stream tags keep different uses of one master seed apart
STREAM_ENSEMBLE = 0
STREAM_MOMENT = 1
STREAM_FIELD = 2
STREAM_FIELD_PATHS = 3


def path_rng(master_seed, *key):
    """Counter-based generator for the stream ``(master_seed, *key)``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    t: float
    n_steps: int

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("horizon t must be positive")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def delta(self):
        return self.t / self.n_steps

    @property
    def nodes(self):
        return np.arange(self.n_steps + 1) * self.delta

    @property
    def midpoints(self):
        return (np.arange(1, self.n_steps + 1) - 0.5) * self.delta

    @classmethod
    def with_step(cls, t, delta):
        """Grid on ``[0, t]`` with the given step; ``t/delta`` must be an integer."""
        n = round(t / delta)
        if n < 1 or not math.isclose(n * delta, t, rel_tol=1e-9):
            raise ValueError(f"horizon {t} is not a multiple of the step {delta}")
        return cls(t, n)


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """``N`` paths in R^d: node values ``(N, n+1, d)`` and midpoints ``(N, n, d)``."""

    grid: TimeGrid
    values: np.ndarray
    midvalues: np.ndarray
    seed_record: dict = field(default_factory=dict)

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[2]

    @property
    def start(self):
        return self.values[:, 0, :]

    @property
    def endpoints(self):
        return self.values[:, -1, :]

    def permuted(self, order):
        order = np.asarray(order)
        return BrownianEnsemble(self.grid, self.values[order], self.midvalues[order], dict(self.seed_record))


def _draw_path(rng, n, d, delta):
    z = rng.standard_normal((2, n, d))
    incr = math.sqrt(delta) * z[0]
    nodes = np.zeros((n + 1, d))
    np.cumsum(incr, axis=0, out=nodes[1:])
    # Brownian bridge midpoint: mean of the endpoints, variance delta/4
    mids = 0.5 * (nodes[:-1] + nodes[1:]) + 0.5 * math.sqrt(delta) * z[1]
    return nodes, mids


def sample_paths(master_seed, key_prefix, N, d, grid, start=None):
    """Paths ``j = 0..N-1`` drawn from streams ``(master_seed, *key_prefix, j)``."""
    n, delta = grid.n_steps, grid.delta
    values = np.empty((N, n + 1, d))
    mids = np.empty((N, n, d))
    for j in range(N):
        values[j], mids[j] = _draw_path(path_rng(master_seed, *key_prefix, j), n, d, delta)
    if start is not None:
        x0 = np.asarray(start, dtype=float).reshape(1, 1, d)
        values += x0
        mids += x0
    return values, mids


def sample_ensemble(N, d, grid, start=None, master_seed=0, replica=0, stream=STREAM_ENSEMBLE):
    """Sample ``N`` independent ``d``-dimensional Brownian paths started at ``start``."""
    if N < 1 or d < 1:
        raise ValueError("N and d must be >= 1")
    values, mids = sample_paths(master_seed, (stream, replica), N, d, grid, start)
    rec = {"master_seed": int(master_seed), "stream": int(stream), "replica": int(replica), "paths": int(N)}
    return BrownianEnsemble(grid, values, mids, rec)


def coarsen(ens):
    """The same paths on the grid with half as many steps.

    Even fine nodes become the coarse nodes and odd fine nodes the coarse
    midpoints, which have exactly the bridge law used by the sampler.
    """
    n = ens.grid.n_steps
    if n % 2:
        raise ValueError("coarsening needs an even number of steps")
    g = TimeGrid(ens.grid.t, n // 2)
    rec = dict(ens.seed_record, coarsened_from=n)
    return BrownianEnsemble(g, ens.values[:, ::2].copy(), ens.values[:, 1::2].copy(), rec)


def resolve_kernel(kernel, delta, mollify_eps="auto"):
    """Kernel actually evaluated by the functional.

    Singular kernels are replaced by their mollification at ``mollify_eps``
    (``"auto"`` means ``delta``); ``None`` disables this and makes singular
    kernels an error.
    """
    if isinstance(kernel, CovarianceKernel):
        smooth = resolve_kernel(kernel.stationary_part, delta, mollify_eps)
        return smooth if kernel.is_stationary else SmoothedCovariance(smooth, kernel)
    if not getattr(kernel, "singular", False):
        return kernel
    if mollify_eps is None:
        raise SingularityError(
            "singular kernel would be evaluated at 0 on the diagonal; pass mollify_eps"
        )
    eps = delta if mollify_eps == "auto" else float(mollify_eps)
    if not eps > 0:
        raise SingularityError("mollify_eps must be positive for a singular kernel")
    return mollify(kernel, eps)


@dataclass(frozen=True)
class SmoothedCovariance:
    """Mollified logarithmic part of a :class:`CovarianceKernel` plus its bounded part ``g``."""

    stationary: object
    cov: CovarianceKernel

    @property
    def dim(self):
        return self.cov.dim

    def pairwise(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        bounded = self.cov.bounded_part(a[..., :, None, :], b[..., None, :, :])
        return self.stationary.pairwise(a, b) + bounded


def functional_from_points(points, kernel, delta):
    """``delta^2 * sum_{p,q} k(x_p, x_q)`` for point clouds of shape ``(..., P, d)``."""
    K = kernel.pairwise(points, points)
    return delta * delta * np.sum(K, axis=(-2, -1))


def double_time_functional(ens, kernel, mollify_eps="auto"):
    """``sum_{j,k} int_0^t int_0^t gamma(B_j(s) - B_k(r)) ds dr`` by the midpoint rule."""
    k = resolve_kernel(kernel, ens.grid.delta, mollify_eps)
    pts = ens.midvalues.reshape(-1, ens.d)
    return float(functional_from_points(pts, k, ens.grid.delta))


def spectral_functional(ens, atoms):
    """Bochner form ``sum_i w_i |sum_j int_0^t exp(i xi_i . B_j(s)) ds|^2`` on the same midpoints."""
    if isinstance(atoms, Mollified) and isinstance(atoms.base, CosineAtoms):
        atoms = atoms.base.damped(atoms.eps)
    if not isinstance(atoms, CosineAtoms):
        raise TypeError("spectral_functional needs an atomic kernel")
    pts = ens.midvalues.reshape(-1, ens.d)
    phase = pts @ atoms.frequencies.T  # (P, K)
    amp = ens.grid.delta * np.exp(1j * phase).sum(axis=0)
    return float(np.sum(atoms.weights * (amp.real**2 + amp.imag**2)))


def brownian_rescale(ens, sigma):
    """Paths ``sigma^(-1/2) B(sigma s)`` on the horizon ``t_src / sigma``.

    Uses the source samples directly, so the new ensemble has the same number
    of steps and a step ``delta / sigma``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if sigma == 1:
        return ens
    g = TimeGrid(ens.grid.t / sigma, ens.grid.n_steps)
    f = sigma**-0.5
    rec = dict(ens.seed_record, rescaled_by=float(sigma))
    return BrownianEnsemble(g, ens.values * f, ens.midvalues * f, rec)


# ---------------------------------------------------------------------------
# binary dump: little-endian header (seed, N, d, n_steps as int64; t as float64),
# then node positions and midpoint positions as float64 in path-major order.

_HEADER = struct.Struct("<qqqqd")


def dump_ensemble(ens, fh):
    seed = int(ens.seed_record.get("master_seed", 0))
    fh.write(_HEADER.pack(seed, ens.N, ens.d, ens.grid.n_steps, ens.grid.t))
    fh.write(np.ascontiguousarray(ens.values, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(ens.midvalues, dtype="<f8").tobytes())


def load_ensemble(fh):
    seed, N, d, n, t = _HEADER.unpack(fh.read(_HEADER.size))
    grid = TimeGrid(t, n)
    nv = N * (n + 1) * d
    values = np.frombuffer(fh.read(8 * nv), dtype="<f8").reshape(N, n + 1, d).copy()
    mids = np.frombuffer(fh.read(8 * N * n * d), dtype="<f8").reshape(N, n, d).copy()
    return BrownianEnsemble(grid, values, mids, {"master_seed": seed})
